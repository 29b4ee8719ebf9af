"""Checkpoint archive: named float32 parameter payloads plus a JSON manifest.

Layout is a flat zip archive:

* ``manifest.json``   run metadata (architecture spec, seed, epoch, metrics)
* ``shapes.json``     ordered list of ``[name, shape]`` pairs
* ``params/<name>``   raw little-endian float32 payload for each parameter

Entry names are UTF-8; payload byte counts are validated against the shape
list on load.
"""

from __future__ import annotations

import json
import zipfile

import numpy as np

from .errors import DataError

FORMAT_VERSION = 1


def save_checkpoint(path, named_arrays, manifest):
    """Write parameters and manifest to ``path``.

    ``named_arrays`` is an ordered mapping or sequence of (name, array);
    arrays are stored as little-endian float32 regardless of input dtype.
    """
    if hasattr(named_arrays, "items"):
        items = list(named_arrays.items())
    else:
        items = list(named_arrays)
    names = [n for n, _ in items]
    if len(set(names)) != len(names):
        raise DataError("duplicate parameter names in checkpoint")
    doc = dict(manifest)
    doc.setdefault("format_version", FORMAT_VERSION)
    shapes = [[n, list(np.asarray(a).shape)] for n, a in items]
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(doc, indent=2, sort_keys=True))
        zf.writestr("shapes.json", json.dumps(shapes))
        for name, arr in items:
            payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            zf.writestr(f"params/{name}", payload)


def load_checkpoint(path):
    """Return ``(manifest, params)`` where params maps name -> float32 array."""
    try:
        with zipfile.ZipFile(path, "r") as zf:
            try:
                manifest = json.loads(zf.read("manifest.json").decode("utf-8"))
                shapes = json.loads(zf.read("shapes.json").decode("utf-8"))
            except KeyError as exc:
                raise DataError(f"checkpoint {path} is missing {exc}") from exc
            params = {}
            for name, shape in shapes:
                try:
                    raw = zf.read(f"params/{name}")
                except KeyError:
                    raise DataError(
                        f"checkpoint {path} lacks payload for '{name}'") from None
                arr = np.frombuffer(raw, dtype="<f4")
                expected = int(np.prod(shape)) if shape else 1
                if arr.size != expected:
                    raise DataError(
                        f"payload for '{name}' has {arr.size} values, "
                        f"shape {shape} needs {expected}")
                params[name] = arr.reshape(shape).astype(np.float32)
    except zipfile.BadZipFile as exc:
        raise DataError(f"{path} is not a checkpoint archive") from exc
    return manifest, params
