"""Attention-derived explanations: per-residue importance, smoothing, and
the binding-region hit rate (BRHR) metric with dataset-level aggregation."""

import csv
import math
import warnings
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ConfigError, ExplanationError

# Three-tap moving average applied to importance before ranking.
SMOOTH_KERNEL = np.array([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0])

# The four directional cells averaged into the scalar explanation quality:
# (scored modality, query partner).
QUALITY_CELLS = (
    ("TCR_A", "EPITOPE"),
    ("TCR_B", "EPITOPE"),
    ("EPITOPE", "TCR_A"),
    ("EPITOPE", "TCR_B"),
)


@dataclass
class ImportanceVector:
    """Per-residue attention received by ``modality`` from ``partner``."""

    modality: str        # residues being scored (the attention keys)
    partner: str         # modality issuing the queries
    values: np.ndarray   # [n_residues] float64; CLS and padding excluded
    n_maps: int          # attention maps averaged (layers x heads x wirings)


def attention_importance(trace, modality, partner, record_index):
    """Mean attention placed on each residue of ``modality`` by the query
    positions of ``partner``, across every captured map for that direction.

    Query CLS rows, key CLS columns, and padded positions are excluded, so
    the result aligns index-for-index with the raw residue sequence.  A
    partner with no residues contributes zeros.  Raises ExplanationError if
    the trace holds no map for the direction."""
    vecs = []
    for entry, lo, hi in trace.blocks(partner, modality):
        w = entry.weights[record_index].astype(np.float64)
        qmask = entry.query_mask[record_index].astype(bool).copy()
        qmask[0] = False                        # query CLS row
        kmask = entry.key_mask[record_index, lo:hi].astype(bool)
        n_res = int(kmask[1:].sum())            # span-local 0 is the key CLS
        cols = w[:, lo + 1: lo + 1 + n_res]
        if qmask.any():
            vecs.append(cols[qmask].mean(axis=0))
        else:
            vecs.append(np.zeros(n_res))
    lengths = {v.size for v in vecs}
    if len(lengths) > 1:
        raise ExplanationError(
            f"maps for {partner}->{modality} disagree on residue count: "
            f"{sorted(lengths)}")
    values = np.nan_to_num(np.mean(np.stack(vecs), axis=0))
    return ImportanceVector(modality=modality, partner=partner,
                            values=values, n_maps=len(vecs))


def smooth(values):
    """Three-tap moving average with zero padding at the ends."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ExplanationError("smooth expects a 1-D vector")
    if v.size == 0:
        return v.copy()
    # mode="same" would return a 3-vector for inputs shorter than the
    # kernel; explicit padding keeps the output length equal to the input.
    return np.convolve(np.pad(v, 1), SMOOTH_KERNEL, mode="valid")


def top_count(t, length):
    """m = max(1, ceil(t * length)), with t read as the decimal the caller
    wrote (so e.g. t=0.1, length a multiple of 10 never rounds up)."""
    if not 0.0 < t <= 1.0:
        raise ConfigError(f"top fraction t must be in (0, 1], got {t}")
    frac = Fraction(str(float(t)))
    num = length * frac.numerator
    return max(1, -((-num) // frac.denominator))


def brhr(importance, distances, t):
    """Fraction of the top-m most-attended residues that are also among the
    m residues closest to the partner, with m = max(1, ceil(t * L)).

    Importance ties resolve to the lower index; missing distances (None or
    NaN) rank last."""
    imp = np.asarray(importance, dtype=np.float64)
    dist = np.array([np.nan if d is None else float(d) for d in distances],
                    dtype=np.float64)
    if imp.ndim != 1:
        raise ExplanationError("importance must be a 1-D vector")
    if imp.size != dist.size:
        raise ExplanationError(
            f"importance scores {imp.size} residues but the ground truth "
            f"has {dist.size}")
    if imp.size == 0:
        raise ExplanationError("cannot rank an empty importance vector")
    m = top_count(t, imp.size)
    top_imp = np.argsort(-imp, kind="stable")[:m]
    closeness = np.where(np.isnan(dist), np.inf, dist)
    top_close = np.argsort(closeness, kind="stable")[:m]
    return float(len(set(top_imp.tolist()) & set(top_close.tolist())) / m)


@dataclass
class CellStat:
    mean_brhr: float
    n_records: int


def _resolve_cells(model, cells):
    """Normalize (modality, partner) cells against the architecture's
    attention directions; None means every cross direction."""
    available = model.available_directions()
    if cells is None:
        return sorted({(k, q) for (q, k) in available if q != k})
    use = [tuple(c) for c in cells]
    missing = [(mod, p) for mod, p in use if (p, mod) not in available]
    if missing:
        raise ExplanationError(
            "architecture does not attend in direction(s) "
            f"{['%s->%s' % (p, mod) for mod, p in missing]}; "
            f"available: {available}")
    return use


def dataset_brhr(model, records, truth, t=0.25, t_dec=0.5, cells=None,
                 batch_size=256):
    """Mean smoothed-importance BRHR per (modality, partner) cell over the
    records the model calls binders (p_bind > t_dec).

    ``truth`` maps record_id -> modality -> partner -> per-residue distance
    list.  ``cells`` defaults to every cross direction the architecture
    attends in; explicitly requested cells must exist or ExplanationError is
    raised.  Cells with no qualifying records report 0.0 with a warning."""
    from .zoo import tokenize_records

    use = _resolve_cells(model, cells)
    sums = {c: 0.0 for c in use}
    counts = {c: 0 for c in use}
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        batch = tokenize_records(chunk, model.spec.modalities, model.max_lens)
        out = model.forward(batch, capture=True)
        for i, rec in enumerate(chunk):
            if out.p_bind[i] <= t_dec:
                continue
            gt = truth.get(rec.record_id)
            if gt is None:
                continue
            for cell in use:
                modality, partner = cell
                dvec = gt.get(modality, {}).get(partner)
                if dvec is None:
                    continue
                iv = attention_importance(out.trace, modality, partner, i)
                if iv.values.size == 0:
                    continue
                try:
                    score = brhr(smooth(iv.values), dvec, t)
                except ExplanationError as err:
                    raise ExplanationError(
                        f"record {rec.record_id!r}, cell ({modality}, "
                        f"{partner}): {err}") from err
                sums[cell] += score
                counts[cell] += 1
    table = {}
    for cell in use:
        if counts[cell] == 0:
            warnings.warn(
                f"BRHR cell ({cell[0]}, {cell[1]}): no records passed the "
                "decision threshold; reporting 0.0", RuntimeWarning)
            table[cell] = CellStat(mean_brhr=0.0, n_records=0)
        else:
            table[cell] = CellStat(mean_brhr=sums[cell] / counts[cell],
                                   n_records=counts[cell])
    return table


def explanation_quality(model, records, truth, t=0.25, t_dec=0.5,
                        batch_size=256):
    """Scalar explanation score: unweighted mean over the four epitope/TCR
    directional cells of dataset-level BRHR."""
    table = dataset_brhr(model, records, truth, t=t, t_dec=t_dec,
                         cells=QUALITY_CELLS, batch_size=batch_size)
    return float(np.mean([table[c].mean_brhr for c in QUALITY_CELLS]))


def region_intensity(values, spans):
    """Mean raw and smoothed importance per annotated region.

    ``spans`` holds (label, start, end) in residue coordinates; spans are
    clamped to the scored length (truncation can shorten the tail)."""
    v = np.asarray(values, dtype=np.float64)
    sm = smooth(v)
    rows = []
    for label, start, end in spans:
        lo, hi = max(0, int(start)), min(int(end), v.size)
        if hi <= lo:
            continue
        rows.append({"region": label,
                     "mean_raw": float(v[lo:hi].mean()),
                     "mean_smoothed": float(sm[lo:hi].mean())})
    return rows


def write_brhr_csv(table, t, path):
    """Write a cell table as CSV: modality, partner, t, mean_brhr,
    n_records.  Rows are sorted for stable output."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["modality", "partner", "t", "mean_brhr",
                         "n_records"])
        for modality, partner in sorted(table):
            stat = table[(modality, partner)]
            writer.writerow([modality, partner, repr(float(t)),
                             repr(float(stat.mean_brhr)), stat.n_records])


def read_brhr_csv(path):
    """Inverse of write_brhr_csv."""
    table = {}
    t = None
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            t = float(row["t"])
            table[(row["modality"], row["partner"])] = CellStat(
                mean_brhr=float(row["mean_brhr"]),
                n_records=int(row["n_records"]))
    return table, t


def write_importance_jsonl(model, records, path, cells=None, batch_size=256):
    """Dump raw per-residue importance, one JSON line per
    (record, direction).  Values are unsmoothed column means."""
    import json

    from .zoo import tokenize_records

    use = _resolve_cells(model, cells)
    with open(path, "w", encoding="utf-8") as fh:
        for start in range(0, len(records), batch_size):
            chunk = records[start:start + batch_size]
            batch = tokenize_records(chunk, model.spec.modalities,
                                     model.max_lens)
            out = model.forward(batch, capture=True)
            for i, rec in enumerate(chunk):
                for modality, partner in use:
                    iv = attention_importance(out.trace, modality, partner, i)
                    fh.write(json.dumps({
                        "record_id": rec.record_id,
                        "modality": modality,
                        "partner": partner,
                        "n_maps": iv.n_maps,
                        "values": [float(x) for x in iv.values],
                    }, sort_keys=True) + "\n")
