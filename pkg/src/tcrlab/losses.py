"""Loss matrix (binder, MLM, MHC, TRVJ) with configurable weights,
categorical label spaces, and rank-based ROC-AUC.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import tensor as T
from .errors import ConfigError, MetricError
from .tensor import Tensor

LOSS_PARTS = ("BINDER", "MLM_ENC", "MLM_DEC", "MHC_CLASS", "MHC_ALLELE", "TRVJ")
IGNORE = -100


@dataclass
class LossConfig:
    weights: dict = field(default_factory=dict)
    enabled: dict = field(default_factory=dict)

    def __post_init__(self):
        for part in LOSS_PARTS:
            self.weights.setdefault(part, 1.0)
            self.enabled.setdefault(part, True)
        for part, w in self.weights.items():
            if part not in LOSS_PARTS:
                raise ConfigError(f"unknown loss part {part!r}")
            if w < 0:
                raise ConfigError(f"loss weight {part} must be >= 0, got {w}")
        for part in self.enabled:
            if part not in LOSS_PARTS:
                raise ConfigError(f"unknown loss part {part!r}")
        if not self.enabled["BINDER"]:
            raise ConfigError("BINDER loss cannot be disabled")

    def active(self, part):
        return self.enabled[part] and self.weights[part] > 0.0


class LabelSpace:
    """Categorical index with a reserved OTHER id 0; frozen after fit."""

    OTHER = 0

    def __init__(self):
        self._map = {}
        self.frozen = False

    def fit(self, values):
        if self.frozen:
            raise ConfigError("label space already frozen")
        for i, v in enumerate(sorted({v for v in values if v}), start=1):
            self._map[v] = i
        self.frozen = True
        return self

    @property
    def size(self):
        return len(self._map) + 1

    def encode(self, value):
        """Absent -> ignore; unseen -> OTHER."""
        if not value:
            return IGNORE
        return self._map.get(value, self.OTHER)

    def to_dict(self):
        return dict(self._map)

    @classmethod
    def from_dict(cls, d):
        space = cls()
        space._map = dict(d)
        space.frozen = True
        return space


class LabelSpaces:
    """All categorical target indexes, fitted on the training set only."""

    FIELDS = ("mhc_allele", "va", "ja", "vb", "jb")

    def __init__(self):
        self.spaces = {f: LabelSpace() for f in self.FIELDS}

    def fit(self, records):
        for f in self.FIELDS:
            self.spaces[f].fit([getattr(r, f) for r in records])
        return self

    def sizes(self):
        return {f: self.spaces[f].size for f in self.FIELDS}

    def encode_targets(self, records):
        """Integer target arrays per head; IGNORE marks absent values."""
        out = {
            "binder": np.array([1 if r.is_binder else 0 for r in records],
                               dtype=np.int64),
            "mhc_class": np.array(
                [{"I": 0, "II": 1}.get(r.mhc_class, IGNORE) for r in records],
                dtype=np.int64),
        }
        for f in self.FIELDS:
            out[f] = np.array([self.spaces[f].encode(getattr(r, f))
                               for r in records], dtype=np.int64)
        return out

    def to_dict(self):
        return {f: self.spaces[f].to_dict() for f in self.FIELDS}

    @classmethod
    def from_dict(cls, d):
        spaces = cls()
        spaces.spaces = {f: LabelSpace.from_dict(d[f]) for f in cls.FIELDS}
        return spaces


# ---------------------------------------------------------------------------
# loss parts

def binder_loss(binder_logits, binder_targets):
    return T.cross_entropy(binder_logits, binder_targets)


def mlm_loss(mlm_logits, mlm_labels, streams):
    """Pooled cross-entropy over all masked positions of ``streams``.

    Per-stream logits [B, L, vocab] are flattened and concatenated, so the
    result is the mean NLL over every masked token regardless of modality.
    """
    rows, labs = [], []
    for name in streams:
        logits = mlm_logits[name]
        b, length, v = logits.shape
        rows.append(T.reshape(logits, (b * length, v)))
        labs.append(mlm_labels[name].reshape(-1))
    if not rows:
        return T.cross_entropy(Tensor(np.zeros((1, 2), dtype=np.float32)),
                               [IGNORE])
    flat = rows[0] if len(rows) == 1 else T.concat(rows, axis=0)
    return T.cross_entropy(flat, np.concatenate(labs))


def mhc_loss(class_logits, allele_logits, targets):
    """Binary class CE plus multi-class allele CE; NA rows contribute 0."""
    total = T.cross_entropy(class_logits, targets["mhc_class"])
    return T.add(total, T.cross_entropy(allele_logits, targets["mhc_allele"]))


def trvj_loss(aux_logits, targets):
    """Sum of per-chain V/J allele cross-entropies; absent fields are 0."""
    total = None
    for f in ("va", "ja", "vb", "jb"):
        if f not in aux_logits:
            continue
        part = T.cross_entropy(aux_logits[f], targets[f])
        total = part if total is None else T.add(total, part)
    if total is None:
        return Tensor(np.zeros((), dtype=np.float32))
    return total


def compute_loss_parts(model, output, mlm_labels, targets):
    """All enabled loss parts for one forward pass, keyed by LOSS_PARTS."""
    spec = model.spec
    parts = {"BINDER": binder_loss(output.binder_logits, targets["binder"])}
    if "MLM_ENC" in spec.loss_heads and mlm_labels is not None:
        parts["MLM_ENC"] = mlm_loss(output.mlm_logits, mlm_labels,
                                    [m for m in spec.modalities
                                     if m in output.mlm_logits])
    if "MLM_DEC" in spec.loss_heads and mlm_labels is not None:
        dec_streams = [w.output for w in spec.wiring
                       if w.output in output.mlm_logits]
        dec_labels = {s: mlm_labels[model.spec.stream_base()[s]]
                      for s in dec_streams}
        parts["MLM_DEC"] = mlm_loss(output.mlm_logits, dec_labels, dec_streams)
    if "MHC_CLASS" in spec.loss_heads or "MHC_ALLELE" in spec.loss_heads:
        if "mhc_class" in output.aux_logits and "mhc_allele" in output.aux_logits:
            parts["MHC_CLASS"] = T.cross_entropy(output.aux_logits["mhc_class"],
                                                 targets["mhc_class"])
            parts["MHC_ALLELE"] = T.cross_entropy(
                output.aux_logits["mhc_allele"], targets["mhc_allele"])
    if "TRVJ" in spec.loss_heads:
        parts["TRVJ"] = trvj_loss(output.aux_logits, targets)
    return parts


def total_loss(parts, config):
    """Weighted sum over enabled parts; returns (scalar Tensor, float log)."""
    total = None
    log = {}
    for name, part in parts.items():
        log[name] = float(part.data)
        if not config.active(name):
            continue
        weighted = T.mul(part, config.weights[name])
        total = weighted if total is None else T.add(total, weighted)
    if total is None:
        raise ConfigError("no enabled loss parts")
    log["TOTAL"] = float(total.data)
    return total, log


# ---------------------------------------------------------------------------
# metrics

def roc_auc(scores, labels):
    """Mann-Whitney ROC-AUC with average ranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError(
            f"scores {scores.shape} and labels {labels.shape} must be "
            "equal-length vectors")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise MetricError("ROC-AUC undefined: both classes must be present")
    ranks = rankdata(scores, method="average")
    r_pos = ranks[pos].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
