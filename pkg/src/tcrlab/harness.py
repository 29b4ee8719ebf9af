"""Experiment harness: configured training runs, k-fold cross-validation,
checkpoint selection by loss or explanation quality, and evaluation.

A run writes into its ``out_dir``:

* ``ledger.jsonl``        one meta line, one line per epoch, one selection line
* ``epoch-NNNNNN.ckpt``   checkpoint archives at evaluation points
* ``diagnostic.json``     only on non-finite loss, describing the batch

Ledger rows record training loss parts, validation ROC-AUC, and (at
evaluation points inside the selection window) explanation quality, so
either selection strategy can be replayed from the file alone.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import (ConfigError, DataError, InferenceError, MetricError,
                     NumericError, SelectionError)
from .losses import (LabelSpaces, LossConfig, compute_loss_parts, roc_auc,
                     total_loss)
from .optim import AdamW
from .records import (kfold_split, load_ground_truth_jsonl,
                      load_records_jsonl)
from .xai import dataset_brhr, explanation_quality
from .zoo import (ArchitectureSpec, BlockConfig, ModelGraph,
                  build_egm0_spec, build_egm1_spec, build_egm2_spec,
                  build_enc_concat_spec, build_xprobe_spec, corrupt_batch,
                  fit_max_lens, model_from_manifest, slice_batch,
                  tokenize_records)

LOSS_BASED = "LOSS_BASED"
EXPLANATION_BASED = "EXPLANATION_BASED"
_STRATEGY_ALIASES = {
    "loss": LOSS_BASED, LOSS_BASED: LOSS_BASED,
    "explanation": EXPLANATION_BASED, EXPLANATION_BASED: EXPLANATION_BASED,
}

ARCH_BUILDERS = {
    "enc-concat": build_enc_concat_spec,
    "xprobe": build_xprobe_spec,
    "egm0": build_egm0_spec,
    "egm1": build_egm1_spec,
    "egm2": build_egm2_spec,
}


def normalize_strategy(value):
    try:
        return _STRATEGY_ALIASES[value]
    except KeyError:
        raise ConfigError(
            f"unknown selection strategy {value!r}; expected one of "
            f"{sorted(set(_STRATEGY_ALIASES))}") from None


# ---------------------------------------------------------------------------
# configuration

_CONFIG_KEYS = {
    "arch", "block", "loss", "data", "seed", "epochs", "batch_size", "lr",
    "weight_decay", "mask_prob", "selection", "selection_start_epoch",
    "eval_every", "t", "t_dec", "folds", "explain_max_records",
    "stop_val_auc", "lr_drops", "out_dir",
}


@dataclass
class ExperimentConfig:
    """One JSON-serializable document that fully determines a run."""

    arch: dict
    data: dict
    out_dir: str
    block: dict = field(default_factory=dict)
    loss: dict = field(default_factory=dict)
    seed: int = 0
    epochs: int = 500
    batch_size: int = 64
    lr: float = 1e-4
    weight_decay: float = 0.01
    mask_prob: float = 0.15
    selection: str = LOSS_BASED
    selection_start_epoch: int = 300
    eval_every: int = 10
    t: float = 0.25
    t_dec: float = 0.5
    folds: int = 5
    explain_max_records: int = 512
    stop_val_auc: float | None = None
    lr_drops: list = field(default_factory=list)

    def __post_init__(self):
        self.selection = normalize_strategy(self.selection)
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 <= self.selection_start_epoch < self.epochs:
            raise ConfigError(
                f"selection_start_epoch {self.selection_start_epoch} must "
                f"lie in [0, epochs) with epochs={self.epochs}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 < self.t <= 1.0:
            raise ConfigError(f"t must be in (0, 1], got {self.t}")
        if not 0.0 <= self.mask_prob < 1.0:
            raise ConfigError(
                f"mask_prob must be in [0, 1), got {self.mask_prob}")
        if self.folds < 2:
            raise ConfigError(f"folds must be >= 2, got {self.folds}")
        if self.explain_max_records < 1:
            raise ConfigError("explain_max_records must be >= 1")
        if not isinstance(self.arch, dict):
            raise ConfigError("arch must be an object")
        if "spec" not in self.arch and "builder" not in self.arch:
            raise ConfigError("arch needs either 'builder' or a full 'spec'")
        builder = self.arch.get("builder")
        if builder is not None and builder not in ARCH_BUILDERS:
            raise ConfigError(
                f"unknown arch builder {builder!r}; expected one of "
                f"{sorted(ARCH_BUILDERS)}")
        for pair in self.lr_drops:
            if (not isinstance(pair, (list, tuple)) or len(pair) != 2
                    or not 0.0 < pair[0] <= 1.0 or pair[1] <= 0):
                raise ConfigError(
                    "lr_drops entries must be [val_auc_threshold, lr] with "
                    f"threshold in (0, 1] and lr > 0, got {pair!r}")
        if "train" not in self.data:
            raise ConfigError("data.train path is required")
        vf = self.data.get("val_fraction", 0.2)
        if not 0.0 < vf < 1.0:
            raise ConfigError(f"data.val_fraction must be in (0, 1), got {vf}")

    @classmethod
    def from_dict(cls, doc):
        unknown = set(doc) - _CONFIG_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(f"bad experiment config: {exc}") from exc

    @classmethod
    def from_json_file(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path} must hold a JSON object")
        return cls.from_dict(doc)

    def to_dict(self):
        return dataclasses.asdict(self)

    def build_spec(self):
        if "spec" in self.arch:
            return ArchitectureSpec.from_dict(self.arch["spec"])
        builder = ARCH_BUILDERS[self.arch["builder"]]
        try:
            return builder(**self.arch.get("options", {}))
        except TypeError as exc:
            raise ConfigError(
                f"bad options for arch builder "
                f"{self.arch['builder']!r}: {exc}") from exc

    def build_block_config(self):
        try:
            return BlockConfig(**self.block)
        except TypeError as exc:
            raise ConfigError(f"bad block config: {exc}") from exc

    def build_loss_config(self):
        try:
            return LossConfig(**{k: dict(v) for k, v in self.loss.items()})
        except TypeError as exc:
            raise ConfigError(f"bad loss config: {exc}") from exc


# ---------------------------------------------------------------------------
# run ledger

@dataclass
class LedgerRow:
    epoch: int
    loss_parts: dict
    loss_total: float
    val_auc: float | None = None
    explanation_quality: float | None = None
    checkpoint: str | None = None

    def to_dict(self):
        return {"kind": "row", **dataclasses.asdict(self)}


class RunLedger:
    """Per-epoch training log plus the final per-strategy selections.

    Rows must arrive with strictly increasing epoch numbers; the selected
    checkpoint ids always point at a checkpoint some row created.
    """

    def __init__(self, meta):
        self.meta = dict(meta)
        self.rows = []
        self.selected = {}

    @property
    def selection_start_epoch(self):
        return self.meta["config"]["selection_start_epoch"]

    def append(self, row):
        if self.rows and row.epoch <= self.rows[-1].epoch:
            raise DataError(
                f"ledger epochs must increase: {row.epoch} after "
                f"{self.rows[-1].epoch}")
        self.rows.append(row)

    def checkpoints(self):
        return [r.checkpoint for r in self.rows if r.checkpoint]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"kind": "meta", **self.meta},
                                sort_keys=True) + "\n")
            for row in self.rows:
                fh.write(json.dumps(row.to_dict(), sort_keys=True) + "\n")
            if self.selected:
                fh.write(json.dumps({"kind": "selected",
                                     "selected": self.selected},
                                    sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        ledger = None
        selected = {}
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    doc = json.loads(line)
                    kind = doc.pop("kind")
                except (json.JSONDecodeError, KeyError) as exc:
                    raise DataError(f"{path}:{line_no}: bad ledger line: "
                                    f"{exc}") from exc
                if kind == "meta":
                    ledger = cls(doc)
                elif kind == "row":
                    if ledger is None:
                        raise DataError(f"{path}: row before meta line")
                    ledger.append(LedgerRow(**doc))
                elif kind == "selected":
                    selected = doc["selected"]
                else:
                    raise DataError(f"{path}:{line_no}: unknown line kind "
                                    f"{kind!r}")
        if ledger is None:
            raise DataError(f"{path}: no meta line")
        known = set(ledger.checkpoints())
        for strategy, ckpt in selected.items():
            if ckpt not in known:
                raise DataError(
                    f"{path}: selected checkpoint {ckpt!r} for {strategy} "
                    "does not exist in any row")
        ledger.selected = selected
        return ledger


def select_checkpoint(ledger, strategy):
    """Pick the ledger row whose checkpoint the strategy prefers.

    LOSS_BASED minimizes the weighted training loss; EXPLANATION_BASED
    maximizes explanation quality.  Only rows at epochs >=
    selection_start_epoch that saved a checkpoint are eligible; ties keep
    the earlier epoch.  Returns the winning row (its ``checkpoint`` field
    is the selected id)."""
    strategy = normalize_strategy(strategy)
    start = ledger.selection_start_epoch
    best = None
    best_key = None
    for row in ledger.rows:
        if row.epoch < start or not row.checkpoint:
            continue
        if strategy == LOSS_BASED:
            key = row.loss_total
        else:
            if row.explanation_quality is None:
                continue
            key = -row.explanation_quality
        if best is None or key < best_key:
            best, best_key = row, key
    if best is None:
        raise SelectionError(
            f"no eligible ledger rows for {strategy} at epochs >= {start}")
    return best


# ---------------------------------------------------------------------------
# dataset plumbing

def _load_datasets(config):
    """Resolve config.data into (train, val, truth)."""
    train = load_records_jsonl(config.data["train"])
    if not train:
        raise DataError(f"{config.data['train']} holds no records")
    val_path = config.data.get("val")
    if val_path:
        val = load_records_jsonl(val_path)
    else:
        vf = config.data.get("val_fraction", 0.2)
        rng = np.random.default_rng(config.seed + 1)
        perm = rng.permutation(len(train))
        n_val = max(1, int(round(len(train) * vf)))
        if n_val >= len(train):
            raise DataError("validation fraction leaves no training records")
        val = [train[i] for i in perm[:n_val]]
        train = [train[i] for i in perm[n_val:]]
    truth = None
    truth_path = config.data.get("ground_truth")
    if truth_path:
        truth = load_ground_truth_jsonl(truth_path)
    if config.selection == EXPLANATION_BASED and truth is None:
        raise ConfigError(
            "explanation-based selection needs data.ground_truth distances")
    return train, val, truth


def build_model(config, records):
    """Construct the model and label spaces a config describes, sized to
    the given records."""
    spec = config.build_spec()
    block = config.build_block_config()
    spaces = LabelSpaces().fit(records)
    max_lens = fit_max_lens(records, spec.modalities)
    model = ModelGraph(spec, block, max_lens=max_lens, seed=config.seed,
                       aux_sizes=spaces.sizes())
    return model, spaces


def _predict(model, batch, batch_size):
    """p_bind over a pre-tokenized dataset, chunked to bound memory."""
    n = next(iter(batch["ids"].values())).shape[0]
    out = np.empty(n, dtype=np.float64)
    for lo in range(0, n, batch_size):
        idx = np.arange(lo, min(lo + batch_size, n))
        out[idx] = model.forward(slice_batch(batch, idx)).p_bind
    return out


def _safe_auc(scores, labels):
    """None instead of an error for degenerate validation splits."""
    try:
        return roc_auc(scores, labels)
    except MetricError:
        return None


# ---------------------------------------------------------------------------
# training

def train(config, records=None, val_records=None, truth=None, log=None):
    """Run one configured training job and return its RunLedger.

    ``records``/``val_records``/``truth`` override the config's dataset
    paths when given (k-fold reuses this).  ``log`` is an optional callable
    receiving one progress string per epoch."""
    if records is None:
        records, val_records, truth = _load_datasets(config)
    elif val_records is None:
        raise ConfigError("explicit records need explicit val_records")
    if config.selection == EXPLANATION_BASED and truth is None:
        raise ConfigError(
            "explanation-based selection needs ground-truth distances")

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model, spaces = build_model(config, list(records) + list(val_records))
    loss_cfg = config.build_loss_config()
    opt = AdamW(model.named_parameters(), lr=config.lr,
                weight_decay=config.weight_decay)

    train_batch = tokenize_records(records, model.spec.modalities,
                                   model.max_lens)
    val_batch = tokenize_records(val_records, model.spec.modalities,
                                 model.max_lens)
    targets = spaces.encode_targets(records)
    y_val = np.array([1 if r.is_binder else 0 for r in val_records],
                     dtype=np.int64)
    explain_records = val_records[:config.explain_max_records]

    ledger = RunLedger({
        "config": config.to_dict(),
        "n_train": len(records),
        "n_val": len(val_records),
        "param_count": model.parameter_count(),
    })
    n_train = len(records)
    for epoch in range(1, config.epochs + 1):
        t_epoch = time.time()
        erng = np.random.default_rng((config.seed, epoch))
        order = erng.permutation(n_train)
        sums = {}
        for lo in range(0, n_train, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            clean = slice_batch(train_batch, idx)
            corrupted, labels = corrupt_batch(clean, config.mask_prob, erng)
            batch_targets = {k: v[idx] for k, v in targets.items()}
            tape = T.ComputeTape()
            with tape:
                out = model.forward(corrupted, rng=erng, training=True)
                parts = compute_loss_parts(model, out, labels, batch_targets)
                loss, part_log = total_loss(parts, loss_cfg)
            if not all(np.isfinite(v) for v in part_log.values()):
                _dump_diagnostic(out_dir, epoch, idx, records, part_log)
                raise NumericError(
                    f"non-finite loss at epoch {epoch}; diagnostics in "
                    f"{out_dir / 'diagnostic.json'}")
            opt.zero_grad()
            tape.backward(loss)
            opt.step()
            for k, v in part_log.items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
        loss_parts = {k: v / n_train for k, v in sums.items() if k != "TOTAL"}
        loss_total = sums["TOTAL"] / n_train

        val_auc = _safe_auc(_predict(model, val_batch, config.batch_size),
                            y_val)
        _apply_lr_drops(opt, val_auc, config.lr_drops)
        row = LedgerRow(epoch=epoch, loss_parts=loss_parts,
                        loss_total=loss_total, val_auc=val_auc)
        stop = (config.stop_val_auc is not None and val_auc is not None
                and val_auc >= config.stop_val_auc)
        eval_point = (epoch % config.eval_every == 0
                      or epoch == config.epochs or stop)
        if eval_point and epoch >= config.selection_start_epoch:
            name = f"epoch-{epoch:06d}.ckpt"
            manifest = model.manifest_stub()
            manifest.update({
                "epoch": epoch, "seed": config.seed, "val_auc": val_auc,
                "loss_total": loss_total,
                "label_spaces": spaces.to_dict(),
            })
            save_checkpoint(out_dir / name, model.export_arrays(), manifest)
            row.checkpoint = name
            if truth is not None:
                row.explanation_quality = explanation_quality(
                    model, explain_records, truth, t=config.t,
                    t_dec=config.t_dec, batch_size=config.batch_size)
        ledger.append(row)
        if log is not None:
            log(_format_row(row, time.time() - t_epoch))
        if stop:
            break

    for strategy in (LOSS_BASED, EXPLANATION_BASED):
        try:
            ledger.selected[strategy] = select_checkpoint(
                ledger, strategy).checkpoint
        except SelectionError:
            pass
    ledger.save(out_dir / "ledger.jsonl")
    return ledger


def _apply_lr_drops(opt, val_auc, drops):
    """Lower the learning rate once validation AUC crosses a threshold.

    ``drops`` holds [val_auc_threshold, lr] pairs; the highest crossed
    threshold wins, and the rate only ever decreases, so a later dip in
    AUC cannot raise it back.  Validation AUC is a pure function of the
    config and data, which keeps scheduled runs bitwise reproducible."""
    if val_auc is None:
        return
    for threshold, new_lr in sorted(drops, reverse=True):
        if val_auc >= threshold and opt.lr > new_lr:
            opt.lr = new_lr
            return


def _format_row(row, seconds):
    parts = " ".join(f"{k.lower()} {v:.4f}"
                     for k, v in sorted(row.loss_parts.items()))
    line = (f"epoch {row.epoch:4d} {parts} total {row.loss_total:.4f} "
            f"val_auc {row.val_auc if row.val_auc is None else round(row.val_auc, 4)}")
    if row.explanation_quality is not None:
        line += f" quality {row.explanation_quality:.4f}"
    if row.checkpoint:
        line += f" [{row.checkpoint}]"
    return line + f" ({seconds:.1f}s)"


def _dump_diagnostic(out_dir, epoch, idx, records, part_log):
    doc = {
        "epoch": epoch,
        "record_ids": [records[i].record_id for i in idx],
        "loss_parts": {k: (v if np.isfinite(v) else repr(v))
                       for k, v in part_log.items()},
    }
    with open(out_dir / "diagnostic.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# k-fold cross-validation

def run_kfold(config, records=None, truth=None, log=None):
    """Train one model per fold and aggregate validation ROC-AUC.

    Fold i trains on the other folds with seed ``config.seed + i`` under
    ``out_dir/fold-i``.  The report (also written to
    ``out_dir/kfold_report.json``) carries per-fold rows plus mean and
    sample standard deviation; a failing fold persists the partial report
    before the error propagates."""
    if records is None:
        records = load_records_jsonl(config.data["train"])
        truth_path = config.data.get("ground_truth")
        truth = (load_ground_truth_jsonl(truth_path) if truth_path else None)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    folds = kfold_split(records, k=config.folds, seed=config.seed)

    report = {"k": config.folds, "seed": config.seed, "folds": []}
    try:
        for i, (fold_train, fold_val) in enumerate(folds):
            train_ids = {r.record_id for r in fold_train}
            val_ids = {r.record_id for r in fold_val}
            if train_ids & val_ids or len(train_ids) + len(val_ids) != len(records):
                raise DataError(f"fold {i} leaks records across the split")
            fold_config = dataclasses.replace(
                config, seed=config.seed + i,
                out_dir=str(out_dir / f"fold-{i}"))
            ledger = train(fold_config, records=fold_train,
                           val_records=fold_val, truth=truth, log=log)
            row = select_checkpoint(ledger, config.selection)
            report["folds"].append({
                "fold": i,
                "n_train": len(fold_train),
                "n_val": len(fold_val),
                "epoch": row.epoch,
                "checkpoint": f"fold-{i}/{row.checkpoint}",
                "val_auc": row.val_auc,
            })
    except Exception as exc:
        report["error"] = f"fold {len(report['folds'])} failed: {exc}"
        _write_kfold_report(out_dir, report)
        raise
    aucs = [f["val_auc"] for f in report["folds"]]
    report["mean_auc"] = float(np.mean(aucs))
    report["std_auc"] = float(np.std(aucs, ddof=1))
    report["formatted"] = (f"{report['mean_auc']:.3f}"
                           f"±{report['std_auc']:.3f}")
    _write_kfold_report(out_dir, report)
    return report


def _write_kfold_report(out_dir, report):
    with open(out_dir / "kfold_report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalReport:
    auc: float
    n_records: int
    per_epitope: dict
    brhr: dict | None
    t: float
    t_dec: float

    def to_dict(self):
        doc = {
            "auc": self.auc,
            "n_records": self.n_records,
            "per_epitope": self.per_epitope,
            "t": self.t,
            "t_dec": self.t_dec,
        }
        if self.brhr is not None:
            doc["brhr"] = [
                {"modality": m, "partner": p,
                 "mean_brhr": stat.mean_brhr, "n_records": stat.n_records}
                for (m, p), stat in sorted(self.brhr.items())
            ]
        return doc


def load_model(checkpoint_path):
    """Rebuild the model a checkpoint describes and load its parameters."""
    manifest, params = load_checkpoint(checkpoint_path)
    model = model_from_manifest(manifest)
    model.load_arrays(params)
    return model, manifest


def evaluate(checkpoint_path, records, truth=None, t=0.25, t_dec=0.5,
             batch_size=256):
    """Score a checkpoint on a dataset: ROC-AUC, a per-epitope breakdown,
    and (when ground-truth distances are given) the full BRHR table."""
    if not records:
        raise DataError("evaluation dataset is empty")
    model, _ = load_model(checkpoint_path)
    for m in model.spec.modalities:
        if all(not r.sequence(m) for r in records):
            raise InferenceError(
                f"checkpoint requires modality {m} but the dataset never "
                "provides it")
    batch = tokenize_records(records, model.spec.modalities, model.max_lens)
    scores = _predict(model, batch, batch_size)
    y = np.array([1 if r.is_binder else 0 for r in records], dtype=np.int64)
    auc = roc_auc(scores, y)

    per_epitope = {}
    by_epitope = {}
    for i, rec in enumerate(records):
        by_epitope.setdefault(rec.epitope, []).append(i)
    for epitope in sorted(by_epitope):
        idx = by_epitope[epitope]
        group_y = y[idx]
        entry = {"n": len(idx)}
        if 0 < group_y.sum() < len(idx):
            entry["auc"] = roc_auc(scores[idx], group_y)
        else:
            entry["auc"] = None
        per_epitope[epitope] = entry

    table = None
    if truth is not None:
        table = dataset_brhr(model, records, truth, t=t, t_dec=t_dec,
                             batch_size=batch_size)
    return EvalReport(auc=auc, n_records=len(records),
                      per_epitope=per_epitope, brhr=table, t=t, t_dec=t_dec)
