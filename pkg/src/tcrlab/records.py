"""BindingRecord data model, ingestion, region annotation, negative
sampling, k-fold splitting, and the JSON-lines dataset formats.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .vocab import AMINO_ACIDS

LABELS = ("binder", "nonbinder")
MHC_CLASSES = ("I", "II", "NA")

SEQUENCE_FIELDS = ("tcr_a", "tcr_b", "cdr1a", "cdr2a", "cdr3a",
                   "cdr1b", "cdr2b", "cdr3b", "epitope")
CATEGORY_FIELDS = ("mhc_class", "mhc_allele", "va", "ja", "vb", "jb", "species")

# record field -> modality name used by tokenization and models
FIELD_TO_MODALITY = {
    "tcr_a": "TCR_A", "tcr_b": "TCR_B",
    "cdr1a": "CDR1A", "cdr2a": "CDR2A", "cdr3a": "CDR3A",
    "cdr1b": "CDR1B", "cdr2b": "CDR2B", "cdr3b": "CDR3B",
    "epitope": "EPITOPE",
}
MODALITY_TO_FIELD = {m: f for f, m in FIELD_TO_MODALITY.items()}


@dataclass
class BindingRecord:
    """One TCR-pMHC example; epitope and label are required, the rest may
    be absent (empty string)."""

    record_id: str
    epitope: str
    label: str
    tcr_a: str = ""
    tcr_b: str = ""
    cdr1a: str = ""
    cdr2a: str = ""
    cdr3a: str = ""
    cdr1b: str = ""
    cdr2b: str = ""
    cdr3b: str = ""
    mhc_class: str = "NA"
    mhc_allele: str = ""
    va: str = ""
    ja: str = ""
    vb: str = ""
    jb: str = ""
    species: str = ""
    flags: list = field(default_factory=list)

    def __post_init__(self):
        if not self.epitope:
            raise DataError(f"record {self.record_id!r}: epitope is required")
        if self.label not in LABELS:
            raise DataError(
                f"record {self.record_id!r}: label must be one of {LABELS}, "
                f"got {self.label!r}")
        if self.mhc_class not in MHC_CLASSES:
            raise DataError(
                f"record {self.record_id!r}: mhc_class must be one of "
                f"{MHC_CLASSES}, got {self.mhc_class!r}")

    @property
    def is_binder(self):
        return self.label == "binder"

    def sequence(self, modality):
        return getattr(self, MODALITY_TO_FIELD[modality])

    def tcr_key(self):
        """Identity of the TCR side, used to audit negative sampling."""
        return (self.tcr_a, self.tcr_b, self.cdr1a, self.cdr2a, self.cdr3a,
                self.cdr1b, self.cdr2b, self.cdr3b, self.va, self.ja,
                self.vb, self.jb)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


def check_cdr_substrings(record):
    """Flag CDR3 strings that are not substrings of their present chain."""
    flags = []
    for cdr_field, chain_field in (("cdr3a", "tcr_a"), ("cdr3b", "tcr_b")):
        cdr = getattr(record, cdr_field)
        chain = getattr(record, chain_field)
        if cdr and chain and cdr not in chain:
            flags.append(f"{cdr_field}_mismatch")
    return flags


_CANONICAL = set(AMINO_ACIDS)


def _count_unknown_letters(record):
    return sum(1 for f in SEQUENCE_FIELDS
               for ch in getattr(record, f) if ch not in _CANONICAL)


def ingest_tsv(path, schema, delimiter="\t", binder_values=("1", "true", "binder")):
    """Read a delimited file into records using a field -> column mapping.

    Returns ``(records, report)``.  Rows missing the epitope (or otherwise
    unreadable) are skipped with a reason; suspicious rows are kept and
    flagged.  A missing mapped column is a schema error.
    """
    if "epitope" not in schema or "label" not in schema:
        raise ConfigError("schema must map at least 'epitope' and 'label'")
    report = {"rows_total": 0, "rows_kept": 0, "dropped": [], "flagged": [],
              "unk_letters": 0}
    records = []
    binder_set = {str(v).lower() for v in binder_values}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        header = reader.fieldnames or []
        missing = [col for col in schema.values() if col not in header]
        if missing:
            raise DataError(f"{path}: missing required columns {missing}")
        for line_no, row in enumerate(reader, start=2):
            report["rows_total"] += 1
            fields = {f: (row.get(col) or "").strip()
                      for f, col in schema.items()}
            if not fields.get("epitope"):
                report["dropped"].append((line_no, "required field empty"))
                continue
            raw_label = fields.pop("label", "")
            fields["label"] = ("binder" if raw_label.lower() in binder_set
                               else "nonbinder")
            fields.setdefault("record_id", f"row{line_no}")
            if not fields["record_id"]:
                fields["record_id"] = f"row{line_no}"
            try:
                rec = BindingRecord(**fields)
            except (DataError, TypeError) as exc:
                report["dropped"].append((line_no, str(exc)))
                continue
            flags = check_cdr_substrings(rec)
            rec.flags.extend(flags)
            for flag in flags:
                report["flagged"].append((rec.record_id, flag))
            report["unk_letters"] += _count_unknown_letters(rec)
            records.append(rec)
            report["rows_kept"] += 1
    return records, report


def annotate_regions(record):
    """Locate CDR spans on each present chain by leftmost substring match.

    Returns ``(spans, flags)`` where spans maps modality -> list of
    (label, start, end) residue spans.  Chains are fully covered: gaps
    between CDR spans are labeled non-CDR.  A CDR absent from its chain is
    omitted and flagged; overlapping or repeated matches are flagged.
    """
    spans = {}
    flags = []
    chain_cdrs = {
        "TCR_A": ("cdr1a", "cdr2a", "cdr3a"),
        "TCR_B": ("cdr1b", "cdr2b", "cdr3b"),
    }
    for chain_mod, cdr_fields in chain_cdrs.items():
        chain = record.sequence(chain_mod)
        if not chain:
            continue
        found = []
        cursor = 0  # CDR1 < CDR2 < CDR3 in chain order; search left to right
        for cdr_field in cdr_fields:
            cdr = getattr(record, cdr_field)
            if not cdr:
                continue
            start = chain.find(cdr, cursor)
            if start < 0:
                # retry from the chain start in case of unordered CDRs
                start = chain.find(cdr)
                if start < 0 or (found and start < found[-1][2]):
                    flags.append(f"{cdr_field}_missing_from_chain")
                    continue
            if chain.find(cdr, start + 1) >= 0:
                flags.append(f"ambiguous_{cdr_field}_span")
            found.append((cdr_field.upper(), start, start + len(cdr)))
            cursor = start + len(cdr)
        found.sort(key=lambda s: s[1])
        full = []
        pos = 0
        for label, start, end in found:
            if start > pos:
                full.append(("non-CDR", pos, start))
            full.append((label, start, end))
            pos = end
        if pos < len(chain):
            full.append(("non-CDR", pos, len(chain)))
        spans[chain_mod] = full
    for cdr_mod in ("CDR1A", "CDR2A", "CDR3A", "CDR1B", "CDR2B", "CDR3B"):
        seq = record.sequence(cdr_mod)
        if seq:
            spans[cdr_mod] = [(cdr_mod, 0, len(seq))]
    spans["EPITOPE"] = [("EPITOPE", 0, len(record.epitope))]
    return spans, flags


def sample_negatives(positives, seed):
    """Create one nonbinder per positive by re-pairing TCRs across epitopes.

    For each epitope E, TCRs are drawn from records with a different
    epitope, skipping any (TCR, E) combination that is a known positive.
    Draws are without replacement until the eligible pool is exhausted,
    then with replacement (warned).  Returns ``(negatives, report)``.
    """
    epitopes = sorted({p.epitope for p in positives})
    if len(epitopes) < 2:
        raise DataError("negative sampling needs >= 2 distinct epitopes")
    known_pairs = {(p.tcr_key(), p.epitope) for p in positives}
    rng = np.random.default_rng(seed)
    by_epitope = {e: [p for p in positives if p.epitope == e] for e in epitopes}
    negatives = []
    report = {"warnings": [], "provenance": []}
    for epitope in epitopes:
        own = by_epitope[epitope]
        template = own[0]  # carries E's pMHC fields
        pool = [p for p in positives
                if p.epitope != epitope
                and (p.tcr_key(), epitope) not in known_pairs]
        if not pool:
            raise DataError(
                f"no eligible TCRs to pair with epitope {epitope!r}")
        n_needed = len(own)
        order = rng.permutation(len(pool))
        picks = [pool[i] for i in order[:n_needed]]
        if n_needed > len(pool):
            report["warnings"].append(
                f"epitope {epitope!r}: pool of {len(pool)} TCRs smaller than "
                f"{n_needed}; sampling remainder with replacement")
            extra = rng.integers(0, len(pool), size=n_needed - len(pool))
            picks.extend(pool[i] for i in extra)
        for i, donor in enumerate(picks):
            neg = BindingRecord(
                record_id=f"neg-{epitope}-{i}",
                epitope=epitope,
                label="nonbinder",
                tcr_a=donor.tcr_a, tcr_b=donor.tcr_b,
                cdr1a=donor.cdr1a, cdr2a=donor.cdr2a, cdr3a=donor.cdr3a,
                cdr1b=donor.cdr1b, cdr2b=donor.cdr2b, cdr3b=donor.cdr3b,
                mhc_class=template.mhc_class, mhc_allele=template.mhc_allele,
                va=donor.va, ja=donor.ja, vb=donor.vb, jb=donor.jb,
                species=donor.species,
                flags=["negative_sampled"],
            )
            negatives.append(neg)
            report["provenance"].append((neg.record_id, donor.record_id))
    return negatives, report


def kfold_split(records, k=5, seed=0):
    """Stratified k-fold partition, a pure function of (id set, k, seed).

    Returns a list of ``(train_records, val_records)`` pairs; per-fold
    label counts stay within one record of the global ratio.
    """
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    if k > len(records):
        raise DataError(f"cannot split {len(records)} records into {k} folds")
    ids = [r.record_id for r in records]
    if len(set(ids)) != len(ids):
        raise DataError("record_ids must be unique for fold assignment")
    by_id = {r.record_id: r for r in records}
    rng = np.random.default_rng(seed)
    fold_of = {}
    # input order must not matter: shuffle each label group sorted by id
    for label in LABELS:
        group = sorted(rid for rid, r in by_id.items() if r.label == label)
        order = rng.permutation(len(group))
        for slot, idx in enumerate(order):
            fold_of[group[idx]] = slot % k
    folds = []
    ordered_ids = sorted(by_id)
    for fold in range(k):
        val = [by_id[rid] for rid in ordered_ids if fold_of[rid] == fold]
        train = [by_id[rid] for rid in ordered_ids if fold_of[rid] != fold]
        folds.append((train, val))
    return folds


# ---------------------------------------------------------------------------
# JSON-lines dataset formats

def save_records_jsonl(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")


def load_records_jsonl(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(BindingRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, TypeError) as exc:
                raise DataError(f"{path}:{line_no}: bad record: {exc}") from exc
    return records


def save_ground_truth_jsonl(truth, path):
    """``truth`` maps record_id -> {modality: {partner: [float|None, ...]}}."""
    with open(path, "w", encoding="utf-8") as fh:
        for record_id in sorted(truth):
            doc = {"record_id": record_id, "distances": truth[record_id]}
            fh.write(json.dumps(doc, sort_keys=True) + "\n")


def load_ground_truth_jsonl(path):
    truth = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                truth[doc["record_id"]] = doc["distances"]
            except (json.JSONDecodeError, KeyError) as exc:
                raise DataError(f"{path}:{line_no}: bad ground truth: {exc}") from exc
    return truth
