"""Amino-acid vocabulary, modality registry, and tokenization.

The token table is fixed: five specials followed by the 20 canonical
amino-acid letters, 25 ids total with [PAD] pinned to 0.  Each modality
tokenizes to ``[CLS] + residues + [PAD]...`` at a per-modality maximum
length; absent (empty) modalities become all-[PAD] rows with an all-zero
attention mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

PAD, CLS, SEP, MASK, UNK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]")
AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWY"

TOKENS = SPECIAL_TOKENS + tuple(AMINO_ACIDS)
TOKEN_TO_ID = {tok: i for i, tok in enumerate(TOKENS)}
ID_TO_TOKEN = {i: tok for i, tok in enumerate(TOKENS)}
VOCAB_SIZE = len(TOKENS)
N_SPECIALS = len(SPECIAL_TOKENS)
RESIDUE_IDS = tuple(range(N_SPECIALS, VOCAB_SIZE))

MODALITIES = ("TCR_A", "TCR_B", "CDR1A", "CDR2A", "CDR3A",
              "CDR1B", "CDR2B", "CDR3B", "EPITOPE")

# total id slots including the [CLS] prefix (residue capacity + 1)
DEFAULT_MAX_LEN = {
    "TCR_A": 141, "TCR_B": 141,
    "CDR1A": 31, "CDR2A": 31, "CDR3A": 31,
    "CDR1B": 31, "CDR2B": 31, "CDR3B": 31,
    "EPITOPE": 26,
}


@dataclass
class TokenizedModality:
    """One sequence rendered as fixed-length token ids with masks."""

    modality: str
    ids: np.ndarray          # int64 [max_len]
    attn_mask: np.ndarray    # uint8 [max_len], 1 = real token (incl. [CLS])
    region_spans: list = field(default_factory=list)  # (label, start, end) over residues

    @property
    def n_residues(self):
        # [CLS] occupies one masked-in slot when the modality is present
        total = int(self.attn_mask.sum())
        return max(0, total - 1)

    def residue_ids(self):
        return self.ids[1:1 + self.n_residues]


def tokenize(seq, modality, max_len=None, counters=None):
    """Render ``seq`` as [CLS]-prefixed ids padded to ``max_len`` slots.

    Empty input is the absent-modality convention: all-[PAD], zero mask.
    Non-canonical letters map to [UNK] and bump ``counters['unk_letters']``.
    """
    if modality not in MODALITIES:
        raise ConfigError(f"unknown modality '{modality}'")
    if max_len is None:
        max_len = DEFAULT_MAX_LEN[modality]
    if max_len < 2:
        raise ConfigError(f"max_len must be >= 2, got {max_len}")
    ids = np.zeros(max_len, dtype=np.int64)
    mask = np.zeros(max_len, dtype=np.uint8)
    if not seq:
        return TokenizedModality(modality, ids, mask)
    ids[0] = CLS
    residues = seq[:max_len - 1]
    for i, letter in enumerate(residues):
        tok = TOKEN_TO_ID.get(letter, UNK)
        if tok == UNK and counters is not None:
            counters["unk_letters"] = counters.get("unk_letters", 0) + 1
        ids[i + 1] = tok
    mask[:len(residues) + 1] = 1
    return TokenizedModality(modality, ids, mask)


def detokenize(ids):
    """Inverse of tokenize for canonical letters; specials are dropped."""
    return "".join(ID_TO_TOKEN[int(i)] for i in ids
                   if int(i) >= N_SPECIALS)


def encode_sequence(seq):
    """Residue letters to ids without [CLS]/[PAD] framing."""
    out = []
    for letter in seq:
        if letter not in TOKEN_TO_ID or TOKEN_TO_ID[letter] < N_SPECIALS:
            raise DataError(f"non-canonical residue letter '{letter}'")
        out.append(TOKEN_TO_ID[letter])
    return np.asarray(out, dtype=np.int64)
