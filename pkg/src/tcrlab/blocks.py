"""Transformer building blocks: encoder and decoder stacks with named
attention-capture points, MLM and classifier heads, and MLM corruption.

All blocks are pre-norm with GELU feed-forwards.  The decoder's
cross-attention sublayer uses replace semantics by default (no residual
around it): the sublayer output is the attended mixture alone, so the
decoder output carries information from the attended modality rather than
the query. ``BlockConfig.cross_residual`` restores the conventional
residual for ablation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, InferenceError, ShapeError
from .tensor import Tensor
from .vocab import MASK, N_SPECIALS, VOCAB_SIZE

INIT_STD = 0.02


@dataclass
class BlockConfig:
    layers: int = 2
    hidden: int = 128
    heads: int = 1
    ffn_mult: int = 4
    dropout: float = 0.1
    cross_residual: bool = False

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ConfigError(
                f"hidden {self.hidden} not divisible by heads {self.heads}")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.layers < 1 or self.ffn_mult < 1:
            raise ConfigError("layers and ffn_mult must be >= 1")


class ParamStore:
    """Registry of named parameters with stable, unique names."""

    def __init__(self):
        self._params = {}

    def add(self, name, array):
        if name in self._params:
            raise ConfigError(f"duplicate parameter name '{name}'")
        t = Tensor(np.asarray(array, dtype=np.float32), requires_grad=True)
        self._params[name] = t
        return t

    def named(self):
        return list(self._params.items())

    def __getitem__(self, name):
        return self._params[name]

    def __len__(self):
        return len(self._params)

    def n_values(self):
        return sum(t.size for _, t in self._params.items())

    def export_arrays(self):
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_arrays(self, arrays):
        missing = [n for n in self._params if n not in arrays]
        extra = [n for n in arrays if n not in self._params]
        if missing or extra:
            raise ConfigError(
                f"parameter set mismatch: missing {missing[:3]}, "
                f"unexpected {extra[:3]}")
        for name, t in self._params.items():
            arr = np.asarray(arrays[name], dtype=np.float32)
            if arr.shape != t.data.shape:
                raise ShapeError(
                    f"parameter '{name}': stored shape {arr.shape} != "
                    f"model shape {t.data.shape}")
            t.data = np.ascontiguousarray(arr)


class Linear:
    def __init__(self, store, name, d_in, d_out, rng):
        self.w = store.add(f"{name}.w",
                           rng.normal(0.0, INIT_STD, size=(d_in, d_out)))
        self.b = store.add(f"{name}.b", np.zeros(d_out))
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x):
        shape = x.shape
        flat = T.reshape(x, (-1, self.d_in))
        out = T.add(T.matmul(flat, self.w), self.b)
        return T.reshape(out, shape[:-1] + (self.d_out,))


class LayerNorm:
    def __init__(self, store, name, width):
        self.gain = store.add(f"{name}.gain", np.ones(width))
        self.bias = store.add(f"{name}.bias", np.zeros(width))

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias)


class Embedding:
    def __init__(self, store, name, rows, width, rng):
        self.table = store.add(name, rng.normal(0.0, INIT_STD,
                                                size=(rows, width)))

    def __call__(self, ids):
        return T.embedding(self.table, ids)


@dataclass
class TraceEntry:
    """One captured attention map: post-softmax weights over a (possibly
    concatenated) key stream, for the whole batch."""

    query_stream: str
    query_base: str                 # base modality of the query positions
    key_streams: tuple              # key stream names in concatenation order
    layer: int
    head: int
    weights: np.ndarray             # [B, Lq, Lk_total]
    key_spans: tuple                # ((stream, base_modality, start, end), ...)
    query_mask: np.ndarray          # [B, Lq] uint8
    key_mask: np.ndarray            # [B, Lk_total] uint8


class AttentionTrace:
    """Observational capture of attention weights used in a forward pass."""

    def __init__(self):
        self.entries = []

    def record(self, entry):
        self.entries.append(entry)

    def directions(self):
        """All (query base modality, key base modality) pairs present."""
        out = set()
        for e in self.entries:
            for _, base, _, _ in e.key_spans:
                out.add((e.query_base, base))
        return sorted(out)

    def blocks(self, q_base, k_base):
        """Yield (entry, col_start, col_end) per stored map whose key span
        covers base modality ``k_base`` under query base ``q_base``."""
        found = False
        for e in self.entries:
            if e.query_base != q_base:
                continue
            for _, base, start, end in e.key_spans:
                if base == k_base:
                    found = True
                    yield e, start, end
        if not found:
            from .errors import ExplanationError
            raise ExplanationError(
                f"no attention for direction {q_base}->{k_base}; "
                f"available: {self.directions()}")

    def to_json(self, record_index):
        """Spec export: one record's maps keyed by base modality pair."""
        doc = {}
        for e in self.entries:
            for _, base, start, end in e.key_spans:
                key = (f"q={e.query_base}|k={base}"
                       f"|layer={e.layer}|head={e.head}")
                mat = e.weights[record_index, :, start:end]
                doc[key] = {"dims": list(mat.shape),
                            "weights": [float(x) for x in mat.reshape(-1)]}
        return json.dumps(doc, sort_keys=True)


class Attention:
    """Multi-head scaled dot-product attention over masked keys."""

    def __init__(self, store, name, config, rng):
        h = config.hidden
        self.heads = config.heads
        self.d_head = h // config.heads
        self.wq = Linear(store, f"{name}.wq", h, h, rng)
        self.wk = Linear(store, f"{name}.wk", h, h, rng)
        self.wv = Linear(store, f"{name}.wv", h, h, rng)
        self.wo = Linear(store, f"{name}.wo", h, h, rng)
        self.scale = 1.0 / np.sqrt(self.d_head)

    def __call__(self, q_states, kv_states, key_mask, capture=None):
        """capture, when given, is a callable(head, probs_array)."""
        q = self.wq(q_states)
        k = self.wk(kv_states)
        v = self.wv(kv_states)
        ctx_heads = []
        for head in range(self.heads):
            lo, hi = head * self.d_head, (head + 1) * self.d_head
            if self.heads == 1:
                qh, kh, vh = q, k, v
            else:
                qh = T.slice_axis(q, q.ndim - 1, lo, hi)
                kh = T.slice_axis(k, k.ndim - 1, lo, hi)
                vh = T.slice_axis(v, v.ndim - 1, lo, hi)
            scores = T.mul(T.matmul(qh, T.transpose_last2(kh)), self.scale)
            probs = T.attn_softmax(scores, key_mask)
            if capture is not None:
                capture(head, probs.data.copy())
            ctx_heads.append(T.matmul(probs, vh))
        ctx = ctx_heads[0] if self.heads == 1 else T.concat(ctx_heads, axis=2)
        return self.wo(ctx)


class FeedForward:
    def __init__(self, store, name, config, rng):
        h, m = config.hidden, config.ffn_mult
        self.lin1 = Linear(store, f"{name}.lin1", h, h * m, rng)
        self.lin2 = Linear(store, f"{name}.lin2", h * m, h, rng)

    def __call__(self, x):
        return self.lin2(T.gelu(self.lin1(x)))


class _Dropout:
    def __init__(self, p):
        self.p = p

    def __call__(self, x, rng, training):
        return T.dropout(x, self.p, rng, training)


class EncoderLayer:
    def __init__(self, store, name, config, rng):
        self.ln1 = LayerNorm(store, f"{name}.ln1", config.hidden)
        self.attn = Attention(store, f"{name}.attn", config, rng)
        self.ln2 = LayerNorm(store, f"{name}.ln2", config.hidden)
        self.ffn = FeedForward(store, f"{name}.ffn", config, rng)
        self.drop = _Dropout(config.dropout)

    def __call__(self, x, mask, rng, training, capture=None):
        normed = self.ln1(x)
        attn_out = self.attn(normed, normed, mask, capture=capture)
        x = T.add(x, self.drop(attn_out, rng, training))
        x = T.add(x, self.drop(self.ffn(self.ln2(x)), rng, training))
        return x


class Encoder:
    """Per-modality transformer encoder with learned positions.

    Outputs are zeroed at masked positions, so an absent (all-pad) modality
    encodes to exact zero vectors.
    """

    def __init__(self, store, name, config, max_len, rng):
        self.config = config
        self.max_len = max_len
        self.tok = Embedding(store, f"{name}.tok_emb", VOCAB_SIZE,
                             config.hidden, rng)
        self.pos = Embedding(store, f"{name}.pos_emb", max_len,
                             config.hidden, rng)
        self.layers = [EncoderLayer(store, f"{name}.layer{i}", config, rng)
                       for i in range(config.layers)]
        self.ln_final = LayerNorm(store, f"{name}.ln_final", config.hidden)
        self.drop = _Dropout(config.dropout)

    def __call__(self, ids, mask, rng, training=False, capture=None):
        if ids.shape != mask.shape:
            raise ShapeError(f"ids {ids.shape} vs mask {mask.shape}")
        if ids.shape[1] > self.max_len:
            raise ShapeError(
                f"sequence length {ids.shape[1]} exceeds max_len {self.max_len}")
        x = T.add(self.tok(ids), T.embedding(self.pos.table,
                                             np.arange(ids.shape[1])))
        x = self.drop(x, rng, training)
        for i, layer in enumerate(self.layers):
            sink = None
            if capture is not None:
                sink = lambda head, probs, i=i: capture(i, head, probs)
            x = layer(x, mask, rng, training, capture=sink)
        x = self.ln_final(x)
        # zero out padded positions; absent modalities become all-zero
        return T.mul_array(x, mask[:, :, None].astype(x.dtype))


class DecoderLayer:
    def __init__(self, store, name, config, rng):
        self.cross_residual = config.cross_residual
        self.ln1 = LayerNorm(store, f"{name}.ln1", config.hidden)
        self.self_attn = Attention(store, f"{name}.self_attn", config, rng)
        self.ln2 = LayerNorm(store, f"{name}.ln2", config.hidden)
        self.cross_attn = Attention(store, f"{name}.cross_attn", config, rng)
        self.ln3 = LayerNorm(store, f"{name}.ln3", config.hidden)
        self.ffn = FeedForward(store, f"{name}.ffn", config, rng)
        self.drop = _Dropout(config.dropout)

    def __call__(self, x, q_mask, kv, kv_mask, rng, training,
                 capture_self=None, capture_cross=None):
        normed = self.ln1(x)
        self_out = self.self_attn(normed, normed, q_mask, capture=capture_self)
        x = T.add(x, self.drop(self_out, rng, training))
        cross_out = self.cross_attn(self.ln2(x), kv, kv_mask,
                                    capture=capture_cross)
        cross_out = self.drop(cross_out, rng, training)
        # replace semantics: the sublayer output stands alone, so the
        # stream's content comes from the attended modality, not the query
        x = T.add(x, cross_out) if self.cross_residual else cross_out
        x = T.add(x, self.drop(self.ffn(self.ln3(x)), rng, training))
        return x


class Decoder:
    """Cross-attention decoder: query stream attends a key/value stream
    (possibly a concatenation of several modalities)."""

    def __init__(self, store, name, config, rng):
        self.config = config
        self.layers = [DecoderLayer(store, f"{name}.layer{i}", config, rng)
                       for i in range(config.layers)]
        self.ln_final = LayerNorm(store, f"{name}.ln_final", config.hidden)

    def __call__(self, q_states, q_mask, kv_states, kv_mask, rng,
                 training=False, capture_self=None, capture_cross=None):
        if kv_mask.shape[1] == 0:
            raise InferenceError("decoder key set is empty and no sentinel "
                                 "[CLS] position exists")
        guarded = kv_mask
        empty_rows = kv_mask.sum(axis=1) == 0
        if empty_rows.any():
            # sentinel guard: fully-absent key sets attend the zeroed [CLS]
            guarded = kv_mask.copy()
            guarded[empty_rows, 0] = 1
        x = q_states
        for i, layer in enumerate(self.layers):
            sink_s = sink_c = None
            if capture_self is not None:
                sink_s = lambda head, probs, i=i: capture_self(i, head, probs)
            if capture_cross is not None:
                sink_c = lambda head, probs, i=i: capture_cross(i, head, probs)
            x = layer(x, q_mask, kv_states, guarded, rng, training,
                      capture_self=sink_s, capture_cross=sink_c)
        x = self.ln_final(x)
        return T.mul_array(x, q_mask[:, :, None].astype(x.dtype))


class MlmHead:
    def __init__(self, store, name, hidden, rng):
        self.proj = Linear(store, name, hidden, VOCAB_SIZE, rng)

    def __call__(self, states):
        return self.proj(states)


class ClassifierHead:
    """Linear head over concatenated [CLS] vectors of registered sources."""

    def __init__(self, store, name, hidden, n_sources, n_classes, rng):
        self.n_sources = n_sources
        self.proj = Linear(store, name, hidden * n_sources, n_classes, rng)

    def __call__(self, cls_vectors):
        if len(cls_vectors) != self.n_sources:
            raise ConfigError(
                f"classifier registered {self.n_sources} sources, "
                f"got {len(cls_vectors)}")
        feats = (cls_vectors[0] if self.n_sources == 1
                 else T.concat(cls_vectors, axis=1))
        return self.proj(feats)


def cls_vector(states, ndim_check=3):
    """Extract position-0 ([CLS]) vectors: [B, L, H] -> [B, H]."""
    sliced = T.slice_axis(states, 1, 0, 1)
    return T.reshape(sliced, (states.shape[0], states.shape[2]))


def mask_for_mlm(ids, attn_mask, mask_prob, rng):
    """BERT-style corruption: select non-special positions with
    ``mask_prob``; 80% -> [MASK], 10% -> random residue, 10% unchanged.
    Returns (corrupted ids, labels) with -100 at unselected positions."""
    if not (0.0 <= mask_prob < 1.0):
        raise ConfigError(f"mask_prob must be in [0, 1), got {mask_prob}")
    ids = np.asarray(ids)
    candidates = (np.asarray(attn_mask) == 1) & (ids >= N_SPECIALS)
    if mask_prob == 0.0:
        return ids.copy(), np.full(ids.shape, -100, dtype=np.int64)
    selected = candidates & (rng.random(ids.shape) < mask_prob)
    action = rng.random(ids.shape)
    random_residues = rng.integers(N_SPECIALS, VOCAB_SIZE, size=ids.shape)
    corrupted = ids.copy()
    corrupted[selected & (action < 0.8)] = MASK
    swap = selected & (action >= 0.8) & (action < 0.9)
    corrupted[swap] = random_residues[swap]
    labels = np.where(selected, ids, -100).astype(np.int64)
    return corrupted, labels
