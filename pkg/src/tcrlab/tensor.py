"""Dense-tensor engine with reverse-mode automatic differentiation.

Design notes:

* ``Tensor`` wraps a C-contiguous float32/float64 numpy buffer.  Data is
  never mutated after an op records it; gradients accumulate by
  out-of-place addition, which makes aliasing between grad buffers safe.
* Ops record onto the innermost active ``ComputeTape`` (a thread-local
  stack), only when at least one input requires gradients.  Running ops
  with no active tape is the inference path.
* There is no general broadcasting: shapes must match exactly except for
  the documented trailing-dimension bias case in :func:`add`.  Mismatches
  raise :class:`ShapeError` naming both shapes.
"""

from __future__ import annotations

import threading

import numpy as np

from . import kernels as K
from .errors import ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        # out-of-place: grad buffers may be views of other grads
        self.grad = g if self.grad is None else self.grad + g

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


class _TapeNode:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output, inputs, backward_fn):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


_tls = threading.local()


def _tape_stack():
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class ComputeTape:
    """Ordered record of ops for one forward pass, confined to one thread.

    ``backward`` replays the tape in reverse; nodes whose output received
    no gradient are skipped, so each node is visited at most once.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self, "tapes must unwind in LIFO order"
        return False

    def record(self, output, inputs, backward_fn):
        self.nodes.append(_TapeNode(output, inputs, backward_fn))

    def backward(self, root, seed_grad=None):
        if seed_grad is None:
            seed_grad = np.ones_like(root.data)
        root.accumulate_grad(np.asarray(seed_grad, dtype=root.data.dtype))
        for node in reversed(self.nodes):
            gout = node.output.grad
            if gout is None:
                continue
            grads = node.backward_fn(gout)
            for inp, g in zip(node.inputs, grads):
                if g is not None:
                    inp.accumulate_grad(g)


def _maybe_record(out, inputs, backward_fn):
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, inputs, backward_fn)
    return out


def _result(data, *inputs):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.grad = None
    return out


# ---------------------------------------------------------------------------
# ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; operands of equal ndim (2..4) with equal batch dims."""
    ad, bd = a.data, b.data
    if ad.ndim != bd.ndim or ad.ndim < 2 or ad.ndim > 4 \
            or ad.shape[-1] != bd.shape[-2] or ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} x {bd.shape}")
    out = _result(np.matmul(ad, bd), a, b)

    def backward(g):
        ga = np.matmul(g, bd.swapaxes(-1, -2))
        gb = np.matmul(ad.swapaxes(-1, -2), g)
        return ga, gb

    return _maybe_record(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum.  ``b`` may also broadcast as a trailing bias: any
    shape equal to a trailing suffix of ``a.shape`` (e.g. [H] or [L, H])."""
    ad, bd = a.data, b.data
    if ad.shape == bd.shape:
        lead = 0
    elif bd.ndim < ad.ndim and ad.shape[ad.ndim - bd.ndim:] == bd.shape:
        lead = ad.ndim - bd.ndim
    else:
        raise ShapeError(f"add: incompatible shapes {ad.shape} + {bd.shape}")
    out = _result(ad + bd, a, b)

    def backward(g):
        gb = g.sum(axis=tuple(range(lead))) if lead else g
        return g, gb

    return _maybe_record(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub: incompatible shapes {a.data.shape} - {b.data.shape}")
    out = _result(a.data - b.data, a, b)
    return _maybe_record(out, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product with an equal-shape tensor or a python scalar."""
    if isinstance(b, Tensor):
        if a.data.shape != b.data.shape:
            raise ShapeError(f"mul: incompatible shapes {a.data.shape} * {b.data.shape}")
        out = _result(a.data * b.data, a, b)
        ad, bd = a.data, b.data
        return _maybe_record(out, (a, b), lambda g: (g * bd, g * ad))
    s = float(b)
    out = _result(a.data * s, a)
    return _maybe_record(out, (a,), lambda g: (g * s,))


def mul_array(a: Tensor, arr: np.ndarray) -> Tensor:
    """Product with a constant array (no gradient for the array)."""
    out = _result(a.data * arr, a)
    return _maybe_record(out, (a,), lambda g: (g * arr,))


def reshape(a: Tensor, shape) -> Tensor:
    out = _result(a.data.reshape(shape), a)
    orig = a.data.shape
    return _maybe_record(out, (a,), lambda g: (g.reshape(orig),))


def transpose_last2(a: Tensor) -> Tensor:
    out = _result(np.ascontiguousarray(a.data.swapaxes(-1, -2)), a)
    return _maybe_record(out, (a,), lambda g: (g.swapaxes(-1, -2),))


def concat(tensors, axis) -> Tensor:
    datas = [t.data for t in tensors]
    out_data = np.concatenate(datas, axis=axis)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = any(t.requires_grad for t in tensors)
    out.grad = None
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(sizes))
        )

    return _maybe_record(out, tuple(tensors), backward)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = _result(np.ascontiguousarray(a.data[idx]), a)
    shape = a.data.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _maybe_record(out, (a,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: table [V, H] indexed by integer ids of any shape."""
    ids = np.asarray(ids)
    out = _result(table.data[ids], table)
    vocab, width = table.data.shape

    def backward(g):
        gt = np.zeros((vocab, width), dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, width))
        return (gt,)

    return _maybe_record(out, (table,), backward)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Numerically stabilised softmax over the last dimension."""
    if x.data.shape[-1] < 1:
        raise ShapeError(f"softmax: empty last dimension in {x.data.shape}")
    if np.isnan(x.data).any():
        raise FloatingPointError("softmax: NaN in input")
    mask = np.ones(x.data.shape, dtype=np.uint8)
    return _softmax_impl(x, mask)


def attn_softmax(scores: Tensor, key_mask: np.ndarray) -> Tensor:
    """Softmax over the last dim with masked keys pinned to exactly 0.

    ``key_mask`` is [B, Lk] (0/1) and broadcasts over any middle dims of
    ``scores`` [B, ..., Lk].  Fully masked rows yield all-zero rows.
    """
    sd = scores.data
    if key_mask.shape[0] != sd.shape[0] or key_mask.shape[-1] != sd.shape[-1]:
        raise ShapeError(
            f"attn_softmax: mask {key_mask.shape} does not span scores {sd.shape}")
    expand = (key_mask.shape[0],) + (1,) * (sd.ndim - 2) + (key_mask.shape[-1],)
    mask = np.broadcast_to(key_mask.reshape(expand).astype(np.uint8), sd.shape)
    return _softmax_impl(scores, np.ascontiguousarray(mask))


def _softmax_impl(x: Tensor, mask: np.ndarray) -> Tensor:
    sd = x.data
    rows = sd.reshape(-1, sd.shape[-1])
    mrows = mask.reshape(-1, sd.shape[-1])
    probs = K.masked_softmax_fwd(rows, mrows)
    out = _result(probs.reshape(sd.shape), x)

    def backward(g):
        g2 = np.ascontiguousarray(g.reshape(-1, sd.shape[-1]))
        dx = K.softmax_bwd(probs, g2)
        return (dx.reshape(sd.shape),)

    return _maybe_record(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each last-dim slice to zero mean / unit variance, then affine."""
    width = x.data.shape[-1]
    if gain.data.shape != (width,) or bias.data.shape != (width,):
        raise ShapeError(
            f"layer_norm: gain {gain.data.shape} / bias {bias.data.shape} "
            f"do not match last dim of {x.data.shape}")
    rows = x.data.reshape(-1, width)
    y, mu, rstd = K.layernorm_fwd(rows, gain.data, bias.data, eps)
    out = _result(y.reshape(x.data.shape), x, gain, bias)

    def backward(g):
        g2 = np.ascontiguousarray(g.reshape(-1, width))
        dx, dgain, dbias = K.layernorm_bwd(rows, mu, rstd, gain.data, g2)
        return dx.reshape(x.data.shape), dgain, dbias

    return _maybe_record(out, (x, gain, bias), backward)


def gelu(x: Tensor) -> Tensor:
    out = _result(K.gelu_fwd(x.data), x)
    xd = x.data
    return _maybe_record(out, (x,), lambda g: (K.gelu_bwd(xd, g),))


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype)
    keep /= np.asarray(1.0 - p, dtype=x.data.dtype)
    return mul_array(x, keep)


def cross_entropy(logits: Tensor, targets, ignore_index: int = -100) -> Tensor:
    """Mean negative log-likelihood over rows whose target is not ignored.

    Returns a scalar tensor; the empty-mean convention is 0.
    """
    ld = logits.data
    n, c = ld.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n,):
        raise ShapeError(f"cross_entropy: targets {targets.shape} vs logits {ld.shape}")
    kept = targets != ignore_index
    bad = kept & ((targets < 0) | (targets >= c))
    if bad.any():
        raise IndexError(
            f"cross_entropy: target {int(targets[bad][0])} out of range [0, {c})")
    n_kept = int(kept.sum())
    if n_kept == 0:
        out = _result(np.zeros((), dtype=ld.dtype), logits)
        return _maybe_record(out, (logits,),
                             lambda g: (np.zeros_like(ld),))
    m = ld.max(axis=1, keepdims=True)
    z = ld - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    nll = -logp[np.arange(n), targets % c]  # % keeps ignored rows in range
    loss = nll[kept].mean(dtype=ld.dtype)
    out = _result(np.asarray(loss, dtype=ld.dtype), logits)
    probs = np.exp(logp)

    def backward(g):
        dl = probs.copy()
        dl[np.arange(n), targets % c] -= 1.0
        dl[~kept] = 0.0
        dl *= np.asarray(g, dtype=ld.dtype) / n_kept
        return (dl,)

    return _maybe_record(out, (logits,), backward)


def sum_(x: Tensor) -> Tensor:
    out = _result(np.asarray(x.data.sum(dtype=x.data.dtype)), x)
    shape = x.data.shape
    return _maybe_record(out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_(x: Tensor) -> Tensor:
    n = x.data.size
    out = _result(np.asarray(x.data.mean(dtype=x.data.dtype)), x)
    shape = x.data.shape
    return _maybe_record(
        out, (x,), lambda g: (np.broadcast_to(g / n, shape).astype(x.data.dtype),))
