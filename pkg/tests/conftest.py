"""Shared numeric oracles for the test suite."""

import numpy as np
import pytest

from tcrlab.tensor import ComputeTape, Tensor


def forward_value(build, arrays):
    """Evaluate build(*tensors) without taping and return the scalar value."""
    tensors = [Tensor(a, dtype=np.float64) for a in arrays]
    return float(build(*tensors).data)


def numeric_grad(build, arrays, index, h=1e-4):
    """Central-difference gradient of a scalar function w.r.t. arrays[index]."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[index]
    g = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = forward_value(build, base)
        flat[i] = orig - h
        down = forward_value(build, base)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return g


def max_rel_err(analytic, numeric, floor=1e-8):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def assert_grads_match(build, arrays, tol=1e-4):
    """Tape the scalar-valued build, then compare each input gradient
    against 64-bit central finite differences."""
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True,
                      dtype=np.float64) for a in arrays]
    with ComputeTape() as tape:
        out = build(*tensors)
        tape.backward(out)
    for idx, t in enumerate(tensors):
        assert t.grad is not None, f"input {idx} received no gradient"
        num = numeric_grad(build, arrays, idx)
        err = max_rel_err(t.grad, num)
        assert err < tol, f"input {idx}: max relative error {err:.3e} >= {tol}"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
