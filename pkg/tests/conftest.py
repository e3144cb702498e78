"""Shared fixtures and numeric helpers for the test suite."""

import numpy as np
import pytest

from codemoe.tensor import Tensor


def finite_diff_grad(fn, arrays, wrt, step=1e-5):
    """Central-finite-difference gradient of a scalar ``fn`` at float64.

    ``fn`` maps a list of Tensor inputs to a scalar Tensor; ``arrays`` are the
    float64 input values and ``wrt`` indexes the one to differentiate.
    """
    base = [a.astype(np.float64) for a in arrays]
    target = base[wrt]
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        bumped = [b.copy() for b in base]
        bumped[wrt][idx] += step
        hi = float(fn([Tensor(b, dtype=np.float64) for b in bumped]).data)
        bumped[wrt][idx] -= 2 * step
        lo = float(fn([Tensor(b, dtype=np.float64) for b in bumped]).data)
        grad[idx] = (hi - lo) / (2 * step)
        it.iternext()
    return grad


def analytic_grads(fn, arrays):
    """Backward-pass gradients of ``fn`` with respect to every input."""
    tensors = [Tensor(a.astype(np.float64), requires_grad=True, dtype=np.float64)
               for a in arrays]
    fn(tensors).backward()
    return [t.grad for t in tensors]


def assert_grads_match(fn, arrays, rtol=1e-4, step=1e-5):
    """Check backward() against central finite differences for each input."""
    got = analytic_grads(fn, arrays)
    for i in range(len(arrays)):
        want = finite_diff_grad(fn, arrays, i, step=step)
        scale = np.maximum(np.abs(want), 1.0)
        err = np.max(np.abs(got[i] - want) / scale)
        assert err < rtol, f"input {i}: max relative gradient error {err:.3g}"


@pytest.fixture
def rng():
    return np.random.default_rng(0)
