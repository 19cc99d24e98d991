"""Shared test oracles: central finite differences and gradient checks."""

from __future__ import annotations

import numpy as np

from attention_mamba.tensor_core import Tensor, gradients


def numerical_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar-valued f at x (64-bit)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + eps
        fp = f(x)
        x[i] = orig - eps
        fm = f(x)
        x[i] = orig
        g[i] = (fp - fm) / (2.0 * eps)
        it.iternext()
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max abs difference relative to the largest magnitude present."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def gradcheck(op, arrays, tol: float = 1e-6, eps: float = 1e-5, seed: int = 0) -> float:
    """Check tape gradients of sum(op(*xs) * W) against finite differences.

    W is a fixed random projection so every output element contributes with
    a distinct weight. Returns the worst relative error over all inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    rng = np.random.default_rng(seed)
    probe = {}

    def scalar(tensors):
        out = op(*tensors)
        if "w" not in probe:
            probe["w"] = rng.standard_normal(out.data.shape)
        return (out * Tensor(probe["w"])).sum()

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    analytic = gradients(scalar(leaves), leaves)

    worst = 0.0
    for idx in range(len(arrays)):
        def f(v, idx=idx):
            args = [Tensor(v if j == idx else arrays[j]) for j in range(len(arrays))]
            return scalar(args).item()

        numeric = numerical_grad(f, arrays[idx], eps=eps)
        err = rel_error(analytic[idx], numeric)
        worst = max(worst, err)
        assert err < tol, f"input {idx}: analytic vs finite-difference rel err {err:.3e} >= {tol}"
    return worst
