"""Numeric primitives shared by every other module.

Matrices are plain ``float64`` numpy arrays. Randomness comes from
:class:`RngStream`, a counter-based stream keyed by ``(master_seed, stream_id)``
so that any draw can be reproduced without replaying earlier draws.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

PROB_FLOOR = 1e-12


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def softmax_rows(logits) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction."""
    z = as_matrix(logits, "logits")
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite logits")
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_rows(logits) -> np.ndarray:
    z = as_matrix(logits, "logits")
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite logits")
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def log_sum_exp(values) -> float:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("log_sum_exp of empty input")
    m = v.max()
    if v.size == 1 or m == -np.inf:
        return float(m)
    return float(m + math.log(np.exp(v - m).sum()))


def finite_diff_grad(loss_fn: Callable[[np.ndarray], float], params, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``loss_fn`` at ``params``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    theta = np.array(params, dtype=np.float64)
    flat = theta.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(loss_fn(theta))
        flat[i] = orig - eps
        f_minus = float(loss_fn(theta))
        flat[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad.reshape(theta.shape)


def relative_error(analytic, numeric) -> float:
    """Norm-wise relative error, zero when both sides vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_stream_id(*parts: int) -> int:
    """Fold several integers into one 64-bit stream id."""
    acc = 0
    for p in parts:
        acc = splitmix64(acc ^ (int(p) & _MASK64))
    return acc


class RngStream:
    """Counter-based random stream (Philox-4x64) keyed by seed and stream id.

    Gaussian draws use Box-Muller on pairs of uniforms so the mapping from
    the underlying counter sequence to normals is fixed by this module.
    """

    def __init__(self, master_seed: int, stream_id: int = 0):
        self.master_seed = int(master_seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        key = np.array([self.master_seed, self.stream_id], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        u = self._gen.random(size)
        return low + (high - low) * u

    def normal(self, size=None, sigma: float = 1.0):
        n = 1 if size is None else int(np.prod(size))
        u1 = self._gen.random(n)
        u2 = self._gen.random(n)
        z = np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)
        z = sigma * z
        if size is None:
            return float(z[0])
        return z.reshape(size)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in the closed range [low, high]."""
        return self._gen.integers(low, high, size=size, endpoint=True)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
