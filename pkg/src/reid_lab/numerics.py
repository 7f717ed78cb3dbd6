"""Stable softmax primitives, seeded random streams and a finite-difference checker."""
from __future__ import annotations

import hashlib
from typing import Callable

import numpy as np
from scipy.special import expit


def _check_logits(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim == 0 or z.shape[-1] == 0:
        raise ValueError("logits must be a non-empty vector (or a batch of vectors)")
    if not np.all(np.isfinite(z)):
        raise ValueError("logits contain non-finite entries")
    return z


def logsumexp(logits) -> np.ndarray:
    """Max-shifted log-sum-exp over the last axis."""
    z = _check_logits(logits)
    m = z.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True)))[..., 0]


def log_softmax(logits) -> np.ndarray:
    z = _check_logits(logits)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits) -> np.ndarray:
    z = _check_logits(logits)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softplus(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def sigmoid(x) -> np.ndarray:
    return expit(np.asarray(x, dtype=np.float64))


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    ``x`` may have any shape; the result has the same shape.
    """
    if not h > 0:
        raise ValueError(f"step size must be positive, got {h}")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(f(x))
        flat[i] = orig - h
        f_minus = float(f(x))
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            coord = tuple(int(c) for c in np.unravel_index(i, x.shape))
            raise FloatingPointError(f"non-finite function value when perturbing coordinate {coord}")
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad.reshape(x.shape)


def relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """Max absolute deviation scaled by the larger of the two gradients' max magnitude."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.shape != n.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    scale = max(floor, float(np.abs(a).max()), float(np.abs(n).max()))
    return float(np.abs(a - n).max() / scale)


class RngStream:
    """Deterministic counter-based (Philox) random stream.

    Sub-streams are keyed by a label, so the draws a component sees do not depend
    on how many draws other components made before it.
    """

    def __init__(self, seed: int, _path: str = ""):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.path = _path
        digest = hashlib.blake2b(f"{self.seed}|{_path}".encode(), digest_size=16).digest()
        key = int.from_bytes(digest, "little")
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def substream(self, label) -> "RngStream":
        path = f"{self.path}/{label}" if self.path else str(label)
        return RngStream(self.seed, path)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={self.path!r})"
