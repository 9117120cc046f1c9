"""Deterministic float64 numerics shared by every other module.

Vectors and matrices are plain ``numpy.ndarray`` objects of dtype float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, NamedTuple

import numpy as np
from scipy.special import expit

__all__ = [
    "InvalidValueError",
    "PowerIterationResult",
    "SeededRng",
    "as_finite",
    "gate_sigmoid",
    "power_iteration",
    "sigmoid",
    "spectral_norm",
    "tanh_elem",
    "vec_norm",
]


class InvalidValueError(ValueError):
    """Raised when a numeric input contains NaN or infinity."""


def as_finite(x: Any, name: str = "input") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidValueError(f"{name} contains non-finite values")
    return arr


# Largest/smallest doubles strictly inside (0, 1).
SIGMOID_HI = 1.0 - 2.0**-53
SIGMOID_LO = float(np.finfo(np.float64).tiny)


def sigmoid(x: Any) -> np.ndarray:
    """Logistic function, clamped so saturated inputs stay strictly inside (0, 1)."""
    return gate_sigmoid(as_finite(x))


def gate_sigmoid(a: np.ndarray) -> np.ndarray:
    # unchecked variant: callers guarantee finite input
    return np.clip(expit(a), SIGMOID_LO, SIGMOID_HI)


def tanh_elem(x: Any) -> np.ndarray:
    return np.tanh(as_finite(x))


def vec_norm(x: Any, kind: str = "L2") -> float:
    """L2 or infinity norm of a vector."""
    x = as_finite(x).ravel()
    if kind not in ("L2", "Linf"):
        raise ValueError(f"unknown norm kind {kind!r}")
    peak = float(np.max(np.abs(x))) if x.size else 0.0
    if kind == "Linf" or peak == 0.0:
        return peak
    # scale first so tiny vectors do not underflow to a zero norm
    return peak * float(np.linalg.norm(x / peak))


class PowerIterationResult(NamedTuple):
    sigma: float
    u: np.ndarray  # left singular vector estimate
    v: np.ndarray  # right singular vector estimate
    converged: bool
    iterations: int


def power_iteration(
    m: np.ndarray,
    max_iters: int = 100,
    tol: float = 1e-9,
    v0: np.ndarray | None = None,
) -> PowerIterationResult:
    """Estimate the largest singular value of ``m`` by power iteration on m^T m.

    ``v0`` warm-starts the right singular vector; pass the ``v`` of a previous
    result when the matrix changes slowly between calls. Iteration stops once
    the relative change of the estimate drops below ``tol``.
    """
    m = as_finite(m, "matrix")
    if m.ndim != 2 or m.size == 0:
        raise ValueError("spectral norm needs a nonempty 2-D matrix")
    if max_iters < 1 or not tol > 0:
        raise ValueError("max_iters must be >= 1 and tol > 0")
    rows, cols = m.shape
    if not np.any(m):
        return PowerIterationResult(0.0, np.zeros(rows), np.zeros(cols), True, 0)

    if v0 is None or v0.shape != (cols,) or not np.any(v0):
        v = np.full(cols, 1.0 / np.sqrt(cols))
    else:
        v = v0 / np.linalg.norm(v0)
    u = m @ v
    sigma = np.linalg.norm(u)
    if sigma == 0.0:
        # Start vector orthogonal to the row space; fall back to a deterministic
        # vector with no symmetry against the uniform start.
        v = np.arange(1.0, cols + 1.0)
        v /= np.linalg.norm(v)
        u = m @ v
        sigma = np.linalg.norm(u)
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        u = u / sigma
        w = m.T @ u
        v = w / np.linalg.norm(w)
        u = m @ v
        new_sigma = np.linalg.norm(u)
        if abs(new_sigma - sigma) <= tol * new_sigma:
            sigma = new_sigma
            converged = True
            break
        sigma = new_sigma
    return PowerIterationResult(float(sigma), u / sigma, v, converged, it)


def spectral_norm(m: Any, max_iters: int = 100, tol: float = 1e-9) -> float:
    """Largest singular value of ``m`` (the L2-induced matrix norm)."""
    return power_iteration(np.asarray(m, dtype=np.float64), max_iters, tol).sigma


@dataclass
class SeededRng:
    """Explicit PCG64 stream; no global RNG state is ever touched.

    ``spawn(key)`` derives an independent child stream from the seed and an
    integer key, so sub-tasks get reproducible randomness regardless of the
    order in which they run.
    """

    seed: int
    key: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(self.seed)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def spawn(self, key: int) -> SeededRng:
        return SeededRng(self.seed, self.key + (int(key),))

    def uniform(self, low: float = 0.0, high: float = 1.0, size: Any = None) -> np.ndarray:
        return self.generator.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size: Any = None) -> np.ndarray:
        return self.generator.normal(loc, scale, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def get_state(self) -> dict:
        state = self.generator.bit_generator.state
        return {"seed": self.seed, "key": list(self.key), "bit_generator": state}

    @classmethod
    def from_state(cls, state: dict) -> SeededRng:
        rng = cls(state["seed"], tuple(state["key"]))
        rng.generator.bit_generator.state = state["bit_generator"]
        return rng
