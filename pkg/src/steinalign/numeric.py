"""Dense linear algebra, randomness and finite differences.

Matrices are plain ``float64`` numpy arrays. Everything here is a thin,
contract-checked layer over numpy so that the rest of the package can rely
on a fixed set of failure modes.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DimMismatch, NoConverge, NonFiniteEval, NotSpd

SYM_TOL = 1e-8
MAX_JITTER_ESCALATIONS = 6


def as_matrix(x, name="x") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise DimMismatch(f"{name} must be 2-D, got shape {a.shape}")
    return a


def as_vector(x, name="x") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 1:
        raise DimMismatch(f"{name} must be 1-D, got shape {a.shape}")
    return a


def exact_sum(values) -> float:
    """Correctly rounded sum; independent of element order."""
    return math.fsum(np.ravel(np.asarray(values, dtype=np.float64)).tolist())


def exact_mean(values) -> float:
    a = np.ravel(np.asarray(values, dtype=np.float64))
    return exact_sum(a) / a.size


# ---------------------------------------------------------------- randomness


def _key_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


def make_rng(seed: int, *path) -> np.random.Generator:
    """Counter-based (Philox) generator for ``seed`` and an optional named path.

    ``make_rng(0, "init", 3)`` and ``make_rng(0, "data")`` are independent
    streams; the same arguments always give the same stream.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key_int(k) for k in path))
    return np.random.Generator(np.random.Philox(ss))


def child_rng(rng: np.random.Generator, *path) -> np.random.Generator:
    """Derive a child stream from ``rng`` without disturbing sibling streams.

    Consumes one 64-bit draw from the parent.
    """
    seed = int(rng.integers(0, 2**63 - 1))
    return make_rng(seed, *path)


# ---------------------------------------------------------------- SPD algebra


@dataclass(frozen=True)
class SpdFactor:
    lower: np.ndarray
    logdet: float
    jitter: float = 0.0

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def reconstruct(self) -> np.ndarray:
        return self.lower @ self.lower.T


def _check_symmetric(a: np.ndarray) -> None:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimMismatch(f"expected a square matrix, got shape {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if np.max(np.abs(a - a.T), initial=0.0) > SYM_TOL * scale:
        raise DimMismatch("matrix is not symmetric")


def spd_factor(a, jitter: float = 0.0) -> SpdFactor:
    """Cholesky factor of ``a + jitter*I`` with bounded jitter escalation.

    A zero ``jitter`` that fails is replaced by ``1e-9 * trace(a) / d`` before
    the x10 escalation starts.
    """
    a = np.array(a, dtype=np.float64)
    _check_symmetric(a)
    d = a.shape[0]
    if not np.all(np.isfinite(a)):
        raise NotSpd("matrix has non-finite entries")
    a = 0.5 * (a + a.T)
    eye = np.eye(d)
    base = 1e-9 * max(float(np.trace(a)), 0.0) / d
    if base == 0.0:
        base = 1e-9
    current = float(jitter)
    for attempt in range(MAX_JITTER_ESCALATIONS + 1):
        try:
            lower = np.linalg.cholesky(a + current * eye if current else a)
        except np.linalg.LinAlgError:
            lower = None
        if lower is not None and np.all(np.diag(lower) > 0):
            logdet = 2.0 * float(np.sum(np.log(np.diag(lower))))
            return SpdFactor(lower, logdet, current)
        if attempt == MAX_JITTER_ESCALATIONS:
            break
        current = base if current == 0.0 else current * 10.0
    raise NotSpd(f"Cholesky failed after {MAX_JITTER_ESCALATIONS} jitter escalations (last jitter {current:g})")


def spd_solve(f: SpdFactor, b) -> np.ndarray:
    """Solve ``(A + jitter*I) x = b``; ``b`` may be a vector or a column block."""
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != f.dim:
        raise DimMismatch(f"rhs has {b.shape[0]} rows, factor is {f.dim}x{f.dim}")
    from scipy.linalg import solve_triangular

    y = solve_triangular(f.lower, b, lower=True)
    return solve_triangular(f.lower.T, y, lower=False)


def sym_eigen(a) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues in ascending order and orthonormal eigenvectors (columns)."""
    a = np.array(a, dtype=np.float64)
    _check_symmetric(a)
    try:
        w, v = np.linalg.eigh(0.5 * (a + a.T))
    except np.linalg.LinAlgError as exc:
        raise NoConverge(str(exc)) from exc
    return w, v


# ---------------------------------------------------------------- differences


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteEval(f"non-finite evaluation at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(a, b, floor: float = 1e-12) -> float:
    """Max elementwise relative error with an absolute floor on the scale."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale)) if a.size else 0.0
