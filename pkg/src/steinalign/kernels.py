"""Radial kernels (RBF, IMQ) and the derivatives the Stein kernel needs.

Both families are functions of the squared distance ``r = |x - x'|^2``::

    RBF  k = exp(-r / (2 s^2))
    IMQ  k = (1 + r / (2 s^2)) ** -0.5

so every derivative follows from the radial profile and its first three
derivatives in ``r``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateData, DimMismatch

FAMILIES = ("rbf", "imq")


@dataclass(frozen=True)
class KernelSpec:
    family: str = "rbf"
    bandwidth: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        if not (np.isfinite(self.bandwidth) and self.bandwidth > 0):
            raise ValueError("bandwidth must be finite and positive")

    def to_dict(self):
        return {"family": self.family, "bandwidth": self.bandwidth}


def profile(spec: KernelSpec, r, order: int = 3):
    """``(phi, phi', phi'', phi''')`` of the radial profile at squared distance ``r``."""
    r = np.asarray(r, dtype=np.float64)
    a = 1.0 / (2.0 * spec.bandwidth**2)
    if spec.family == "rbf":
        k = np.exp(-a * r)
        return k, -a * k, a * a * k, -(a**3) * k
    t = 1.0 + a * r
    k = t**-0.5
    k3 = k / t
    k5 = k3 / t
    return k, -0.5 * a * k3, 0.75 * a * a * k5, -1.875 * a**3 * k5 / t


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimMismatch(f"point shapes differ: {x.shape} vs {y.shape}")
    return x, y


def kernel_eval(spec: KernelSpec, x, y) -> float:
    x, y = _pair(x, y)
    diff = x - y
    return float(profile(spec, diff @ diff)[0])


def kernel_derivatives(spec: KernelSpec, x, y):
    """``(grad_x k, grad_y k, trace of the mixed Hessian d^2 k / dx dy)``."""
    x, y = _pair(x, y)
    diff = x - y
    r = float(diff @ diff)
    _, k1, k2, _ = profile(spec, r)
    gx = 2.0 * k1 * diff
    trace = -2.0 * x.size * k1 - 4.0 * k2 * r
    return gx, -gx, float(trace)


def sq_dists(x, y=None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = x if y is None else np.asarray(y, dtype=np.float64)
    diff = x[:, None, :] - y[None, :, :]
    return np.einsum("ijd,ijd->ij", diff, diff)


def gram_matrix(spec: KernelSpec, x, y=None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimMismatch("expected an n x d matrix")
    k = profile(spec, sq_dists(x, y))[0]
    if y is None:
        k = 0.5 * (k + k.T)
        np.fill_diagonal(k, 1.0)
    return k


def median_heuristic(x) -> float:
    """Median pairwise Euclidean distance divided by sqrt(2)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n < 2:
        raise DegenerateData("median heuristic needs at least two points")
    iu = np.triu_indices(n, k=1)
    dist = np.sqrt(sq_dists(x)[iu])
    med = float(np.median(dist))
    if med == 0.0:
        if np.all(dist == 0.0):
            raise DegenerateData("all points coincide")
        med = float(np.median(dist[dist > 0]))
    return med / np.sqrt(2.0)
