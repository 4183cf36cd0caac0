"""Stein operator, kernelized Stein discrepancy estimators and MMD.

For a radial kernel with profile ``phi(r)``, ``r = |x - y|^2`` and
``delta = x - y`` the Stein kernel collapses to

    u(x, y) = phi * s(x).s(y) + 2 phi' * delta.(s(y) - s(x)) - 2 d phi' - 4 phi'' r

which is what the dense and compiled paths evaluate.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import nnet
from ._pairs import stein_cross_sum, stein_self_sums
from .errors import DimMismatch, TooFewSamples
from .kernels import KernelSpec, kernel_derivatives, profile
from .numeric import exact_sum, spd_factor, spd_solve, sym_eigen


@dataclass(frozen=True)
class SteinEstimate:
    value: float
    u_variance: float
    std_error: float
    n: int
    m: int | None = None

    def to_record(self, kernel: KernelSpec | None = None, score_variant: str | None = None, seed=None) -> dict:
        rec = asdict(self)
        rec["kernel"] = kernel.to_dict() if kernel is not None else None
        rec["score_variant"] = score_variant
        rec["seed"] = seed
        return rec


def _scores(model, X, rng=None):
    return np.asarray(model.score(X, rng), dtype=np.float64)


def _check_points(X, model=None):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise DimMismatch("expected an n x d sample matrix")
    if model is not None and X.shape[1] != model.dim:
        raise DimMismatch(f"sample dim {X.shape[1]} != model dim {model.dim}")
    return X


# ---------------------------------------------------------------- pointwise


def stein_kernel_u(kernel: KernelSpec, model, x, y, rng=None) -> float:
    """``u_q(x, y)`` assembled term by term from the kernel derivatives."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimMismatch("points differ in dimension")
    sx, sy = _scores(model, np.stack([x, y]), rng)
    return stein_kernel_from_scores(kernel, x, sx, y, sy)


def stein_kernel_from_scores(kernel: KernelSpec, x, sx, y, sy) -> float:
    k = float(profile(kernel, float((x - y) @ (x - y)))[0])
    gx, gy, trace = kernel_derivatives(kernel, x, y)
    # the two cross terms are added first so swapping x and y is exact
    return float(k * (sx @ sy) + (sx @ gy + gx @ sy) + trace)


def apply_stein_operator(model, f: nnet.Mlp, x, rng=None) -> float:
    """``f(x).s_q(x) + div f(x)``; divergence by one reverse pass per output."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    d = x.shape[1]
    if f.in_dim != d or f.out_dim != d:
        raise DimMismatch(f"critic must map R^{d} to R^{d}")
    out, _ = nnet.mlp_forward(f, x)
    div = 0.0
    for i in range(d):
        _, tape = nnet.mlp_forward(f, x)
        up = np.zeros((1, d))
        up[0, i] = 1.0
        _, dx = nnet.mlp_backward(f, tape, up)
        div += dx[0, i]
    s = _scores(model, x, rng)[0]
    return float(out[0] @ s + div)


def stein_operator_values(model, f: nnet.Mlp, X, rng=None) -> np.ndarray:
    """Batched Stein operator via the forward Jacobian pass."""
    X = _check_points(X, model)
    out, div, _ = nnet.mlp_divergence(f, X)
    return np.sum(out * _scores(model, X, rng), axis=1) + div


# ---------------------------------------------------------------- dense Gram


def stein_gram_from_scores(kernel: KernelSpec, X, SX, Y=None, SY=None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    SX = np.asarray(SX, dtype=np.float64)
    if Y is None:
        Y, SY = X, SX
    delta = X[:, None, :] - Y[None, :, :]
    r = np.einsum("ijd,ijd->ij", delta, delta)
    k, k1, k2, _ = profile(kernel, r)
    ss = SX @ SY.T
    dw = np.einsum("ijd,jd->ij", delta, SY) - np.einsum("ijd,id->ij", delta, SX)
    return k * ss + 2.0 * k1 * dw - 2.0 * X.shape[1] * k1 - 4.0 * k2 * r


def stein_gram(kernel: KernelSpec, model, X, rng=None) -> np.ndarray:
    """n x n matrix of ``u_q(x_i, x_j)`` including the diagonal."""
    X = _check_points(X, model)
    G = stein_gram_from_scores(kernel, X, _scores(model, X, rng))
    return 0.5 * (G + G.T)


# ---------------------------------------------------------------- estimators


def ksd_from_scores(kernel: KernelSpec, X, S, m=None) -> SteinEstimate:
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < 2:
        raise TooFewSamples("the U-statistic needs at least two samples")
    off, sq, _ = stein_self_sums(kernel, X, S)
    npairs = n * (n - 1) // 2
    value = off / npairs
    if npairs > 1:
        var = max((sq - npairs * value * value) / (npairs - 1), 0.0)
    else:
        var = 0.0
    return SteinEstimate(value, var, math.sqrt(2.0 * var / n), n, m)


def ksd_u_statistic(kernel: KernelSpec, model, X, rng=None, m=None) -> SteinEstimate:
    """Unbiased off-diagonal mean of the Stein Gram matrix.

    ``u_variance`` is the sample variance of the off-diagonal entries and
    ``std_error = sqrt(2 u_variance / n)``.
    """
    X = _check_points(X, model)
    return ksd_from_scores(kernel, X, _scores(model, X, rng), m)


def ksd_v_from_scores(kernel: KernelSpec, X, S) -> float:
    n = np.asarray(X).shape[0]
    off, _, diag = stein_self_sums(kernel, X, S)
    return math.fsum([off, off, diag]) / (n * n)


def ksd_v_statistic(kernel: KernelSpec, model, X, rng=None) -> float:
    """Biased full mean of the Stein Gram matrix (diagonal included)."""
    X = _check_points(X, model)
    if X.shape[0] < 1:
        raise TooFewSamples("empty sample")
    return ksd_v_from_scores(kernel, X, _scores(model, X, rng))


def ksd_v_value_and_grad(kernel: KernelSpec, model, X, rng=None):
    """V-statistic and its gradient with respect to the sample rows.

    The score model's parameters are held fixed; only its dependence on the
    evaluation point enters through the score vector-Jacobian product.
    """
    X = _check_points(X, model)
    n, d = X.shape
    S, vjp = model.score_with_vjp(X, rng)
    delta = X[:, None, :] - X[None, :, :]
    r = np.einsum("ijd,ijd->ij", delta, delta)
    k, k1, k2, k3 = profile(kernel, r)
    ss = S @ S.T
    w = S[None, :, :] - S[:, None, :]
    dw = np.einsum("ijd,ijd->ij", delta, w)
    G = k * ss + 2.0 * k1 * dw - 2.0 * d * k1 - 4.0 * k2 * r
    value = exact_sum(G) / (n * n)
    # d u(x_a, x_j) / d s(x_a), summed over j
    ds = k @ S - 2.0 * np.einsum("ij,ijd->id", k1, delta)
    radial = k1 * ss + 2.0 * k2 * dw - 2.0 * d * k2 - 4.0 * k2 - 4.0 * k3 * r
    dx = 2.0 * np.einsum("ij,ijd->id", radial, delta) + 2.0 * np.einsum("ij,ijd->id", k1, w)
    grad = (2.0 / (n * n)) * (vjp(ds) + dx)
    return value, grad


def regularized_ksd(kernel: KernelSpec, model, X, lam: float, rng=None) -> float:
    """Tikhonov-filtered spectral KSD.

    With ``G/n = V diag(s) V^T`` (negative ``s`` clamped to 0) returns
    ``sum_i s_i^2 / (s_i + lam) * (1^T v_i)^2 / n``; ``lam = 0`` gives the
    V-statistic.
    """
    if lam < 0:
        raise ValueError("regularization must be non-negative")
    X = _check_points(X, model)
    n = X.shape[0]
    if n < 2:
        raise TooFewSamples("need at least two samples")
    G = stein_gram(kernel, model, X, rng)
    return regularized_ksd_from_gram(G, lam)


def regularized_ksd_from_gram(G, lam: float) -> float:
    n = G.shape[0]
    if lam == 0:
        return exact_sum(G) / (n * n)
    s, V = sym_eigen(G / n)
    s = np.maximum(s, 0.0)
    proj = V.sum(axis=0) ** 2
    filt = np.where(s > 0, s * s / (s + lam), 0.0)
    return exact_sum(filt * proj) / n


def regularized_ksd_dense(G, lam: float) -> float:
    """Direct ``1^T (G/n)(G/n + lam I)^{-1} (G/n) 1 / n`` for checking the filter."""
    n = G.shape[0]
    A = G / n
    one = np.ones(n)
    f = spd_factor(A + lam * np.eye(n))
    return float(one @ A @ spd_solve(f, A @ one)) / n


# ---------------------------------------------------------------- MMD


def rbf_kernel_fn(kernel: KernelSpec) -> Callable:
    from .kernels import gram_matrix

    def fn(A, B):
        return gram_matrix(kernel, A, B)

    fn.exact_pairs = None
    return fn


def stein_kernel_fn(kernel: KernelSpec, model, rng=None) -> Callable:
    """Stein kernel as a two-argument Gram evaluator (scores recomputed per call)."""

    def fn(A, B):
        A = _check_points(A, model)
        B = _check_points(B, model)
        return stein_gram_from_scores(kernel, A, _scores(model, A, rng), B, _scores(model, B, rng))

    def pair_sums(A, B=None):
        A = _check_points(A, model)
        SA = _scores(model, A, rng)
        if B is None:
            off, _, _ = stein_self_sums(kernel, A, SA)
            return 2.0 * off
        B = _check_points(B, model)
        return stein_cross_sum(kernel, A, SA, B, _scores(model, B, rng))

    fn.exact_pairs = pair_sums
    return fn


def _offdiag_sum(kernel_fn, A):
    fast = getattr(kernel_fn, "exact_pairs", None)
    if fast is not None:
        return fast(A)
    K = kernel_fn(A, A)
    return exact_sum(K) - exact_sum(np.diag(K))


def _cross_sum(kernel_fn, A, B):
    fast = getattr(kernel_fn, "exact_pairs", None)
    if fast is not None:
        return fast(A, B)
    return exact_sum(kernel_fn(A, B))


def mmd_u_statistic(kernel_fn: Callable, X, Y) -> float:
    """Unbiased squared MMD: off-diagonal XX and YY means, full XY mean."""
    X = _check_points(X)
    Y = _check_points(Y)
    n, r = X.shape[0], Y.shape[0]
    if n < 2 or r < 2:
        raise TooFewSamples("both samples need at least two points")
    xx = _offdiag_sum(kernel_fn, X) / (n * (n - 1))
    yy = _offdiag_sum(kernel_fn, Y) / (r * (r - 1))
    xy = _cross_sum(kernel_fn, X, Y) / (n * r)
    return math.fsum([xx, -2.0 * xy, yy])


def mmd_block_std_error(kernel_fn: Callable, X, Y, blocks: int = 10) -> float:
    """Standard error of ``mmd_u_statistic`` from disjoint row blocks."""
    X = _check_points(X)
    Y = _check_points(Y)
    xb = np.array_split(np.arange(X.shape[0]), blocks)
    yb = np.array_split(np.arange(Y.shape[0]), blocks)
    vals = np.array([mmd_u_statistic(kernel_fn, X[i], Y[j]) for i, j in zip(xb, yb)])
    # a block of size n/B has B times the variance of the full statistic (first order)
    return float(np.std(vals, ddof=1) / math.sqrt(blocks))


# ---------------------------------------------------------------- adversarial


def stein_objective_and_grads(model, critic: nnet.Mlp, X, S=None, rng=None):
    """Batch mean of the Stein operator, its critic-parameter gradients and input gradients.

    Input gradients exclude the score's own dependence on ``X``; callers that
    need it add ``J_s(x)^T f(x) / n`` themselves.
    """
    X = _check_points(X, model)
    n = X.shape[0]
    if S is None:
        S = _scores(model, X, rng)
    out, div, tape = nnet.mlp_divergence(critic, X)
    value = exact_sum(np.sum(out * S, axis=1) + div) / n
    grads, dx = nnet.mlp_divergence_backward(critic, tape, S / n, np.full(n, 1.0 / n))
    return value, grads, dx, out


def adversarial_stein_estimate(model, critic: nnet.Mlp, X, ascent_steps: int, critic_sgd: nnet.SgdState,
                               rng=None, history=None):
    """Ascend the batch Stein objective over the critic; return ``(value, critic)``.

    Weight decay in ``critic_sgd`` acts as the norm constraint on the critic.
    If ``history`` is a list it receives the objective before every step.
    """
    X = _check_points(X, model)
    if critic.in_dim != X.shape[1] or critic.out_dim != X.shape[1]:
        raise DimMismatch("critic must map the feature space to itself")
    S = _scores(model, X, rng)
    for _ in range(ascent_steps):
        value, grads, _, _ = stein_objective_and_grads(model, critic, X, S)
        if history is not None:
            history.append(value)
        params = nnet.sgd_step(critic_sgd, critic.params(), [-g for g in grads])
        critic = critic.with_params(params)
    value = stein_objective_and_grads(model, critic, X, S)[0]
    if history is not None:
        history.append(value)
    return value, critic
