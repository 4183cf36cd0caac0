"""Experiment harnesses: Stein identity checks, Monte-Carlo calibrated tests,
convergence-rate fits and the sample-imbalance sweep."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .discrepancy import ksd_u_statistic
from .errors import OracleUnavailable, TooFewSamples
from .kernels import KernelSpec, gram_matrix
from .numeric import child_rng, exact_sum, make_rng
from .scores import GaussianModel, fit_gmm_em, fit_gaussian


@dataclass(frozen=True)
class TestResult:
    statistic: float
    null_quantile: float
    p_value: float
    reject: bool
    null_draws: int
    alpha: float = 0.05

    def to_record(self):
        return asdict(self)


# keep pytest from collecting the dataclass above
TestResult.__test__ = False


@dataclass(frozen=True)
class RateFit:
    sizes: list
    rmse: list
    slope: float
    slope_se: float
    intercept: float = 0.0

    def to_record(self):
        return asdict(self)


@dataclass
class IdentityReport:
    estimates: list = field(default_factory=list)
    std_errors: list = field(default_factory=list)
    pooled_z: float = 0.0
    passed: bool = False
    degenerate: bool = False

    def to_record(self):
        return asdict(self)


def pooled_z(values, std_errors) -> float:
    """Sum of estimates over the root-sum-square of their standard errors.

    A zero pooled standard error (e.g. a single pair per seed) gives 0.
    """
    se = math.sqrt(sum(s * s for s in std_errors))
    if se == 0.0:
        return 0.0
    return math.fsum(values) / se


def stein_identity_diagnostic(model, kernel: KernelSpec, sampler, n: int, seeds, threshold: float = 3.0,
                              rng_path=("identity",)) -> IdentityReport:
    """KSD of samples from ``sampler`` against ``model`` over several seeds.

    ``sampler(n, rng)`` must draw from the distribution the model describes
    for the check to be meaningful. Passes when the pooled z-score is within
    ``threshold``.
    """
    rep = IdentityReport()
    for seed in seeds:
        rng = make_rng(int(seed), *rng_path)
        X = np.asarray(sampler(n, rng), dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        est = ksd_u_statistic(kernel, model, X, rng=make_rng(int(seed), "score"))
        rep.estimates.append(est.value)
        rep.std_errors.append(est.std_error)
    rep.pooled_z = pooled_z(rep.estimates, rep.std_errors)
    # without a variance estimate the z-score carries no evidence either way
    rep.degenerate = not any(s > 0.0 for s in rep.std_errors)
    rep.passed = bool(abs(rep.pooled_z) <= threshold) and not rep.degenerate
    return rep


# ---------------------------------------------------------------- KSD test


def _fit(family, Z, rng, gmm_k):
    if family == "gaussian":
        return fit_gaussian(Z)
    if family == "gmm":
        return fit_gmm_em(Z, gmm_k, 50, rng)
    raise ValueError(f"two-sample testing supports gaussian and gmm, not {family!r}")


def mc_threshold(null, alpha: float) -> float:
    """Order statistic such that ``stat > threshold`` is a level-alpha MC test."""
    null = np.sort(np.asarray(null, dtype=np.float64))
    b = null.size
    k = math.ceil((1.0 - alpha) * (b + 1))
    if k < 1:
        return -math.inf
    if k > b:
        return math.inf
    return float(null[k - 1])


def ksd_null_statistics(fitted, n: int, m: int, kernel: KernelSpec, null_draws: int, rng,
                        score_family="gaussian", gmm_k=4) -> np.ndarray:
    """Parametric null: refit on a fresh size-m draw, test a fresh size-n draw."""
    out = np.empty(null_draws)
    for b in range(null_draws):
        r = child_rng(rng, "null", b)
        Zb = fitted.sample(m, r)
        qb = _fit(score_family, Zb, r, gmm_k)
        Xb = fitted.sample(n, r)
        out[b] = ksd_u_statistic(kernel, qb, Xb).value
    return out


def two_sample_test(X_source, Z_target, score_family: str, kernel: KernelSpec, alpha: float, null_draws: int,
                    rng, gmm_k: int = 4, null=None) -> TestResult:
    """KSD test of ``X_source`` against a model fitted to ``Z_target``.

    ``null`` may carry precomputed null statistics for the same target sample.
    """
    X = np.asarray(X_source, dtype=np.float64)
    Z = np.asarray(Z_target, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if Z.ndim == 1:
        Z = Z[:, None]
    n, m = X.shape[0], Z.shape[0]
    if n < 2 or m < 2:
        raise TooFewSamples("both samples need at least two rows")
    fit_rng = child_rng(rng, "fit")
    null_rng = child_rng(rng, "null")
    q_hat = _fit(score_family, Z, fit_rng, gmm_k)
    stat = ksd_u_statistic(kernel, q_hat, X, m=m).value
    if null is None:
        null = ksd_null_statistics(q_hat, n, m, kernel, null_draws, null_rng, score_family, gmm_k)
    null = np.asarray(null)
    thr = mc_threshold(null, alpha)
    p = (1.0 + float(np.sum(null >= stat))) / (1.0 + null.size)
    return TestResult(float(stat), thr, min(p, 1.0), bool(stat > thr), int(null.size), float(alpha))


def fitted_target_model(Z_target, score_family="gaussian", rng=None, gmm_k=4):
    """The model ``two_sample_test`` fits, for callers that share one null across tests."""
    rng = make_rng(0) if rng is None else rng
    return _fit(score_family, np.asarray(Z_target, dtype=np.float64).reshape(len(Z_target), -1),
                child_rng(rng, "fit"), gmm_k)


# ---------------------------------------------------------------- MMD test


def mmd_permutation_test(X, Y, kernel: KernelSpec, alpha: float, permutations: int, rng) -> TestResult:
    """Unbiased-MMD permutation test; all permutations share one Gram matrix."""
    X = np.asarray(X, dtype=np.float64).reshape(len(X), -1)
    Y = np.asarray(Y, dtype=np.float64).reshape(len(Y), -1)
    n, m = X.shape[0], Y.shape[0]
    if n < 2 or m < 2:
        raise TooFewSamples("both samples need at least two rows")
    K = gram_matrix(kernel, np.vstack([X, Y]))
    np.fill_diagonal(K, 0.0)
    N = n + m
    A = np.zeros((N, permutations + 1))
    A[:n, 0] = 1.0
    for p in range(permutations):
        A[rng.permutation(N)[:n], p + 1] = 1.0
    B = 1.0 - A
    KA = K @ A
    xx = np.einsum("ip,ip->p", A, KA)
    xy = np.einsum("ip,ip->p", B, KA)
    yy = np.einsum("ip,ip->p", B, K @ B)
    stats = xx / (n * (n - 1)) - 2.0 * xy / (n * m) + yy / (m * (m - 1))
    stat, null = float(stats[0]), stats[1:]
    thr = mc_threshold(null, alpha)
    p = (1.0 + float(np.sum(null >= stat))) / (1.0 + permutations)
    return TestResult(stat, thr, min(p, 1.0), bool(stat > thr), permutations, float(alpha))


# ---------------------------------------------------------------- rates


def gauss_hermite_ksd(p: GaussianModel, q, kernel: KernelSpec, nodes: int = 96) -> float:
    """``E_{x,x'~p} u_q(x, x')`` for 1-D Gaussian ``p`` by tensor Gauss-Hermite."""
    if p.dim != 1:
        raise OracleUnavailable("quadrature ground truth is implemented for 1-D Gaussians only")
    from .discrepancy import stein_gram_from_scores

    t, w = np.polynomial.hermite.hermgauss(nodes)
    x = (p.mean[0] + math.sqrt(2.0 * p.cov[0, 0]) * t)[:, None]
    w = w / math.sqrt(math.pi)
    G = stein_gram_from_scores(kernel, x, q.score(x))
    return exact_sum(np.outer(w, w) * G)


def ols_slope(sizes, rmse) -> tuple[float, float, float]:
    x = np.log(np.asarray(sizes, dtype=np.float64))
    y = np.log(np.asarray(rmse, dtype=np.float64))
    X = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    dof = max(x.size - 2, 1)
    s2 = float(resid @ resid) / dof
    cov = s2 * np.linalg.inv(X.T @ X)
    return float(coef[1]), float(math.sqrt(max(cov[1, 1], 0.0))), float(coef[0])


def _as_gaussian(spec) -> GaussianModel:
    if isinstance(spec, GaussianModel):
        return spec
    mean, var = spec
    return GaussianModel.from_moments([float(mean)], [[float(var)]])


def convergence_experiment(p, q, kernel: KernelSpec, n_grid, m_grid, reps: int, rng,
                           n_phase2: int = 2000, records=None):
    """Empirical rates of the two error terms of the estimated-score KSD.

    Phase 1 varies ``n`` with the exact target score and measures
    ``Shat - S`` against the quadrature value ``S``. Phase 2 fixes ``n`` and
    varies the number ``m`` of target samples used by ``fit_gaussian``; the
    error is ``Shat(qhat) - Shat(q)`` on a shared source sample, which removes
    the ``n``-term. ``p`` and ``q`` are 1-D Gaussians given as models or
    ``(mean, variance)`` pairs. Returns ``(fit_n, fit_m)``; per-repetition
    errors are appended to ``records`` when a list is given.
    """
    p = _as_gaussian(p)
    q = _as_gaussian(q)
    if p.dim != 1 or q.dim != 1:
        raise OracleUnavailable("the rate harness needs 1-D Gaussian p and q")
    truth = gauss_hermite_ksd(p, q, kernel)
    n_grid = sorted(int(v) for v in n_grid)
    m_grid = sorted(int(v) for v in m_grid)

    rmse_n = []
    for n in n_grid:
        errs = []
        for rep in range(reps):
            r = child_rng(rng, "phase1", n, rep)
            X = p.sample(n, r)
            errs.append(ksd_u_statistic(kernel, q, X).value - truth)
            if records is not None:
                records.append({"phase": "n", "size": n, "rep": rep, "error": errs[-1]})
        rmse_n.append(math.sqrt(math.fsum(e * e for e in errs) / reps))

    rmse_m = []
    for m in m_grid:
        errs = []
        for rep in range(reps):
            r = child_rng(rng, "phase2", m, rep)
            X = p.sample(n_phase2, r)
            q_hat = fit_gaussian(q.sample(m, r))
            errs.append(ksd_u_statistic(kernel, q_hat, X).value - ksd_u_statistic(kernel, q, X).value)
            if records is not None:
                records.append({"phase": "m", "size": m, "rep": rep, "error": errs[-1]})
        rmse_m.append(math.sqrt(math.fsum(e * e for e in errs) / reps))

    fits = []
    for sizes, rmse in ((n_grid, rmse_n), (m_grid, rmse_m)):
        slope, se, icpt = ols_slope(sizes, rmse)
        fits.append(RateFit(list(sizes), [float(v) for v in rmse], slope, se, icpt))
    return fits[0], fits[1]


# ---------------------------------------------------------------- imbalance


def imbalance_sweep(d: int, n_fixed: int, m_grid, trials: int, rng, alpha: float = 0.05, shift: float = 0.5,
                    null_draws: int = 99, permutations: int = 200, kernel: KernelSpec | None = None):
    """Type-I error and power of the KSD and MMD tests as the target size varies.

    Each trial draws one target sample from N(0, I); the null case tests a
    source sample from the same law, the alternative shifts the first
    coordinate by ``shift``. Both KSD tests share the trial's MC null.
    ``permutations=0`` skips the MMD baseline. Returns one dict per grid point.
    """
    kernel = kernel or KernelSpec("rbf", 1.0)
    rows = []
    for m in m_grid:
        counts = {"ksd_h0": [], "ksd_h1": [], "mmd_h0": [], "mmd_h1": []}
        pvals = {"ksd_h0": [], "ksd_h1": []}
        for t in range(trials):
            r = child_rng(rng, "sweep", m, t)
            Z = r.standard_normal((m, d))
            X0 = r.standard_normal((n_fixed, d))
            X1 = r.standard_normal((n_fixed, d))
            X1[:, 0] += shift
            test_rng = child_rng(r, "ksd")
            q_hat = fitted_target_model(Z, "gaussian", make_rng(0))
            null = ksd_null_statistics(q_hat, n_fixed, m, kernel, null_draws, child_rng(test_rng, "null"))
            for key, X in (("ksd_h0", X0), ("ksd_h1", X1)):
                res = two_sample_test(X, Z, "gaussian", kernel, alpha, null_draws, make_rng(0), null=null)
                counts[key].append(res.reject)
                pvals[key].append(res.p_value)
            for key, X in (("mmd_h0", X0), ("mmd_h1", X1)) if permutations > 0 else ():
                counts[key].append(mmd_permutation_test(X, Z, kernel, alpha, permutations, child_rng(r, key)).reject)
        row = {"m": int(m), "n": int(n_fixed), "trials": int(trials)}
        row.update({
            "ksd_type1": float(np.mean(counts["ksd_h0"])),
            "ksd_power": float(np.mean(counts["ksd_h1"])),
            "mmd_type1": float(np.mean(counts["mmd_h0"])) if permutations > 0 else None,
            "mmd_power": float(np.mean(counts["mmd_h1"])) if permutations > 0 else None,
        })
        row["ksd_pvalues_h0"] = pvals["ksd_h0"]
        row["ksd_pvalues_h1"] = pvals["ksd_h1"]
        rows.append(row)
    return rows
