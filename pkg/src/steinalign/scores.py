"""Target-distribution models and their score functions ``grad_z log q(z)``.

Three families: a full-covariance Gaussian, a diagonal-covariance mixture and
a Gaussian VAE. Every model exposes

* ``score(Z, rng=None)`` -> ``(n, d)`` scores,
* ``score_with_vjp(Z, rng=None)`` -> scores plus a function mapping an
  upstream ``(n, d)`` array ``V`` to ``J_s(z)^T v`` row by row, where ``J_s``
  is the score Jacobian. Training uses it to differentiate the Stein kernel
  through the score.

Model parameters are treated as constants by the vector-Jacobian product.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Union

import numpy as np

from . import nnet
from .errors import DimMismatch, TooFewSamples, UnsupportedVariant
from .numeric import SpdFactor, make_rng, spd_factor, spd_solve

LOG_2PI = math.log(2.0 * math.pi)
VAR_FLOOR = 1e-6


def _rows(Z, d=None):
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim == 1:
        Z = Z[None, :]
    if d is not None and Z.shape[1] != d:
        raise DimMismatch(f"points have dim {Z.shape[1]}, model has dim {d}")
    return Z


def _squeeze_like(out, z):
    return out[0] if np.ndim(z) == 1 else out


# ------------------------------------------------------------------ Gaussian


@dataclass(frozen=True)
class GaussianModel:
    mean: np.ndarray
    cov: np.ndarray
    factor: SpdFactor

    @classmethod
    def from_moments(cls, mean, cov, jitter: float = 0.0) -> "GaussianModel":
        mean = np.asarray(mean, dtype=np.float64).reshape(-1)
        cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
        if cov.shape != (mean.size, mean.size):
            raise DimMismatch(f"covariance {cov.shape} does not match mean of length {mean.size}")
        f = spd_factor(cov, jitter)
        if f.jitter:
            cov = cov + f.jitter * np.eye(mean.size)
        return cls(mean, cov, f)

    @property
    def dim(self) -> int:
        return self.mean.size

    def score(self, Z, rng=None):
        Zr = _rows(Z, self.dim)
        return _squeeze_like(-spd_solve(self.factor, (Zr - self.mean).T).T, Z)

    def score_with_vjp(self, Z, rng=None):
        def vjp(V):
            return -spd_solve(self.factor, np.asarray(V, dtype=np.float64).T).T

        return self.score(_rows(Z, self.dim)), vjp

    def log_density(self, Z):
        Zr = _rows(Z, self.dim)
        from scipy.linalg import solve_triangular

        y = solve_triangular(self.factor.lower, (Zr - self.mean).T, lower=True)
        out = -0.5 * (self.dim * LOG_2PI + self.factor.logdet + np.sum(y * y, axis=0))
        return out[0] if np.ndim(Z) == 1 else out

    def sample(self, n, rng):
        eps = rng.standard_normal((n, self.dim))
        return self.mean + eps @ self.factor.lower.T

    def to_dict(self):
        return {"variant": "gaussian", "mean": self.mean.tolist(), "cov": self.cov.tolist()}


def fit_gaussian(Z) -> GaussianModel:
    """Sample mean and 1/m sample covariance, with jitter if singular."""
    Z = _rows(Z)
    m = Z.shape[0]
    if m < 2:
        raise TooFewSamples("need at least two samples to fit a Gaussian")
    mu = Z.mean(axis=0)
    C = Z - mu
    cov = C.T @ C / m
    return GaussianModel.from_moments(mu, 0.5 * (cov + cov.T))


def gaussian_score(model: GaussianModel, z):
    return model.score(z)


# ------------------------------------------------------------------ mixture


@dataclass(frozen=True)
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w, mu, var = self.weights, self.means, self.variances
        if mu.ndim != 2 or var.shape != mu.shape or w.shape != (mu.shape[0],):
            raise DimMismatch("weights (k,), means (k,d), variances (k,d) expected")
        if np.any(w <= 0) or abs(float(np.sum(w)) - 1.0) > 1e-12:
            raise ValueError("mixture weights must be positive and sum to 1")
        if np.any(var < VAR_FLOOR * (1 - 1e-12)):
            raise ValueError(f"variances must be at least {VAR_FLOOR}")

    @property
    def k(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def component_log_densities(self, Z):
        Z = _rows(Z, self.dim)
        diff = Z[:, None, :] - self.means[None, :, :]
        quad = np.sum(diff * diff / self.variances[None], axis=2)
        logdet = np.sum(np.log(self.variances), axis=1)
        return -0.5 * (self.dim * LOG_2PI + logdet[None, :] + quad)

    def _joint(self, Z):
        lj = self.component_log_densities(Z) + np.log(self.weights)[None, :]
        top = lj.max(axis=1, keepdims=True)
        lse = top[:, 0] + np.log(np.sum(np.exp(lj - top), axis=1))
        return lj, lse

    def responsibilities(self, Z):
        lj, lse = self._joint(Z)
        g = np.exp(lj - lse[:, None])
        return _squeeze_like(g / g.sum(axis=1, keepdims=True), Z)

    def log_density(self, Z):
        return _squeeze_like(self._joint(Z)[1], Z)

    def _parts(self, Z):
        Zr = _rows(Z, self.dim)
        g = self.responsibilities(Zr)
        comp = -(Zr[:, None, :] - self.means[None]) / self.variances[None]
        return g, comp, np.einsum("nk,nkd->nd", g, comp)

    def score(self, Z, rng=None):
        return _squeeze_like(self._parts(Z)[2], Z)

    def score_with_vjp(self, Z, rng=None):
        g, comp, s = self._parts(Z)

        def vjp(V):
            # Hessian of log q: -sum g_i P_i + sum g_i s_i s_i^T - s s^T (symmetric)
            V = np.asarray(V, dtype=np.float64)
            prec = -np.einsum("nk,kd,nd->nd", g, 1.0 / self.variances, V)
            proj = np.einsum("nkd,nd->nk", comp, V)
            outer = np.einsum("nk,nk,nkd->nd", g, proj, comp)
            return prec + outer - s * np.sum(s * V, axis=1, keepdims=True)

        return s, vjp

    def mean_loglik(self, Z) -> float:
        return float(np.mean(self._joint(Z)[1]))

    def sample(self, n, rng):
        comp = rng.choice(self.k, size=n, p=self.weights)
        eps = rng.standard_normal((n, self.dim))
        return self.means[comp] + eps * np.sqrt(self.variances[comp])

    def to_dict(self):
        return {
            "variant": "gmm",
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }


def make_gmm(weights, means, variances) -> GmmModel:
    w = np.asarray(weights, dtype=np.float64)
    return GmmModel(w / w.sum(), np.atleast_2d(np.asarray(means, dtype=np.float64)),
                    np.maximum(np.atleast_2d(np.asarray(variances, dtype=np.float64)), VAR_FLOOR))


def gmm_responsibilities(model: GmmModel, z):
    return model.responsibilities(z)


def gmm_score(model: GmmModel, z):
    return model.score(z)


def _kmeanspp(Z, k, rng):
    m = Z.shape[0]
    centers = [Z[rng.integers(m)]]
    d2 = np.sum((Z - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.integers(m) if total <= 0 else rng.choice(m, p=d2 / total)
        centers.append(Z[idx])
        d2 = np.minimum(d2, np.sum((Z - Z[idx]) ** 2, axis=1))
    return np.array(centers)


def fit_gmm_em(Z, k: int, iters: int = 50, rng=None, tol: float = 1e-8, history=None) -> GmmModel:
    """Diagonal-covariance EM with k-means++ seeding.

    Stops after ``iters`` iterations or when the mean log-likelihood gains less
    than ``tol``. If ``history`` is a list, the mean log-likelihood after each
    M-step is appended to it.
    """
    Z = _rows(Z)
    m, d = Z.shape
    if m < k or k < 1:
        raise TooFewSamples(f"need at least k={k} samples, got {m}")
    rng = make_rng(0) if rng is None else rng
    var0 = np.maximum(Z.var(axis=0), VAR_FLOOR)
    model = GmmModel(np.full(k, 1.0 / k), _kmeanspp(Z, k, rng), np.tile(var0, (k, 1)))
    prev = model.mean_loglik(Z)
    for _ in range(iters):
        g = model.responsibilities(Z)
        nk = g.sum(axis=0)
        nk = np.maximum(nk, 1e-300)
        means = (g.T @ Z) / nk[:, None]
        diff = Z[:, None, :] - means[None]
        var = np.einsum("nk,nkd->kd", g, diff * diff) / nk[:, None]
        w = nk / nk.sum()
        w = np.maximum(w, 1e-300)
        model = GmmModel(w / w.sum(), means, np.maximum(var, VAR_FLOOR))
        ll = model.mean_loglik(Z)
        if history is not None:
            history.append(ll)
        if ll - prev < tol:
            break
        prev = ll
    return model


def gmm_to_vector(model: GmmModel) -> np.ndarray:
    """Unconstrained coordinates: (weight logits, means, log-variances)."""
    return np.concatenate([np.log(model.weights), model.means.ravel(), np.log(model.variances).ravel()])


def gmm_from_vector(theta, k: int, d: int) -> GmmModel:
    theta = np.asarray(theta, dtype=np.float64)
    logits = theta[:k]
    w = np.exp(logits - logits.max())
    means = theta[k:k + k * d].reshape(k, d)
    var = np.maximum(np.exp(theta[k + k * d:].reshape(k, d)), VAR_FLOOR)
    return GmmModel(w / w.sum(), means, var)


def gmm_loglik_grad(model: GmmModel, Z) -> np.ndarray:
    """Gradient of the mean log-likelihood in ``gmm_to_vector`` coordinates."""
    Z = _rows(Z, model.dim)
    g = model.responsibilities(Z)
    diff = Z[:, None, :] - model.means[None]
    d_logits = g.mean(axis=0) - model.weights
    d_means = np.einsum("nk,nkd->kd", g, diff / model.variances[None]) / Z.shape[0]
    d_logvar = 0.5 * np.einsum("nk,nkd->kd", g, diff * diff / model.variances[None] - 1.0) / Z.shape[0]
    return np.concatenate([d_logits, d_means.ravel(), d_logvar.ravel()])


def gmm_sgd_step(model: GmmModel, Z, lr: float) -> GmmModel:
    """One gradient-ascent step on the batch log-likelihood."""
    if lr == 0:
        return model
    theta = gmm_to_vector(model) + lr * gmm_loglik_grad(model, Z)
    return gmm_from_vector(theta, model.k, model.dim)


# ------------------------------------------------------------------ VAE


@dataclass(frozen=True)
class VaeModel:
    encoder: nnet.Mlp
    decoder: nnet.Mlp
    latent_dim: int
    variant: str = "corrected"
    n_samples: int = 8

    def __post_init__(self):
        if self.variant not in ("corrected", "paper"):
            raise ValueError(f"unknown VAE score variant {self.variant!r}")
        if self.encoder.out_dim != 2 * self.latent_dim or self.decoder.in_dim != self.latent_dim:
            raise DimMismatch("encoder must output (mean, log-variance) of the latent; decoder must take the latent")
        if self.encoder.in_dim != self.decoder.out_dim:
            raise DimMismatch("encoder input dim must equal decoder output dim")

    @property
    def dim(self) -> int:
        return self.decoder.out_dim

    def encode(self, Z):
        out, tape = nnet.mlp_forward(self.encoder, Z)
        return out[:, :self.latent_dim], out[:, self.latent_dim:], tape

    def _sample_terms(self, Z, eps):
        """Decoder residual and the per-sample weight of the score integrand."""
        mu, logvar, enc_tape = self.encode(Z)
        std = np.exp(0.5 * logvar)
        xi = mu + std * eps
        dec, dec_tape = nnet.mlp_forward(self.decoder, xi)
        e = dec - Z
        if self.variant == "paper":
            c2 = (2.0 * math.pi) ** (-self.dim)
            w = c2 * np.exp(-np.sum(e * e, axis=1))
        else:
            w = np.ones(Z.shape[0])
        return e, w, (std, eps, enc_tape, dec_tape)

    def score_with_vjp(self, Z, rng=None, noise=None):
        Z = _rows(Z, self.dim)
        n = Z.shape[0]
        if noise is None:
            rng = make_rng(0, "vae-score") if rng is None else rng
            noise = rng.standard_normal((self.n_samples, n, self.latent_dim))
        terms = [self._sample_terms(Z, eps) for eps in noise]
        vals = [w[:, None] * e for e, w, _ in terms]
        # anchored mean: exact when every latent sample gives the same integrand
        S = vals[0] + sum(v - vals[0] for v in vals[1:]) / len(vals)

        def vjp(V):
            V = np.asarray(V, dtype=np.float64)
            total = np.zeros_like(V)
            for e, w, (std, eps, _, _) in terms:
                if self.variant == "paper":
                    u = w[:, None] * (V - 2.0 * np.sum(e * V, axis=1, keepdims=True) * e)
                else:
                    u = V
                # fresh tapes: each backward consumes one
                mu, logvar, enc_tape = self.encode(Z)
                xi = mu + np.exp(0.5 * logvar) * eps
                _, dec_tape = nnet.mlp_forward(self.decoder, xi)
                _, dxi = nnet.mlp_backward(self.decoder, dec_tape, u)
                up = np.concatenate([dxi, dxi * 0.5 * np.exp(0.5 * logvar) * eps], axis=1)
                _, dz = nnet.mlp_backward(self.encoder, enc_tape, up)
                total += dz - u
            return total / len(terms)

        return S, vjp

    def score(self, Z, rng=None, noise=None):
        return _squeeze_like(self.score_with_vjp(Z, rng, noise)[0], Z)

    def score_samples(self, Z, rng=None):
        """Per-latent-sample integrands, shape ``(n_samples, n, d)``."""
        Z = _rows(Z, self.dim)
        rng = make_rng(0, "vae-score") if rng is None else rng
        noise = rng.standard_normal((self.n_samples, Z.shape[0], self.latent_dim))
        return np.stack([w[:, None] * e for e, w, _ in (self._sample_terms(Z, eps) for eps in noise)])

    def sample(self, n, rng):
        xi = rng.standard_normal((n, self.latent_dim))
        return self.decoder(xi) + rng.standard_normal((n, self.dim))

    def to_dict(self):
        return {
            "variant": "vae",
            "latent_dim": self.latent_dim,
            "score_variant": self.variant,
            "n_samples": self.n_samples,
            "encoder": self.encoder.to_dict(),
            "decoder": self.decoder.to_dict(),
        }


def init_vae(d: int, latent_dim: int, hidden: int, rng, variant="corrected", n_samples=8) -> VaeModel:
    enc = nnet.init_mlp([d, hidden, 2 * latent_dim], ["tanh", "identity"], rng)
    dec = nnet.init_mlp([latent_dim, hidden, d], ["tanh", "identity"], rng)
    return VaeModel(enc, dec, latent_dim, variant, n_samples)


def vae_neg_elbo_grads(model: VaeModel, Z, eps):
    """Mean negative ELBO (one latent sample per row) and its parameter gradients.

    Returns ``(loss, encoder_grads, decoder_grads)``. The likelihood is a unit
    variance Gaussian around the decoder output and the prior is N(0, I).
    """
    Z = _rows(Z, model.dim)
    n, d = Z.shape
    mu, logvar, enc_tape = model.encode(Z)
    std = np.exp(0.5 * logvar)
    xi = mu + std * eps
    dec, dec_tape = nnet.mlp_forward(model.decoder, xi)
    r = dec - Z
    recon = -0.5 * d * LOG_2PI - 0.5 * np.sum(r * r, axis=1)
    kl = 0.5 * np.sum(mu * mu + std * std - 1.0 - logvar, axis=1)
    loss = float(np.mean(kl - recon))
    dec_grads, dxi = nnet.mlp_backward(model.decoder, dec_tape, r / n)
    dmu = dxi + mu / n
    dlogvar = dxi * 0.5 * std * eps + 0.5 * (std * std - 1.0) / n
    enc_grads, _ = nnet.mlp_backward(model.encoder, enc_tape, np.concatenate([dmu, dlogvar], axis=1))
    return loss, enc_grads, dec_grads


def vae_elbo_step(model: VaeModel, Z, lr: float, rng, train_encoder=True, train_decoder=True):
    """One plain SGD step on the negative ELBO; returns ``(model, elbo)``."""
    Z = _rows(Z, model.dim)
    if Z.shape[0] == 0:
        raise TooFewSamples("empty batch")
    eps = rng.standard_normal((Z.shape[0], model.latent_dim))
    loss, eg, dg = vae_neg_elbo_grads(model, Z, eps)
    enc, dec = model.encoder, model.decoder
    if train_encoder:
        enc = enc.with_params([p - lr * g for p, g in zip(enc.params(), eg)])
    if train_decoder:
        dec = dec.with_params([p - lr * g for p, g in zip(dec.params(), dg)])
    return replace(model, encoder=enc, decoder=dec), -loss


def vae_score(model: VaeModel, z, rng=None):
    return model.score(z, rng)


# ------------------------------------------------------------------ union

ScoreModel = Union[GaussianModel, GmmModel, VaeModel]


def score(model: ScoreModel, Z, rng=None):
    return model.score(Z, rng)


def log_density(model: ScoreModel, Z):
    if isinstance(model, VaeModel):
        raise UnsupportedVariant("the VAE model has no tractable log-density")
    return model.log_density(Z)


def score_model_from_dict(doc) -> ScoreModel:
    kind = doc.get("variant")
    if kind == "gaussian":
        return GaussianModel.from_moments(doc["mean"], doc["cov"])
    if kind == "gmm":
        return make_gmm(doc["weights"], doc["means"], doc["variances"])
    if kind == "vae":
        return VaeModel(
            nnet.Mlp.from_dict(doc["encoder"]),
            nnet.Mlp.from_dict(doc["decoder"]),
            int(doc["latent_dim"]),
            doc.get("score_variant", "corrected"),
            int(doc.get("n_samples", 8)),
        )
    raise UnsupportedVariant(f"unknown score model variant {kind!r}")


def fit_score_model(family: str, Z, rng=None, k: int = 4, iters: int = 50) -> ScoreModel:
    """Fit a Gaussian or GMM to ``Z`` (the families with closed-form fits)."""
    if family == "gaussian":
        return fit_gaussian(Z)
    if family == "gmm":
        return fit_gmm_em(Z, k, iters, rng)
    raise UnsupportedVariant(f"no closed-form fit for family {family!r}")
