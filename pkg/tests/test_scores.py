import math

import numpy as np
import pytest
from scipy.integrate import trapezoid
from hypothesis import given, strategies as st

from steinalign import nnet
from steinalign.errors import TooFewSamples, UnsupportedVariant
from steinalign.numeric import finite_diff_grad, make_rng, rel_err
from steinalign.scores import (VAR_FLOOR, GaussianModel, VaeModel, fit_gaussian, fit_gmm_em, gmm_from_vector,
                               gmm_loglik_grad, gmm_responsibilities, gmm_score, gmm_sgd_step, gmm_to_vector,
                               init_vae, log_density, make_gmm, score_model_from_dict, vae_elbo_step,
                               vae_neg_elbo_grads)

from conftest import random_spd


def random_gmm(rng, k=3, d=2):
    return make_gmm(rng.uniform(0.5, 1.5, k), 1.5 * rng.standard_normal((k, d)), rng.uniform(0.3, 2.0, (k, d)))


# ---------------------------------------------------------------- Gaussian


def test_fit_gaussian_two_points():
    m = fit_gaussian(np.array([[0.0, 0.0], [2.0, 2.0]]))
    assert np.array_equal(m.mean, [1.0, 1.0])
    assert np.allclose(m.cov, [[1.0, 1.0], [1.0, 1.0]], atol=1e-6)
    assert m.factor.jitter > 0


def test_fit_gaussian_large_sample(rng):
    m = 10_000
    model = fit_gaussian(rng.standard_normal((m, 3)))
    assert np.all(np.abs(model.mean) <= 4 / math.sqrt(m))
    assert np.abs(model.cov - np.eye(3)).max() <= 0.1


def test_fit_gaussian_constant_data():
    model = fit_gaussian(np.ones((5, 2)))
    assert np.allclose(model.cov, model.factor.jitter * np.eye(2), rtol=0, atol=1e-300)
    assert model.factor.jitter > 0


def test_fit_gaussian_too_few():
    with pytest.raises(TooFewSamples):
        fit_gaussian(np.ones((1, 2)))


def test_gaussian_score_examples(rng):
    model = GaussianModel.from_moments([0.5, -1.0], np.eye(2))
    assert np.array_equal(model.score(np.array([0.5, -1.0])), [0.0, 0.0])
    std = GaussianModel.from_moments(np.zeros(2), np.eye(2))
    assert np.array_equal(std.score(np.array([2.0, -1.0])), [-2.0, 1.0])
    cov = random_spd(rng, 4)
    g = GaussianModel.from_moments(rng.standard_normal(4), cov)
    z = rng.standard_normal(4)
    assert rel_err(g.score(z), finite_diff_grad(g.log_density, z), 1e-8) <= 1e-7


def test_gaussian_log_density_examples():
    std = GaussianModel.from_moments(np.zeros(2), np.eye(2))
    assert math.isclose(std.log_density(np.zeros(2)), -math.log(2 * math.pi), rel_tol=1e-15)
    one = GaussianModel.from_moments([0.3], [[0.7]])
    grid = np.linspace(-10, 10, 20001)
    assert abs(trapezoid(np.exp(one.log_density(grid[:, None])), grid) - 1.0) <= 1e-4


# ---------------------------------------------------------------- mixtures


def test_responsibilities_examples():
    one = make_gmm([1.0], [[0.0, 0.0]], [[1.0, 1.0]])
    assert np.array_equal(gmm_responsibilities(one, np.array([3.0, 4.0])), [1.0])
    two = make_gmm([0.5, 0.5], [[-1.0, 0.0], [1.0, 0.0]], [[1.0, 1.0], [1.0, 1.0]])
    assert np.allclose(gmm_responsibilities(two, np.zeros(2)), [0.5, 0.5], rtol=0, atol=1e-15)
    assert np.array_equal(gmm_score(two, np.zeros(2)), [0.0, 0.0])
    far = gmm_responsibilities(two, np.array([-8.0, 0.0]))
    assert far[0] >= 1 - 1e-6
    # direct density ratio
    ratio = math.exp(-0.5 * 49) / (math.exp(-0.5 * 49) + math.exp(-0.5 * 81))
    assert math.isclose(far[0], ratio, rel_tol=1e-12)


def test_responsibilities_far_tail_no_underflow():
    two = make_gmm([0.5, 0.5], [[-1.0], [1.0]], [[1e-3], [1e-3]])
    g = gmm_responsibilities(two, np.array([1e4]))
    assert np.all(np.isfinite(g)) and abs(g.sum() - 1.0) <= 1e-12


@given(st.integers(0, 2**31), st.integers(1, 5), st.integers(1, 4))
def test_responsibilities_simplex(seed, k, d):
    r = make_rng(seed)
    model = random_gmm(r, k, d)
    g = model.responsibilities(5 * r.standard_normal((10, d)))
    assert np.all((g >= 0) & (g <= 1))
    assert np.abs(g.sum(axis=1) - 1.0).max() <= 1e-12


def test_gmm_score_matches_log_density(rng):
    for _ in range(5):
        model = random_gmm(rng, 3, 3)
        z = rng.standard_normal(3)
        assert rel_err(model.score(z), finite_diff_grad(model.log_density, z), 1e-8) <= 1e-6


@given(st.integers(0, 2**31))
def test_gmm_k1_is_gaussian(seed):
    r = make_rng(seed)
    mu, var = r.standard_normal(3), r.uniform(0.2, 3.0, 3)
    gmm = make_gmm([1.0], [mu], [var])
    gauss = GaussianModel.from_moments(mu, np.diag(var))
    Z = 3 * r.standard_normal((20, 3))
    assert np.abs(gmm.score(Z) - gauss.score(Z)).max() <= 1e-12
    assert np.abs(gmm.log_density(Z) - gauss.log_density(Z)).max() <= 1e-12


def test_gmm_variance_floor_and_weights():
    m = make_gmm([2.0, 2.0], [[0.0], [1.0]], [[0.0], [1.0]])
    assert m.variances.min() == VAR_FLOOR
    assert m.weights.sum() == 1.0
    with pytest.raises(ValueError):
        type(m)(np.array([0.6, 0.6]), m.means, m.variances)


def test_gmm_log_density_integrates():
    m = make_gmm([0.3, 0.7], [[-1.0], [2.0]], [[0.5], [1.5]])
    grid = np.linspace(-15, 15, 30001)
    assert abs(trapezoid(np.exp(m.log_density(grid[:, None])), grid) - 1.0) <= 1e-4


def test_em_k1_matches_fit_gaussian(rng):
    Z = rng.standard_normal((200, 3)) * [1.0, 2.0, 0.5] + [1.0, -1.0, 0.0]
    em = fit_gmm_em(Z, 1, 50, make_rng(0))
    g = fit_gaussian(Z)
    assert np.allclose(em.means[0], g.mean, rtol=0, atol=1e-12)
    assert np.allclose(em.variances[0], np.diag(g.cov), rtol=1e-10)


def test_em_recovers_separated_clusters(rng):
    Z = np.vstack([rng.standard_normal((300, 2)) - 5, rng.standard_normal((300, 2)) + 5])
    model = fit_gmm_em(Z, 2, 50, make_rng(1))
    centers = sorted(model.means.tolist())
    assert np.abs(np.array(centers[0]) + 5).max() <= 0.1
    assert np.abs(np.array(centers[1]) - 5).max() <= 0.1


def test_em_monotone(rng):
    hist = []
    Z = np.vstack([rng.standard_normal((50, 2)), rng.standard_normal((40, 2)) + 3])
    fit_gmm_em(Z, 3, 50, make_rng(2), history=hist)
    assert all(b - a >= -1e-9 for a, b in zip(hist, hist[1:]))


def test_em_too_few():
    with pytest.raises(TooFewSamples):
        fit_gmm_em(np.ones((2, 2)), 3)


def test_gmm_vector_roundtrip(rng):
    m = random_gmm(rng)
    back = gmm_from_vector(gmm_to_vector(m), m.k, m.dim)
    assert np.allclose(back.weights, m.weights, rtol=1e-14)
    assert np.array_equal(back.means, m.means)
    assert np.allclose(back.variances, m.variances, rtol=1e-14)


def test_gmm_sgd_examples(rng):
    m = random_gmm(rng)
    Z = rng.standard_normal((30, 2))
    assert gmm_sgd_step(m, Z, 0.0) is m
    theta = gmm_to_vector(m)
    fd = finite_diff_grad(lambda t: gmm_from_vector(t, m.k, m.dim).mean_loglik(Z), theta)
    assert rel_err(gmm_loglik_grad(m, Z), fd, 1e-6) <= 1e-5
    stepped = gmm_sgd_step(m, Z, 1e-3)
    assert stepped.mean_loglik(Z) > m.mean_loglik(Z)


# ---------------------------------------------------------------- VAE


def _vae(seed=0, d=3, latent=2, variant="corrected"):
    return init_vae(d, latent, 8, make_rng(seed, "vae"), variant=variant)


def test_vae_log_density_unsupported():
    with pytest.raises(UnsupportedVariant):
        log_density(_vae(), np.zeros((1, 3)))


def test_vae_constant_decoder_score():
    vae = _vae()
    mu = np.array([0.5, -1.0, 2.0])
    dec = nnet.Mlp([np.zeros((2, 3))], [mu], ["identity"])
    vae = VaeModel(vae.encoder, dec, 2)
    Z = make_rng(3).standard_normal((5, 3))
    assert np.array_equal(vae.score(Z, make_rng(0)), mu - Z)


def test_vae_zero_residual_both_variants():
    mu = np.array([0.2, 0.4, -0.1])
    for variant in ("corrected", "paper"):
        base = _vae(variant=variant)
        vae = VaeModel(base.encoder, nnet.Mlp([np.zeros((2, 3))], [mu], ["identity"]), 2, variant)
        assert np.array_equal(vae.score(mu[None, :], make_rng(1)), np.zeros((1, 3)))


def test_vae_paper_variant_weight():
    base = _vae(variant="paper")
    mu = np.array([1.0, 0.0, 0.0])
    vae = VaeModel(base.encoder, nnet.Mlp([np.zeros((2, 3))], [mu], ["identity"]), 2, "paper")
    z = np.zeros((1, 3))
    expected = (2 * math.pi) ** -3 * math.exp(-1.0) * (mu - z)
    assert np.allclose(vae.score(z, make_rng(0)), expected, rtol=1e-14, atol=0)


def test_vae_reconstruction_at_zero_residual():
    # decoder output equal to z leaves only the normalising constant
    d = 3
    vae = _vae()
    mu = np.array([0.2, 0.4, -0.1])
    vae = VaeModel(vae.encoder, nnet.Mlp([np.zeros((2, 3))], [mu], ["identity"]), 2)
    enc_mu, logvar, _ = vae.encode(mu[None, :])
    kl = 0.5 * np.sum(enc_mu**2 + np.exp(logvar) - 1 - logvar)
    loss, _, _ = vae_neg_elbo_grads(vae, mu[None, :], np.zeros((1, 2)))
    assert math.isclose(loss, kl + 0.5 * d * math.log(2 * math.pi), rel_tol=1e-13)


def test_vae_elbo_gradients(rng):
    vae = _vae(4)
    Z = rng.standard_normal((6, 3))
    eps = rng.standard_normal((6, 2))
    _, eg, dg = vae_neg_elbo_grads(vae, Z, eps)
    for which, grads in (("encoder", eg), ("decoder", dg)):
        net = getattr(vae, which)
        params = net.params()
        for li, p in enumerate(params):
            for idx in [tuple(int(make_rng(li, j).integers(0, s)) for s in p.shape) for j in range(3)]:
                def f(v, li=li, idx=idx):
                    ps = [q.copy() for q in params]
                    ps[li][idx] = v[0]
                    other = {which: net.with_params(ps)}
                    m = VaeModel(other.get("encoder", vae.encoder), other.get("decoder", vae.decoder), 2)
                    return vae_neg_elbo_grads(m, Z, eps)[0]

                fd = finite_diff_grad(f, np.array([p[idx]]))[0]
                assert abs(grads[li][idx] - fd) <= 1e-4 * max(abs(fd), 1e-3)


def test_vae_elbo_step_lr_zero(rng):
    vae = _vae()
    out, elbo = vae_elbo_step(vae, rng.standard_normal((4, 3)), 0.0, make_rng(0))
    assert all(np.array_equal(a, b) for a, b in zip(out.encoder.params() + out.decoder.params(),
                                                    vae.encoder.params() + vae.decoder.params()))
    assert math.isfinite(elbo)


def test_vae_score_vjp_matches_finite_differences(rng):
    for variant in ("corrected", "paper"):
        vae = _vae(2, variant=variant)
        Z = rng.standard_normal((3, 3))
        V = rng.standard_normal((3, 3))
        noise = make_rng(5).standard_normal((vae.n_samples, 3, 2))
        _, vjp = vae.score_with_vjp(Z, noise=noise)
        fd = finite_diff_grad(lambda x: float(np.sum(V * vae.score_with_vjp(x.reshape(3, 3), noise=noise)[0])),
                              Z.ravel())
        scale = 1e-3 if variant == "corrected" else 1e-9
        assert rel_err(vjp(V).ravel(), fd, scale) <= 1e-5


def test_score_model_json_roundtrip(rng):
    for model in (GaussianModel.from_moments([1.0, 2.0], random_spd(rng, 2)), random_gmm(rng), _vae()):
        back = score_model_from_dict(model.to_dict())
        Z = rng.standard_normal((4, model.dim))
        assert np.allclose(back.score(Z, make_rng(0)), model.score(Z, make_rng(0)), rtol=1e-12, atol=1e-14)
    with pytest.raises(UnsupportedVariant):
        score_model_from_dict({"variant": "flow"})
