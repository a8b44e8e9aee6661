import math

import numpy as np
import pytest

from caudg import nncore as nn
from caudg.ids import (SIGMA_FLOOR, IDSAugmenter, SampledStyle, StyleStats, fit_style_gaussian, ids, ids_transform,
                       sample_styles, sample_tail, sample_tail_batch, spatial_stats)

from .oracles import gaussian_log_density, spatial_stats_oracle


def feature_map(seed, B=8, C=4, W=20):
    r = np.random.default_rng(seed)
    # per-sample style differences so the fitted Gaussians are well conditioned
    return r.standard_normal((B, C, 1, W)) * r.uniform(0.5, 2.0, (B, C, 1, 1)) + r.normal(0, 1, (B, C, 1, 1))


def test_spatial_stats_examples():
    s = spatial_stats(np.full((2, 3, 1, 7), 5.0))
    np.testing.assert_array_equal(s.mu, 5.0)
    np.testing.assert_array_equal(s.sigma2, 0.0)
    assert spatial_stats(np.zeros((96, 32, 1, 58))).mu.shape == (96, 32, 1, 1)
    z = feature_map(0)
    s = spatial_stats(z)
    mu, var = spatial_stats_oracle(z)
    np.testing.assert_allclose(s.mu, mu, atol=1e-12)
    np.testing.assert_allclose(s.sigma2, var, atol=1e-12)


def test_fit_gaussian_examples():
    g = fit_style_gaussian(np.tile([1.0, 2.0, 3.0], (5, 1)))
    np.testing.assert_array_equal(g.mean, [1.0, 2.0, 3.0])
    np.testing.assert_allclose(g.covariance, g.delta * np.eye(3))
    assert g.delta == 1e-6
    g = fit_style_gaussian(np.array([[0.0], [2.0]]))
    assert g.mean[0] == 1.0
    assert g.covariance[0, 0] == pytest.approx(1.0 + g.delta)
    assert g.delta == pytest.approx(1e-6)
    with pytest.raises(ValueError):
        fit_style_gaussian(np.ones((1, 3)))


def test_fit_gaussian_matches_loop_oracle():
    v = np.random.default_rng(1).standard_normal((9, 4))
    g = fit_style_gaussian(v)
    mean = [sum(v[:, j]) / 9 for j in range(4)]
    cov = np.zeros((4, 4))
    for row in v:
        d = row - mean
        cov += np.outer(d, d) / 9
    np.testing.assert_allclose(g.mean, mean, atol=1e-12)
    np.testing.assert_allclose(g.covariance - g.delta * np.eye(4), cov, atol=1e-12)
    assert g.delta == pytest.approx(max(1e-6, 1e-6 * np.trace(cov) / 4))
    np.testing.assert_allclose(g.chol @ g.chol.T, g.covariance, atol=1e-12)
    x = np.random.default_rng(2).standard_normal(4)
    assert g.log_density(x) == pytest.approx(gaussian_log_density(x, g.mean, g.covariance), rel=1e-10)


def test_sample_tail_infinite_eps_takes_first_draw():
    g = fit_style_gaussian(np.random.default_rng(3).standard_normal((10, 3)))
    r1, r2 = np.random.default_rng(4), np.random.default_rng(4)
    vec, draws, fallback = sample_tail(g, math.inf, r1)
    assert draws == 1 and not fallback
    first = g.mean + r2.standard_normal((1, 100, 3))[0, 0] @ g.chol.T
    np.testing.assert_allclose(vec, first)


def test_sample_tail_accepts_only_tail_draws():
    g = fit_style_gaussian(np.random.default_rng(5).standard_normal((16, 3)) * 2)
    rng = np.random.default_rng(6)
    eps = 1e-4
    for _ in range(1000):
        vec, draws, fallback = sample_tail(g, eps, rng)
        if not fallback:
            assert gaussian_log_density(vec, g.mean, g.covariance) < math.log(eps)
            assert 1 <= draws <= 100


def test_sample_tail_fallback_returns_lowest_density():
    # a very small eps is essentially never met: the minimum-density candidate is kept
    g = fit_style_gaussian(np.random.default_rng(7).standard_normal((6, 2)))
    samples, draws, fallback = sample_tail_batch(g, 5, 1e-300, np.random.default_rng(8), max_draws=10)
    assert fallback.all() and (draws == 10).all()
    noise = np.random.default_rng(8).standard_normal((5, 10, 2))
    cand = g.mean + noise @ g.chol.T
    lowest = g.log_density(cand).argmin(axis=1)
    np.testing.assert_allclose(samples, cand[np.arange(5), lowest])


def test_sample_tail_errors():
    g = fit_style_gaussian(np.random.default_rng(9).standard_normal((4, 2)))
    with pytest.raises(ValueError):
        sample_tail(g, 0.0, np.random.default_rng(0))
    g.mean[0] = np.nan
    with pytest.raises(ValueError):
        sample_tail(g, 1e-4, np.random.default_rng(0))


def test_identity_restyle():
    # channel std >= 1.5 keeps the ridge-induced shrink below 1e-6 in absolute terms
    r = np.random.default_rng(10)
    z = r.standard_normal((8, 4, 1, 20)) * r.uniform(1.5, 4.0, (8, 4, 1, 1)) + r.normal(0, 2, (8, 4, 1, 1))
    s = spatial_stats(z)
    out = ids_transform(z, s, SampledStyle(mu_bar=s.mu, sigma_bar=np.sqrt(s.sigma2)))
    np.testing.assert_allclose(out.data, z, rtol=0, atol=1e-6)


def test_identity_restyle_exact_shrink_for_small_channels():
    z = feature_map(10) * 0.1
    s = spatial_stats(z)
    out = ids_transform(z, s, SampledStyle(mu_bar=s.mu, sigma_bar=np.sqrt(s.sigma2)))
    shrink = np.sqrt(s.sigma2 / (s.sigma2 + 1e-6))
    np.testing.assert_allclose(out.data, s.mu + shrink * (z - s.mu), rtol=1e-12, atol=1e-14)


def test_constant_channel_maps_to_mu_bar():
    z = feature_map(11)
    z[:, 1] = 3.0
    s = spatial_stats(z)
    mu_bar = np.full(s.mu.shape, -2.0)
    out = ids_transform(z, s, SampledStyle(mu_bar=mu_bar, sigma_bar=np.ones(s.mu.shape)))
    np.testing.assert_allclose(out.data[:, 1], -2.0)


def test_transform_shape_mismatch():
    z = feature_map(12)
    s = spatial_stats(z)
    with pytest.raises(ValueError, match="mu_bar"):
        ids_transform(z, s, SampledStyle(mu_bar=s.mu[:3], sigma_bar=np.sqrt(s.sigma2)))


def test_restyled_stats_match_samples():
    for seed in range(100):
        z = feature_map(seed)
        out, style = ids(z, 1e-4, np.random.default_rng(seed), return_style=True)
        s = spatial_stats(out)
        np.testing.assert_allclose(s.mu, style.mu_bar, atol=1e-4)
        # sqrt(sigma2 / (sigma2 + ridge)) shrinks the std slightly
        np.testing.assert_allclose(np.sqrt(s.sigma2), style.sigma_bar, atol=1e-4)


def test_ids_tail_predicate_and_fallback_flags():
    eps = 1e-4
    for seed in range(100):
        z = feature_map(seed, B=16, C=3)
        stats = spatial_stats(z)
        style = sample_styles(stats, eps, np.random.default_rng(seed))
        g = fit_style_gaussian(stats.mu.reshape(16, 3))
        dens = g.log_density(style.mu_bar.reshape(16, 3))
        assert (dens[~style.fallback_mu] < math.log(eps)).all()
        assert (style.sigma_bar >= SIGMA_FLOOR).all()
        assert style.draws_mu.shape == (16,) and style.fallback_mu.dtype == bool


def test_ids_shape_determinism_and_change():
    z = feature_map(20, B=6, C=32, W=58)
    a = ids(z, rng=np.random.default_rng(1))
    b = ids(z, rng=np.random.default_rng(1))
    assert a.shape == z.shape
    np.testing.assert_array_equal(a.data, b.data)
    assert np.abs(a.data - z).mean() > 0
    with pytest.raises(ValueError):
        ids(z)  # needs an rng


def test_ids_batch96_shape():
    z = np.random.default_rng(0).standard_normal((96, 32, 1, 58))
    assert ids(z, rng=np.random.default_rng(0)).shape == (96, 32, 1, 58)


def test_ids_infinite_eps_uses_one_draw():
    z = feature_map(21)
    _, style = ids(z, math.inf, np.random.default_rng(0), return_style=True)
    assert (style.draws_mu == 1).all() and (style.draws_sigma == 1).all()


def test_ids_gradient_treats_styles_as_constants():
    z = feature_map(22, B=4, C=2, W=6)
    stats = spatial_stats(z)
    style = sample_styles(stats, 1e-4, np.random.default_rng(0))
    scale = (style.sigma_bar / np.sqrt(stats.sigma2 + 1e-6))
    p = nn.Parameter(z.copy(), "z")
    nn.backward(nn.tsum(ids_transform(p, stats, style)))
    np.testing.assert_allclose(p.grad, np.broadcast_to(scale, z.shape))
    w = np.random.default_rng(1).standard_normal(z.shape)
    err = nn.finite_difference_check(lambda t: nn.tsum(ids_transform(t, stats, style) * w), z)
    assert err < 1e-6


def test_augmenter_records_style():
    aug = IDSAugmenter(rng=np.random.default_rng(0))
    out = aug(nn.as_tensor(feature_map(23)))
    assert out.shape == (8, 4, 1, 20)
    assert isinstance(aug.last_style, SampledStyle)
    assert isinstance(spatial_stats(out), StyleStats)
