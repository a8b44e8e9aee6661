"""Inhomogeneous domain sampling: re-style feature maps with tail draws of a
Gaussian fitted to the batch's per-sample channel statistics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nncore as nn
from .nncore import Tensor

DEFAULT_EPS = 1e-4
DEFAULT_MAX_DRAWS = 100
NORM_RIDGE = 1e-6
SIGMA_FLOOR = 1e-3


class NonFiniteStyleError(FloatingPointError, ValueError):
    """Feature statistics overflowed, usually because training diverged."""
LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class StyleStats:
    mu: np.ndarray  # [B, C, 1, 1]
    sigma2: np.ndarray  # [B, C, 1, 1]


@dataclass
class StyleGaussian:
    mean: np.ndarray
    covariance: np.ndarray
    delta: float
    chol: np.ndarray
    diagonal_fallback: bool = False

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def log_density(self, x: np.ndarray) -> np.ndarray:
        """Log N(x; mean, covariance) for one vector [C] or a stack [..., C]."""
        x = np.asarray(x, dtype=np.float64)
        diff = (x - self.mean).reshape(-1, self.dim)
        sol = np.linalg.solve(self.chol, diff.T)  # L^{-1} (x - mean)
        maha = (sol * sol).sum(axis=0)
        logdet = 2.0 * np.log(np.diag(self.chol)).sum()
        out = -0.5 * (self.dim * LOG_2PI + logdet + maha)
        return out.reshape(x.shape[:-1])


@dataclass
class SampledStyle:
    mu_bar: np.ndarray  # [B, C, 1, 1]
    sigma_bar: np.ndarray  # [B, C, 1, 1]
    draws_mu: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    draws_sigma: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    fallback_mu: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    fallback_sigma: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def spatial_stats(z) -> StyleStats:
    """Per (sample, channel) mean and biased variance over height and width."""
    z = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    if z.ndim != 4:
        raise ValueError(f"expected a [B, C, 1, W] feature map, got {z.shape}")
    mu = z.mean(axis=(2, 3), keepdims=True)
    sigma2 = ((z - mu) ** 2).mean(axis=(2, 3), keepdims=True)
    return StyleStats(mu=mu, sigma2=sigma2)


def fit_style_gaussian(vectors: np.ndarray) -> StyleGaussian:
    """Batch Gaussian over per-sample style vectors [B, C] with a small ridge."""
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"expected [B, C] style vectors, got {v.shape}")
    B, C = v.shape
    if B < 2:
        raise ValueError("fitting a style Gaussian needs at least 2 samples")
    mean = v.mean(axis=0)
    diff = v - mean
    cov = diff.T @ diff / B
    delta = max(1e-6, 1e-6 * float(np.trace(cov)) / C)
    ridged = cov + delta * np.eye(C)
    try:
        chol = np.linalg.cholesky(ridged)
        fallback = False
    except np.linalg.LinAlgError:
        ridged = np.diag(np.diag(cov) + delta)
        chol = np.linalg.cholesky(ridged)
        fallback = True
    return StyleGaussian(mean=mean, covariance=ridged, delta=delta, chol=chol, diagonal_fallback=fallback)


def sample_tail_batch(model: StyleGaussian, n: int, eps: float, rng: np.random.Generator,
                      max_draws: int = DEFAULT_MAX_DRAWS) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``n`` independent tail draws: first of ``max_draws`` candidates with density < eps.

    Returns (samples [n, C], draws used [n], fallback flags [n]). A row that
    never meets the threshold gets its lowest-density candidate.
    """
    if not eps > 0:
        raise ValueError(f"density threshold must be positive, got {eps}")
    if not (np.all(np.isfinite(model.mean)) and np.all(np.isfinite(model.chol))):
        raise NonFiniteStyleError("style Gaussian has non-finite parameters")
    C = model.dim
    noise = rng.standard_normal((n, max_draws, C))
    cand = model.mean + noise @ model.chol.T
    # chol^{-1}(cand - mean) is just the noise, so the Mahalanobis term is |noise|^2
    logdet = 2.0 * np.log(np.diag(model.chol)).sum()
    logp = -0.5 * (C * LOG_2PI + logdet + (noise * noise).sum(axis=-1))
    ok = logp < np.log(eps)
    accepted = ok.any(axis=1)
    first = ok.argmax(axis=1)
    lowest = logp.argmin(axis=1)
    pick = np.where(accepted, first, lowest)
    samples = cand[np.arange(n), pick]
    draws = np.where(accepted, first + 1, max_draws)
    return samples, draws, ~accepted


def sample_tail(model: StyleGaussian, eps: float, rng: np.random.Generator,
                max_draws: int = DEFAULT_MAX_DRAWS) -> tuple[np.ndarray, int, bool]:
    """One tail draw: (vector [C], draws used, fallback flag)."""
    samples, draws, fallback = sample_tail_batch(model, 1, eps, rng, max_draws)
    return samples[0], int(draws[0]), bool(fallback[0])


def ids_transform(z, stats: StyleStats, sampled: SampledStyle) -> Tensor:
    """sigma_bar * (z - mu) / sqrt(sigma2 + ridge) + mu_bar; the statistics are constants."""
    z = nn.as_tensor(z)
    B, C = z.shape[:2]
    for name, arr in (("mu", stats.mu), ("sigma2", stats.sigma2),
                      ("mu_bar", sampled.mu_bar), ("sigma_bar", sampled.sigma_bar)):
        if arr.shape != (B, C, 1, 1):
            raise ValueError(f"{name} has shape {arr.shape}, expected {(B, C, 1, 1)} for input {z.shape}")
    scale = sampled.sigma_bar / np.sqrt(stats.sigma2 + NORM_RIDGE)
    shift = sampled.mu_bar - stats.mu * scale
    return z * scale + shift


def sample_styles(stats: StyleStats, eps: float, rng: np.random.Generator,
                  max_draws: int = DEFAULT_MAX_DRAWS) -> SampledStyle:
    B, C = stats.mu.shape[:2]
    mu = stats.mu.reshape(B, C)
    sigma = np.sqrt(stats.sigma2.reshape(B, C))
    mu_model = fit_style_gaussian(mu)
    sigma_model = fit_style_gaussian(sigma)
    mu_bar, d_mu, f_mu = sample_tail_batch(mu_model, B, eps, rng, max_draws)
    sigma_bar, d_sig, f_sig = sample_tail_batch(sigma_model, B, eps, rng, max_draws)
    sigma_bar = np.maximum(sigma_bar, SIGMA_FLOOR)
    return SampledStyle(
        mu_bar=mu_bar.reshape(B, C, 1, 1),
        sigma_bar=sigma_bar.reshape(B, C, 1, 1),
        draws_mu=d_mu,
        draws_sigma=d_sig,
        fallback_mu=f_mu,
        fallback_sigma=f_sig,
    )


def ids(z, eps: float = DEFAULT_EPS, rng: np.random.Generator | None = None,
        max_draws: int = DEFAULT_MAX_DRAWS, return_style: bool = False):
    """Re-style a [B, C, 1, W] feature map with tail samples of its own batch statistics."""
    if rng is None:
        raise ValueError("ids needs an explicit random generator")
    stats = spatial_stats(z)
    sampled = sample_styles(stats, eps, rng, max_draws)
    out = ids_transform(z, stats, sampled)
    return (out, sampled) if return_style else out


class IDSAugmenter:
    """Callable wrapper holding the knobs and rng stream of one training run."""

    def __init__(self, eps: float = DEFAULT_EPS, max_draws: int = DEFAULT_MAX_DRAWS,
                 rng: np.random.Generator | None = None):
        self.eps = eps
        self.max_draws = max_draws
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.last_style: SampledStyle | None = None

    def __call__(self, z: Tensor) -> Tensor:
        out, self.last_style = ids(z, self.eps, self.rng, self.max_draws, return_style=True)
        return out
