"""Isotropic Gaussian mixtures with exact score, Hessian and posterior moments.

Everything is vectorised over a leading batch axis: ``x`` may be a single
point of shape ``(D,)`` or a batch ``(n, D)`` and results follow suit.
Responsibilities are always formed in log space, since the 40-component
preset spans [-40, 40]^2 and naive densities underflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import rng as rng_mod


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    weights: np.ndarray    # (N,)
    means: np.ndarray      # (N, D)
    variances: np.ndarray  # (N,) per-component isotropic variance

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        var = np.asarray(self.variances, dtype=np.float64).reshape(-1)
        if mu.shape[0] != w.shape[0] or var.shape != w.shape:
            raise ValueError("weights, means and variances disagree on the number of components")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(mu)) and np.all(np.isfinite(var))):
            raise ValueError("mixture parameters must be finite")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be non-negative and sum to 1")
        if np.any(var <= 0):
            raise ValueError("component variances must be positive")
        for name, arr in (("weights", w), ("means", mu), ("variances", var)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def D(self) -> int:
        return self.means.shape[1]

    @property
    def N(self) -> int:
        return self.weights.shape[0]

    def total_variance(self) -> float:
        """Average per-coordinate variance of the mixture."""
        mean = self.weights @ self.means
        spread = self.weights @ np.sum((self.means - mean) ** 2, axis=1) / self.D
        return float(self.weights @ self.variances + spread)

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }


# -- broadcasting kernels -------------------------------------------------
# means: (..., N, D), variances: (..., N), x: (..., D)

def _log_resp(weights, means, variances, x):
    D = means.shape[-1]
    diff = means - x[..., None, :]
    sq = np.sum(diff * diff, axis=-1)
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    logc = logw - 0.5 * D * np.log(2 * np.pi * variances) - sq / (2 * variances)
    lse = logsumexp(logc, axis=-1)
    return logc - lse[..., None], lse, diff


def _score(weights, means, variances, x):
    logr, _, diff = _log_resp(weights, means, variances, x)
    r = np.exp(logr)
    return np.einsum("...n,...nd->...d", r / variances, diff)


def _hessian(weights, means, variances, x):
    logr, _, diff = _log_resp(weights, means, variances, x)
    r = np.exp(logr)
    g = diff / variances[..., None]
    s = np.einsum("...n,...nd->...d", r, g)
    D = x.shape[-1]
    H = np.einsum("...n,...nd,...ne->...de", r, g, g)
    H -= np.einsum("...n->...", r / variances)[..., None, None] * np.eye(D)
    H -= s[..., :, None] * s[..., None, :]
    return 0.5 * (H + np.swapaxes(H, -1, -2))


def _hessian_diag(weights, means, variances, x):
    logr, _, diff = _log_resp(weights, means, variances, x)
    r = np.exp(logr)
    g = diff / variances[..., None]
    s = np.einsum("...n,...nd->...d", r, g)
    return np.einsum("...n,...nd->...d", r, g * g - 1.0 / variances[..., None]) - s * s


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("x must be finite")
    return x


def noisy_params(gm: GaussianMixture, alpha, sigma2):
    """Component means/variances of the law of ``alpha * x + sqrt(sigma2) * eps``.

    ``alpha`` and ``sigma2`` may be scalars or arrays of shape ``(n,)``;
    array inputs yield per-sample parameter stacks for the kernels above.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    means = alpha[..., None, None] * gm.means
    variances = alpha[..., None] ** 2 * gm.variances + sigma2[..., None]
    return means, variances


# -- public API -------------------------------------------------------------

def diffuse(gm: GaussianMixture, sched, t: int) -> GaussianMixture:
    """Exact marginal q(x_t) of the forward process started from ``gm``."""
    if not 0 <= t <= sched.T:
        raise ValueError(f"t must lie in [0, {sched.T}], got {t}")
    if t == 0:
        return gm
    abar = float(sched.alpha_bar(t))
    return GaussianMixture(
        gm.weights,
        math.sqrt(abar) * gm.means,
        abar * gm.variances + (1.0 - abar),
    )


def log_density(gm: GaussianMixture, x):
    x = _as_batch(x)
    _, lse, _ = _log_resp(gm.weights, gm.means, gm.variances, x)
    return lse


def responsibilities(gm: GaussianMixture, x):
    x = _as_batch(x)
    logr, _, _ = _log_resp(gm.weights, gm.means, gm.variances, x)
    return np.exp(logr)


def score(gm: GaussianMixture, x):
    return _score(gm.weights, gm.means, gm.variances, _as_batch(x))


def hessian(gm: GaussianMixture, x):
    return _hessian(gm.weights, gm.means, gm.variances, _as_batch(x))


def hessian_diag(gm: GaussianMixture, x):
    return _hessian_diag(gm.weights, gm.means, gm.variances, _as_batch(x))


def true_posterior_cov(gm0: GaussianMixture, alpha, sigma2, x_tilde):
    """Covariance of q(x | x̃) for x̃ = alpha*x + N(0, sigma2 I), from the
    Hessian of the noisy marginal: (sigma2² H + sigma2 I) / alpha².
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if np.any(sigma2 <= 0):
        raise ValueError("sigma2 must be positive")
    if np.any(alpha <= 0):
        raise ValueError("alpha must be positive")
    x = _as_batch(x_tilde)
    means, variances = noisy_params(gm0, alpha, sigma2)
    H = _hessian(gm0.weights, means, variances, x)
    s2 = sigma2[..., None, None]
    return (s2 * s2 * H + s2 * np.eye(gm0.D)) / alpha[..., None, None] ** 2


def posterior_moments(gm0: GaussianMixture, alpha, sigma2, x_tilde):
    """Mean and covariance of q(x | x̃) by direct mixture-posterior algebra.

    Each component posterior is Gaussian, so this route never touches
    derivatives of the marginal and serves as an independent check.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    x = _as_batch(x_tilde)
    means, variances = noisy_params(gm0, alpha, sigma2)
    logr, _, _ = _log_resp(gm0.weights, means, variances, x)
    r = np.exp(logr)
    a = alpha[..., None]
    gain = a * gm0.variances / variances                     # (..., N)
    c = gm0.variances * sigma2[..., None] / variances        # (..., N)
    m = gm0.means + gain[..., None] * (x[..., None, :] - a[..., None] * gm0.means)
    mean = np.einsum("...n,...nd->...d", r, m)
    dev = m - mean[..., None, :]
    cov = np.einsum("...n,...nd,...ne->...de", r, dev, dev)
    cov += np.einsum("...n,...n->...", r, c)[..., None, None] * np.eye(gm0.D)
    return mean, cov


def noise_second_moment(gm0: GaussianMixture, abar, x_t):
    """Elementwise E[eps² | x_t] with x_t = sqrt(abar) x_0 + sqrt(1-abar) eps."""
    abar = np.asarray(abar, dtype=np.float64)
    x = _as_batch(x_t)
    alpha = np.sqrt(abar)
    sigma2 = 1.0 - abar
    means, variances = noisy_params(gm0, alpha, sigma2)
    logr, _, _ = _log_resp(gm0.weights, means, variances, x)
    r = np.exp(logr)
    a = alpha[..., None]
    gain = a * gm0.variances / variances
    c = gm0.variances * sigma2[..., None] / variances
    m = gm0.means + gain[..., None] * (x[..., None, :] - a[..., None] * gm0.means)
    resid = x[..., None, :] - a[..., None] * m
    per = resid ** 2 + (abar[..., None] * c)[..., None]
    return np.einsum("...n,...nd->...d", r, per) / sigma2[..., None]


def sample(gm: GaussianMixture, n: int, rng: np.random.Generator, return_components=False):
    if n < 0:
        raise ValueError("n must be non-negative")
    comp = rng.choice(gm.N, size=n, p=gm.weights)
    noise = rng.standard_normal((n, gm.D))
    x = gm.means[comp] + np.sqrt(gm.variances[comp])[:, None] * noise
    return (x, comp) if return_components else x


# -- presets ------------------------------------------------------------------

TOY40_SEED = 0


def toy9() -> GaussianMixture:
    """Nine components on the {-3,0,3}² grid with standard deviation 0.1."""
    g = np.array([-3.0, 0.0, 3.0])
    means = np.array([(a, b) for a in g for b in g])
    return GaussianMixture(np.full(9, 1 / 9), means, np.full(9, 0.01))


def toy40(seed: int = TOY40_SEED) -> GaussianMixture:
    """Forty components with means drawn uniformly on [-40, 40]², variance 40."""
    means = rng_mod.stream(seed, "toy40-means").uniform(-40.0, 40.0, size=(40, 2))
    return GaussianMixture(np.full(40, 1 / 40), means, np.full(40, 40.0))


def toy40_grid() -> GaussianMixture:
    """Grid variant of ``toy40``: an 8x5 lattice spanning [-40, 40]²."""
    xs = np.linspace(-40.0, 40.0, 8)
    ys = np.linspace(-40.0, 40.0, 5)
    means = np.array([(a, b) for a in xs for b in ys])
    return GaussianMixture(np.full(40, 1 / 40), means, np.full(40, 40.0))


def gaussian(mean, variance: float) -> GaussianMixture:
    return GaussianMixture(np.ones(1), np.atleast_2d(mean), np.array([variance]))


PRESETS = {"toy9": toy9, "toy40": toy40, "toy40_grid": toy40_grid}


def from_spec(spec) -> GaussianMixture:
    """Resolve a preset name or an inline {weights, means, variances} mapping."""
    if isinstance(spec, str):
        try:
            return PRESETS[spec]()
        except KeyError:
            raise ValueError(f"unknown mixture preset {spec!r}; known: {sorted(PRESETS)}") from None
    return GaussianMixture(
        np.asarray(spec["weights"], dtype=np.float64),
        np.asarray(spec["means"], dtype=np.float64),
        np.asarray(spec["variances"], dtype=np.float64),
    )
