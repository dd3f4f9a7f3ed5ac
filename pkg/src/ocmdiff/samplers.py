"""Skip-step DDPM / DDIM reverse samplers with pluggable covariance strategies.

A transition goes from ``t`` down to ``t_prime``.  Every strategy returns the
diagonal of Σ_{t'}(x_t) (or the full matrix for :class:`TrueFull`); DDIM
evaluates the same strategies at ``t_prime = 0`` to get Σ_0(x_t).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import mog, rng as rng_mod
from .objectives import adpm_variance, hvp_diag_target, rademacher
from .schedule import NoiseSchedule, Trajectory, alpha_bar_ratio, beta_tilde, beta_tilde_clipped

COV_FLOOR = 1e-12
CHOL_JITTER = 1e-10
CHAIN_BLOCK = 4096

DDPM = "ddpm"
DDIM = "ddim"


class SamplingError(RuntimeError):
    pass


def _coeffs(sched, t, t_prime):
    if not 0 <= t_prime < t <= sched.T:
        raise ValueError(f"need 0 <= t' < t <= T, got t={t}, t'={t_prime}")
    return alpha_bar_ratio(sched, t_prime, t)


def ocm_form(h_diag, a):
    """((1-a)² h + (1-a)) / a, with ``a`` the retained signal ᾱ_{t':t}."""
    return ((1.0 - a) ** 2 * h_diag + (1.0 - a)) / a


def chain_cov(cov0, sched, t, t_prime):
    """Cov[x_t' | x_t] = λ² I + γ² Cov[x_0 | x_t] for the forward chain."""
    a = alpha_bar_ratio(sched, t_prime, t)
    abar_t, abar_tp = sched.alpha_bar(t), sched.alpha_bar(t_prime)
    lam2 = (1.0 - abar_tp) * (1.0 - a) / (1.0 - abar_t)
    gamma = math.sqrt(abar_tp) * (1.0 - a) / (1.0 - abar_t)
    return lam2 + gamma**2 * cov0


def sn_cov0(g, score, abar_t):
    """Diagonal of Cov[x_0 | x_t] from E[eps² | x_t] and the score."""
    return (1.0 - abar_t) ** 2 / abar_t * (g / (1.0 - abar_t) - score**2)


def sn_one_step(g, score, sched, t):
    """The one-step squared-noise covariance written with β_t²/α_t (t' = t-1 only)."""
    beta = float(sched.beta(t))
    abar_t = sched.alpha_bar(t)
    return beta_tilde(sched, t, t - 1) + beta**2 / (1.0 - beta) * (g / (1.0 - abar_t) - score**2)


# -- strategies ---------------------------------------------------------------

class FixedBeta:
    name = "fixed_beta"
    full = False

    def diag(self, model, x, t, tp, rng=None):
        a = _coeffs(model.sched, t, tp)
        return np.full(np.shape(x), 1.0 - a)


class FixedBetaTilde:
    name = "fixed_beta_tilde"
    full = False

    def diag(self, model, x, t, tp, rng=None):
        _coeffs(model.sched, t, tp)
        return np.full(np.shape(x), beta_tilde(model.sched, t, tp))


@dataclass
class ADPM:
    """State-independent isotropic variance from E||score||² at each t."""
    sq_norms: dict
    name = "adpm"
    full = False

    def diag(self, model, x, t, tp, rng=None):
        _coeffs(model.sched, t, tp)
        if t not in self.sq_norms:
            raise SamplingError(f"no E||score||² estimate stored for t={t}")
        s2 = adpm_variance(self.sq_norms[t], model.sched, t, tp, np.shape(x)[-1])
        return np.full(np.shape(x), s2)


@dataclass
class IDDPM:
    """Log-interpolation between the β and β̃ skip forms with a learned weight."""
    v_net: object
    name = "iddpm"
    full = False

    def diag(self, model, x, t, tp, rng=None):
        a = _coeffs(model.sched, t, tp)
        if tp == 0 and model.forward_kind == DDIM:
            raise SamplingError("the interpolated-variance strategy is undefined for x_0 | x_t (DDIM)")
        v = self.v_net(x, np.full(len(x), t))
        return np.exp(v * math.log(1.0 - a) + (1.0 - v) * math.log(beta_tilde_clipped(model.sched, t, tp)))


@dataclass
class SN:
    """Squared-noise regression converted through Cov[x_0|x_t] and the chain identity."""
    g_net: object
    name = "sn"
    full = False

    def diag(self, model, x, t, tp, rng=None):
        _coeffs(model.sched, t, tp)
        tt = np.full(len(x), t)
        cov0 = sn_cov0(self.g_net(x, tt), model.score(x, tt), model.sched.alpha_bar(t))
        return chain_cov(cov0, model.sched, t, tp)


@dataclass
class OCM:
    h_net: object
    name = "ocm"
    full = False

    def diag(self, model, x, t, tp, rng=None):
        a = _coeffs(model.sched, t, tp)
        return ocm_form(self.h_net(x, np.full(len(x), t)), a)


@dataclass
class RademacherOnline:
    M: int = 100
    name = "rademacher"
    full = False

    def diag(self, model, x, t, tp, rng=None):
        a = _coeffs(model.sched, t, tp)
        if rng is None:
            raise SamplingError("online Rademacher estimation needs an rng")
        tt = np.full(len(x), t)
        est = np.zeros(np.shape(x))
        for _ in range(self.M):
            est += hvp_diag_target(model.score_field, x, tt, rademacher(rng, *np.shape(x)))
        return ocm_form(est / self.M, a)


@dataclass
class TrueDiag:
    gm0: mog.GaussianMixture
    name = "true_diag"
    full = False

    def diag(self, model, x, t, tp, rng=None):
        return np.diagonal(_true_cov(self.gm0, model.sched, x, t, tp), axis1=-2, axis2=-1).copy()


@dataclass
class TrueFull:
    gm0: mog.GaussianMixture
    name = "true_full"
    full = True

    def diag(self, model, x, t, tp, rng=None):
        return _true_cov(self.gm0, model.sched, x, t, tp)


def _true_cov(gm0, sched, x, t, tp):
    a = _coeffs(sched, t, tp)
    gm_tp = mog.diffuse(gm0, sched, tp)
    return mog.true_posterior_cov(gm_tp, math.sqrt(a), 1.0 - a, x)


STRATEGY_NAMES = ("fixed_beta", "fixed_beta_tilde", "adpm", "iddpm", "sn", "ocm",
                  "rademacher", "true_diag", "true_full")


# -- model and transitions ----------------------------------------------------

@dataclass
class ClipPolicy:
    mean_only_last: bool = False
    bound: float | None = None  # y in ||Σ||_inf E|eps| <= (2/255) y


@dataclass
class DenoiseModel:
    score_field: object
    strategy: object
    sched: NoiseSchedule
    forward_kind: str = DDPM

    def score(self, x, t):
        return self.score_field(x, t)


def ddpm_mean(model: DenoiseModel, x_t, t, t_prime):
    a = _coeffs(model.sched, t, t_prime)
    s = model.score(x_t, np.full(len(x_t), t))
    return (x_t + (1.0 - a) * s) / math.sqrt(a)


def ddim_x0_mean(model: DenoiseModel, x_t, t):
    abar = model.sched.alpha_bar(t)
    s = model.score(x_t, np.full(len(x_t), t))
    return (x_t + (1.0 - abar) * s) / math.sqrt(abar)


def cov_diag(model: DenoiseModel, x_t, t, t_prime, rng=None):
    """Strategy covariance, floored at ``COV_FLOOR`` (diagonal) after assembly."""
    x_t = np.atleast_2d(x_t)
    cov = model.strategy.diag(model, x_t, t, t_prime, rng)
    if not np.all(np.isfinite(cov)):
        raise SamplingError(f"{model.strategy.name} produced a non-finite covariance at t={t}")
    if model.strategy.full:
        idx = np.arange(cov.shape[-1])
        cov = cov.copy()
        cov[..., idx, idx] = np.maximum(cov[..., idx, idx], COV_FLOOR)
        return cov
    return np.maximum(cov, COV_FLOOR)


def _clip(cov, bound):
    limit = (2.0 / 255.0) * bound / math.sqrt(2.0 / math.pi)
    if cov.ndim == 3:
        peak = np.max(np.diagonal(cov, axis1=-2, axis2=-1), axis=-1)
        return cov * np.minimum(1.0, limit / peak)[:, None, None]
    return np.minimum(cov, limit)


def _gaussian_draw(mean, cov, rng):
    eps = rng.standard_normal(mean.shape)
    if cov.ndim == 2:
        return mean + np.sqrt(cov) * eps
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        try:
            L = np.linalg.cholesky(cov + CHOL_JITTER * np.eye(cov.shape[-1]))
        except np.linalg.LinAlgError as exc:
            raise SamplingError("covariance is not positive definite") from exc
    return mean + np.einsum("nij,nj->ni", L, eps)


def ddpm_step(model, x_t, t, t_prime, rng, cov=None):
    """x_t' = μ_t'(x_t) + Σ_t'(x_t)^{1/2} eps."""
    mean = ddpm_mean(model, x_t, t, t_prime)
    if cov is None:
        cov = cov_diag(model, x_t, t, t_prime, rng)
    return _gaussian_draw(mean, cov, rng)


def ddim_step(model, x_t, t, t_prime, rng, cov0=None):
    """Draw x_0 ~ N(μ_0(x_t), Σ_0(x_t)) and map it forward deterministically to t'."""
    if not 0 <= t_prime < t <= model.sched.T:
        raise ValueError(f"need 0 <= t' < t <= T, got t={t}, t'={t_prime}")
    if cov0 is None:
        cov0 = cov_diag(model, x_t, t, 0, rng)
    x0 = _gaussian_draw(ddim_x0_mean(model, x_t, t), cov0, rng)
    return ddim_push(model.sched, x0, x_t, t, t_prime)


def ddim_push(sched, x0, x_t, t, t_prime):
    abar_t, abar_tp = sched.alpha_bar(t), sched.alpha_bar(t_prime)
    if t_prime == 0:
        return x0
    eps_hat = (x_t - math.sqrt(abar_t) * x0) / math.sqrt(1.0 - abar_t)
    return math.sqrt(abar_tp) * x0 + math.sqrt(1.0 - abar_tp) * eps_hat


def _run_block(model, trajectory, n, rng, clip):
    D = _dim(model)
    x = rng.standard_normal((n, D))
    transitions = trajectory.transitions()
    last = len(transitions) - 1
    for k, (t, tp) in enumerate(transitions):
        try:
            if k == last and clip.mean_only_last:
                x = ddpm_mean(model, x, t, tp) if model.forward_kind == DDPM else ddim_x0_mean(model, x, t)
                continue
            target = tp if model.forward_kind == DDPM else 0
            cov = cov_diag(model, x, t, target, rng)
            if clip.bound is not None and k == last - 1:
                cov = _clip(cov, clip.bound)
            if model.forward_kind == DDPM:
                x = ddpm_step(model, x, t, tp, rng, cov=cov)
            else:
                x = ddim_step(model, x, t, tp, rng, cov0=cov)
        except (SamplingError, np.linalg.LinAlgError, ValueError) as exc:
            raise SamplingError(f"step {k} (t={t} -> {tp}): {exc}") from exc
    return x


def _dim(model):
    sf = model.score_field
    if hasattr(sf, "gm0"):
        return sf.gm0.D
    return sf.net.in_dim


def sample_chain(model: DenoiseModel, trajectory: Trajectory, n: int, seed: int,
                 clip: ClipPolicy | None = None, label: str = "chains"):
    """Run ``n`` reverse chains from x_T ~ N(0, I) and return the terminal batch.

    Chains are processed in fixed blocks of ``CHAIN_BLOCK``; block ``b``
    draws from the stream ``(seed, label, b)``, so results do not depend on
    how blocks are scheduled.
    """
    if trajectory.T != model.sched.T:
        raise ValueError("trajectory must end at the schedule's T")
    clip = clip or ClipPolicy()
    D = _dim(model)
    blocks = []
    for b, start in enumerate(range(0, n, CHAIN_BLOCK)):
        m = min(CHAIN_BLOCK, n - start)
        blocks.append(_run_block(model, trajectory, m, rng_mod.stream(seed, label, b), clip))
    return np.concatenate(blocks) if blocks else np.empty((0, D))
