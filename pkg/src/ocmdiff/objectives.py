"""Training objectives for the score and covariance networks.

Covered: denoising score matching, optimal covariance matching (regressing
``v * (H v)`` for Rademacher ``v``), squared-noise regression, the
interpolated-variance bound, and the closed-form isotropic estimate.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import mog, neural, rng as rng_mod
from .fields import HESS_DIAG, INTERP, NOISE_SQ, SCORE, CondNet
from .schedule import NoiseSchedule, alpha_bar_ratio, beta_tilde_clipped

log = logging.getLogger(__name__)

DSM = "dsm"
OCM = "ocm"
SN = "sn"
VLB = "vlb"
OBJECTIVE_KIND = {DSM: SCORE, OCM: HESS_DIAG, SN: NOISE_SQ, VLB: INTERP}

LOSS_LIMIT = 1e12


class NumericalAbort(RuntimeError):
    """Training or evaluation hit a non-finite or exploding value."""


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 50_000
    batch_size: int = 256
    lr: float = 1e-3
    M: int = 1
    timestep_sampling: str = "uniform"
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.timestep_sampling != "uniform":
            raise ValueError(f"unsupported timestep_sampling {self.timestep_sampling!r}")


def rademacher(rng: np.random.Generator, n: int, D: int) -> np.ndarray:
    return 2.0 * rng.integers(0, 2, size=(n, D)) - 1.0


def hvp_diag_target(score_field, x, t, v):
    """One unbiased draw ``v * (H v)`` of the score-Jacobian diagonal."""
    return v * score_field.jvp(x, t, v)


def gaussian_kl(mu_q, var_q, mu_p, var_p):
    """KL(N(mu_q, var_q) || N(mu_p, var_p)) for diagonal Gaussians, summed over the last axis."""
    return 0.5 * np.sum(
        np.log(var_p) - np.log(var_q) + (var_q + (mu_q - mu_p) ** 2) / var_p - 1.0, axis=-1
    )


def _draw_t(rng, sched, n):
    return rng.integers(1, sched.T + 1, size=n)


def _noised(sched, x0, t, eps):
    abar = sched.alpha_bar(t)[:, None]
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


# -- losses as plain evaluations --------------------------------------------

def ocm_loss(h, score_field, x_t, t, v):
    """Mean of ||h(x) - v * (H v)||² over data and Rademacher draws.

    ``v`` has shape ``(n, D)`` or ``(M, n, D)``.  ``h`` is a callable
    ``(x, t) -> (n, D)``; the score field only supplies targets.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 2:
        v = v[None]
    pred = h(x_t, t)
    targets = np.stack([hvp_diag_target(score_field, x_t, t, vm) for vm in v])
    return float(np.mean(np.sum((pred[None] - targets) ** 2, axis=-1)))


def dsm_loss(s, gm0, sched, x0, rng, t=None):
    """E||s(x_t, t) + eps / sqrt(1-ᾱ_t)||² with t uniform on 1..T unless given."""
    x0 = np.atleast_2d(x0)
    t = _draw_t(rng, sched, len(x0)) if t is None else np.broadcast_to(t, (len(x0),))
    eps = rng.standard_normal(x0.shape)
    x_t = _noised(sched, x0, t, eps)
    target = -eps / np.sqrt(1.0 - sched.alpha_bar(t))[:, None]
    return float(np.mean(np.sum((s(x_t, t) - target) ** 2, axis=-1)))


def sn_loss(g, gm0, sched, x0, rng, t=None):
    """E||eps² - g(x_t, t)||²."""
    x0 = np.atleast_2d(x0)
    t = _draw_t(rng, sched, len(x0)) if t is None else np.broadcast_to(t, (len(x0),))
    eps = rng.standard_normal(x0.shape)
    x_t = _noised(sched, x0, t, eps)
    return float(np.mean(np.sum((eps**2 - g(x_t, t)) ** 2, axis=-1)))


def _vlb_terms(v, t, x0, x_t, mean, sched):
    """Per-sample bound terms and d(term)/d(v) for interpolation weights ``v``."""
    t = np.asarray(t)
    beta = sched.beta(t)
    bt_clip = np.where(t == 1, beta_tilde_clipped(sched, 1, 0), _one_step_beta_tilde(sched, np.maximum(t, 2)))
    lb, lbt = np.log(beta)[:, None], np.log(bt_clip)[:, None]
    log_var = v * lb + (1.0 - v) * lbt
    var = np.exp(log_var)
    abar = sched.alpha_bar(t)[:, None]
    abar_prev = sched.alpha_bar(t - 1)[:, None]
    alpha = 1.0 - beta[:, None]
    post_mean = (np.sqrt(abar_prev) * beta[:, None] * x0 + np.sqrt(alpha) * (1.0 - abar_prev) * x_t) / (1.0 - abar)
    post_var = (1.0 - abar_prev) / (1.0 - abar) * beta[:, None]
    first = (t == 1)[:, None]
    # t = 1: Gaussian negative log-likelihood of x_0; t > 1: KL to the true posterior
    err0 = (x0 - mean) ** 2
    errk = (post_mean - mean) ** 2
    safe_post = np.where(first, 1.0, post_var)
    kl = 0.5 * (log_var - np.log(safe_post) + (safe_post + errk) / var - 1.0)
    nll = 0.5 * (math.log(2 * math.pi) + log_var + err0 / var)
    term = np.where(first, nll, kl)
    dterm_dlogvar = np.where(first, 0.5 * (1.0 - err0 / var), 0.5 * (1.0 - (safe_post + errk) / var))
    return term.sum(axis=-1), dterm_dlogvar * (lb - lbt)


def _one_step_beta_tilde(sched, t):
    return (1.0 - sched.alpha_bar(t - 1)) / (1.0 - sched.alpha_bar(t)) * sched.beta(t)


def vlb_loss(v_net, s, gm0, sched, x0, rng, t=None):
    """One-step bound on E[-log p] with the mean frozen at the score-based value."""
    x0 = np.atleast_2d(x0)
    t = _draw_t(rng, sched, len(x0)) if t is None else np.broadcast_to(t, (len(x0),))
    eps = rng.standard_normal(x0.shape)
    x_t = _noised(sched, x0, t, eps)
    mean = one_step_mean(s, sched, x_t, t)
    terms, _ = _vlb_terms(v_net(x_t, t), t, x0, x_t, mean, sched)
    return float(np.mean(terms))


def one_step_mean(s, sched, x_t, t):
    beta = sched.beta(t)[:, None]
    return (x_t + beta * s(x_t, t)) / np.sqrt(1.0 - beta)


# -- closed-form isotropic estimate -----------------------------------------

def expected_sq_score(score_field, gm0, sched, ts, n_mc, rng):
    """Monte Carlo E_{q(x_t)} ||s(x_t)||² for each t, with standard errors."""
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    out = {}
    for t in sorted(set(int(t) for t in ts)):
        x0 = mog.sample(gm0, n_mc, rng)
        x_t = _noised(sched, x0, np.full(n_mc, t), rng.standard_normal(x0.shape))
        sq = np.sum(score_field(x_t, t) ** 2, axis=-1)
        se = float(sq.std(ddof=1) / math.sqrt(n_mc)) if n_mc > 1 else float("nan")
        out[t] = (float(sq.mean()), se)
    return out


def adpm_variance(sq_norm: float, sched, t: int, t_prime: int, D: int) -> float:
    a = alpha_bar_ratio(sched, t_prime, t)
    sigma2 = (1.0 - a) / a - (1.0 - a) ** 2 / (D * a) * sq_norm
    return max(sigma2, 1e-12)


def addpm_sigma(score_field, gm0, sched, trajectory, n_mc, rng, forward_kind="ddpm"):
    """Per-transition isotropic variances for a trajectory (sampling order)."""
    pairs = trajectory.transitions()
    if forward_kind == "ddim":
        pairs = [(t, 0) for t, _ in pairs]
    norms = expected_sq_score(score_field, gm0, sched, [t for t, _ in pairs], n_mc, rng)
    return np.array([adpm_variance(norms[t][0], sched, t, tp, gm0.D) for t, tp in pairs])


# -- training ---------------------------------------------------------------

def _mse(pred, target):
    """Mean over batch of squared L2 error and its gradient w.r.t. ``pred``."""
    diff = pred - target
    n = pred.shape[0]
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


def _batch_step(objective, cnet, score_field, sched, x0, t, eps, rng, M):
    """Loss and dL/d(raw) for one minibatch, plus the forward cache."""
    x_t = _noised(sched, x0, t, eps)
    raw, cache = cnet.raw_cached(x_t, t)
    if objective == DSM:
        # noise-prediction form: (1-ᾱ_t) times the score-matching residual
        loss, g = _mse(raw, eps)
    elif objective == SN:
        loss, g = _mse(raw, eps**2)
    elif objective == OCM:
        # residual weighted by sqrt(1-ᾱ_t): tames the 1/(1-ᾱ_t) target scale
        # while keeping small t visible to the optimiser
        w = np.sqrt(1.0 - sched.alpha_bar(t))[:, None]
        h, dh = cnet.out_map(raw, t)
        pred = w * h
        targets = np.stack([
            w * hvp_diag_target(score_field, x_t, t, rademacher(rng, len(x0), x0.shape[1]))
            for _ in range(M)
        ])
        diff = pred[None] - targets
        n = raw.shape[0]
        loss = float(np.sum(diff * diff) / (M * n))
        g = 2.0 * w * dh * diff.mean(axis=0) / n
    elif objective == VLB:
        v = expit(raw)
        mean = one_step_mean(score_field, sched, x_t, t)
        terms, dv = _vlb_terms(v, t, x0, x_t, mean, sched)
        n = raw.shape[0]
        loss = float(np.mean(terms))
        g = dv * v * (1.0 - v) / n
    else:
        raise ValueError(f"unknown objective {objective!r}")
    return loss, g, cache


def train(objective: str, cnet: CondNet, gm0, sched: NoiseSchedule, cfg: TrainConfig,
          score_field=None, log_every: int = 0):
    """Fit ``cnet`` in place and return ``(cnet, loss_history)``.

    Timesteps are drawn uniformly from 1..T per batch element.  The score
    field is frozen; it supplies targets for OCM and the mean for VLB.
    """
    if OBJECTIVE_KIND[objective] != cnet.kind:
        raise ValueError(f"objective {objective!r} trains {OBJECTIVE_KIND[objective]!r} networks, got {cnet.kind!r}")
    if objective in (OCM, VLB) and score_field is None:
        raise ValueError(f"objective {objective!r} needs a score field")
    rng = rng_mod.stream(cfg.seed, "train", objective)
    params = cnet.net.params()
    state = neural.AdamState.zeros_like(params)
    history = np.empty(cfg.iterations)
    B = cfg.batch_size
    for it in range(cfg.iterations):
        x0 = mog.sample(gm0, B, rng)
        t = _draw_t(rng, sched, B)
        eps = rng.standard_normal(x0.shape)
        loss, g, cache = _batch_step(objective, cnet, score_field, sched, x0, t, eps, rng, cfg.M)
        if not math.isfinite(loss) or loss > LOSS_LIMIT:
            raise NumericalAbort(f"{objective} loss became {loss!r} at iteration {it}")
        grads = neural.backward(cnet.net, cache, g)
        neural.adam_step(state, params, grads, lr=cfg.lr)
        history[it] = loss
        if log_every and (it + 1) % log_every == 0:
            log.info("%s iter %d loss %.6g", objective, it + 1, history[max(0, it + 1 - log_every): it + 1].mean())
    return cnet, history
