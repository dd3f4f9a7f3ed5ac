"""Evaluation: multi-bandwidth MMD, covariance error curves and ELBO-based NLL."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import mog
from .fields import OracleScore
from .objectives import NumericalAbort, gaussian_kl
from .samplers import DDPM, DenoiseModel, TrueDiag, cov_diag, ddpm_mean
from .schedule import alpha_bar_ratio

BANDWIDTHS = (0.25, 0.5, 1.0, 2.0, 4.0)
KERNEL_CONVENTION = "k(x,y)=exp(-||x-y||^2/(2h^2))"
_CHUNK_ELEMS = 1 << 19


def _kernel_sums(x, y, bandwidths, symmetric=False):
    """Sum of k(x_i, y_j) over all pairs, for each bandwidth.

    With ``symmetric`` (x is y) only the upper block triangle is evaluated.
    Work is chunked by rows and done in place to stay cache-resident.
    """
    order = np.argsort(bandwidths)[::-1]
    totals = np.zeros(len(bandwidths))
    y2 = np.sum(y * y, axis=1)
    rows = max(1, _CHUNK_ELEMS // max(len(y), 1))
    for start in range(0, len(x), rows):
        xb = x[start:start + rows]
        yb, y2b = (y[start:], y2[start:]) if symmetric else (y, y2)
        d = xb @ yb.T
        d *= -2.0
        d += np.sum(xb * xb, axis=1)[:, None]
        d += y2b[None, :]
        np.maximum(d, 0.0, out=d)
        k = np.empty_like(d)
        prev_h = None
        for i in order:
            h = bandwidths[i]
            if prev_h is not None and prev_h == 2.0 * h:
                # halving the bandwidth raises the kernel to the 4th power
                np.multiply(k, k, out=k)
                np.multiply(k, k, out=k)
            else:
                np.multiply(d, -1.0 / (2.0 * h * h), out=k)
                np.exp(k, out=k)
            if symmetric:
                totals[i] += 2.0 * k.sum() - k[:, : len(xb)].sum()
            else:
                totals[i] += k.sum()
            prev_h = h
    return totals


class MMDReference:
    """Caches the reference-reference kernel sums for repeated comparisons."""

    def __init__(self, y, bandwidths=BANDWIDTHS):
        self.y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        self.bandwidths = tuple(float(h) for h in bandwidths)
        self._yy = _kernel_sums(self.y, self.y, self.bandwidths, symmetric=True)

    def compare(self, x, unbiased=True):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n, m = len(x), len(self.y)
        if x.shape[1] != self.y.shape[1]:
            raise ValueError("batches have different dimensions")
        if unbiased and (n < 2 or m < 2):
            raise ValueError("the unbiased estimator needs at least 2 points per batch")
        xx = _kernel_sums(x, x, self.bandwidths, symmetric=True)
        xy = _kernel_sums(x, self.y, self.bandwidths)
        if unbiased and n == m:
            # equal sizes: U-statistic over pairs i != j, so the paired cross terms k(x_i, y_i) drop out
            d = np.sum((x - self.y) ** 2, axis=1)
            paired = np.array([np.exp(-d / (2.0 * h * h)).sum() for h in self.bandwidths])
            vals = (xx - n + self._yy - n - 2.0 * (xy - paired)) / (n * (n - 1))
        elif unbiased:
            vals = (xx - n) / (n * (n - 1)) + (self._yy - m) / (m * (m - 1)) - 2.0 * xy / (n * m)
        else:
            vals = xx / n**2 + self._yy / m**2 - 2.0 * xy / (n * m)
        return vals, float(vals.sum())


def mmd(x, y, bandwidths=BANDWIDTHS, unbiased=True):
    """Squared MMD per RBF bandwidth and their sum.

    The unbiased U-statistic drops the i == j terms and can be negative.
    For equal batch sizes the cross term also skips the pairs (x_i, y_i).
    """
    return MMDReference(y, bandwidths).compare(x, unbiased=unbiased)


def cov_error_curve(strategy, oracle_gm, sched, t_grid, n_x, rng, score_field=None):
    """Per-t mean (and standard error) of ||diag Σ̂_{t-1}(x) - diag Σ*_{t-1}(x)||₂, x ~ q(x_t)."""
    oracle = OracleScore(oracle_gm, sched)
    model = DenoiseModel(score_field or oracle, strategy, sched)
    truth = DenoiseModel(oracle, TrueDiag(oracle_gm), sched)
    out = []
    for t in t_grid:
        x = mog.sample(mog.diffuse(oracle_gm, sched, t), n_x, rng)
        err = np.linalg.norm(cov_diag(model, x, t, t - 1, rng) - cov_diag(truth, x, t, t - 1), axis=-1)
        se = float(err.std(ddof=1) / math.sqrt(n_x)) if n_x > 1 else 0.0
        out.append((int(t), float(err.mean()), se))
    return out


def _kl_to_model(mu_q, var_q, mu_p, cov_p):
    if cov_p.ndim == 2:
        return gaussian_kl(mu_q, var_q, mu_p, cov_p)
    D = mu_q.shape[-1]
    L = np.linalg.cholesky(cov_p)
    diff = np.linalg.solve(L, (mu_p - mu_q)[..., None])[..., 0]
    Linv = np.linalg.inv(L)
    trace = var_q[..., 0] * np.sum(Linv * Linv, axis=(-2, -1))
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    return 0.5 * (trace + np.sum(diff**2, axis=-1) - D + logdet - D * np.log(var_q[..., 0]))


def _nll_gauss(x, mu, cov):
    if cov.ndim == 2:
        return 0.5 * np.sum(np.log(2 * np.pi * cov) + (x - mu) ** 2 / cov, axis=-1)
    D = x.shape[-1]
    L = np.linalg.cholesky(cov)
    z = np.linalg.solve(L, (x - mu)[..., None])[..., 0]
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    return 0.5 * (D * np.log(2 * np.pi) + logdet + np.sum(z**2, axis=-1))


def nll_elbo(model: DenoiseModel, trajectory, x0, rng, n_mc=1):
    """Negative ELBO in nats per dimension, with its standard error over ``x0``.

    Terms: prior KL at T, one KL per skip transition with t' >= 1, and the
    Gaussian reconstruction term of the final transition to 0.  Each term's
    expectation over x_t ~ q(x_t | x_0) is estimated with ``n_mc`` draws.
    """
    if model.forward_kind != DDPM:
        raise ValueError("the ELBO is only finite for the DDPM forward process")
    sched = model.sched
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    n, D = x0.shape
    abar_T = sched.alpha_bar(sched.T)
    total = gaussian_kl(np.sqrt(abar_T) * x0, np.full_like(x0, 1.0 - abar_T), 0.0, 1.0)
    for t, tp in trajectory.transitions():
        abar_t, abar_tp = sched.alpha_bar(t), sched.alpha_bar(tp)
        a = alpha_bar_ratio(sched, tp, t)
        acc = np.zeros(n)
        for _ in range(n_mc):
            x_t = np.sqrt(abar_t) * x0 + np.sqrt(1.0 - abar_t) * rng.standard_normal(x0.shape)
            mu_p = ddpm_mean(model, x_t, t, tp)
            cov_p = cov_diag(model, x_t, t, tp, rng)
            if tp == 0:
                term = _nll_gauss(x0, mu_p, cov_p)
            else:
                lam2 = (1.0 - abar_tp) * (1.0 - a) / (1.0 - abar_t)
                mu_q = (math.sqrt(abar_tp) * (1.0 - a) * x0 + math.sqrt(a) * (1.0 - abar_tp) * x_t) / (1.0 - abar_t)
                term = _kl_to_model(mu_q, np.full_like(x0, lam2), mu_p, cov_p)
            if not np.all(np.isfinite(term)):
                raise NumericalAbort(f"non-finite ELBO term at t={t} -> {tp}")
            acc += term
        total = total + acc / n_mc
    per_dim = total / D
    se = float(per_dim.std(ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
    return float(per_dim.mean()), se


@dataclass
class EvalReport:
    mmd_per_bandwidth: list
    mmd_total: float
    bandwidths: list = field(default_factory=lambda: list(BANDWIDTHS))
    kernel: str = KERNEL_CONVENTION
    nll_nats_per_dim: float | None = None
    nll_se: float | None = None
    cov_error_per_t: list = field(default_factory=list)
    runtime_sec: float = 0.0
    config_hash: str = ""
    rng_algorithm: str = ""
    label: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    def csv_row(self) -> dict:
        row = {"label": self.label, "config_hash": self.config_hash, "mmd_total": self.mmd_total}
        for h, v in zip(self.bandwidths, self.mmd_per_bandwidth):
            row[f"mmd_h{h:g}"] = v
        row["nll_nats_per_dim"] = "" if self.nll_nats_per_dim is None else self.nll_nats_per_dim
        row["nll_se"] = "" if self.nll_se is None else self.nll_se
        # wall-clock time stays in the JSON report so ledger rows are reproducible
        return row
