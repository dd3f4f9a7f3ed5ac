"""Score fields and time-conditioned networks bound to a schedule.

A score field is any object with ``__call__(x, t) -> score`` and
``jvp(x, t, v) -> H v`` where ``H`` is the Jacobian of the score in ``x``.
Both the analytic mixture oracle and a trained network satisfy this.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from . import mog, neural
from .schedule import NoiseSchedule, make_schedule

SCORE = "score"
HESS_DIAG = "hess_diag"
NOISE_SQ = "noise_sq"
INTERP = "interp"
KINDS = (SCORE, HESS_DIAG, NOISE_SQ, INTERP)

# softplus(_SOFTPLUS_ONE) == 1
_SOFTPLUS_ONE = float(np.log(np.e - 1.0))


def _abar(sched, t):
    return np.asarray(sched.alpha_bar(np.asarray(t)), dtype=np.float64)


class OracleScore:
    """Exact score of the diffused mixture q(x_t)."""

    exact = True

    def __init__(self, gm0: mog.GaussianMixture, sched: NoiseSchedule):
        self.gm0 = gm0
        self.sched = sched

    def _params(self, t):
        abar = _abar(self.sched, t)
        return mog.noisy_params(self.gm0, np.sqrt(abar), 1.0 - abar)

    def __call__(self, x, t):
        means, var = self._params(t)
        return mog._score(self.gm0.weights, means, var, np.asarray(x, dtype=np.float64))

    def hessian(self, x, t):
        means, var = self._params(t)
        return mog._hessian(self.gm0.weights, means, var, np.asarray(x, dtype=np.float64))

    def hessian_diag(self, x, t):
        means, var = self._params(t)
        return mog._hessian_diag(self.gm0.weights, means, var, np.asarray(x, dtype=np.float64))

    def jvp(self, x, t, v):
        return np.einsum("...de,...e->...d", self.hessian(x, t), np.asarray(v, dtype=np.float64))


class CondNet:
    """An :class:`~ocmdiff.neural.Mlp` read through a schedule-aware parameterisation.

    Inputs are rescaled by ``1/sqrt(ᾱ_t * data_var + 1 - ᾱ_t)`` so every
    noise level sees unit-scale inputs.  The raw output is mapped to the
    physical quantity according to ``kind``:

    - ``score``: raw output is a noise prediction, score = -raw / sqrt(1-ᾱ_t)
    - ``hess_diag``: the raw output sets u = softplus(raw + log(e - 1)) >= 0,
      the posterior variance of x_0 relative to that of a Gaussian with the
      data variance, and h = (-1 + ᾱ_t * data_var * c² * u) / (1-ᾱ_t) with
      c = c_in.  raw = 0 gives that Gaussian's Hessian, and (1-ᾱ_t) h >= -1
      always holds, as it does for any true score Jacobian diagonal
    - ``noise_sq``: raw output is E[eps² | x_t]
    - ``interp``: sigmoid(raw) in [0, 1]
    """

    exact = False

    def __init__(self, net: neural.Mlp, sched: NoiseSchedule, kind: str, data_var: float = 1.0):
        if kind not in KINDS:
            raise ValueError(f"unknown network kind {kind!r}")
        self.net = net
        self.sched = sched
        self.kind = kind
        self.data_var = float(data_var)

    def c_in(self, t):
        abar = _abar(self.sched, t)
        return 1.0 / np.sqrt(abar * self.data_var + 1.0 - abar)

    def t_norm(self, t):
        return np.asarray(t, dtype=np.float64) / self.sched.T

    def _xin(self, x, t):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return x * np.reshape(self.c_in(t), (-1, 1))

    def raw(self, x, t):
        return neural.forward(self.net, self._xin(x, t), self.t_norm(t))

    def raw_cached(self, x, t):
        return neural.forward_cached(self.net, self._xin(x, t), self.t_norm(t))

    def out_map(self, raw, t):
        """Physical output for ``raw`` and its elementwise derivative in ``raw``."""
        abar = np.reshape(_abar(self.sched, t), (-1, 1))
        if self.kind == SCORE:
            scale = np.broadcast_to(-1.0 / np.sqrt(1.0 - abar), np.shape(raw))
            return raw * scale, scale
        if self.kind == HESS_DIAG:
            c2 = np.reshape(self.c_in(t), (-1, 1)) ** 2
            gain = abar * self.data_var * c2 / (1.0 - abar)
            # -1/(1-ᾱ) + gain * u, written around u = 1 to avoid cancellation;
            # u - 1 = log1p((1 - 1/e) expm1(raw)), exactly 0 at raw = 0
            big = raw > 30.0
            u_m1 = np.where(big, raw + _SOFTPLUS_ONE - 1.0,
                            np.log1p((1.0 - np.exp(-1.0)) * np.expm1(np.minimum(raw, 30.0))))
            return -c2 + gain * u_m1, gain * expit(raw + _SOFTPLUS_ONE)
        if self.kind == INTERP:
            v = expit(raw)
            return v, v * (1.0 - v)
        return raw, np.ones_like(raw)

    def __call__(self, x, t):
        return self.out_map(self.raw(x, t), t)[0]

    def jvp(self, x, t, v):
        if self.kind != SCORE:
            raise TypeError("jvp is only defined for score networks")
        scale = np.reshape(self.c_in(t), (-1, 1))
        v = np.atleast_2d(np.asarray(v, dtype=np.float64))
        d = neural.jvp_input(self.net, self._xin(x, t), self.t_norm(t), v * scale)
        return d * np.reshape(-1.0 / np.sqrt(1.0 - _abar(self.sched, t)), (-1, 1))

    def binding(self) -> dict:
        return {"kind": self.kind, "data_var": self.data_var, "schedule": self.sched.to_dict()}

    def save(self, path):
        neural.save_checkpoint(path, self.net, self.binding())

    @classmethod
    def load(cls, path, sched: NoiseSchedule | None = None) -> "CondNet":
        net, binding = neural.load_checkpoint(path)
        bound = make_schedule(binding["schedule"])
        if sched is not None and sched.to_dict() != bound.to_dict():
            raise ValueError(f"checkpoint {path} was trained for schedule {bound.to_dict()}")
        return cls(net, sched or bound, binding["kind"], binding["data_var"])


def new_condnet(kind, sched, D, rng, data_var=1.0, hidden=(128, 128, 128),
                activation=neural.SILU, embedding=None) -> CondNet:
    net = neural.init_mlp(D, D, hidden, rng, activation, embedding)
    return CondNet(net, sched, kind, data_var)
