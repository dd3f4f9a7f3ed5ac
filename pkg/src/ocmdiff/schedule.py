"""Discrete-time noise schedules and skip-step trajectories.

Timesteps are 1-indexed (t = 1..T). ``alpha_bar(0)`` is defined as 1 so that
transitions ending at the clean data need no special casing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LINEAR = "linear"
COSINE = "cosine"


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    kind: str
    T: int
    betas: np.ndarray
    alpha_bars: np.ndarray
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        abar = np.asarray(self.alpha_bars, dtype=np.float64)
        if betas.shape != (self.T,) or abar.shape != (self.T,):
            raise ValueError("betas and alpha_bars must both have length T")
        betas.setflags(write=False)
        abar.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", abar)
        padded = np.concatenate([[1.0], abar])
        padded.setflags(write=False)
        object.__setattr__(self, "_abar", padded)

    def alpha_bar(self, t):
        """ᾱ_t for integer (or integer-array) t in [0, T]."""
        return self._abar[t]

    def beta(self, t):
        return self.betas[np.asarray(t) - 1]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "T": self.T, **self.params}


def _check_T(T):
    if isinstance(T, bool) or int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    return int(T)


def make_linear(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    T = _check_T(T)
    for name, val in (("beta_start", beta_start), ("beta_end", beta_end)):
        if not math.isfinite(val) or not 0.0 < val < 1.0:
            raise ValueError(f"{name} must be finite and in (0, 1), got {val!r}")
    if beta_start > beta_end:
        raise ValueError("beta_start must not exceed beta_end")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return NoiseSchedule(
        LINEAR, T, betas, np.cumprod(1.0 - betas),
        params={"beta_start": float(beta_start), "beta_end": float(beta_end)},
    )


def make_cosine(T: int, offset: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    T = _check_T(T)
    if not math.isfinite(offset) or offset < 0:
        raise ValueError(f"offset must be a finite non-negative number, got {offset!r}")

    def f(t):
        return np.cos((t / T + offset) / (1 + offset) * math.pi / 2) ** 2

    steps = np.arange(T + 1, dtype=np.float64)
    abar_raw = f(steps) / f(0.0)
    betas = np.minimum(1.0 - abar_raw[1:] / abar_raw[:-1], max_beta)
    # Recompute ᾱ from the clipped betas so the running-product invariant holds.
    return NoiseSchedule(
        COSINE, T, betas, np.cumprod(1.0 - betas),
        params={"offset": float(offset)},
    )


def make_schedule(spec: dict) -> NoiseSchedule:
    """Build a schedule from its serialized form (``kind``, ``T`` and endpoints/offset)."""
    spec = dict(spec)
    kind = spec.pop("kind")
    T = spec.pop("T")
    if kind == LINEAR:
        return make_linear(T, **spec)
    if kind == COSINE:
        return make_cosine(T, **spec)
    raise ValueError(f"unknown schedule kind {kind!r}")


def alpha_bar_ratio(sched: NoiseSchedule, t_lo: int, t_hi: int) -> float:
    """ᾱ_{t_lo:t_hi} = ᾱ_{t_hi} / ᾱ_{t_lo}, the signal retained from t_lo to t_hi."""
    if not 0 <= t_lo < t_hi <= sched.T:
        raise ValueError(f"need 0 <= t_lo < t_hi <= T, got t_lo={t_lo}, t_hi={t_hi}")
    return float(sched.alpha_bar(t_hi) / sched.alpha_bar(t_lo))


@dataclass(frozen=True)
class Trajectory:
    steps: tuple

    def __post_init__(self):
        s = tuple(int(v) for v in self.steps)
        if len(s) < 2 or s[0] != 0 or any(b <= a for a, b in zip(s, s[1:])):
            raise ValueError(f"invalid trajectory {s}")
        object.__setattr__(self, "steps", s)

    @property
    def K(self) -> int:
        return len(self.steps) - 1

    @property
    def T(self) -> int:
        return self.steps[-1]

    def transitions(self):
        """(t, t') pairs in sampling order, from T down to 0."""
        return [(self.steps[k], self.steps[k - 1]) for k in range(self.K, 0, -1)]


def even_trajectory(sched: NoiseSchedule, K: int) -> Trajectory:
    T = sched.T
    if int(K) != K or not 1 <= K <= T:
        raise ValueError(f"K must be an integer in [1, T={T}], got {K!r}")
    K = int(K)
    # round-half-up of i*T/K, in exact integer arithmetic
    steps = [(2 * i * T + K) // (2 * K) for i in range(K + 1)]
    return Trajectory(tuple(dict.fromkeys(steps)))


def beta_tilde(sched: NoiseSchedule, t: int, t_prime: int) -> float:
    """Variance of q(x_t' | x_t, x_0): (1-ᾱ_t')/(1-ᾱ_t) * (1-ᾱ_{t':t})."""
    a = alpha_bar_ratio(sched, t_prime, t)
    return float((1.0 - sched.alpha_bar(t_prime)) / (1.0 - sched.alpha_bar(t)) * (1.0 - a))


def beta_tilde_clipped(sched: NoiseSchedule, t: int, t_prime: int) -> float:
    """``beta_tilde`` with the zero value at t' = 0 replaced by the one-step 2 -> 1 value."""
    if t_prime > 0:
        return beta_tilde(sched, t, t_prime)
    if sched.T < 2:
        return float(sched.betas[0])
    return beta_tilde(sched, 2, 1)
