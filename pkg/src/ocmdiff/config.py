"""Experiment configuration: JSON loading, validation and hashing."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field

from . import mog
from .evaluation import BANDWIDTHS
from .neural import ACTIVATIONS, TimeEmbedding
from .objectives import TrainConfig
from .samplers import DDIM, DDPM, STRATEGY_NAMES
from .schedule import make_schedule

LEARNED_STRATEGY_OBJECTIVE = {"ocm": "ocm", "sn": "sn", "iddpm": "vlb"}
REGIMES = ("oracle", "learned")

DEFAULT_EVAL = {
    "n_samples": 10_000,
    "bandwidths": list(BANDWIDTHS),
    "seeds": [0],
    "nll": False,
    "nll_n": 1000,
    "n_mc": 1,
    "adpm_n_mc": 10_000,
    "t_grid": [1, 2, 5, 10, 20, 50, 100, 200, 400, 600, 800, 1000],
    "n_x": 2000,
}


class ConfigError(ValueError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def sha256_hex(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


@dataclass
class ExperimentConfig:
    raw: dict
    mixture: mog.GaussianMixture
    schedule: object
    nets: dict
    train: dict
    strategies: list
    trajectories: list
    forward_kind: str
    eval: dict
    regimes: list
    clip: dict
    seed: int
    output_dir: str
    hash: str = field(default="")

    @property
    def sample_regime(self) -> str:
        return "learned" if "learned" in self.regimes else "oracle"

    def strategy_names(self):
        return [s["name"] for s in self.strategies]

    def mixture_hash(self) -> str:
        return sha256_hex(self.mixture.to_dict())


def _need(raw, key, kind, where=""):
    if key not in raw:
        raise ConfigError(f"missing required field '{where}{key}'")
    val = raw[key]
    if kind is not None and not isinstance(val, kind):
        raise ConfigError(f"field '{where}{key}' has the wrong type")
    return val


def _strategy_spec(item):
    spec = {"name": item} if isinstance(item, str) else dict(item)
    if spec.get("name") not in STRATEGY_NAMES:
        raise ConfigError(f"field 'strategies' names unknown strategy {spec.get('name')!r}")
    return spec


def parse_config(raw: dict, seed=None, output_dir=None) -> ExperimentConfig:
    raw = copy.deepcopy(raw)
    if seed is not None:
        raw["seed"] = int(seed)
    if output_dir is not None:
        raw["output_dir"] = str(output_dir)
    try:
        gm = mog.from_spec(_need(raw, "mixture", (str, dict)))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"field 'mixture': {exc}") from exc
    try:
        sched = make_schedule(_need(raw, "schedule", dict))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"field 'schedule': {exc}") from exc

    seed_val = raw.get("seed", 0)
    if not isinstance(seed_val, int) or not 0 <= seed_val < 2**64:
        raise ConfigError("field 'seed' must be an unsigned 64-bit integer")

    strategies = [_strategy_spec(s) for s in _need(raw, "strategies", list)]
    if not strategies:
        raise ConfigError("field 'strategies' must not be empty")

    trajectories = raw.get("trajectories", [5, 10, 15, 20, 25, 50, 100])
    for K in trajectories:
        if not isinstance(K, int) or not 1 <= K <= sched.T:
            raise ConfigError(f"field 'trajectories' has K={K!r}; each K must be an integer in [1, T={sched.T}]")

    forward_kind = raw.get("forward_kind", DDPM)
    if forward_kind not in (DDPM, DDIM):
        raise ConfigError("field 'forward_kind' must be 'ddpm' or 'ddim'")

    regimes = raw.get("regimes", ["learned"])
    if not regimes or any(r not in REGIMES for r in regimes):
        raise ConfigError(f"field 'regimes' must be a non-empty subset of {REGIMES}")

    train = {}
    for name in ("score", "ocm", "sn", "vlb"):
        spec = dict(raw.get("train", {}).get(name, {}))
        spec.setdefault("seed", seed_val)
        try:
            train[name] = TrainConfig(**spec)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"field 'train.{name}': {exc}") from exc

    nets = {"hidden": [128, 128, 128], "activation": "silu", "embedding": {"kind": "sinusoidal", "width": 32}}
    nets.update(raw.get("nets", {}))
    try:
        TimeEmbedding(**nets["embedding"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"field 'nets.embedding': {exc}") from exc
    if nets["activation"] not in ACTIVATIONS:
        raise ConfigError(f"field 'nets.activation' must be one of {ACTIVATIONS}")
    if not nets["hidden"] or any(not isinstance(h, int) or h < 1 for h in nets["hidden"]):
        raise ConfigError("field 'nets.hidden' must be a non-empty list of positive integers")
    ev = dict(DEFAULT_EVAL)
    ev.update(raw.get("eval", {}))
    if "t_grid" not in raw.get("eval", {}):
        ev["t_grid"] = [t for t in DEFAULT_EVAL["t_grid"] if t <= sched.T] or [sched.T]
    if not isinstance(ev["n_samples"], int) or ev["n_samples"] < 0:
        raise ConfigError("field 'eval.n_samples' must be a non-negative integer")
    for t in ev["t_grid"]:
        if not 1 <= t <= sched.T:
            raise ConfigError(f"field 'eval.t_grid' has t={t} outside [1, T]")

    hashed = {k: v for k, v in raw.items() if k != "output_dir"}
    return ExperimentConfig(
        raw=raw,
        mixture=gm,
        schedule=sched,
        nets=nets,
        train=train,
        strategies=strategies,
        trajectories=list(trajectories),
        forward_kind=forward_kind,
        eval=ev,
        regimes=list(regimes),
        clip=dict(raw.get("clip", {})),
        seed=seed_val,
        output_dir=raw.get("output_dir", "runs"),
        hash=sha256_hex(hashed),
    )


def load_config(path, seed=None, output_dir=None) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return parse_config(raw, seed=seed, output_dir=output_dir)
