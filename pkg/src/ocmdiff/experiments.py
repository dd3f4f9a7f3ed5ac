"""Experiment runner shared by the CLI and the acceptance suite.

Every artifact lives under ``cfg.output_dir``::

    checkpoints/{regime}/{net}.ocmd   (+ .json sidecar)
    losses/{regime}/{net}.csv
    samples/{regime}/{forward}/{strategy}_K{K}_seed{s}.csv
    reports/*.json, results.csv
    figures/{fig}.csv, figures/{fig}.svg
"""

from __future__ import annotations

import json
import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import io as io_mod
from . import mog
from . import objectives as obj
from . import rng as rng_mod
from . import samplers as sm
from .config import LEARNED_STRATEGY_OBJECTIVE, ConfigError, ExperimentConfig
from .evaluation import MMDReference, cov_error_curve, nll_elbo
from .fields import CondNet, OracleScore, new_condnet
from .neural import TimeEmbedding
from .schedule import even_trajectory

FIG_K = (5, 10, 15, 20, 25, 50, 100)
NET_OBJECTIVE = {"score": obj.DSM, "ocm": obj.OCM, "sn": obj.SN, "vlb": obj.VLB}
# strategies whose covariance comes from a trained network
NETWORK_STRATEGIES = tuple(LEARNED_STRATEGY_OBJECTIVE)


class MissingCheckpoint(ConfigError):
    pass


@dataclass(frozen=True)
class Layout:
    root: str

    def checkpoint(self, regime, net):
        return os.path.join(self.root, "checkpoints", regime, f"{net}.ocmd")

    def losses(self, regime, net):
        return os.path.join(self.root, "losses", regime, f"{net}.csv")

    def samples(self, regime, forward, strategy, K, seed):
        return os.path.join(self.root, "samples", regime, forward, f"{strategy}_K{K}_seed{seed}.csv")

    def figure(self, name, ext):
        return os.path.join(self.root, "figures", f"{name}.{ext}")

    @property
    def results(self):
        return os.path.join(self.root, "results.csv")

    def report(self, label):
        return os.path.join(self.root, "reports", f"{label}.json")


def _map(fn, items, threads):
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# -- training -------------------------------------------------------------------

def required_nets(cfg: ExperimentConfig, regime: str, strategies=None):
    """Networks needed by ``regime``; the learned regime always needs the score net."""
    names = [s for s in (strategies or cfg.strategy_names()) if s in NETWORK_STRATEGIES]
    nets = [LEARNED_STRATEGY_OBJECTIVE[s] for s in names]
    if regime == "learned":
        nets = ["score"] + nets
    return list(dict.fromkeys(nets))


def _new_net(cfg, regime, name):
    kind = obj.OBJECTIVE_KIND[NET_OBJECTIVE[name]]
    emb = TimeEmbedding(**cfg.nets["embedding"])
    return new_condnet(kind, cfg.schedule, cfg.mixture.D, rng_mod.stream(cfg.seed, "init", regime, name),
                       data_var=cfg.mixture.total_variance(), hidden=tuple(cfg.nets["hidden"]),
                       activation=cfg.nets["activation"], embedding=emb)


def _sidecar(cfg, regime, name, tcfg, history, seconds):
    return {
        "config_hash": cfg.hash,
        "mixture_hash": cfg.mixture_hash(),
        "seed": cfg.seed,
        "train_seed": tcfg.seed,
        "rng_algorithm": rng_mod.ALGORITHM,
        "regime": regime,
        "net": name,
        "objective": NET_OBJECTIVE[name],
        "iterations": tcfg.iterations,
        "lr": tcfg.lr,
        "batch_size": tcfg.batch_size,
        "final_loss": float(history[-1]) if len(history) else None,
        "train_seconds": round(seconds, 3),
    }


def train_one(cfg, regime, name, score_field=None):
    tcfg = cfg.train[name]
    cnet = _new_net(cfg, regime, name)
    t0 = time.perf_counter()
    cnet, history = obj.train(NET_OBJECTIVE[name], cnet, cfg.mixture, cfg.schedule, tcfg,
                              score_field=score_field)
    lay = Layout(cfg.output_dir)
    path = lay.checkpoint(regime, name)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    cnet.save(path)
    meta = _sidecar(cfg, regime, name, tcfg, history, time.perf_counter() - t0)
    meta.pop("train_seconds")  # keep sidecars byte-identical across reruns
    with open(path[: -len(".ocmd")] + ".json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")
    io_mod.write_csv(lay.losses(regime, name), ["iteration", "loss", "config_hash"],
                     ((i, v, cfg.hash) for i, v in enumerate(history.tolist())))
    return cnet


def train_all(cfg: ExperimentConfig, threads=1, nets=None, log=print):
    """Train the networks every configured regime needs; returns {regime: {net: CondNet}}."""
    out = {}
    for regime in cfg.regimes:
        names = nets or required_nets(cfg, regime)
        trained = {}
        if "score" in names:
            log(f"[{regime}] training score")
            trained["score"] = train_one(cfg, regime, "score")
        field = trained["score"] if regime == "learned" else OracleScore(cfg.mixture, cfg.schedule)
        rest = [n for n in names if n != "score"]

        def job(name, field=field, regime=regime):
            log(f"[{regime}] training {name}")
            return name, train_one(cfg, regime, name, score_field=field)

        trained.update(dict(_map(job, rest, threads)))
        out[regime] = trained
    return out


def load_nets(cfg: ExperimentConfig, regime: str, names):
    lay = Layout(cfg.output_dir)
    nets = {}
    for name in names:
        path = lay.checkpoint(regime, name)
        if not os.path.exists(path):
            raise MissingCheckpoint(f"missing checkpoint {path} (run 'train' first)")
        nets[name] = CondNet.load(path, cfg.schedule)
        expect = obj.OBJECTIVE_KIND[NET_OBJECTIVE[name]]
        if nets[name].kind != expect:
            raise ConfigError(f"checkpoint {path} holds a {nets[name].kind!r} net, expected {expect!r}")
    return nets


# -- strategies and sampling -----------------------------------------------------

class Context:
    """Score field, trained nets and cached A-DPM norms for one regime."""

    def __init__(self, cfg: ExperimentConfig, regime: str, nets=None, strategies=None):
        self.cfg = cfg
        self.regime = regime
        names = required_nets(cfg, regime, strategies)
        if nets is None:
            nets = load_nets(cfg, regime, names)
        missing = [n for n in names if n not in nets]
        if missing:
            raise MissingCheckpoint(f"missing networks {missing} for regime {regime!r}")
        self.nets = nets
        self.score_field = nets["score"] if regime == "learned" else OracleScore(cfg.mixture, cfg.schedule)
        self._sq = {}
        self._lock = threading.Lock()

    def sq_norms(self, ts):
        """E||s(x_t)||² per t; each t has its own stream so values do not depend on the grid."""
        with self._lock:
            for t in ts:
                if t not in self._sq:
                    r = rng_mod.stream(self.cfg.seed, "adpm", self.regime, int(t))
                    est = obj.expected_sq_score(self.score_field, self.cfg.mixture, self.cfg.schedule,
                                                [t], self.cfg.eval["adpm_n_mc"], r)
                    self._sq[t] = est[t][0]
            return {t: self._sq[t] for t in ts}

    def strategy(self, spec: dict, ts=()):
        name = spec["name"]
        gm = self.cfg.mixture
        if name == "fixed_beta":
            return sm.FixedBeta()
        if name == "fixed_beta_tilde":
            return sm.FixedBetaTilde()
        if name == "adpm":
            return sm.ADPM(self.sq_norms(list(ts)))
        if name == "iddpm":
            return sm.IDDPM(self.nets["vlb"])
        if name == "sn":
            return sm.SN(self.nets["sn"])
        if name == "ocm":
            return sm.OCM(self.nets["ocm"])
        if name == "rademacher":
            return sm.RademacherOnline(int(spec.get("M", 100)))
        if name == "true_diag":
            return sm.TrueDiag(gm)
        if name == "true_full":
            return sm.TrueFull(gm)
        raise ConfigError(f"unknown strategy {name!r}")

    def model(self, spec, forward, trajectory):
        strat = self.strategy(spec, [t for t, _ in trajectory.transitions()])
        return sm.DenoiseModel(self.score_field, strat, self.cfg.schedule, forward)


def clip_policy(cfg):
    return sm.ClipPolicy(bool(cfg.clip.get("mean_only_last", False)), cfg.clip.get("bound"))


def sample_cell(ctx: Context, spec, K, forward, seed, n):
    traj = even_trajectory(ctx.cfg.schedule, K)
    model = ctx.model(spec, forward, traj)
    label = f"chains/{ctx.regime}/{forward}/{spec['name']}/K{K}"
    return sm.sample_chain(model, traj, n, seed, clip=clip_policy(ctx.cfg), label=label)


def sample_header(D):
    return ["chain_id"] + [f"x{i}" for i in range(D)] + ["config_hash", "mixture_hash"]


def write_samples(path, x, cfg):
    ch, mh = cfg.hash, cfg.mixture_hash()
    rows = ([i, *row, ch, mh] for i, row in enumerate(x.tolist()))
    io_mod.write_csv(path, sample_header(cfg.mixture.D), rows)


def read_samples(path):
    """Return ``(x, config_hash, mixture_hash)``; hashes are None for an empty file."""
    rows = io_mod.read_csv(path)
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    cols = [c for c in header if c.startswith("x") and c[1:].isdigit()]
    if not cols or "mixture_hash" not in header:
        raise ConfigError(f"{path} is not a sample file")
    x = np.array([[float(r[c]) for c in cols] for r in rows], dtype=np.float64).reshape(len(rows), len(cols))
    mh = {r["mixture_hash"] for r in rows}
    chs = {r["config_hash"] for r in rows}
    if len(mh) > 1:
        raise ConfigError(f"{path} mixes samples from several mixtures")
    return x, (chs.pop() if chs else None), (mh.pop() if mh else None)


def sample_grid(cfg, regime=None, forwards=None, trajectories=None, seeds=None, threads=1,
                ctx=None, n=None, write=True):
    """Sample every strategy×K×forward×seed cell; returns {(forward, strategy, K, seed): x}."""
    regime = regime or cfg.sample_regime
    ctx = ctx or Context(cfg, regime)
    forwards = forwards or [cfg.forward_kind]
    trajectories = trajectories or cfg.trajectories
    seeds = seeds if seeds is not None else cfg.eval["seeds"]
    n = cfg.eval["n_samples"] if n is None else n
    cells = [(f, s, K, sd) for f in forwards for s in cfg.strategies for K in trajectories for sd in seeds
             if not (s["name"] == "iddpm" and f == sm.DDIM)]
    lay = Layout(cfg.output_dir)

    def job(cell):
        f, s, K, sd = cell
        x = sample_cell(ctx, s, K, f, sd, n)
        if write:
            write_samples(lay.samples(regime, f, s["name"], K, sd), x, cfg)
        return (f, s["name"], K, sd), x

    return dict(_map(job, cells, threads))


# -- figures -------------------------------------------------------------------

def reference_sample(cfg, seed, n):
    return mog.sample(cfg.mixture, n, rng_mod.stream(seed, "reference", n))


def mmd_rows(cfg, panel_prefix, regime, threads=1, trajectories=FIG_K, ctx=None):
    """Rows (panel, method, K, metric, value, se) for DDPM and DDIM MMD panels.

    ``value`` is the mean over ``eval.seeds`` of the summed MMD; ``se`` the
    standard error across seeds (0 for a single seed).
    """
    ctx = ctx or Context(cfg, regime)
    seeds = cfg.eval["seeds"]
    n = cfg.eval["n_samples"]
    refs = {sd: MMDReference(reference_sample(cfg, sd, n), cfg.eval["bandwidths"]) for sd in seeds}
    samples = sample_grid(cfg, regime, [sm.DDPM, sm.DDIM], list(trajectories), seeds, threads, ctx, write=False)
    rows = []
    for forward, tag in ((sm.DDPM, "ddpm"), (sm.DDIM, "ddim")):
        for spec in cfg.strategies:
            for K in trajectories:
                key = [(forward, spec["name"], K, sd) for sd in seeds]
                if key[0] not in samples:
                    continue
                vals = np.array([refs[k[3]].compare(samples[k])[1] for k in key])
                se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
                rows.append((f"{panel_prefix}_{tag}_mmd", spec["name"], K, "mmd_sum", float(vals.mean()), se))
    return rows


def error_rows(cfg, panel, regime, ctx=None):
    ctx = ctx or Context(cfg, regime)
    rows = []
    for spec in cfg.strategies:
        if spec["name"] in ("true_diag", "true_full"):
            continue
        strat = ctx.strategy(spec, cfg.eval["t_grid"])
        curve = cov_error_curve(strat, cfg.mixture, cfg.schedule, cfg.eval["t_grid"], cfg.eval["n_x"],
                                rng_mod.stream(cfg.seed, "cov_error", regime, spec["name"]),
                                score_field=ctx.score_field)
        rows += [(panel, spec["name"], t, "cov_error_l2", m, se) for t, m, se in curve]
    return rows


FIG_HEADER = ["panel", "method", "x", "metric", "value", "se", "config_hash"]


def reproduce(cfg: ExperimentConfig, which: str, threads=1, log=print):
    if which not in ("fig1", "fig3"):
        raise ConfigError(f"unknown figure {which!r}; expected fig1 or fig3")
    rows = []
    if which == "fig3":
        for regime, panel in (("oracle", "a_error_true_score"), ("learned", "b_error_learned_score")):
            if regime in cfg.regimes:
                log(f"{which}: covariance error ({regime} score)")
                rows += error_rows(cfg, panel, regime)
        mmd_regime, prefix = cfg.sample_regime, "cd"
    else:
        mmd_regime, prefix = cfg.sample_regime, "bc"
    log(f"{which}: MMD panels ({mmd_regime} score)")
    ks = [K for K in FIG_K if K <= cfg.schedule.T]
    rows += mmd_rows(cfg, prefix, mmd_regime, threads, ks)
    lay = Layout(cfg.output_dir)
    csv_path = lay.figure(which, "csv")
    io_mod.write_csv(csv_path, FIG_HEADER, (r + (cfg.hash,) for r in rows))
    svg_path = lay.figure(which, "svg")
    io_mod.line_plot_svg(svg_path, _panels(rows))
    return csv_path, svg_path, rows


def _panels(rows):
    panels = {}
    for panel, method, x, metric, value, se in rows:
        p = panels.setdefault(panel, {"title": panel, "xlabel": "t" if "error" in panel else "K",
                                      "ylabel": metric, "logx": True, "logy": True, "series": {}})
        xs, ys, es = p["series"].setdefault(method, ([], [], []))
        xs.append(x)
        ys.append(value)
        es.append(se)
    return list(panels.values())


# -- evaluation -------------------------------------------------------------------

def nll_for(ctx: Context, spec, K, x0, seed):
    traj = even_trajectory(ctx.cfg.schedule, K)
    model = ctx.model(spec, sm.DDPM, traj)
    return nll_elbo(model, traj, x0, rng_mod.stream(seed, "nll", spec["name"], K), ctx.cfg.eval["n_mc"])
