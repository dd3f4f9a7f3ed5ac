"""Command-line entry point: ``ocmdiff {train,sample,eval,reproduce-toy,inspect-checkpoint}``.

Exit codes: 0 success, 2 configuration error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

from filelock import FileLock

from . import experiments as ex
from . import io as io_mod
from . import neural
from . import rng as rng_mod
from .config import ConfigError, load_config
from .evaluation import EvalReport, MMDReference
from .objectives import NumericalAbort
from .samplers import SamplingError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _u64(text):
    val = int(text, 0)
    if not 0 <= val < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return val


def _positive(text):
    val = int(text)
    if val < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return val


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, metavar="PATH", help="experiment config (JSON)")
    common.add_argument("--seed", type=_u64, default=None, help="override the config seed")
    common.add_argument("--out", default=None, metavar="DIR", help="override the output directory")
    common.add_argument("--threads", type=_positive, default=1, help="parallel grid cells")

    p = argparse.ArgumentParser(prog="ocmdiff", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train score and covariance networks")
    sub.add_parser("sample", parents=[common], help="draw samples for every strategy x K cell")
    ev = sub.add_parser("eval", parents=[common], help="MMD (and optionally NLL) of sample files")
    ev.add_argument("--samples", metavar="CSV", help="sample file to score (default: the whole grid)")
    ev.add_argument("--reference", metavar="CSV", help="reference sample file (default: fresh mixture draws)")
    ev.add_argument("--label", default=None, help="report label")
    rp = sub.add_parser("reproduce-toy", parents=[common], help="regenerate a toy figure as CSV + SVG")
    rp.add_argument("which", choices=["fig1", "fig3"])
    ic = sub.add_parser("inspect-checkpoint", parents=[common], help="print checkpoint headers")
    ic.add_argument("paths", nargs="*", metavar="OCMD", help="checkpoint files (default: all under --out)")
    return p


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


# -- commands -----------------------------------------------------------------------

def cmd_train(cfg, args):
    ex.train_all(cfg, threads=args.threads, log=_log)
    lay = ex.Layout(cfg.output_dir)
    for regime in cfg.regimes:
        for name in ex.required_nets(cfg, regime):
            print(lay.checkpoint(regime, name))


def cmd_sample(cfg, args):
    regime = cfg.sample_regime
    ex.sample_grid(cfg, regime, threads=args.threads)
    lay = ex.Layout(cfg.output_dir)
    for spec in cfg.strategies:
        for K in cfg.trajectories:
            for sd in cfg.eval["seeds"]:
                path = lay.samples(regime, cfg.forward_kind, spec["name"], K, sd)
                if os.path.exists(path):
                    print(path)


def _check_mixture(path, mh, cfg):
    if mh is not None and mh != cfg.mixture_hash():
        raise ConfigError(f"{path} was produced under a different mixture ({mh[:12]}...); refusing to compare")
    return mh


def _append_ledger(cfg, report: EvalReport):
    lay = ex.Layout(cfg.output_dir)
    os.makedirs(cfg.output_dir, exist_ok=True)
    with FileLock(lay.results + ".lock"):
        io_mod.append_csv_row(lay.results, report.csv_row())
    path = lay.report(report.label)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    return path


def _report(cfg, label, vals, total, t0, nll=(None, None)):
    return EvalReport(
        mmd_per_bandwidth=[float(v) for v in vals], mmd_total=float(total),
        bandwidths=list(cfg.eval["bandwidths"]), nll_nats_per_dim=nll[0], nll_se=nll[1],
        runtime_sec=time.perf_counter() - t0, config_hash=cfg.hash,
        rng_algorithm=rng_mod.ALGORITHM, label=label,
    )


def _reference(cfg, args, seed, n):
    if args.reference:
        y, _, mh = ex.read_samples(args.reference)
        _check_mixture(args.reference, mh, cfg)
        return y
    return ex.reference_sample(cfg, seed, n)


def cmd_eval(cfg, args):
    bw = cfg.eval["bandwidths"]
    if args.samples:
        t0 = time.perf_counter()
        x, _, mh = ex.read_samples(args.samples)
        _check_mixture(args.samples, mh, cfg)
        y = _reference(cfg, args, cfg.seed, max(len(x), 2))
        vals, total = MMDReference(y, bw).compare(x)
        label = args.label or os.path.splitext(os.path.basename(args.samples))[0]
        print(_append_ledger(cfg, _report(cfg, label, vals, total, t0)))
        return
    regime = cfg.sample_regime
    lay = ex.Layout(cfg.output_dir)
    ctx = ex.Context(cfg, regime) if cfg.eval["nll"] else None
    refs = {}
    for sd in cfg.eval["seeds"]:
        for spec in cfg.strategies:
            for K in cfg.trajectories:
                path = lay.samples(regime, cfg.forward_kind, spec["name"], K, sd)
                if not os.path.exists(path):
                    raise ConfigError(f"missing sample file {path} (run 'sample' first)")
                t0 = time.perf_counter()
                x, _, mh = ex.read_samples(path)
                _check_mixture(path, mh, cfg)
                if sd not in refs:
                    refs[sd] = MMDReference(_reference(cfg, args, sd, cfg.eval["n_samples"]), bw)
                vals, total = refs[sd].compare(x)
                nll = (None, None)
                if ctx is not None and cfg.forward_kind == "ddpm":
                    x0 = ex.mog.sample(cfg.mixture, cfg.eval["nll_n"], rng_mod.stream(sd, "nll_data"))
                    nll = ex.nll_for(ctx, spec, K, x0, sd)
                label = f"{regime}_{cfg.forward_kind}_{spec['name']}_K{K}_seed{sd}"
                print(_append_ledger(cfg, _report(cfg, label, vals, total, t0, nll)))


def cmd_reproduce(cfg, args):
    csv_path, svg_path, _ = ex.reproduce(cfg, args.which, threads=args.threads, log=_log)
    print(csv_path)
    print(svg_path)


def cmd_inspect(cfg, args):
    paths = args.paths
    if not paths:
        lay = ex.Layout(cfg.output_dir)
        paths = [lay.checkpoint(r, n) for r in cfg.regimes for n in ex.required_nets(cfg, r)]
        paths = [p for p in paths if os.path.exists(p)]
        if not paths:
            raise ConfigError(f"no checkpoints under {cfg.output_dir}")
    for path in paths:
        try:
            header = neural.read_checkpoint_header(path)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
        info = {"path": path, "header": header}
        side = path[: -len(".ocmd")] + ".json" if path.endswith(".ocmd") else None
        if side and os.path.exists(side):
            with open(side, encoding="utf-8") as fh:
                info["metadata"] = json.load(fh)
        print(json.dumps(info, sort_keys=True, indent=2))


COMMANDS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "reproduce-toy": cmd_reproduce,
    "inspect-checkpoint": cmd_inspect,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed, output_dir=args.out)
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    except (NumericalAbort, SamplingError) as exc:
        _log(f"numerical abort: {exc}")
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
