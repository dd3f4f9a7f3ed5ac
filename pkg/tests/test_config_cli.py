"""Config validation, CLI plumbing, artifact layout and determinism."""

import csv
import hashlib
import json
import os

import numpy as np
import pytest

from ocmdiff import experiments as ex
from ocmdiff import neural
from ocmdiff.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, main
from ocmdiff.config import ConfigError, parse_config

TINY_NETS = {"hidden": [16, 16], "embedding": {"kind": "sinusoidal", "width": 8}}


def base_raw(**over):
    raw = {
        "mixture": "toy9",
        "schedule": {"kind": "linear", "T": 50},
        "nets": TINY_NETS,
        "train": {"score": {"iterations": 20, "batch_size": 32}, "ocm": {"iterations": 20, "batch_size": 32}},
        "strategies": ["fixed_beta", "ocm"],
        "trajectories": [5],
        "eval": {"n_samples": 40, "seeds": [0], "n_x": 20, "t_grid": [1, 10, 50], "adpm_n_mc": 50},
    }
    raw.update(over)
    return raw


def write_config(tmp_path, raw, name="c.json"):
    path = tmp_path / name
    path.write_text(json.dumps(raw), encoding="utf-8")
    return str(path)


def run(cfg_path, out, *args):
    return main([args[0], "--config", cfg_path, "--out", str(out), *args[1:]])


def tree_bytes(root, sub=""):
    out = {}
    for dirpath, _, files in os.walk(os.path.join(root, sub)):
        for f in files:
            if f.endswith(".lock"):
                continue
            p = os.path.join(dirpath, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


class TestConfigValidation:
    def test_k_above_t_names_field(self):
        with pytest.raises(ConfigError, match="trajectories"):
            parse_config(base_raw(trajectories=[5, 51]))

    def test_empty_strategies(self):
        with pytest.raises(ConfigError, match="strategies"):
            parse_config(base_raw(strategies=[]))

    def test_unknown_strategy(self):
        with pytest.raises(ConfigError, match="strategies"):
            parse_config(base_raw(strategies=["magic"]))

    def test_bad_schedule(self):
        with pytest.raises(ConfigError, match="schedule"):
            parse_config(base_raw(schedule={"kind": "quadratic", "T": 10}))

    def test_missing_mixture(self):
        raw = base_raw()
        del raw["mixture"]
        with pytest.raises(ConfigError, match="mixture"):
            parse_config(raw)

    def test_bad_train_field(self):
        with pytest.raises(ConfigError, match="train.ocm"):
            parse_config(base_raw(train={"ocm": {"lr": -1.0}}))

    def test_unknown_train_key(self):
        with pytest.raises(ConfigError, match="train.sn"):
            parse_config(base_raw(train={"sn": {"ema": 0.999}}))

    def test_seed_range(self):
        with pytest.raises(ConfigError, match="seed"):
            parse_config(base_raw(seed=-1))

    def test_hash_ignores_output_dir_only(self):
        a = parse_config(base_raw(), output_dir="x")
        b = parse_config(base_raw(), output_dir="y")
        c = parse_config(base_raw(), seed=7)
        assert a.hash == b.hash != c.hash

    def test_inline_mixture(self):
        cfg = parse_config(base_raw(mixture={"weights": [0.5, 0.5], "means": [[0, 0], [1, 1]],
                                             "variances": [0.1, 0.2]}))
        assert len(cfg.mixture.weights) == 2

    def test_cli_exit_code_for_bad_config(self, tmp_path):
        path = write_config(tmp_path, base_raw(trajectories=[500]))
        assert run(path, tmp_path / "o", "train") == EXIT_CONFIG

    def test_unreadable_config(self, tmp_path):
        assert run(str(tmp_path / "nope.json"), tmp_path / "o", "train") == EXIT_CONFIG

    def test_seed_flag_must_be_u64(self, tmp_path):
        path = write_config(tmp_path, base_raw())
        with pytest.raises(SystemExit):
            main(["train", "--config", path, "--seed", str(2**64)])


class TestTrain:
    def test_artifact_count(self, tmp_path):
        path = write_config(tmp_path, base_raw())
        out = tmp_path / "o"
        assert run(path, out, "train") == EXIT_OK
        ckpts = sorted(os.listdir(out / "checkpoints" / "learned"))
        assert ckpts == ["ocm.json", "ocm.ocmd", "score.json", "score.ocmd"]
        assert sorted(os.listdir(out / "losses" / "learned")) == ["ocm.csv", "score.csv"]
        rows = list(csv.DictReader(open(out / "losses" / "learned" / "ocm.csv", newline="")))
        assert len(rows) == 20 and rows[0]["iteration"] == "0"
        side = json.load(open(out / "checkpoints" / "learned" / "ocm.json"))
        cfg = parse_config(base_raw())
        assert side["config_hash"] == cfg.hash and side["seed"] == 0

    def test_rerun_byte_identical(self, tmp_path):
        path = write_config(tmp_path, base_raw())
        for o in ("a", "b"):
            assert run(path, tmp_path / o, "train") == EXIT_OK
        a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
        assert a.keys() == b.keys() and a == b

    def test_seed_changes_weights(self, tmp_path):
        path = write_config(tmp_path, base_raw())
        assert run(path, tmp_path / "a", "train") == EXIT_OK
        assert run(path, tmp_path / "b", "train", "--seed", "5") == EXIT_OK
        ckpt = os.path.join("checkpoints", "learned", "score.ocmd")
        assert tree_bytes(tmp_path / "a")[ckpt] != tree_bytes(tmp_path / "b")[ckpt]

    def test_threads_do_not_change_outputs(self, tmp_path):
        raw = base_raw(strategies=["ocm", "sn", "iddpm"],
                       train={k: {"iterations": 5, "batch_size": 16} for k in ("score", "ocm", "sn", "vlb")})
        path = write_config(tmp_path, raw)
        assert run(path, tmp_path / "a", "train") == EXIT_OK
        assert run(path, tmp_path / "b", "train", "--threads", "3") == EXIT_OK
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_numerical_abort_exit_code(self, tmp_path):
        raw = base_raw(train={"score": {"iterations": 200, "batch_size": 32, "lr": 1e9}})
        path = write_config(tmp_path, raw)
        assert run(path, tmp_path / "o", "train") == EXIT_NUMERIC

    def test_oracle_regime_trains_no_score(self, tmp_path):
        path = write_config(tmp_path, base_raw(regimes=["oracle"]))
        assert run(path, tmp_path / "o", "train") == EXIT_OK
        assert sorted(os.listdir(tmp_path / "o" / "checkpoints" / "oracle")) == ["ocm.json", "ocm.ocmd"]


class TestInspect:
    def test_prints_header_and_sidecar(self, tmp_path, capsys):
        path = write_config(tmp_path, base_raw())
        out = tmp_path / "o"
        assert run(path, out, "train") == EXIT_OK
        capsys.readouterr()
        ckpt = str(out / "checkpoints" / "learned" / "ocm.ocmd")
        assert run(path, out, "inspect-checkpoint", ckpt) == EXIT_OK
        info = json.loads(capsys.readouterr().out)
        assert info["header"]["layer_dims"] == [2 + 8, 16, 16, 2]
        assert info["header"]["binding"]["kind"] == "hess_diag"
        assert info["metadata"]["objective"] == "ocm"

    def test_checkpoint_magic_and_layout(self, tmp_path):
        path = write_config(tmp_path, base_raw())
        out = tmp_path / "o"
        assert run(path, out, "train") == EXIT_OK
        data = open(out / "checkpoints" / "learned" / "score.ocmd", "rb").read()
        assert data[:4] == b"OCMD"
        version, hlen = np.frombuffer(data[4:12], dtype="<u4")
        assert version == 1
        n_params = sum(a * b + b for a, b in zip([10, 16, 16], [16, 16, 2]))
        assert len(data) == 12 + hlen + 8 * n_params

    def test_garbage_file_is_config_error(self, tmp_path):
        path = write_config(tmp_path, base_raw())
        bad = tmp_path / "bad.ocmd"
        bad.write_bytes(b"nope")
        assert run(path, tmp_path / "o", "inspect-checkpoint", str(bad)) == EXIT_CONFIG

    def test_nothing_to_inspect(self, tmp_path):
        path = write_config(tmp_path, base_raw())
        assert run(path, tmp_path / "o", "inspect-checkpoint") == EXIT_CONFIG


class TestSampleEval:
    @pytest.fixture
    def trained(self, tmp_path):
        path = write_config(tmp_path, base_raw())
        out = tmp_path / "o"
        assert run(path, out, "train") == EXIT_OK
        return path, out

    def test_sample_requires_checkpoints(self, tmp_path):
        path = write_config(tmp_path, base_raw())
        assert run(path, tmp_path / "o", "sample") == EXIT_CONFIG

    def test_zero_samples_header_only(self, tmp_path, trained):
        _, out = trained
        path = write_config(tmp_path, base_raw(eval={"n_samples": 0, "seeds": [0]}), "zero.json")
        assert run(path, out, "sample") == EXIT_OK
        text = open(out / "samples" / "learned" / "ddpm" / "ocm_K5_seed0.csv", newline="").read()
        assert text == "chain_id,x0,x1,config_hash,mixture_hash\r\n"

    def test_sample_files_and_hashes(self, trained):
        path, out = trained
        assert run(path, out, "sample") == EXIT_OK
        cfg = parse_config(base_raw())
        for s in ("fixed_beta", "ocm"):
            x, ch, mh = ex.read_samples(str(out / "samples" / "learned" / "ddpm" / f"{s}_K5_seed0.csv"))
            assert x.shape == (40, 2) and np.all(np.isfinite(x))
            assert ch == cfg.hash and mh == cfg.mixture_hash()

    def test_sample_rerun_byte_identical(self, tmp_path, trained):
        path, out = trained
        assert run(path, out, "sample") == EXIT_OK
        first = tree_bytes(out, "samples")
        assert run(path, out, "sample", "--threads", "2") == EXIT_OK
        assert tree_bytes(out, "samples") == first

    def test_eval_identical_files_zero(self, trained):
        path, out = trained
        assert run(path, out, "sample") == EXIT_OK
        f = str(out / "samples" / "learned" / "ddpm" / "ocm_K5_seed0.csv")
        assert run(path, out, "eval", "--samples", f, "--reference", f, "--label", "null") == EXIT_OK
        report = json.load(open(out / "reports" / "null.json"))
        assert abs(report["mmd_total"]) < 1e-12
        assert report["rng_algorithm"] and report["kernel"].startswith("k(x,y)")

    def test_eval_config_hash_recomputed(self, trained):
        path, out = trained
        assert run(path, out, "sample") == EXIT_OK
        assert run(path, out, "eval", "--seed", "0") == EXIT_OK
        raw = json.load(open(path))
        raw["seed"] = 0
        want = hashlib.sha256(json.dumps(raw, sort_keys=True, separators=(",", ":")).encode()).hexdigest()
        rows = list(csv.DictReader(open(out / "results.csv", newline="")))
        assert len(rows) == 2
        assert {r["config_hash"] for r in rows} == {want}
        for r in rows:
            assert json.load(open(out / "reports" / f"{r['label']}.json"))["config_hash"] == want

    def test_eval_refuses_other_mixture(self, tmp_path, trained):
        path, out = trained
        assert run(path, out, "sample") == EXIT_OK
        f = str(out / "samples" / "learned" / "ddpm" / "fixed_beta_K5_seed0.csv")
        other = write_config(tmp_path, base_raw(mixture="toy40"), "other.json")
        assert run(other, tmp_path / "o2", "eval", "--samples", f) == EXIT_CONFIG

    def test_eval_without_samples_is_config_error(self, trained):
        path, out = trained
        assert run(path, out, "eval") == EXIT_CONFIG

    def test_results_ledger_appends(self, trained):
        path, out = trained
        assert run(path, out, "sample") == EXIT_OK
        f = str(out / "samples" / "learned" / "ddpm" / "ocm_K5_seed0.csv")
        for label in ("a", "b"):
            assert run(path, out, "eval", "--samples", f, "--label", label) == EXIT_OK
        rows = list(csv.DictReader(open(out / "results.csv", newline="")))
        assert [r["label"] for r in rows] == ["a", "b"]
        assert rows[0]["mmd_total"] == rows[1]["mmd_total"]


class TestReproduce:
    RAW = dict(
        schedule={"kind": "linear", "T": 20},
        strategies=["fixed_beta", "ocm", "true_diag"],
        regimes=["oracle"],
        train={"ocm": {"iterations": 10, "batch_size": 16}},
        eval={"n_samples": 30, "seeds": [0, 1], "n_x": 10, "t_grid": [1, 10, 20], "adpm_n_mc": 20},
    )

    def test_missing_checkpoint_named(self, tmp_path, capsys):
        path = write_config(tmp_path, base_raw(**self.RAW))
        assert run(path, tmp_path / "o", "reproduce-toy", "fig3") == EXIT_CONFIG
        assert "ocm.ocmd" in capsys.readouterr().err

    def test_fig3_csv_svg_deterministic(self, tmp_path):
        path = write_config(tmp_path, base_raw(**self.RAW))
        for o in ("a", "b"):
            assert run(path, tmp_path / o, "train") == EXIT_OK
            assert run(path, tmp_path / o, "reproduce-toy", "fig3") == EXIT_OK
        a = tree_bytes(tmp_path / "a", "figures")
        assert a == tree_bytes(tmp_path / "b", "figures")
        assert set(a) == {os.path.join("figures", "fig3.csv"), os.path.join("figures", "fig3.svg")}
        rows = list(csv.DictReader(open(tmp_path / "a" / "figures" / "fig3.csv", newline="")))
        panels = {r["panel"] for r in rows}
        assert panels == {"a_error_true_score", "cd_ddpm_mmd", "cd_ddim_mmd"}
        err = [r for r in rows if r["panel"] == "a_error_true_score"]
        # oracle-only strategies have no error curve; two learned/fixed methods x 3 t values
        assert {r["method"] for r in err} == {"fixed_beta", "ocm"} and len(err) == 6
        ks = sorted({int(r["x"]) for r in rows if r["panel"] == "cd_ddpm_mmd"})
        assert ks == [5, 10, 15, 20]
        assert all(float(r["se"]) >= 0 for r in rows)
        svg = a[os.path.join("figures", "fig3.svg")].decode()
        assert svg.lstrip().startswith("<?xml") and "<svg" in svg and "href=\"http" not in svg

    def test_fig1_panels(self, tmp_path):
        raw = base_raw(**{**self.RAW, "strategies": ["fixed_beta", "true_diag"]})
        path = write_config(tmp_path, raw)
        assert run(path, tmp_path / "o", "reproduce-toy", "fig1") == EXIT_OK
        rows = list(csv.DictReader(open(tmp_path / "o" / "figures" / "fig1.csv", newline="")))
        assert {r["panel"] for r in rows} == {"bc_ddpm_mmd", "bc_ddim_mmd"}
        assert all(r["metric"] == "mmd_sum" for r in rows)


def test_checkpoint_roundtrip_via_layout(tmp_path):
    cfg = parse_config(base_raw(), output_dir=str(tmp_path))
    net = ex.train_one(cfg, "learned", "score")
    back, binding = neural.load_checkpoint(ex.Layout(str(tmp_path)).checkpoint("learned", "score"))
    for p, q in zip(net.net.params(), back.params()):
        np.testing.assert_array_equal(p, q)
    assert binding["kind"] == "score"


@pytest.mark.parametrize("name", ["toy9_fig3.json", "toy40_fig1.json", "smoke.json"])
def test_shipped_configs_parse(name):
    root = os.path.join(os.path.dirname(__file__), os.pardir, "configs")
    with open(os.path.join(root, name), encoding="utf-8") as fh:
        cfg = parse_config(json.load(fh))
    assert cfg.strategies and all(K <= cfg.schedule.T for K in cfg.trajectories)
