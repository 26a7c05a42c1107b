"""Operator surface: artifacts, exit codes, config handling, reports."""

import pytest

from bsff.cli import main
from bsff.config import (RunConfig, build_config, net_from_config,
                         parse_config_file, schedule_from_config)
from bsff.errors import ConfigError
from conftest import make_fake_mnist_root


@pytest.fixture
def fake_root(tmp_path):
    return make_fake_mnist_root(tmp_path)


def tiny_args(fake_root, out, extra=()):
    return ["train", "--dataset", "mnist", "--data-root", str(fake_root),
            "--out", str(out), "--seed", "1", "--estimator", "bgbsff",
            "--tiles", "3", "--channels", "10,20", "--groups", "2",
            "--windows", "0-1,0-1,1-4", "--batch-size", "32",
            "--subset", "64", *extra]


class TestTrainCommand:
    def test_happy_path_writes_artifacts(self, fake_root, tmp_path):
        out = tmp_path / "run"
        code = main(tiny_args(fake_root, out))
        assert code == 0
        for name in ("config.resolved", "metrics.csv", "energy.csv",
                     "model.ckpt", "convergence.svg"):
            assert (out / name).exists(), name
        # the run's instrumented counts reconcile exactly with the analytic
        # schedule prediction written alongside them
        for line in (out / "energy.csv").read_text().splitlines():
            if line.startswith("#") or line.startswith("layer,") or not line:
                continue
            assert line.rsplit(",", 1)[1] == "0", line

    def test_rerun_byte_identical_metrics(self, fake_root, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert main(tiny_args(fake_root, out1)) == 0
        assert main(tiny_args(fake_root, out2)) == 0
        assert (out1 / "metrics.csv").read_bytes() == (out2 / "metrics.csv").read_bytes()
        assert (out1 / "energy.csv").read_bytes() == (out2 / "energy.csv").read_bytes()

    def test_unknown_config_key_exits_2(self, fake_root, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("dataset=mnist\nbogus_key=1\n")
        code = main(["train", "--config", str(cfg)])
        assert code == 2

    def test_missing_data_exits_1(self, tmp_path):
        code = main(["train", "--dataset", "mnist", "--data-root",
                     str(tmp_path / "absent"), "--out", str(tmp_path / "r")])
        assert code == 1

    def test_config_file_with_flag_override(self, fake_root, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(
            "dataset=mnist\nestimator=bgbsff\ntiles=7\n"
            f"data_root={fake_root}\nchannels=10,20\ngroups=2\n"
            "windows=0-1,0-1,1-2\nsubset=48\nbatch_size=24\n")
        out = tmp_path / "run"
        code = main(["train", "--config", str(cfg), "--tiles", "1",
                     "--out", str(out)])
        assert code == 0
        resolved = (out / "config.resolved").read_text()
        assert "tiles=1" in resolved  # the flag wins over the file


class TestSweepCommand:
    def test_two_seeds_summary(self, fake_root, tmp_path):
        out = tmp_path / "sweep"
        args = ["sweep", "--seeds", "1,2", "--dataset", "mnist",
                "--data-root", str(fake_root), "--out", str(out),
                "--channels", "10,20", "--groups", "2",
                "--windows", "0-1,0-1,1-3", "--batch-size", "32",
                "--subset", "64", "--tiles", "1"]
        assert main(args) == 0
        summary = (out / "summary.csv").read_text()
        assert "mean=" in summary and "q1=" in summary
        assert (out / "sweep.svg").exists()

    def test_single_seed_rejected(self, fake_root, tmp_path):
        code = main(["sweep", "--seeds", "1", "--dataset", "mnist",
                     "--data-root", str(fake_root), "--out", str(tmp_path / "s")])
        assert code == 2

    def test_identical_seeds_zero_std(self, fake_root, tmp_path):
        out = tmp_path / "sweep2"
        args = ["sweep", "--seeds", "3,3", "--dataset", "mnist",
                "--data-root", str(fake_root), "--out", str(out),
                "--channels", "10,20", "--groups", "2",
                "--windows", "0-1,0-1,1-3", "--batch-size", "32",
                "--subset", "48", "--tiles", "1"]
        assert main(args) == 0
        assert "std=0" in (out / "summary.csv").read_text()

    def test_parallel_seeds_match_sequential(self, fake_root, tmp_path):
        common = ["--dataset", "mnist", "--data-root", str(fake_root),
                  "--channels", "10,20", "--groups", "2",
                  "--windows", "0-1,0-1,1-3", "--batch-size", "32",
                  "--subset", "48", "--tiles", "1"]
        seq, par = tmp_path / "seq", tmp_path / "par"
        assert main(["sweep", "--seeds", "1,2", "--out", str(seq), *common]) == 0
        assert main(["sweep", "--seeds", "1,2", "--parallel", "2",
                     "--out", str(par), *common]) == 0
        seq_rows = (seq / "summary.csv").read_text()
        par_rows = (par / "summary.csv").read_text()
        assert seq_rows == par_rows


class TestEnergyCommand:
    def test_analytic_report(self, tmp_path):
        out = tmp_path / "energy"
        code = main(["energy", "--dataset", "mnist", "--algos", "backprop,bsff",
                     "--n", "128", "--out", str(out)])
        assert code == 0
        assert (out / "energy.csv").exists()
        assert (out / "energy.svg").exists()
        assert "analytic-only" in (out / "energy.txt").read_text()

    def test_csv_format_schema(self, tmp_path, capsys):
        out = tmp_path / "energy"
        code = main(["energy", "--dataset", "cifar10", "--algos", "cwcff,bsff",
                     "--format", "csv", "--out", str(out)])
        assert code == 0
        printed = capsys.readouterr().out
        assert printed.startswith("# schema v1: algo,metric,value")
        assert "bsff,exact_mults" in printed

    def test_reconcile_from_run_ledger(self, fake_root, tmp_path):
        run = tmp_path / "run"
        assert main(tiny_args(fake_root, run, extra=["--loss-at", "post_norm"])) == 0
        out = tmp_path / "energy"
        code = main(["energy", "--dataset", "mnist", "--algos", "bgbsff",
                     "--channels", "10,20", "--groups", "2", "--tiles", "3",
                     "--ledger", str(run / "energy.csv"), "--out", str(out)])
        assert code == 0
        assert (out / "reconcile.csv").exists()

    def test_full_reference_stack_reconciles(self, fake_root, tmp_path):
        # all four layers (plain + class-aligned group convs, staggered
        # pools, unnormalized final layer) with 7-tile units: the run's
        # instrumented ledger must match the analytic schedule exactly
        out = tmp_path / "full"
        code = main(["train", "--dataset", "mnist", "--data-root",
                     str(fake_root), "--out", str(out), "--seed", "1",
                     "--estimator", "bgbsff", "--tiles", "7",
                     "--windows", "0-1,0-1,0-1,0-1,1-2", "--batch-size", "32",
                     "--subset", "96", "--workers", "4"])
        assert code == 0
        rows = (out / "energy.csv").read_text().splitlines()[2:]
        bad = [l for l in rows if l and not l.endswith(",0")]
        assert not bad, bad[:5]

    def test_checkpoint_target(self, fake_root, tmp_path):
        run = tmp_path / "run"
        assert main(tiny_args(fake_root, run)) == 0
        out = tmp_path / "energy"
        code = main(["energy", "--checkpoint", str(run / "model.ckpt"),
                     "--algos", "cwcff,bgbsff", "--tiles", "3",
                     "--out", str(out)])
        assert code == 0
        text = (out / "energy.txt").read_text()
        assert "C_in=1" in text  # arch came from the checkpoint


class TestConfig:
    def test_parse_rejects_unknown_key(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("nonsense=1\n")
        with pytest.raises(ConfigError, match="nonsense"):
            parse_config_file(cfg)

    def test_parse_rejects_bad_line(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("just some words\n")
        with pytest.raises(ConfigError):
            parse_config_file(cfg)

    def test_comments_and_blanks_ok(self, tmp_path):
        cfg = tmp_path / "ok.cfg"
        cfg.write_text("# a comment\n\nseed=9  # trailing\n")
        assert parse_config_file(cfg) == {"seed": "9"}

    def test_build_config_type_coercion(self):
        cfg = build_config({"seed": "7", "lr_conv": "0.01"}, {"tiles": 2})
        assert cfg.seed == 7 and cfg.lr_conv == 0.01 and cfg.tiles == 2

    def test_resolved_snapshot_round_trips(self, tmp_path):
        from bsff.config import resolved_text
        cfg = build_config({"dataset": "cifar10", "tiles": "7", "seed": "9",
                            "windows": "0-1,0-1,1-2"})
        path = tmp_path / "config.resolved"
        path.write_text(resolved_text(cfg))
        reparsed = build_config(parse_config_file(path))
        assert reparsed == cfg

    def test_invalid_estimator(self):
        with pytest.raises(ConfigError):
            build_config({"estimator": "sgd"})

    def test_relu_with_stochastic_estimator_rejected(self):
        with pytest.raises(ConfigError):
            build_config({"activation": "relu", "estimator": "bsff"})

    def test_reference_net_shape(self):
        cfg = RunConfig().validate()
        net = net_from_config(cfg)
        assert [l.out_channels for l in net.layers] == [20, 80, 240, 480]
        assert [l.pool for l in net.layers] == ["none", "max2x2", "none", "max2x2"]
        assert [l.norm for l in net.layers] == ["batchnorm"] * 3 + ["none"]
        assert [l.groups for l in net.layers] == [1, 10, 1, 10]
        assert net.feature_dim == 480 * 7 * 7

    def test_reference_schedule(self):
        cfg = build_config({"dataset": "mnist", "tiles": "1",
                            "activation": "tiled_logistic"})
        sched = schedule_from_config(cfg)
        assert sched.windows == [(0, 5), (0, 10), (0, 15), (0, 20), (0, 100)]
        assert sched.lr_conv == 5e-4 and sched.lr_classifier == 5e-3
        cfg7 = build_config({"dataset": "mnist", "tiles": "7"})
        sched7 = schedule_from_config(cfg7)
        assert sched7.lr_conv == 1e-3 and sched7.lr_classifier == 1e-3
        cfgf = build_config({"dataset": "fmnist", "tiles": "1"})
        assert schedule_from_config(cfgf).lr_conv == 1e-4
        cfgc = build_config({"dataset": "cifar10", "tiles": "1"})
        assert schedule_from_config(cfgc).windows[-1] == (0, 150)