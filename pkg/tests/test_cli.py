import csv
import json
import math

import numpy as np
import pytest

import dilatedrnn.train as train_mod
from dilatedrnn.cli import main, parse_arch_spec
from dilatedrnn.errors import ConfigurationError, NumericError
from dilatedrnn.tasks import write_mnist_idx
from dilatedrnn.train import (
    MetricsRecord,
    RunConfig,
    ablate,
    config_to_toml,
    evaluate_checkpoint,
    load_config,
    parse_config_text,
    sweep_configs,
    train,
)

TINY = dict(seed=3, T=5, layers=3, hidden=4, batch_size=8, iterations=20, eval_interval=10, val_batch=16)


def read_metrics(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


class TestConfig:
    def test_round_trip_through_toml(self, tmp_path):
        cfg = RunConfig(**TINY)
        path = tmp_path / "run.toml"
        path.write_text(config_to_toml(cfg))
        assert load_config(path) == cfg

    def test_unknown_key_reports_line(self):
        with pytest.raises(ConfigurationError, match=r":3: unknown key 'layer'"):
            parse_config_text("version = 1\nseed = 0\nlayer = 3\n", "run.toml")

    def test_version_required(self):
        with pytest.raises(ConfigurationError, match="version"):
            parse_config_text("seed = 0\n")
        with pytest.raises(ConfigurationError, match="version"):
            parse_config_text("version = 2\nseed = 0\n")

    def test_seed_mandatory(self):
        with pytest.raises(ConfigurationError, match="seed"):
            parse_config_text("version = 1\n")

    def test_overrides_win(self):
        cfg = parse_config_text("version = 1\nseed = 0\nlayers = 3\n", layers=5, hidden=None)
        assert cfg.layers == 5 and cfg.hidden == 10

    @pytest.mark.parametrize(
        "kw",
        [
            {"task": "ptb"},
            {"architecture": "cnn"},
            {"lr": 0.0},
            {"decay": 1.0},
            {"seed": -1},
            {"task": "pixel_mnist"},
            {"init": "glorot"},
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(ConfigurationError):
            RunConfig(**{**TINY, **kw})

    def test_paper_defaults(self):
        cfg = RunConfig(seed=0)
        assert (cfg.lr, cfg.decay, cfg.batch_size, cfg.init) == (0.001, 0.9, 128, "standard_normal")


class TestTrain:
    def test_outputs_and_schema(self, tmp_path):
        res = train(RunConfig(**TINY), tmp_path)
        rows = read_metrics(tmp_path / "metrics.csv")
        assert list(rows[0]) == ["iteration", "train_loss", "val_loss", "val_acc"]
        assert [int(r["iteration"]) for r in rows] == [10, 20]
        assert (tmp_path / "best.npz").exists() and (tmp_path / "timing.csv").exists()
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["config"]["epsilon"] == 1e-8
        assert summary["param_count"] == res.param_count
        assert all(isinstance(r, MetricsRecord) for r in res.records)

    def test_deterministic(self, tmp_path):
        train(RunConfig(**TINY), tmp_path / "a")
        train(RunConfig(**TINY), tmp_path / "b")
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_seed_changes_run(self, tmp_path):
        train(RunConfig(**TINY), tmp_path / "a")
        train(RunConfig(**{**TINY, "seed": 4}), tmp_path / "b")
        assert (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_checkpoint_reload_matches_training_eval(self, tmp_path):
        cfg = RunConfig(**TINY)
        res = train(cfg, tmp_path)
        report = evaluate_checkpoint(tmp_path / "best.npz", cfg)
        assert report["checkpoint_iteration"] == res.best.iteration
        assert report["val_loss"] == res.best.val_loss
        assert report["val_acc"] == res.best.val_acc

    def test_untrained_model_is_no_better_than_guessing(self, tmp_path):
        cfg = RunConfig(**{**TINY, "iterations": 1, "eval_interval": 1})
        res = train(cfg, tmp_path)
        assert res.records[0].val_loss >= math.log(8)

    def test_checkpoint_task_mismatch(self, tmp_path):
        cfg = RunConfig(**TINY)
        train(cfg, tmp_path / "run")
        mnist = tmp_path / "mnist"
        mnist.mkdir()
        write_mnist_idx(
            mnist / "train-images-idx3-ubyte", mnist / "train-labels-idx1-ubyte", np.zeros((24, 28, 28)), [1] * 24
        )
        other = RunConfig(**{**TINY, "task": "pixel_mnist", "mnist_dir": str(mnist)})
        with pytest.raises(ConfigurationError, match="input_dim"):
            evaluate_checkpoint(tmp_path / "run" / "best.npz", other)

    def test_non_finite_loss_aborts_with_diagnostic(self, tmp_path, monkeypatch):
        real = train_mod.masked_loss
        calls = {"n": 0}

        def flaky(*args):
            calls["n"] += 1
            loss, d = real(*args)
            return (math.nan if calls["n"] == 3 else loss), d

        monkeypatch.setattr(train_mod, "masked_loss", flaky)
        with pytest.raises(NumericError):
            train(RunConfig(**TINY), tmp_path)
        diag = json.loads((tmp_path / "diagnostic.json").read_text())
        assert diag["iteration"] == 3 and diag["loss"] == "nan"

    def test_baselines_train(self, tmp_path):
        for arch, extra in [("single", {"layers": 1}), ("stacked", {}), ("regular_skip", {"skip_length": 4})]:
            res = train(RunConfig(**{**TINY, "architecture": arch, "iterations": 10, **extra}), tmp_path / arch)
            assert math.isfinite(res.final.val_loss)

    def test_pixel_task_on_fixture(self, tmp_path):
        rng = np.random.default_rng(0)
        write_mnist_idx(
            tmp_path / "train-images-idx3-ubyte",
            tmp_path / "train-labels-idx1-ubyte",
            rng.integers(0, 256, (24, 28, 28)),
            rng.integers(0, 10, 24),
        )
        cfg = RunConfig(
            seed=0, task="noisy_mnist", T=800, layers=2, hidden=3, batch_size=2, iterations=2,
            eval_interval=1, val_batch=2, mnist_dir=str(tmp_path),
        )
        res = train(cfg, tmp_path / "out")
        assert len(res.records) == 2


class TestAblate:
    def test_start_exponent_sweep_keeps_top_dilation(self):
        cfgs = sweep_configs(RunConfig(**{**TINY, "layers": 4}), "start_exponent", [0, 1, 2])
        assert [c.schedule.dilations for c in cfgs] == [(1, 2, 4, 8), (2, 4, 8), (4, 8)]

    def test_sweep_validation(self):
        with pytest.raises(ConfigurationError):
            sweep_configs(RunConfig(**TINY), "hidden", [1])
        with pytest.raises(ConfigurationError):
            sweep_configs(RunConfig(**TINY), "start_exponent", [3])

    def test_single_config_sweep_equals_train(self, tmp_path):
        cfg = RunConfig(**TINY)
        train(cfg, tmp_path / "direct")
        rows = ablate(cfg, "layers", [cfg.layers], tmp_path / "sweep")
        direct = (tmp_path / "direct" / "metrics.csv").read_bytes()
        assert (tmp_path / "sweep" / "layers_3" / "metrics.csv").read_bytes() == direct
        summary = read_metrics(tmp_path / "sweep" / "summary.csv")
        assert len(rows) == 1 and summary[0]["layers"] == "3"
        assert set(summary[0]) >= {"wall_seconds", "final_val_loss", "final_val_acc"}


class TestCommands:
    def test_train_and_eval(self, tmp_path, capsys):
        args = ["--seed", "1", "--T", "4", "--layers", "2", "--hidden", "3", "--iterations", "10"]
        assert main(["train", *args, "--out", str(tmp_path)]) == 0
        assert (tmp_path / "metrics.csv").exists()
        capsys.readouterr()
        assert main(["eval", *args, str(tmp_path / "best.npz")]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["checkpoint_iteration"] == 10

    def test_config_file(self, tmp_path):
        cfg = tmp_path / "run.toml"
        cfg.write_text(config_to_toml(RunConfig(**{**TINY, "iterations": 10})))
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0

    def test_usage_errors_exit_1(self, tmp_path, capsys):
        assert main([]) == 1
        assert main(["train", "--bogus"]) == 1
        assert main(["train", "--out", str(tmp_path)]) == 1  # no seed
        bad = tmp_path / "bad.toml"
        bad.write_text("version = 1\nseed = 0\nsurprise = 1\n")
        assert main(["train", "--config", str(bad)]) == 1
        assert "unknown key" in capsys.readouterr().err

    def test_numeric_failure_exit_3(self, tmp_path, monkeypatch):
        monkeypatch.setattr(train_mod, "masked_loss", lambda *a: (math.inf, None))
        assert main(["train", "--seed", "0", "--T", "3", "--iterations", "2", "--out", str(tmp_path)]) == 3

    def test_ablate(self, tmp_path):
        args = ["ablate", "--seed", "0", "--T", "4", "--layers", "3", "--hidden", "3", "--iterations", "10"]
        assert main([*args, "--sweep", "start_exponent", "--values", "0,1", "--out", str(tmp_path)]) == 0
        assert len(read_metrics(tmp_path / "summary.csv")) == 2
        assert main([*args, "--sweep", "start_exponent", "--values", "a", "--out", str(tmp_path)]) == 1


class TestAnalyze:
    def run(self, tmp_path, text):
        spec = tmp_path / "arch.toml"
        spec.write_text(text)
        code = main(["analyze", str(spec), "--out", str(tmp_path)])
        summary = json.loads((tmp_path / "summary.json").read_text()) if code == 0 else None
        return code, summary

    def test_dilated_d9(self, tmp_path):
        code, s = self.run(tmp_path, 'version = 1\nkind = "dilated_rnn"\nlayers = 9\n')
        assert code == 0
        assert s["mean_recurrent_length_oracle"]["value"] == "3329/256"
        assert math.isclose(s["mean_recurrent_length_closed_form"]["float"], 12.98828125)
        rows = read_metrics(tmp_path / "analysis.csv")
        assert len(rows) == 256 and rows[2] == {"n": "3", "max_d": "11"}

    def test_skip_d9(self, tmp_path):
        code, s = self.run(tmp_path, 'version = 1\nkind = "regular_skip_rnn"\nlayers = 9\nperiod = 256\n')
        assert code == 0 and s["mean_recurrent_length_oracle"]["float"] == 136.50390625
        assert s["recurrent_edges_per_node_per_hidden"]["float"] == 2.0

    def test_cnn(self, tmp_path):
        code, s = self.run(tmp_path, 'version = 1\nkind = "dilated_cnn"\nlayers = 10\n')
        assert code == 0 and s["receptive_field"] == 1024

    def test_parse_error_has_line_and_column(self, tmp_path, capsys):
        code, _ = self.run(tmp_path, 'version = 1\nkind = = "x"\n')
        assert code == 1
        assert "line 2, column" in capsys.readouterr().err

    @pytest.mark.parametrize(
        "text",
        ['kind = "dilated_rnn"\nlayers = 3\n', 'version = 1\nlayers = 3\n', 'version = 1\nkind = "x"\nlayers = 3\n',
         'version = 1\nkind = "dilated_rnn"\nlayers = 3\ncolour = 1\n'],
    )
    def test_invalid_specs(self, text):
        with pytest.raises(ConfigurationError):
            parse_arch_spec(text)

    def test_missing_file(self, tmp_path):
        assert main(["analyze", str(tmp_path / "nope.toml")]) == 1


class TestVerifyTheory:
    def test_small_run_passes_and_prints_discrepancy(self, capsys):
        assert main(["verify-theory", "--max-d", "4", "--bases", "2,3"]) == 0
        out = capsys.readouterr().out
        row = next(line for line in out.splitlines() if line.split()[:2] == ["3", "4"])
        assert "4.250000" in row and "4.000000" in row and "0.250000" in row

    def test_injected_wrong_ranking_exits_2(self, capsys):
        assert main(["verify-theory", "--max-d", "3", "--bases", "2", "--inject-wrong-ranking"]) == 2
        failure = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert "(1, 2, 4)" in failure["detail"]

    def test_defaults_pass(self):
        assert main(["verify-theory"]) == 0

    def test_bad_arguments(self):
        assert main(["verify-theory", "--max-d", "1"]) == 1
