import json

import numpy as np
import pytest

from bamgraph.cli import main
from bamgraph.config import build_run_config
from bamgraph.errors import InvalidParameterError
from bamgraph.semgen import read_data_csv, write_data_csv
from bamgraph.trainer import load_model, read_trace_csv

TINY = [
    "--set", "model.C=4", "--set", "model.c=4", "--set", "model.heads=2",
    "--set", "model.n_attr_layers=1", "--set", "model.n_sample_layers=1",
    "--set", "model.n_dense_layers=1", "--set", "model.n_bilinear_layers=1",
    "--set", "d_range=[4,6]", "--set", "m_range=[20,30]",
]  # fmt: skip


def run(argv):
    """Exit status of ``bam argv``, including argparse usage exits."""
    try:
        return main([str(a) for a in argv])
    except SystemExit as exc:
        return exc.code


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("model") / "m.ckpt"
    assert run(["train", "--out", out, "--epochs", 2, "--samples-per-epoch", 2, "--seed", 1, *TINY]) == 0
    return out


class TestSimulate:
    def test_writes_three_files(self, tmp_path, capsys):
        argv = ["simulate", "--d", 10, "--q", 2, "--m", 200, "--dependency", "chebyshev", "--seed", 7]
        assert run([*argv, "--out-dir", tmp_path / "a"]) == 0
        assert read_data_csv(tmp_path / "a" / "data.csv").shape == (200, 10)
        graph = json.loads((tmp_path / "a" / "graph.json").read_text())
        labels = json.loads((tmp_path / "a" / "labels.json").read_text())
        assert graph["d"] == 10 and labels["d"] == 10

    def test_same_seed_is_byte_identical(self, tmp_path):
        argv = ["simulate", "--d", 10, "--q", 2, "--m", 200, "--dependency", "chebyshev", "--seed", 7]
        run([*argv, "--out-dir", tmp_path / "a"])
        run([*argv, "--out-dir", tmp_path / "b"])
        for name in ("data.csv", "graph.json", "labels.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_degree_must_be_below_d(self, tmp_path, capsys):
        code = run(["simulate", "--d", 10, "--q", 12, "--m", 50, "--out-dir", tmp_path])
        assert code == 2
        err = capsys.readouterr().err
        assert "--q" in err and "q < d" in err

    def test_unknown_dependency(self, tmp_path, capsys):
        assert run(["simulate", "--d", 5, "--q", 1, "--m", 50, "--dependency", "quartic", "--out-dir", tmp_path]) == 2
        assert "--dependency" in capsys.readouterr().err


class TestConfig:
    def test_defaults_match_table(self):
        cfg = build_run_config()
        assert (cfg.model.C, cfg.model.heads, cfg.train.epochs, cfg.train.initial_lr) == (100, 5, 1000, 0.0005)
        assert cfg.model.n_bilinear_layers == 10 and cfg.train.samples_per_epoch == 128

    def test_cpdag_stage_defaults(self):
        cfg = build_run_config(stage="cpdag")
        assert cfg.train.samples_per_epoch == 1 and abs(cfg.train.lr_at(1000) - 0.00005) < 1e-15

    def test_file_and_overrides(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"epochs": 7, "model": {"C": 8, "c": 8, "heads": 2}}))
        cfg = build_run_config(path, overrides={"model.heads": "4", "seed": "3"})
        assert (cfg.train.epochs, cfg.model.C, cfg.model.heads, cfg.seed) == (7, 8, 4, 3)

    @pytest.mark.parametrize("overrides", [{"model.width": 3}, {"bogus": 1}, {"model.heads": 7}])
    def test_invalid_overrides(self, overrides):
        with pytest.raises(InvalidParameterError):
            build_run_config(overrides=overrides)

    def test_precision_from_environment(self, monkeypatch):
        monkeypatch.setenv("BAM_PRECISION", "f32")
        assert build_run_config().model.precision == "f32"


class TestTrain:
    def test_smoke_run_writes_loadable_checkpoint(self, trained, capsys):
        model, meta, _ = load_model(trained)
        assert meta["epoch"] == 2 and model.cfg.C == 4
        trace = read_trace_csv(trained.with_suffix(".trace.csv"))
        assert [r["epoch"] for r in trace] == [0, 1]

    def test_prints_one_line_per_epoch(self, tmp_path, capsys):
        run(["train", "--out", tmp_path / "m.ckpt", "--epochs", 2, "--samples-per-epoch", 1, *TINY])
        lines = [ln for ln in capsys.readouterr().out.splitlines() if ln.startswith("epoch")]
        assert len(lines) == 2 and "total=" in lines[0]

    def test_resume_continues_trace(self, tmp_path, trained):
        common = ["--samples-per-epoch", 2, "--seed", 1, *TINY]
        assert run(["train", "--out", tmp_path / "r.ckpt", "--resume", trained, "--epochs", 4, *common]) == 0
        assert run(["train", "--out", tmp_path / "full.ckpt", "--epochs", 4, *common]) == 0
        resumed = read_trace_csv(tmp_path / "r.trace.csv")
        full = read_trace_csv(tmp_path / "full.trace.csv")
        # resuming restores parameters and Adam moments, so the trace has no seam at all
        assert resumed == full and len(resumed) == 4

    def test_bad_resume_file(self, tmp_path, capsys):
        (tmp_path / "bad.ckpt").write_bytes(b"garbage")
        assert run(["train", "--out", tmp_path / "m.ckpt", "--resume", tmp_path / "bad.ckpt", "--epochs", 1, *TINY]) == 4

    def test_unknown_field_is_usage_error(self, tmp_path):
        assert run(["train", "--out", tmp_path / "m.ckpt", "--set", "model.width=3"]) == 2

    def test_cpdag_stage(self, tmp_path):
        out = tmp_path / "v.ckpt"
        assert run(["train", "--stage", "cpdag", "--out", out, "--epochs", 1, *TINY]) == 0
        assert load_model(out, "vstructure")[1]["kind"] == "vstructure"

    def test_non_finite_loss_exit_code(self, tmp_path, capsys, monkeypatch):
        import bamgraph.trainer as trainer

        def broken(pred, labels):
            lb = real(pred, labels)
            return trainer.LossBreakdown(lb.total * float("nan"), lb.binary, lb.categorical, lb.penalty)

        real = trainer.loss_total
        monkeypatch.setattr(trainer, "loss_total", broken)
        assert run(["train", "--out", tmp_path / "m.ckpt", "--epochs", 1, "--samples-per-epoch", 1, *TINY]) == 3
        assert "epoch 0" in capsys.readouterr().err


class TestInfer:
    def test_prediction_json(self, tmp_path, trained):
        x = np.random.default_rng(0).standard_normal((200, 10))
        write_data_csv(x, tmp_path / "x.csv")
        assert run(["infer", "--model", trained, "--data", tmp_path / "x.csv", "--out", tmp_path / "p.json"]) == 0
        pred = json.loads((tmp_path / "p.json").read_text())
        assert pred["d"] == 10 and np.array(pred["probs"]).shape == (10, 10, 3)
        assert pred["class_order"] == ["no_edge", "skeleton", "moralized"]

    def test_shuffled_columns_conjugate_predictions(self, tmp_path, trained):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((100, 6))
        perm = rng.permutation(6)
        write_data_csv(x, tmp_path / "x.csv")
        write_data_csv(x[:, perm], tmp_path / "xp.csv")
        run(["infer", "--model", trained, "--data", tmp_path / "x.csv", "--out", tmp_path / "a.json"])
        run(["infer", "--model", trained, "--data", tmp_path / "xp.csv", "--out", tmp_path / "b.json"])
        a = np.array(json.loads((tmp_path / "a.json").read_text())["probs"])
        b = np.array(json.loads((tmp_path / "b.json").read_text())["probs"])
        assert np.max(np.abs(b - a[np.ix_(perm, perm)])) < 1e-5

    def test_missing_model_exit_4(self, tmp_path, capsys):
        missing = tmp_path / "nope.ckpt"
        assert run(["infer", "--model", missing, "--data", tmp_path / "x.csv", "--out", tmp_path / "p.json"]) == 4
        assert str(missing) in capsys.readouterr().err

    def test_wrong_kind_exit_4(self, tmp_path, trained):
        write_data_csv(np.zeros((5, 3)) + np.arange(15).reshape(5, 3) ** 2, tmp_path / "x.csv")
        argv = ["infer", "--model", trained, "--data", tmp_path / "x.csv", "--out", tmp_path / "p.json"]
        assert run([*argv, "--cpdag", "--model2", trained]) == 4

    def test_cpdag_outputs(self, tmp_path, trained):
        v = tmp_path / "v.ckpt"
        run(["train", "--stage", "cpdag", "--out", v, "--epochs", 1, *TINY])
        write_data_csv(np.random.default_rng(2).standard_normal((50, 5)), tmp_path / "x.csv")
        argv = ["infer", "--model", trained, "--data", tmp_path / "x.csv", "--out", tmp_path / "p.json"]
        assert run([*argv, "--cpdag", "--model2", v]) == 0
        cpdag = json.loads((tmp_path / "p.cpdag.json").read_text())
        assert cpdag["d"] == 5
        assert (tmp_path / "p.immoralities.csv").read_text().startswith("pair,candidate_child")


class TestEval:
    def test_grid_of_all_dependencies(self, tmp_path, trained):
        grid = tmp_path / "g.json"
        grid.write_text(json.dumps({"d": 10, "M": 200, "dependency": "all"}))
        argv = ["eval", "--model", trained, "--grid", grid, "--trials", 5, "--seed", 3]
        assert run([*argv, "--out", tmp_path / "a.csv"]) == 0
        rows = (tmp_path / "a.csv").read_text().splitlines()[1:]
        per_trial = [r for r in rows if ",mean±std," not in r]
        assert len([r for r in per_trial if r.endswith(",m")]) == 7 * 5
        assert any(r.endswith(",zero_graph") for r in rows)

    def test_rerun_identical_up_to_runtime(self, tmp_path, trained):
        grid = tmp_path / "g.json"
        grid.write_text(json.dumps({"d": 6, "M": 50, "trials": 2}))
        for name in ("a", "b"):
            assert run(["eval", "--model", trained, "--grid", grid, "--seed", 3, "--out", tmp_path / f"{name}.csv"]) == 0
        strip = lambda p: [r.split(",")[:7] + r.split(",")[8:] for r in p.read_text().splitlines()]  # noqa: E731
        assert strip(tmp_path / "a.csv") == strip(tmp_path / "b.csv")

    def test_missing_grid_keys(self, tmp_path, trained):
        grid = tmp_path / "g.json"
        grid.write_text(json.dumps({"d": 6}))
        assert run(["eval", "--model", trained, "--grid", grid, "--out", tmp_path / "a.csv"]) == 2

    def test_all_trials_failing(self, tmp_path, trained):
        grid = tmp_path / "g.json"
        grid.write_text(json.dumps({"d": 3, "M": 20, "q": 5, "trials": 2}))
        assert run(["eval", "--model", trained, "--grid", grid, "--out", tmp_path / "a.csv"]) == 1
