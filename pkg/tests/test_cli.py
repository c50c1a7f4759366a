"""CLI contract: exit codes, validation messages, file composition, and the
end-to-end generate -> train -> predict -> ensemble -> evaluate pipeline."""

import numpy as np
import pytest

from gridcast.cli import main
from gridcast.container import read_tensor_file
from gridcast.evaluation import read_report_csv


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture(scope="module")
def micro_bench(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "bench"
    cfg = tmp_path_factory.mktemp("cli-cfg") / "gen.toml"
    cfg.write_text(
        "[benchmark]\n"
        "seed = 21\ngrid = 16\ntrain_days = 2\ntest_days = 1\n"
        "train_cities = 3\ncore_cities = 2\nextended_cities = 1\n"
    )
    code = main(["generate", "--config", str(cfg), "--out", str(root)])
    assert code == 0
    return root


def exp_config(tmp_path, root, method="mtl", seeds="[1]", extra=""):
    cfg = tmp_path / f"exp_{method}.toml"
    cfg.write_text(
        "[experiment]\n"
        f'data_root = "{root}"\nchallenge = "core"\nmethod = "{method}"\nseeds = {seeds}\n'
        "[model]\ndepth_k = 1\nbase_filters = 8\n"
        "[train]\nmax_steps = 2\n" + extra
    )
    return cfg


class TestValidation:
    def test_unknown_challenge_exits_2(self, tmp_path, micro_bench, capsys):
        cfg = tmp_path / "bad.toml"
        cfg.write_text(
            f'[experiment]\ndata_root = "{micro_bench}"\nchallenge = "sideways"\n'
            "[train]\nmax_steps = 1\n"
        )
        code, _, err = run(capsys, "train", "--config", str(cfg), "--out", str(tmp_path / "r"))
        assert code == 2
        assert "sideways" in err

    def test_all_violations_listed(self, tmp_path, capsys):
        cfg = tmp_path / "bad2.toml"
        cfg.write_text(
            '[experiment]\nchallenge = "sideways"\nmethod = "osmosis"\nseeds = []\n'
            "[train]\nmax_steps = 1\n"
        )
        code, _, err = run(capsys, "train", "--config", str(cfg), "--out", str(tmp_path / "r"))
        assert code == 2
        assert "data_root" in err and "sideways" in err and "osmosis" in err and "seeds" in err

    def test_missing_config_file_exits_3(self, tmp_path, capsys):
        code, _, err = run(
            capsys, "train", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path)
        )
        assert code == 3
        assert "nope.toml" in err

    def test_missing_data_root_listed(self, tmp_path, capsys):
        cfg = tmp_path / "bad3.toml"
        cfg.write_text('[experiment]\ndata_root = "/no/such/dir"\n[train]\nmax_steps = 1\n')
        code, _, err = run(capsys, "train", "--config", str(cfg), "--out", str(tmp_path / "r"))
        assert code == 2
        assert "/no/such/dir" in err

    def test_generate_into_nonempty_dir_fails(self, tmp_path, capsys):
        target = tmp_path / "occupied"
        target.mkdir()
        (target / "file.txt").write_text("x")
        code, _, err = run(capsys, "generate", "--out", str(target))
        assert code == 2
        assert "not empty" in err


class TestPipeline:
    def test_full_pipeline(self, micro_bench, tmp_path, capsys):
        # train two seeds of the multi-task model plus per-city baselines
        mtl_cfg = exp_config(tmp_path, micro_bench, "mtl", seeds="[1, 2]")
        code, out, err = run(capsys, "train", "--config", str(mtl_cfg), "--out", str(tmp_path / "mtl"))
        assert code == 0, err
        assert out.count("train challenge=core method=mtl") == 2

        single_cfg = exp_config(tmp_path, micro_bench, "single_city", seeds="[1]")
        code, out, err = run(
            capsys, "train", "--config", str(single_cfg), "--out", str(tmp_path / "single")
        )
        assert code == 0, err
        assert "city=core-a" in out and "city=core-b" in out

        # per-seed MTL predictions
        for seed in (1, 2):
            code, out, err = run(
                capsys,
                "predict",
                "--data", str(micro_bench),
                "--split", "core_test",
                "--checkpoint", str(tmp_path / "mtl" / f"seed_{seed}" / "checkpoint.gct"),
                "--out", str(tmp_path / f"pred_mtl_{seed}"),
                "--stride", "120",
            )
            assert code == 0, err

        # per-city single-city predictions from the run-dir mapping
        code, out, err = run(
            capsys,
            "predict",
            "--data", str(micro_bench),
            "--split", "core_test",
            "--checkpoint", str(tmp_path / "single" / "seed_1"),
            "--out", str(tmp_path / "pred_single"),
            "--stride", "120",
        )
        assert code == 0, err

        # naive baseline predictions
        code, out, err = run(
            capsys,
            "predict",
            "--data", str(micro_bench),
            "--split", "core_test",
            "--method", "naive",
            "--out", str(tmp_path / "pred_naive"),
            "--stride", "120",
        )
        assert code == 0, err

        # seed ensemble of the MTL predictions
        code, out, err = run(
            capsys,
            "ensemble",
            str(tmp_path / "pred_mtl_1"),
            str(tmp_path / "pred_mtl_2"),
            "--out", str(tmp_path / "pred_ens"),
        )
        assert code == 0, err

        # one report with rows for every method
        code, out, err = run(
            capsys,
            "evaluate",
            "--data", str(micro_bench),
            "--split", "core_test",
            "--pred", f"mtl_seed1={tmp_path / 'pred_mtl_1'}",
            "--pred", f"mtl_seed2={tmp_path / 'pred_mtl_2'}",
            "--pred", f"mtl_ensemble={tmp_path / 'pred_ens'}",
            "--pred", f"single_city={tmp_path / 'pred_single'}",
            "--pred", f"naive={tmp_path / 'pred_naive'}",
            "--out", str(tmp_path / "report"),
            "--stride", "120",
        )
        assert code == 0, err
        rows = read_report_csv(tmp_path / "report" / "report.csv")
        methods = {r.method for r in rows}
        assert methods == {"mtl_seed1", "mtl_seed2", "mtl_ensemble", "single_city", "naive"}
        assert (tmp_path / "report" / "report.txt").exists()
        assert all(np.isfinite(r.mse) for r in rows)

        # ensemble prediction really is the member mean
        a = read_tensor_file(tmp_path / "pred_mtl_1" / "core-a.gct")["pred"]
        b = read_tensor_file(tmp_path / "pred_mtl_2" / "core-a.gct")["pred"]
        e = read_tensor_file(tmp_path / "pred_ens" / "core-a.gct")["pred"]
        assert np.allclose(e, (a.astype(np.float64) + b) / 2.0, atol=1e-6)

    def test_evaluate_perfect_predictions_zero(self, micro_bench, tmp_path, capsys):
        # write predictions equal to the truths, then score them
        from gridcast.protocols import BenchmarkData
        from gridcast.container import write_tensor_file

        data = BenchmarkData.open(micro_bench)
        out = tmp_path / "perfect"
        out.mkdir()
        for city in data.roles.core_cities:
            inst = data.eval_instances(city, "in_covid", "test", stride=120)
            preds = np.stack([t for _, t, _ in inst]).astype(np.float32)
            starts = np.array([s for _, _, s in inst], dtype=np.float64)
            write_tensor_file(out / f"{city}.gct", {"pred": preds, "start": starts})
        code, stdout, err = run(
            capsys,
            "evaluate",
            "--data", str(micro_bench),
            "--split", "core_test",
            "--pred", f"perfect={out}",
            "--out", str(tmp_path / "perfect_report"),
            "--stride", "120",
        )
        assert code == 0, err
        assert "aggregate=0.0" in stdout

    def test_predict_deterministic_outputs(self, micro_bench, tmp_path, capsys):
        code, out1, _ = run(
            capsys, "predict", "--data", str(micro_bench), "--split", "core_test",
            "--method", "naive", "--out", str(tmp_path / "n1"), "--stride", "120",
        )
        code, out2, _ = run(
            capsys, "predict", "--data", str(micro_bench), "--split", "core_test",
            "--method", "naive", "--out", str(tmp_path / "n2"), "--stride", "120",
        )
        assert out1.replace("/n1", "") == out2.replace("/n2", "")
        f1 = (tmp_path / "n1" / "core-a.gct").read_bytes()
        f2 = (tmp_path / "n2" / "core-a.gct").read_bytes()
        assert f1 == f2

    def test_predict_without_checkpoint_exits_2(self, micro_bench, tmp_path, capsys):
        code, _, err = run(
            capsys, "predict", "--data", str(micro_bench), "--split", "core_test",
            "--out", str(tmp_path / "p"),
        )
        assert code == 2
        assert "checkpoint" in err

    def test_leak_guard_surfaces_exit_3(self, micro_bench, tmp_path, capsys):
        # corrupt scenario: evaluating with a prediction file whose instance
        # starts disagree is a validation error (2); a missing file is 3
        code, _, err = run(
            capsys,
            "evaluate",
            "--data", str(micro_bench),
            "--split", "core_test",
            "--pred", f"ghost={tmp_path / 'missing_dir'}",
            "--out", str(tmp_path / "r"),
        )
        assert code == 3
        assert "missing" in err or "not found" in err or "prediction file" in err
