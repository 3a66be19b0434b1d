"""CLI contracts: subcommand behavior, exit codes, idempotent outputs."""

import json
import os

import numpy as np
import pytest

from metainr.cli import main
from metainr.data import load_csv

MODEL = {
    "layers": 2,
    "hidden": 12,
    "feat_per_scale": 8,
    "input_scales": [0.5, 2.0, 6.0],
    "layer_scales": [3.0, 1.0],
    "axis_dims": [4, 4],
    "latent_dim": 6,
}


def write_config(tmp_path, **sections):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(sections))
    return str(path)


def base_config(tmp_path, out, epochs=2):
    dataset = os.path.join(out, "dataset.csv")
    return write_config(
        tmp_path,
        synth={
            "n_cities": 2,
            "series_per_city": 4,
            "length_range": [40, 48],
            "seed": 5,
            "path": "dataset.csv",
        },
        train={
            "dataset": dataset,
            "observe_rate": 0.5,
            "epochs": epochs,
            "batch_size": 4,
            "embed_dim": 5,
            "model": MODEL,
        },
        eval={
            "dataset": dataset,
            "checkpoint": os.path.join(out, "checkpoint.bin"),
            "rates": [0.5],
            "methods": ["mean", "linear", "meta_inr"],
            "plots": 1,
        },
        impute={
            "dataset": dataset,
            "checkpoint": os.path.join(out, "checkpoint.bin"),
        },
        export_latents={
            "dataset": dataset,
            "checkpoint": os.path.join(out, "checkpoint.bin"),
            "rate": 0.5,
        },
    )


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("cli")
    out = str(tmp_path / "out")
    cfg = base_config(tmp_path, out)
    assert main(["--config", cfg, "--out", out, "synth"]) == 0
    assert main(["--config", cfg, "--out", out, "train"]) == 0
    return tmp_path, out, cfg


class TestSynth:
    def test_writes_csv_with_rows(self, workspace):
        _, out, _ = workspace
        instances = load_csv(os.path.join(out, "dataset.csv"))
        assert len(instances) == 8
        assert all(len(i) >= 40 for i in instances)

    def test_same_seed_identical_bytes(self, tmp_path):
        cfg = write_config(
            tmp_path,
            synth={"n_cities": 1, "series_per_city": 2, "length_range": [20, 24], "seed": 9},
        )
        out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
        assert main(["--config", cfg, "--out", out1, "synth"]) == 0
        assert main(["--config", cfg, "--out", out2, "synth"]) == 0
        a = open(os.path.join(out1, "dataset.csv"), "rb").read()
        b = open(os.path.join(out2, "dataset.csv"), "rb").read()
        assert a == b

    def test_unknown_config_field_exit_2(self, tmp_path, capsys):
        cfg = write_config(tmp_path, synth={"n_cities": 1, "serie_per_city": 2})
        assert main(["--config", cfg, "--out", str(tmp_path), "synth"]) == 2
        err = capsys.readouterr().err
        assert err.startswith("error[config]:")
        assert "serie_per_city" in err

    def test_invalid_json_exit_2(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        assert main(["--config", str(path), "synth"]) == 2
        assert capsys.readouterr().err.startswith("error[config]:")


class TestTrain:
    def test_log_rows_equal_epochs(self, workspace):
        _, out, _ = workspace
        lines = open(os.path.join(out, "train_log.csv")).read().strip().split("\n")
        assert lines[0] == "epoch,train_loss,val_mae"
        assert len(lines) == 1 + 2  # header + one row per epoch

    def test_checkpoints_written(self, workspace):
        _, out, _ = workspace
        assert os.path.exists(os.path.join(out, "checkpoint.bin"))
        assert os.path.exists(os.path.join(out, "checkpoint-final.bin"))

    def test_missing_dataset_path_exit_2(self, tmp_path, capsys):
        cfg = write_config(tmp_path, train={"epochs": 1})
        assert main(["--config", cfg, "--out", str(tmp_path), "train"]) == 2
        assert "dataset" in capsys.readouterr().err

    def test_nonexistent_dataset_exit_3(self, tmp_path, capsys):
        cfg = write_config(tmp_path, train={"dataset": str(tmp_path / "nope.csv")})
        assert main(["--config", cfg, "--out", str(tmp_path), "train"]) == 3
        assert capsys.readouterr().err.startswith("error[data]:")


class TestImpute:
    def test_row_count_and_flags(self, workspace):
        tmp_path, out, cfg = workspace
        assert main(["--config", cfg, "--out", out, "impute"]) == 0
        instances = load_csv(os.path.join(out, "dataset.csv"))
        lines = open(os.path.join(out, "imputed.csv")).read().strip().split("\n")
        assert lines[0] == "series_id,timestamp,value,imputed_flag"
        assert len(lines) == 1 + sum(len(i) for i in instances)

    def test_fully_observed_with_overwrite_returns_input(self, workspace):
        tmp_path, out, cfg = workspace
        doc = json.loads(open(cfg).read())
        doc["impute"].pop("observe_rate", None)  # keep everything observed
        cfg2 = tmp_path / "impute_full.json"
        cfg2.write_text(json.dumps(doc))
        out2 = str(tmp_path / "impute_out")
        assert main(["--config", str(cfg2), "--out", out2, "impute"]) == 0
        by_id = {i.id: i for i in load_csv(os.path.join(out, "dataset.csv"))}
        rows = open(os.path.join(out2, "imputed.csv")).read().strip().split("\n")[1:]
        for row in rows:
            sid, ts, value, flag = row.split(",")
            assert flag == "0"
            inst = by_id[sid]
            idx = np.flatnonzero(inst.timestamps == float(ts))[0]
            assert float(value) == inst.values[idx]

    def test_rerun_identical_bytes(self, workspace):
        tmp_path, out, cfg = workspace
        out2 = str(tmp_path / "impute_rerun")
        assert main(["--config", cfg, "--out", out2, "impute"]) == 0
        a = open(os.path.join(out, "imputed.csv"), "rb").read()
        b = open(os.path.join(out2, "imputed.csv"), "rb").read()
        assert a == b


class TestEval:
    def test_report_files_and_plot(self, workspace):
        tmp_path, out, cfg = workspace
        assert main(["--config", cfg, "--out", out, "eval"]) == 0
        assert os.path.exists(os.path.join(out, "report.csv"))
        summary = json.loads(open(os.path.join(out, "report.json")).read())
        assert set(summary["methods"]) == {"mean", "linear", "meta_inr"}
        plots = [f for f in os.listdir(out) if f.endswith(".svg")]
        assert len(plots) == 1

    def test_rerun_identical_report(self, workspace):
        tmp_path, out, cfg = workspace
        out2 = str(tmp_path / "eval_rerun")
        assert main(["--config", cfg, "--out", out2, "eval"]) == 0
        assert main(["--config", cfg, "--out", str(tmp_path / "eval_rerun2"), "eval"]) == 0
        a = open(os.path.join(out2, "report.csv"), "rb").read()
        b = open(os.path.join(str(tmp_path / "eval_rerun2"), "report.csv"), "rb").read()
        assert a == b

    def test_model_method_without_checkpoint_exit_2(self, workspace, tmp_path, capsys):
        ws_tmp, out, _ = workspace
        cfg = write_config(
            tmp_path,
            eval={
                "dataset": os.path.join(out, "dataset.csv"),
                "methods": ["mean", "meta_inr"],
                "rates": [0.5],
            },
        )
        assert main(["--config", cfg, "--out", str(tmp_path), "eval"]) == 2


class TestExportLatents:
    def test_columns_and_determinism(self, workspace):
        tmp_path, out, cfg = workspace
        assert main(["--config", cfg, "--out", out, "export-latents"]) == 0
        out2 = str(tmp_path / "latents_rerun")
        assert main(["--config", cfg, "--out", out2, "export-latents"]) == 0
        a = open(os.path.join(out, "latents.csv"), "rb").read()
        b = open(os.path.join(out2, "latents.csv"), "rb").read()
        assert a == b
        lines = a.decode().strip().split("\n")
        assert len(lines[0].split(",")) == 2 + MODEL["latent_dim"]
        assert len(lines) == 1 + 8


class TestGradcheck:
    def test_stock_model_passes(self, capsys):
        assert main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert "[pass] quadratic" in out
        assert "[pass] sine_mlp" in out
        assert "[pass] full_pipeline" in out
        assert "axis1.w_in" in out  # per-parameter-group lines

    def test_corrupted_backward_fails(self, capsys, monkeypatch):
        import metainr._kernels as K

        original = K.relu_bw
        monkeypatch.setattr(K, "relu_bw", lambda g, x: 0.9 * original(g, x))
        assert main(["gradcheck"]) == 4
        assert "FAIL" in capsys.readouterr().out
