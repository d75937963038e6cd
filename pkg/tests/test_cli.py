"""CLI workflows: subcommand wiring, artifacts, and the exit-code contract."""

import json
import os

import numpy as np
import pytest

from lsqnet.cli import main
from lsqnet.inference import load_int_model, save_int_model

FP_TOML = """
[model]
arch = "mlp"
input_dim = 16
hidden = [12]
classes = 4
bits = "fp"

[trainer]
epochs = 3
lr0 = 0.1
seed = 1

[data]
n_samples = 200
n_test = 60
n_features = 16

[output]
dir = "fp"
"""

W2_TOML = FP_TOML.replace('bits = "fp"', "bits = 2").replace(
    "lr0 = 0.1", "lr0 = 0.01").replace('dir = "fp"', 'dir = "w2"')


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.setenv("LSQ_OUT", str(tmp_path / "out"))
    (tmp_path / "fp.toml").write_text(FP_TOML)
    (tmp_path / "w2.toml").write_text(W2_TOML)
    return tmp_path


def out(workdir, *parts):
    return os.path.join(str(workdir / "out"), *parts)


class TestTrain:
    def test_fp_run_writes_artifacts(self, workdir):
        assert main(["train", "--config", str(workdir / "fp.toml")]) == 0
        for name in ("metrics.csv", "summary.json", "last.ckpt", "best.ckpt"):
            assert os.path.exists(out(workdir, "fp", name)), name
        summary = json.load(open(out(workdir, "fp", "summary.json")))
        assert summary["epochs"] == 3
        assert summary["config_hash"]

    def test_determinism_bit_identical_metrics(self, workdir):
        main(["train", "--config", str(workdir / "fp.toml")])
        first = open(out(workdir, "fp", "metrics.csv"), "rb").read()
        main(["train", "--config", str(workdir / "fp.toml")])
        assert open(out(workdir, "fp", "metrics.csv"), "rb").read() == first

    def test_finetune_workflow(self, workdir):
        main(["train", "--config", str(workdir / "fp.toml")])
        code = main(["train", "--config", str(workdir / "w2.toml"),
                     "--init-from", out(workdir, "fp", "best.ckpt")])
        assert code == 0
        assert os.path.exists(out(workdir, "w2", "best.ckpt"))

    def test_set_override(self, workdir):
        code = main(["train", "--config", str(workdir / "fp.toml"),
                     "--set", "trainer.epochs=1",
                     "--set", "output.dir=ovr"])
        assert code == 0
        metrics = open(out(workdir, "ovr", "metrics.csv")).read()
        assert len(metrics.splitlines()) == 2  # header + 1 epoch

    def test_bad_config_exits_2(self, workdir):
        (workdir / "bad.toml").write_text("[trainer]\nbogus = 1\n")
        assert main(["train", "--config", str(workdir / "bad.toml")]) == 2

    def test_missing_config_exits_2(self, workdir):
        assert main(["train", "--config", str(workdir / "nope.toml")]) == 2


@pytest.fixture
def trained(workdir):
    main(["train", "--config", str(workdir / "fp.toml")])
    main(["train", "--config", str(workdir / "w2.toml"),
          "--init-from", out(workdir, "fp", "best.ckpt")])
    return workdir


class TestEval:
    def test_eval_matches_training_summary(self, trained, capsys):
        code = main(["eval", "--ckpt", out(trained, "w2", "last.ckpt"),
                     "--config", str(trained / "w2.toml"),
                     "--json", str(trained / "eval.json")])
        assert code == 0
        printed = capsys.readouterr().out
        summary = json.load(open(out(trained, "w2", "summary.json")))
        assert f"top1 {summary['final_top1']:.4f}" in printed
        payload = json.load(open(trained / "eval.json"))
        assert payload["top1"] == pytest.approx(summary["final_top1"])

    def test_missing_ckpt_exits_2(self, trained):
        assert main(["eval", "--ckpt", str(trained / "nope.ckpt"),
                     "--config", str(trained / "w2.toml")]) == 2

    def test_dataset_dim_mismatch_exits_2(self, trained):
        code = main(["eval", "--ckpt", out(trained, "w2", "last.ckpt"),
                     "--config", str(trained / "w2.toml"),
                     "--set", "model.input_dim=20",
                     "--set", "data.n_features=20"])
        assert code == 2


class TestExportVerify:
    def test_export_then_verify_passes(self, trained):
        intpath = str(trained / "w2.intmodel")
        assert main(["export", "--ckpt", out(trained, "w2", "last.ckpt"),
                     "--out", intpath]) == 0
        assert os.path.exists(intpath)
        assert main(["verify", "--ckpt", out(trained, "w2", "last.ckpt"),
                     "--intmodel", intpath,
                     "--config", str(trained / "w2.toml")]) == 0

    def test_verify_without_file_exports_in_memory(self, trained):
        assert main(["verify", "--ckpt", out(trained, "w2", "last.ckpt"),
                     "--config", str(trained / "w2.toml")]) == 0

    def test_tampered_intmodel_exits_3(self, trained):
        intpath = str(trained / "w2.intmodel")
        main(["export", "--ckpt", out(trained, "w2", "last.ckpt"),
              "--out", intpath])
        im = load_int_model(intpath)
        im.layers[-1].shift += 1.0  # breaks logits but not the argmax alone
        im.layers[-1].scale *= 1.5
        save_int_model(intpath, im)
        assert main(["verify", "--ckpt", out(trained, "w2", "last.ckpt"),
                     "--intmodel", intpath,
                     "--config", str(trained / "w2.toml")]) == 3

    def test_export_fp_checkpoint_exits_1(self, trained):
        assert main(["export", "--ckpt", out(trained, "fp", "last.ckpt"),
                     "--out", str(trained / "x.intmodel")]) == 1


class TestAnalyze:
    def test_r_ratio_all_modes(self, trained):
        outdir = str(trained / "rr")
        code = main(["analyze", "r-ratio",
                     "--ckpt", out(trained, "w2", "last.ckpt"),
                     "--config", str(trained / "w2.toml"),
                     "--window", "3", "--out", outdir])
        assert code == 0
        body = open(os.path.join(outdir, "r_ratio.csv")).read()
        for mode in ("none", "n", "nqp"):
            assert mode in body

    def test_qe_sweep(self, trained):
        outdir = str(trained / "qe")
        code = main(["analyze", "qe-sweep",
                     "--ckpt", out(trained, "w2", "last.ckpt"),
                     "--out", outdir])
        assert code == 0
        rows = json.load(open(os.path.join(outdir, "qe_sweep.json")))["rows"]
        assert {r["layer"] for r in rows} == {"layer0", "layer1"}
        for r in rows:
            assert r["mae_pct"] >= 0.0 and r["mse_pct"] >= 0.0

    def test_size_table(self, trained):
        outdir = str(trained / "st")
        code = main(["analyze", "size-table",
                     "--ckpts", out(trained, "fp", "last.ckpt"),
                     out(trained, "w2", "last.ckpt"),
                     "--config", str(trained / "w2.toml"),
                     "--out", outdir])
        assert code == 0
        rows = json.load(open(os.path.join(outdir, "size_table.json")))["rows"]
        assert len(rows) == 2
        by_bits = {r["bits"]: r for r in rows}
        assert by_bits[32]["payload_bytes"] > by_bits[2]["payload_bytes"]

    def test_qe_sweep_on_fp_checkpoint_exits_2(self, trained):
        assert main(["analyze", "qe-sweep",
                     "--ckpt", out(trained, "fp", "last.ckpt"),
                     "--out", str(trained / "nope")]) == 2
