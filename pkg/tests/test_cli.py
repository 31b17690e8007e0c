"""End-to-end checks of the command line driver.

Everything runs ``cli.main`` in process for speed; one subprocess test
confirms the installed ``lsnet`` entry point resolves and prints.
"""

import json
import os
import subprocess

import numpy as np
import pytest

from lsnet import cli
from lsnet.analyze import read_csv_plane, read_pgm
from lsnet.data import save_dataset
from lsnet.model import build_model, save_weights, variant


@pytest.fixture(scope="module")
def tiny_paths(tmp_path_factory, blobs_small):
    train, test = blobs_small
    root = tmp_path_factory.mktemp("cli-data")
    save_dataset(train, root / "train.lsds")
    save_dataset(test, root / "test.lsds")
    return str(root / "train.lsds"), str(root / "test.lsds")


@pytest.fixture(scope="module")
def train_run(tmp_path_factory, tiny_paths):
    out = tmp_path_factory.mktemp("cli-train") / "run"
    rc = cli.main([
        "train", "--variant", "micro", "--data", f"{tiny_paths[0]}:{tiny_paths[1]}",
        "--epochs", "2", "--warmup-epochs", "1", "--batch-size", "64",
        "--out-dir", str(out),
    ])
    assert rc == 0
    return out


def test_describe_prints_spec_and_totals(capsys):
    assert cli.main(["describe", "--variant", "micro"]) == 0
    out = capsys.readouterr().out
    assert "digest " in out
    assert "parameters " in out
    assert "total" in out
    assert "totals at 224x224" in out


def test_describe_budget_verdicts(capsys):
    assert cli.main(["describe", "--variant", "t"]) == 0
    out = capsys.readouterr().out
    assert "target params 11,400,000" in out
    assert out.count("PASS") == 2


def test_describe_reads_spec_file(tmp_path, capsys):
    path = tmp_path / "model.txt"
    path.write_text(variant("micro").to_text())
    assert cli.main(["describe", "--variant", str(path), "--res", "32"]) == 0
    assert "totals at 32x32" in capsys.readouterr().out


def test_describe_ablation_flag_changes_digest(capsys):
    cli.main(["describe", "--variant", "micro"])
    base = capsys.readouterr().out
    cli.main(["describe", "--variant", "micro", "--no-lkp-dw"])
    ablated = capsys.readouterr().out
    digest = lambda text: next(l for l in text.splitlines() if l.startswith("digest "))
    assert digest(base) != digest(ablated)


def test_unknown_variant_exits_2(capsys):
    assert cli.main(["describe", "--variant", "nope"]) == 2
    assert "error:" in capsys.readouterr().err


def test_usage_errors_exit_2(capsys):
    assert cli.main(["describe", "--bogus"]) == 2
    assert cli.main([]) == 2
    capsys.readouterr()


def test_train_writes_artifacts(train_run):
    for name in ("metrics.csv", "summary.json", "weights.lsw"):
        assert (train_run / name).is_file()
    text = (train_run / "metrics.csv").read_text()
    assert text.startswith("# ")
    assert "# command lsnet train" in text
    assert "epoch,split,loss,top1" in text
    rows = [l for l in text.splitlines() if l and not l.startswith("#")]
    assert len(rows) == 1 + 2 * 2  # schema line, then train and test rows per epoch


def test_train_summary_contents(train_run):
    summary = json.loads((train_run / "summary.json").read_text())
    assert summary["model"] == "micro"
    assert len(summary["epochs"]) == 2
    assert summary["epochs"][-1]["epoch"] == 2
    assert 0.0 <= summary["final_test_acc"] <= 1.0


def test_eval_matches_training_summary(train_run, tiny_paths, capsys):
    summary = json.loads((train_run / "summary.json").read_text())
    rc = cli.main(["eval", "--weights", str(train_run / "weights.lsw"),
                   "--data", tiny_paths[1]])
    assert rc == 0
    out = capsys.readouterr().out
    assert f"top1 {summary['final_test_acc']:.4f}" in out


def test_eval_missing_weights_exits_3(tmp_path, capsys):
    rc = cli.main(["eval", "--weights", str(tmp_path / "absent.lsw")])
    assert rc == 3
    assert "error:" in capsys.readouterr().err


def test_eval_junk_weights_exits_3(tmp_path, capsys):
    path = tmp_path / "junk.lsw"
    path.write_bytes(b"XXXX not a weight file")
    assert cli.main(["eval", "--weights", str(path)]) == 3
    capsys.readouterr()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_eval_nonfinite_weights_exits_4(tmp_path, tiny_paths, capsys):
    store = build_model(variant("micro"), seed=0)
    next(iter(store.params.values())).data[0] = np.inf
    path = tmp_path / "broken.lsw"
    save_weights(store, path)
    rc = cli.main(["eval", "--weights", str(path), "--data", tiny_paths[1]])
    assert rc == 4
    assert "error:" in capsys.readouterr().err


def test_bench_ska_speedup_and_csv(tmp_path, capsys):
    rc = cli.main(["bench", "--op", "ska", "--size", "1,16,12,12", "--groups", "4",
                   "--repeats", "3", "--out-dir", str(tmp_path)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "name,config,repeats,median_s,macs,macs_per_s,imgs_per_s" in out
    assert "ska-opt," in out and "ska-naive," in out
    assert "# speedup" in out
    text = (tmp_path / "bench.csv").read_text()
    assert "# model" in text and "ska-naive," in text


def test_bench_model_inference(capsys):
    rc = cli.main(["bench", "--variant", "gradcheck-tiny", "--res", "16",
                   "--batch", "2", "--repeats", "3"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "model-infer," in out
    assert "images/s" in out


def test_dump_agg_weights_outputs(tmp_path, tiny_paths, capsys):
    rc = cli.main(["dump-agg-weights", "--variant", "micro", "--data", tiny_paths[1],
                   "--stage", "3", "--layer", "1", "--out-dir", str(tmp_path)])
    assert rc == 0
    assert "wrote" in capsys.readouterr().out
    pix, comments = read_pgm(tmp_path / "agg-s3b1.pgm")
    assert pix.shape == (32, 32)
    assert any("agg-weights stage 3 layer 1" in c for c in comments)
    plane, _ = read_csv_plane(tmp_path / "agg-s3b1.csv")
    assert plane.shape == (32, 32)


def test_dump_agg_weights_bad_stage_or_layer(tiny_paths, capsys):
    args = ["dump-agg-weights", "--variant", "micro", "--data", tiny_paths[1]]
    assert cli.main(args + ["--stage", "4"]) == 2  # attention stage, no LS mixer
    assert cli.main(args + ["--stage", "1", "--layer", "0"]) == 2  # zero blocks
    assert cli.main(args + ["--stage", "3", "--layer", "5"]) == 2
    capsys.readouterr()


def test_erf_map_outputs(tmp_path, tiny_paths, capsys):
    rc = cli.main(["erf-map", "--variant", "micro", "--data", tiny_paths[1],
                   "--index", "1", "--out-dir", str(tmp_path)])
    assert rc == 0
    assert "support" in capsys.readouterr().out
    pix, comments = read_pgm(tmp_path / "erf-s4.pgm")
    assert pix.shape == (32, 32)
    assert any("pixels above 1% of max" in c for c in comments)


def test_erf_map_stage_and_upsample(tmp_path, tiny_paths, capsys):
    rc = cli.main(["erf-map", "--variant", "micro", "--data", tiny_paths[1],
                   "--stage", "2", "--res", "64", "--position", "0,0",
                   "--out-dir", str(tmp_path)])
    assert rc == 0
    pix, _ = read_pgm(tmp_path / "erf-s2.pgm")
    assert pix.shape == (64, 64)
    capsys.readouterr()


def test_erf_map_validation_exits_2(tiny_paths, capsys):
    args = ["erf-map", "--variant", "micro", "--data", tiny_paths[1]]
    assert cli.main(args + ["--res", "33"]) == 2
    assert cli.main(args + ["--position", "oops"]) == 2
    assert cli.main(args + ["--index", "9999"]) == 2
    capsys.readouterr()


def test_threads_flag_pins_blas_pools(monkeypatch):
    for var in cli._THREAD_VARS:
        monkeypatch.delenv(var, raising=False)
    monkeypatch.delenv("LSNET_DETERMINISTIC", raising=False)
    cli._configure_threads(["bench", "--threads", "2"])
    assert all(os.environ[v] == "2" for v in cli._THREAD_VARS)
    cli._configure_threads(["bench", "--threads=4"])
    assert os.environ["OMP_NUM_THREADS"] == "4"
    monkeypatch.setenv("LSNET_DETERMINISTIC", "1")
    cli._configure_threads(["bench"])
    assert os.environ["OMP_NUM_THREADS"] == "1"


def test_console_script_runs():
    proc = subprocess.run(["lsnet", "describe", "--variant", "gradcheck-tiny"],
                          capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0
    assert "digest " in proc.stdout
