import os

import numpy as np
import pytest

from yieldgraph.cli import main
from yieldgraph.data import load_dataset
from yieldgraph.evaluation import parse_metrics
from yieldgraph.geo import RasterGrid, write_ascii_grid


def run(argv):
    return main(argv)


def synth_args(out, counties=16, years=10, seed=3):
    return [
        "synth", "--counties", str(counties), "--years", str(years),
        "--seed", str(seed), "--out", str(out),
    ]


def dataset_flags(d):
    return [
        "--features", str(d / "features.csv"),
        "--yields", str(d / "yields.csv"),
        "--adjacency", str(d / "adjacency.tsv"),
    ]


def train_args(data_dir, out, method="cnn-1y", epochs=2, extra=()):
    return (
        ["train"] + dataset_flags(data_dir)
        + ["--method", method, "--test-year", "2009", "--epochs", str(epochs),
           "--toy-widths", "--batch-size", "16", "--out", str(out)]
        + list(extra)
    )


def test_synth_deterministic_bytes(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(synth_args(a, 100, 20, seed=7)) == 0
    assert run(synth_args(b, 100, 20, seed=7)) == 0
    for name in ("features.csv", "yields.csv", "adjacency.tsv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_synth_output_loads_and_grid_edges(tmp_path):
    out = tmp_path / "ds"
    assert run(synth_args(out, 100, 8)) == 0
    ds = load_dataset(out / "features.csv", out / "yields.csv", out / "adjacency.tsv")
    assert ds.graph.n == 100
    assert sum(len(v) for v in ds.graph.neighbors) // 2 == 180


def test_synth_rejects_non_square(tmp_path):
    assert run(synth_args(tmp_path / "x", counties=10)) == 2


def test_out_dir_protection(tmp_path):
    out = tmp_path / "ds"
    assert run(synth_args(out)) == 0
    assert run(synth_args(out)) == 2  # refuses without --force
    assert run(synth_args(out) + ["--force"]) == 0


def test_train_writes_checkpoint_log_and_config(tmp_path):
    data = tmp_path / "data"
    assert run(synth_args(data)) == 0
    out = tmp_path / "run"
    assert run(train_args(data, out)) == 0
    assert (out / "checkpoint.ckpt").exists()
    log = (out / "training_log.csv").read_text().splitlines()
    assert log[0] == "epoch,train_loss,val_rmse,lr"
    assert len(log) == 3
    config = (out / "config.txt").read_text()
    assert "command = train" in config
    assert "method = cnn-1y" in config
    assert "schedule = " in config  # effective values pinned


def test_train_best_epoch_matches_log_minimum(tmp_path):
    data = tmp_path / "data"
    assert run(synth_args(data)) == 0
    out = tmp_path / "run"
    assert run(train_args(data, out, epochs=4)) == 0
    from yieldgraph.models import ModelCheckpoint

    ckpt = ModelCheckpoint.load(out / "checkpoint.ckpt")
    rows = (out / "training_log.csv").read_text().splitlines()[1:]
    val = [float(r.split(",")[2]) for r in rows]
    assert val[ckpt.best_epoch] == min(val)


def test_train_deterministic_rerun(tmp_path):
    data = tmp_path / "data"
    assert run(synth_args(data)) == 0
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert run(train_args(data, out1, method="gnn-1y")) == 0
    assert run(train_args(data, out2, method="gnn-1y")) == 0
    assert (out1 / "checkpoint.ckpt").read_bytes() == (out2 / "checkpoint.ckpt").read_bytes()


def test_train_rerun_from_echoed_config(tmp_path):
    data = tmp_path / "data"
    assert run(synth_args(data)) == 0
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert run(train_args(data, out1)) == 0
    assert run(["train", "--config", str(out1 / "config.txt"),
                "--out", str(out2)]) == 0
    assert (out1 / "checkpoint.ckpt").read_bytes() == (out2 / "checkpoint.ckpt").read_bytes()


def test_missing_input_file_exits_2(tmp_path):
    out = tmp_path / "run"
    code = run([
        "train", "--features", str(tmp_path / "nope.csv"),
        "--yields", str(tmp_path / "nope2.csv"),
        "--adjacency", str(tmp_path / "nope3.tsv"),
        "--method", "cnn-1y", "--test-year", "2009", "--out", str(out),
    ])
    assert code == 2


def test_missing_required_flag_exits_2(tmp_path):
    assert run(["synth", "--counties", "16", "--out", str(tmp_path / "x")]) == 2


def test_evaluate_writes_report(tmp_path, capsys):
    data = tmp_path / "data"
    assert run(synth_args(data)) == 0
    run_dir = tmp_path / "run"
    assert run(train_args(data, run_dir)) == 0
    eval_dir = tmp_path / "eval"
    code = run(
        ["evaluate", "--checkpoint", str(run_dir / "checkpoint.ckpt")]
        + dataset_flags(data) + ["--out", str(eval_dir)]
    )
    assert code == 0
    metrics = parse_metrics(eval_dir / "metrics.txt")
    assert metrics["year"] == 2009
    assert (eval_dir / "predictions.csv").exists()
    assert (eval_dir / "scatter.svg").exists()


def test_evaluate_early_flag(tmp_path):
    data = tmp_path / "data"
    assert run(synth_args(data)) == 0
    run_dir = tmp_path / "run"
    assert run(train_args(data, run_dir, epochs=3)) == 0
    plain, early = tmp_path / "plain", tmp_path / "early"
    base = ["evaluate", "--checkpoint", str(run_dir / "checkpoint.ckpt")] + dataset_flags(data)
    assert run(base + ["--out", str(plain)]) == 0
    assert run(base + ["--out", str(early), "--early"]) == 0
    m_plain = parse_metrics(plain / "metrics.txt")
    m_early = parse_metrics(early / "metrics.txt")
    assert m_plain["r2"] != m_early["r2"]


def test_benchmark_table_shape(tmp_path):
    data = tmp_path / "data"
    assert run(synth_args(data)) == 0
    out = tmp_path / "bench"
    code = run(
        ["benchmark"] + dataset_flags(data)
        + ["--methods", "ridge-1y,lasso-1y", "--seeds", "0,1", "--test-year", "2009",
           "--out", str(out)]
    )
    assert code == 0
    rows = (out / "benchmark.csv").read_text().splitlines()
    assert rows[0].startswith("method,group,seeds,failed,rmse_mean,rmse_std")
    assert len(rows) == 3
    assert rows[1].startswith("ridge-1y,1y,2,0")
    txt = (out / "benchmark.txt").read_text()
    assert "ridge-1y" in txt and "lasso-1y" in txt


def test_benchmark_same_seed_twice_zero_std(tmp_path):
    data = tmp_path / "data"
    assert run(synth_args(data)) == 0
    out = tmp_path / "bench"
    assert run(
        ["benchmark"] + dataset_flags(data)
        + ["--methods", "ridge-1y", "--seeds", "0,0", "--test-year", "2009",
           "--out", str(out)]
    ) == 0
    row = (out / "benchmark.csv").read_text().splitlines()[1].split(",")
    header = (out / "benchmark.csv").read_text().splitlines()[0].split(",")
    assert float(row[header.index("rmse_std")]) == 0.0


def test_benchmark_failed_cell_still_emits_table(tmp_path):
    data = tmp_path / "data"
    assert run(synth_args(data, years=6)) == 0  # too short for any 5y window
    out = tmp_path / "bench"
    code = run(
        ["benchmark"] + dataset_flags(data)
        + ["--methods", "ridge-1y,cnn-rnn-5y", "--seeds", "0", "--test-year", "2005",
           "--epochs", "1", "--out", str(out)]
    )
    assert code == 0
    rows = (out / "benchmark.csv").read_text().splitlines()
    assert any("failed:1" in r for r in rows[1:])
    assert any(r.startswith("ridge-1y") and r.endswith("ok") for r in rows[1:])


def test_aggregate_toy_pipeline(tmp_path):
    rasters = tmp_path / "rasters"
    os.makedirs(rasters)
    write_ascii_grid(
        RasterGrid(0.0, 0.0, 1.0, 2, 2, np.array([10.0, 20.0, 30.0, 40.0])),
        rasters / "var.asc",
    )
    weights = tmp_path / "weights.csv"
    weights.write_text(
        "county,cell_index,overlap_fraction,agland_fraction\n"
        "00001,0,0.5,0.4\n00001,1,1.0,0.2\n00002,2,1.0,1.0\n",
        encoding="utf-8",
    )
    manifest = tmp_path / "manifest.csv"
    manifest.write_text("column,source,kind\ns_awc_0,var.asc,static\n", encoding="utf-8")
    out = tmp_path / "fragment.csv"
    code = run([
        "aggregate", "--rasters", str(rasters), "--weights", str(weights),
        "--manifest", str(manifest), "--year", "2000", "--out", str(out),
    ])
    assert code == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "county,year,s_awc_0"
    # county 00001: weights {0.2, 0.2} over values {10, 20} -> 15
    assert lines[1] == "00001,2000,15.0"
    assert lines[2] == "00002,2000,30.0"


def test_aggregate_missing_weights_exits_2(tmp_path):
    code = run([
        "aggregate", "--rasters", str(tmp_path), "--weights", str(tmp_path / "none.csv"),
        "--manifest", str(tmp_path / "m.csv"), "--year", "2000",
        "--out", str(tmp_path / "o.csv"),
    ])
    assert code == 2


def test_aggregate_rerun_identical_bytes(tmp_path):
    rasters = tmp_path / "rasters"
    os.makedirs(rasters)
    write_ascii_grid(
        RasterGrid(0.0, 0.0, 1.0, 2, 2, np.array([1.0, 2.0, 3.0, 4.0])),
        rasters / "v.asc",
    )
    (tmp_path / "w.csv").write_text(
        "county,cell_index,overlap_fraction,agland_fraction\nc,0,1.0,1.0\n",
        encoding="utf-8",
    )
    (tmp_path / "m.csv").write_text("column,source,kind\ne_nccpi_all,v.asc,static\n",
                                    encoding="utf-8")
    args = [
        "aggregate", "--rasters", str(rasters), "--weights", str(tmp_path / "w.csv"),
        "--manifest", str(tmp_path / "m.csv"), "--year", "2001",
        "--out", str(tmp_path / "frag.csv"), "--force",
    ]
    assert run(args) == 0
    first = (tmp_path / "frag.csv").read_bytes()
    assert run(args) == 0
    assert (tmp_path / "frag.csv").read_bytes() == first


def test_numerical_abort_exits_3(tmp_path):
    data = tmp_path / "data"
    assert run(synth_args(data)) == 0
    out = tmp_path / "run"
    code = run(train_args(data, out, extra=["--lr", "1e200", "--force"]))
    assert code == 3
