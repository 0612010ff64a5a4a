import csv
import json

import pytest

from specdec import bench
from specdec.cli import main


def test_split_tree_list():
    assert bench.split_tree_list("chain:3,full:2,2") == ["chain:3", "full:2,2"]
    assert bench.split_tree_list("nodes:[-1,-1,0],chain:1") == \
        ["nodes:[-1,-1,0]", "chain:1"]
    assert bench.split_tree_list("chain:4") == ["chain:4"]


def test_bench_grid_row_count(tmp_path):
    out = tmp_path / "bench.csv"
    rc = main(["bench", "--random-weights", "--trees", "chain:3,full:2,2",
               "--batch", "1,8,64", "--max-new", "4", "--out", str(out)])
    assert rc == 0
    rows = list(csv.DictReader(open(out)))
    # 2 trees x 3 batches + 3 baseline rows
    assert len(rows) == 9
    assert sum(r["tree"] == "none" for r in rows) == 3
    for r in rows:
        assert 1.0 <= float(r["tpc"]) <= 5.0
        assert float(r["ms_validate"]) >= 0.0


def test_bench_speculative_off_baseline_only(tmp_path):
    out = tmp_path / "b.csv"
    rc = main(["bench", "--random-weights", "--batch", "1,4",
               "--max-new", "4", "--speculative", "off", "--out", str(out)])
    assert rc == 0
    rows = list(csv.DictReader(open(out)))
    assert len(rows) == 2
    assert all(r["tree"] == "none" for r in rows)


def test_bench_deterministic_modulo_wall_clock(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    args = ["bench", "--random-weights", "--trees", "chain:2", "--batch", "1",
            "--max-new", "4"]
    main(args + ["--out", str(a)])
    main(args + ["--out", str(b)])
    ra = list(csv.DictReader(open(a)))
    rb = list(csv.DictReader(open(b)))
    for x, y in zip(ra, rb):
        for col in bench.FIELDS:
            if col not in bench.WALL_CLOCK_FIELDS:
                assert x[col] == y[col], col


def test_bench_workers_env_keeps_rows_deterministic(tmp_path, monkeypatch):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    args = ["bench", "--random-weights", "--trees", "chain:2,full:2,2",
            "--batch", "1,2", "--max-new", "4"]
    monkeypatch.setenv(bench.WORKERS_ENV, "1")
    main(args + ["--out", str(a)])
    monkeypatch.setenv(bench.WORKERS_ENV, "4")
    main(args + ["--out", str(b)])
    ra = list(csv.DictReader(open(a)))
    rb = list(csv.DictReader(open(b)))
    assert len(ra) == len(rb) == 6
    for x, y in zip(ra, rb):
        for col in bench.FIELDS:
            if col not in bench.WALL_CLOCK_FIELDS:
                assert x[col] == y[col], col


def test_bench_json_mirror(tmp_path):
    out_json = tmp_path / "b.json"
    main(["bench", "--random-weights", "--batch", "1", "--max-new", "4",
          "--json", str(out_json)])
    rows = json.load(open(out_json))
    assert rows and rows[0]["model_tag"] == "random"


def test_bench_requires_model_source(capsys):
    rc = main(["bench", "--batch", "1"])
    assert rc == 1
    assert "error" in capsys.readouterr().err


def test_verify_single_suite(capsys):
    rc = main(["verify", "--suite", "tree-attention"])
    out = capsys.readouterr().out
    assert rc == 0
    assert "[PASS]" in out


def test_train_then_eval(tmp_path):
    ckpt = tmp_path / "d.ckpt"
    curve = tmp_path / "curve.csv"
    rc = main(["train-draft", "--random-weights", "--steps", "8",
               "--lr", "5e-3", "--out", str(ckpt), "--curve", str(curve),
               "--max-new", "4"])
    assert rc == 0
    rows = list(csv.DictReader(open(curve)))
    assert rows[0]["step"] == "0"
    assert {"step", "total", "ce", "l1"} <= set(rows[0])
    last = int(rows[-1]["step"])
    assert last == 8

    rc = main(["train-draft", "--resume", "--steps", "4", "--lr", "5e-3",
               "--out", str(ckpt), "--curve", str(curve), "--max-new", "4"])
    assert rc == 0
    rows = list(csv.DictReader(open(curve)))
    # resumed steps extend the curve past the first run
    assert int(rows[-1]["step"]) == last + 4

    rc = main(["eval-tpc", "--checkpoint", str(ckpt), "--prompts", "2",
               "--max-new", "4"])
    assert rc == 0


def test_resume_needs_checkpoint(tmp_path, capsys):
    rc = main(["train-draft", "--resume", "--out", str(tmp_path / "nope.ckpt")])
    assert rc == 1
    assert "not found" in capsys.readouterr().err


def test_eval_tpc_json(tmp_path):
    ckpt = tmp_path / "d.ckpt"
    main(["train-draft", "--random-weights", "--steps", "2",
          "--out", str(ckpt), "--curve", str(tmp_path / "c.csv"),
          "--max-new", "4"])
    out = tmp_path / "tpc.json"
    rc = main(["eval-tpc", "--checkpoint", str(ckpt), "--prompts", "2",
               "--max-new", "4", "--json", str(out)])
    assert rc == 0
    data = json.load(open(out))
    assert data["tpc"] >= 1.0


def test_unknown_subcommand_exits_2():
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 2
