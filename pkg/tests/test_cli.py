from __future__ import annotations

import csv
import json
import time
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest

from lkda.cli import main

SMOKE = """\
gen.n_train = 96
gen.n_dev = 24
gen.n_test = 24
train.epochs = 2
train.batch_size = 16
"""


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "smoke.cfg"
    cfg.write_text(SMOKE)
    assert main(["gen", "--config", str(cfg), "--out", str(root / "corpus")]) == 0
    t0 = time.perf_counter()
    assert main(["train", "--config", str(cfg), "--corpus", str(root / "corpus"),
                 "--mode", "baseline_ce", "--out", str(root / "base")]) == 0
    elapsed = time.perf_counter() - t0
    assert main(["train", "--config", str(cfg), "--corpus", str(root / "corpus"),
                 "--mode", "lkda", "--out", str(root / "lkda")]) == 0
    return {"root": root, "cfg": cfg, "train_seconds": elapsed}


def test_gen_outputs_and_hash(ws, tmp_path):
    root = ws["root"]
    counts = {"train": 96, "dev": 24, "test": 24}
    for split, n in counts.items():
        lines = (root / "corpus" / f"{split}.jsonl").read_text().splitlines()
        assert len(lines) == n + 1
    m1 = json.loads((root / "corpus" / "manifest.json").read_text())
    assert main(["gen", "--config", str(ws["cfg"]), "--out", str(tmp_path / "again")]) == 0
    m2 = json.loads((tmp_path / "again" / "manifest.json").read_text())
    assert m1["corpus_hash"] == m2["corpus_hash"] and m1["counts"] == counts
    assert main(["gen", "--config", str(ws["cfg"]), "--seed", "99", "--out", str(tmp_path / "s99")]) == 0
    assert json.loads((tmp_path / "s99" / "manifest.json").read_text())["corpus_hash"] != m1["corpus_hash"]


def test_gen_bad_key_no_output(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("gen.n_trian = 3\n")
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 2
    assert "gen.n_trian" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_smoke_train_is_fast_and_complete(ws):
    assert ws["train_seconds"] < 60
    run = ws["root"] / "base"
    m = json.loads((run / "manifest.json").read_text())
    for key in ("command", "config", "seed", "corpus_hash", "checkpoints", "tool_version",
                "started_at", "finished_at", "outputs"):
        assert key in m
    for rel in m["outputs"]:
        assert (run / rel).exists()
    assert (run / "checkpoint.json").exists() and (run / "logs" / "train_log.csv").exists()
    rows = _read_csv(run / "logs" / "train_log.csv")
    assert len(rows) == 2
    assert list(rows[0]) == ["epoch", "ce_loss", "align_loss", "train_acc", "dev_acc", "dev_fkg", "dev_clk"]


def test_train_idempotent(ws, tmp_path):
    root = ws["root"]
    assert main(["train", "--config", str(ws["cfg"]), "--corpus", str(root / "corpus"),
                 "--mode", "baseline_ce", "--out", str(tmp_path / "b2")]) == 0
    for rel in ("checkpoint.json", "logs/train_log.csv", "metrics_dev.json"):
        assert (tmp_path / "b2" / rel).read_bytes() == (root / "base" / rel).read_bytes()


def test_train_resume_matches(ws, tmp_path):
    root = ws["root"]
    cfg1 = tmp_path / "one.cfg"
    cfg1.write_text(SMOKE.replace("train.epochs = 2", "train.epochs = 1"))
    out = tmp_path / "resumed"
    assert main(["train", "--config", str(cfg1), "--corpus", str(root / "corpus"),
                 "--mode", "baseline_ce", "--out", str(out)]) == 0
    assert main(["train", "--config", str(ws["cfg"]), "--corpus", str(root / "corpus"),
                 "--mode", "baseline_ce", "--out", str(out), "--resume"]) == 0
    assert (out / "logs" / "train_log.csv").read_bytes() == \
        (root / "base" / "logs" / "train_log.csv").read_bytes()


def test_eval_report_and_recount(ws, tmp_path, capsys):
    root = ws["root"]
    args = ["eval", "--checkpoint", str(root / "lkda" / "checkpoint.json"),
            "--corpus", str(root / "corpus"), "--split", "test"]
    assert main(args + ["--out", str(tmp_path / "e1")]) == 0
    assert main(args + ["--out", str(tmp_path / "e2")]) == 0
    a = (tmp_path / "e1" / "metrics_test.json").read_bytes()
    assert a == (tmp_path / "e2" / "metrics_test.json").read_bytes()
    rep = json.loads(a)
    assert rep["N"] == 24 and 0 <= rep["f_kg"] <= 1 and 0 <= rep["c_lk"] <= np.log(2)
    rows = _read_csv(tmp_path / "e1" / "logs" / "predictions_test.csv")
    recount = np.mean([r["pred_full"] == r["pred_detached"] for r in rows])
    assert recount == rep["f_kg"]
    acc = np.mean([r["pred_full"] == r["gold"] for r in rows])
    assert acc == rep["accuracy_full"]


def test_eval_missing_checkpoint(ws, tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.json"),
                 "--corpus", str(ws["root"] / "corpus")]) == 2


def test_sweep_outputs(ws, tmp_path):
    root = ws["root"]
    out = tmp_path / "sweep"
    grid = ["0", "0.2", "0.5", "1.0"]
    assert main(["sweep", "--baseline", str(root / "base" / "checkpoint.json"),
                 "--lkda", str(root / "lkda" / "checkpoint.json"), "--corpus", str(root / "corpus"),
                 "--seeds", "0", "1", "--grid", *grid, "--out", str(out), "--threads", "2"]) == 0
    rows = _read_csv(out / "logs" / "curves.csv")
    assert len(rows) == len(grid) * 3 * 2
    root_svg = ET.parse(out / "plots" / "fidelity_sparsity.svg").getroot()
    assert len(root_svg.findall(".//{http://www.w3.org/2000/svg}path")) == 3
    mean_rows = _read_csv(out / "logs" / "curves_mean.csv")
    for mr in mean_rows:
        vals = []
        for seed in (0, 1):
            per = _read_csv(out / "logs" / f"curves_seed{seed}.csv")
            vals += [float(r["accuracy"]) for r in per
                     if r["policy"] == mr["policy"] and float(r["sparsity"]) == float(mr["sparsity"])]
        assert float(mr["accuracy"]) == pytest.approx(np.mean(vals), abs=1e-15)

    # worker count does not change any output
    out1 = tmp_path / "sweep1"
    assert main(["sweep", "--baseline", str(root / "base" / "checkpoint.json"),
                 "--lkda", str(root / "lkda" / "checkpoint.json"), "--corpus", str(root / "corpus"),
                 "--seeds", "0", "1", "--grid", *grid, "--out", str(out1), "--threads", "1"]) == 0
    for rel in ("logs/curves.csv", "logs/curves_mean.csv", "sweep_summary.json"):
        assert (out / rel).read_bytes() == (out1 / rel).read_bytes()


def test_sweep_dim_mismatch(ws, tmp_path):
    root = ws["root"]
    cfg = tmp_path / "other.cfg"
    cfg.write_text(SMOKE + "gen.d_node = 16\n")
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "c16")]) == 0
    assert main(["sweep", "--baseline", str(root / "base" / "checkpoint.json"),
                 "--lkda", str(root / "lkda" / "checkpoint.json"), "--corpus", str(tmp_path / "c16"),
                 "--out", str(tmp_path / "s")]) == 2


def test_report_table(ws, tmp_path, caplog):
    root = ws["root"]
    assert main(["report", str(root / "base"), str(root / "lkda"), str(tmp_path / "missing"),
                 "--out", str(tmp_path / "rep")]) == 0
    rows = _read_csv(tmp_path / "rep" / "report.csv")
    assert len(rows) == 2
    base, lk = rows
    assert float(base["d_f_kg"]) == 0.0
    assert float(lk["d_f_kg"]) == pytest.approx(float(lk["f_kg"]) - float(base["f_kg"]), abs=1e-15)
    assert "missing" in caplog.text


def test_report_all_missing(tmp_path):
    assert main(["report", str(tmp_path / "a"), str(tmp_path / "b")]) == 2


def test_usage_errors():
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        main(["report"])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        main(["gen"])
    assert info.value.code == 1


def test_divergence_exit_code(ws, tmp_path):
    cfg = tmp_path / "explode.cfg"
    cfg.write_text(SMOKE + "train.lr_graph = 1e300\ntrain.lr_text = 1e300\n")
    with np.errstate(all="ignore"):
        code = main(["train", "--config", str(cfg), "--corpus", str(ws["root"] / "corpus"),
                     "--out", str(tmp_path / "x")])
    assert code == 3
