import csv
import json
import os
import shutil

import numpy as np
import pytest

from conftest import TINY_CONFIG
from ilulab.config import ExperimentConfig
from ilulab.errors import ReportError
from ilulab.metrics import robust_accuracy
from ilulab.models import load_checkpoint
from ilulab.pipeline import (ATTACK_COLUMNS, heatmap_from_attacks, read_csv, recompute_ra,
                             run_matrix, verify_manifest)
from ilulab.report import build_report, load_bundle, render_report, summary_table

# files whose content records wall-clock times
TIMESTAMPED = {"run_manifest.txt", "manifest.json"}


def _files(root):
    out = {}
    for d, _, names in os.walk(root):
        for n in names:
            p = os.path.join(d, n)
            out[os.path.relpath(p, root)] = p
    return out


def test_matrix_status_and_manifest(tiny_bundles):
    a, _, status = tiny_bundles
    assert status == ["ok", "ok"]
    doc = json.loads((a / "manifest.json").read_text())
    assert doc["status"] == "ok"
    assert set(doc["files"]) == set(_files(a)) - {"manifest.json"}
    assert verify_manifest(a) == []


def test_manifest_detects_tampering(tiny_bundles, tmp_path):
    copy = tmp_path / "b"
    shutil.copytree(tiny_bundles[0], copy)
    with open(copy / "heatmap.csv", "a") as fh:
        fh.write("x\n")
    os.remove(copy / "attacks.csv")
    assert sorted(verify_manifest(copy)) == ["attacks.csv", "heatmap.csv"]


def test_two_runs_are_byte_identical(tiny_bundles):
    a, b, _ = tiny_bundles
    fa, fb = _files(a), _files(b)
    assert set(fa) == set(fb)
    ckpts = [k for k in fa if k.endswith(".ckpt")]
    csvs = [k for k in fa if k.endswith(".csv")]
    assert len(ckpts) > 20 and len(csvs) >= 5
    for rel in fa:
        if rel not in TIMESTAMPED:
            assert open(fa[rel], "rb").read() == open(fb[rel], "rb").read(), rel


def test_heatmap_shape_and_content(tiny_bundles):
    a = tiny_bundles[0]
    cfg = ExperimentConfig.from_text(TINY_CONFIG)
    rows = read_csv(a / "heatmap.csv")
    ex = cfg.experiment
    assert len(rows) == len(ex.methods) * len(ex.variants)
    assert list(rows[0]) == ["approach", "no_finetune"] + ex.eval_tasks
    attacks = read_csv(a / "attacks.csv")
    rebuilt = heatmap_from_attacks(cfg, attacks)
    assert [r["approach"] for r in rows] == [
        "RMU", "RMU+ILU(single)", "RMU+ILU(multi)", "NPO", "NPO+ILU(single)", "NPO+ILU(multi)"]
    for got in rows:
        want = rebuilt[got["approach"]]
        assert {k: float(v) for k, v in got.items() if k != "approach"} == want


def test_attack_rows_cover_seen_and_unseen(tiny_bundles):
    rows = read_csv(tiny_bundles[0] / "attacks.csv")
    assert list(rows[0]) == list(ATTACK_COLUMNS)
    single = [r for r in rows if r["variant"] == "ilu_single" and r["kind"] == "downstream"]
    assert {(r["task"], r["seen"]) for r in single} == {("T1", "yes"), ("T2", "no")}
    for r in rows:
        assert float(r["fq_drop"]) == pytest.approx(float(r["fq_before"]) - float(r["fq_after"]),
                                                    abs=1e-12)


def test_attack_ra_matches_metrics_csv(tiny_bundles):
    a = tiny_bundles[0]
    metrics = read_csv(a / "metrics.csv")
    for r in read_csv(a / "attacks.csv"):
        if r["kind"] == "downstream" and r["approach"] != "Original":
            rid = f"s{r['seed']}/{r['approach']}/attack/{r['task']}"
            assert recompute_ra(metrics, rid) == float(r["ra"])


def test_sweep_rows(tiny_bundles):
    rows = read_csv(tiny_bundles[0] / "lambda_sweep.csv")
    assert [float(r["lam"]) for r in rows] == [0.1, 1.0]
    for r in rows:
        assert r["status"] == "ok"
        assert np.isfinite([float(r["fq_before"]), float(r["fq_after"])]).all()


def test_taskvec_outputs(tiny_bundles):
    a = tiny_bundles[0]
    rows = read_csv(a / "taskvec" / "cosines.csv")
    assert len(rows) == 2 * 6 * 2  # seeds x approaches x eval tasks
    for r in rows:
        assert -1.0 <= float(r["cos_u_ft"]) <= 1.0
    text = (a / "taskvec" / "coords.csv").read_text()
    # one projection block per (seed, method, task), shared by that method's variants
    assert text.count("# seed=") == 2 * 2 * 2


def test_cell_checkpoints_reload(tiny_bundles):
    a = tiny_bundles[0]
    p, cfg = load_checkpoint(a / "seed0" / "RMU" / "unlearned.ckpt")
    o, _ = load_checkpoint(a / "seed0" / "original.ckpt")
    assert cfg.family == "tinylm" and p != o


def test_partial_matrix_is_flagged(tmp_path):
    text = TINY_CONFIG.replace("[unlearn]\n", "[unlearn]\nlr_npo = 1e300\n")
    text = text.replace("seeds = 0, 1", "seeds = 0")
    cfg = ExperimentConfig.from_text(text)
    with np.errstate(all="ignore"):
        status = run_matrix(cfg, tmp_path, sweep=False)
    assert status == "partial"
    doc = json.loads((tmp_path / "manifest.json").read_text())
    assert doc["status"] == "partial"
    assert verify_manifest(tmp_path) == []
    # RMU cells still ran to completion
    approaches = {r["approach"] for r in read_csv(tmp_path / "attacks.csv")}
    assert {"RMU", "RMU+ILU(single)", "RMU+ILU(multi)"} <= approaches


# -- report --------------------------------------------------------------------

def test_report_on_empty_bundle_writes_nothing(tmp_path):
    with pytest.raises(ReportError, match="metrics.csv"):
        render_report(tmp_path)
    assert os.listdir(tmp_path) == []


def test_report_names_missing_file(tiny_bundles, tmp_path):
    copy = tmp_path / "b"
    shutil.copytree(tiny_bundles[0], copy)
    os.remove(copy / "lambda_sweep.csv")
    with pytest.raises(ReportError, match="lambda_sweep.csv"):
        render_report(copy)
    assert not (copy / "report").exists()


def test_report_is_idempotent(tiny_bundles, tmp_path):
    copy = tmp_path / "b"
    shutil.copytree(tiny_bundles[0], copy)
    first = {p: open(p, "rb").read() for p in render_report(copy)}
    names = {os.path.basename(p) for p in first}
    assert {"summary.txt", "heatmap.svg", "taskvec.svg", "lambda_sweep.svg",
            "attack_T1.svg", "attack_T2.svg"} <= names
    second = {p: open(p, "rb").read() for p in render_report(copy)}
    assert first == second
    for p, data in first.items():
        if p.endswith(".svg"):
            assert data.startswith(b"<svg") or data.startswith(b"<?xml")


def test_report_depends_only_on_csvs(tiny_bundles, tmp_path):
    copy = tmp_path / "b"
    shutil.copytree(tiny_bundles[0], copy)
    for d in ("seed0", "seed1", "data"):
        shutil.rmtree(copy / d)
    assert build_report(copy) == build_report(tiny_bundles[0])


def test_summary_ra_matches_independent_recomputation(tiny_bundles):
    a = tiny_bundles[0]
    table = summary_table(load_bundle(a)["metrics.csv"])
    by_approach = {}
    for r in read_csv(a / "attacks.csv"):
        if r["kind"] == "downstream" and r["approach"] != "Original":
            by_approach.setdefault(r["approach"], []).append(float(r["ra"]))
    # recompute from raw per-epoch rows without the report module
    metrics = read_csv(a / "metrics.csv")
    for approach, ras in by_approach.items():
        assert table[approach]["ra"] == pytest.approx(float(np.mean(ras)), abs=1e-12)
        raw = []
        for seed in (0, 1):
            for task in ("T1", "T2"):
                rid = f"s{seed}/{approach}/attack/{task}"
                fq = {int(m["step_or_epoch"]): float(m["fq"]) for m in metrics
                      if m["run_id"] == rid and m["phase"] == "attack"}
                raw.append(robust_accuracy([fq[e] for e in sorted(fq) if e >= 1]))
        assert table[approach]["ra"] == pytest.approx(float(np.mean(raw)), abs=1e-12)
    text = build_report(a)["report/summary.txt"]
    assert text.startswith("# utility = held-out retain-domain accuracy")
    for approach in by_approach:
        assert f"{table[approach]['ra']:.4f}" in text
