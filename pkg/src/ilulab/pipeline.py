"""End-to-end experiment stages shared by the command line and the acceptance suite.

Layout of a bundle directory::

    data/                     generated suite (JSONL + suite.json)
    seed<S>/original.ckpt     pretrained model for seed S
    seed<S>/<approach>/       unlearned checkpoint and attack reports of one cell
    metrics.csv               every logged row of every run
    attacks.csv               one summary row per attack
    heatmap.csv               final-epoch FQ, approaches x evaluation settings
    taskvec/cosines.csv       task-vector cosines per seed, approach and task
    taskvec/coords.csv        2D Gram-Schmidt coordinates per seed, method and task
    lambda_sweep.csv          one row per lambda of the sweep
    run_manifest.txt          configuration, dataset hashes, code version, timestamps
    manifest.json             sha256 of every artifact above (written last)

Every number written is a pure function of the configuration, so two runs
with the same configuration produce byte-identical checkpoints and CSVs.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .attacks import AttackReport, downstream_attack, relearning_attack
from .config import ExperimentConfig
from .datasets import Suite, SyntheticSuiteConfig, file_digest, generate_suite
from .errors import ArgumentError, IluError
from .invariance import Environment
from .metrics import accuracy, forget_quality, robust_accuracy
from .models import ModelConfig, ParameterVector, init_model, load_checkpoint, save_checkpoint
from .numcore import RngStream
from .objectives import RandomDirection, UnlearnSpec
from .taskvec import coords_csv, cosine, task_vector
from .trainer import METRIC_COLUMNS, TrainConfig, run_pretrain, run_unlearning

log = logging.getLogger(__name__)

UTILITY_NOTE = ("utility = held-out retain-domain accuracy (stand-in for a general "
                "knowledge benchmark at toy scale)")
ATTACK_COLUMNS = ("seed", "approach", "method", "variant", "kind", "task", "seen", "epochs",
                  "fq_before", "fq_after", "fq_drop", "ra", "fa_final", "status")


# --- configuration helpers -------------------------------------------------

def suite_config(cfg: ExperimentConfig) -> SyntheticSuiteConfig:
    s = cfg.suite
    return SyntheticSuiteConfig(vocab=s.vocab, seq_len=s.seq_len, domains=s.domains,
                                examples={"train": s.train, "val": s.val, "eval": s.eval},
                                seed=s.seed)


def model_config(cfg: ExperimentConfig) -> ModelConfig:
    m = cfg.model
    return ModelConfig("tinylm", cfg.suite.vocab, m.hidden, m.layers, heads=m.heads,
                       context=cfg.suite.seq_len, mlp_ratio=m.mlp_ratio)


def pretrain_config(cfg, seed) -> TrainConfig:
    p = cfg.pretrain
    return TrainConfig(lr=p.lr, max_steps=p.steps, batch_size=p.batch_size, seed=seed,
                       eval_every=max(p.steps, 1))


def unlearn_config(cfg, method, seed) -> TrainConfig:
    u = cfg.unlearn
    lr = {"GA": u.lr_ga, "NPO": u.lr_npo, "RMU": u.lr_rmu}[method]
    return TrainConfig(lr=lr, max_steps=u.steps, batch_size=u.batch_size, accum=u.accum,
                       seed=seed, eval_every=max(u.steps // 3, 1))


def finetune_config(cfg, seed) -> TrainConfig:
    f = cfg.finetune
    return TrainConfig(lr=f.lr, optimizer=f.optimizer, max_epochs=f.max_epochs,
                       batch_size=f.batch_size, conv_threshold=f.conv_threshold,
                       conv_window=f.conv_window, seed=seed)


def relearn_config(cfg, seed) -> TrainConfig:
    r = cfg.relearn
    return TrainConfig(lr=r.lr, optimizer=r.optimizer, batch_size=r.batch_size, seed=seed)


def unlearn_spec(cfg, method, original: ParameterVector, seed) -> UnlearnSpec:
    u = cfg.unlearn
    direction = RandomDirection.draw(original.config.hidden, RngStream(seed, "rmu/direction"))
    return UnlearnSpec(method=method, gamma=u.gamma, beta=u.beta, c=u.c, alpha=u.alpha,
                       rmu_layer=u.rmu_layer, reference=original, direction=direction)


def variant_envs(cfg, suite: Suite, variant, lam=None):
    """``(lam, environments)`` for a matrix variant."""
    ex, u = cfg.experiment, cfg.unlearn
    if variant == "base":
        return 0.0, []
    if variant == "ilu_single":
        names, bs = [ex.single_env], u.env_batch_single
    elif variant == "ilu_multi":
        # the smaller per-environment batch splits the budget; one environment keeps it whole
        names = list(ex.multi_envs)
        bs = u.env_batch_multi if len(names) > 1 else u.env_batch_single
    else:
        raise ArgumentError(f"unknown variant {variant!r}")
    envs = [Environment(n, suite.batch(n, "train"), "invariance", bs) for n in names]
    return (u.lam if lam is None else lam), envs


def seen_tasks(cfg, variant):
    if variant == "ilu_single":
        return {cfg.experiment.single_env}
    if variant == "ilu_multi":
        return set(cfg.experiment.multi_envs)
    return set()


VARIANT_LABELS = {"base": "", "ilu_single": "ILU(single)", "ilu_multi": "ILU(multi)"}


def approach_name(method, variant):
    """Display name of a matrix cell, e.g. ``RMU`` or ``RMU+ILU(multi)``."""
    label = VARIANT_LABELS[variant]
    return f"{method}+{label}" if label else method


def approach_dir(name):
    return name.replace("+", "_").replace("(", "_").replace(")", "")


# --- bundle I/O --------------------------------------------------------------

def _cell(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_csv(path, columns, rows):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in columns])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def read_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        text = fh.read()
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def sha256(path) -> str:
    return file_digest(path)


def write_manifest(root, status="ok", exclude=("manifest.json",)):
    """List every file under ``root`` with its sha256; returns the manifest dict."""
    files = {}
    for dirpath, _dirs, names in os.walk(root):
        for n in names:
            full = os.path.join(dirpath, n)
            rel = os.path.relpath(full, root).replace(os.sep, "/")
            if rel in exclude or n.endswith(".tmp"):
                continue
            files[rel] = {"sha256": sha256(full), "bytes": os.path.getsize(full)}
    doc = {"status": status, "code_version": __version__,
           "files": dict(sorted(files.items()))}
    with open(os.path.join(root, "manifest.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return doc


def verify_manifest(root):
    """Names of files whose hash no longer matches ``manifest.json`` (empty = intact)."""
    with open(os.path.join(root, "manifest.json"), encoding="utf-8") as fh:
        doc = json.load(fh)
    bad = []
    for rel, meta in doc["files"].items():
        p = os.path.join(root, rel)
        if not os.path.exists(p) or sha256(p) != meta["sha256"]:
            bad.append(rel)
    return bad


def write_run_manifest(path, run_id, config_text, data_dir, started, finished, extra=None):
    """Structured text: one ``key: value`` per line, config and hashes as JSON values."""
    hashes = {}
    if data_dir and os.path.isdir(data_dir):
        for n in sorted(os.listdir(data_dir)):
            hashes[n] = sha256(os.path.join(data_dir, n))
    lines = [f"run_id: {run_id}", f"code_version: {__version__}",
             f"started: {time.strftime('%Y-%m-%dT%H:%M:%SZ', time.gmtime(started))}",
             f"finished: {time.strftime('%Y-%m-%dT%H:%M:%SZ', time.gmtime(finished))}",
             f"dataset_hashes: {json.dumps(hashes, sort_keys=True)}"]
    for k, v in sorted((extra or {}).items()):
        lines.append(f"{k}: {json.dumps(v, sort_keys=True)}")
    lines.append("config:")
    lines += ["  " + ln for ln in config_text.splitlines()]
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


# --- stages ----------------------------------------------------------------

def ensure_data(cfg, out) -> Suite:
    """Generate the suite into ``out/data`` unless an identical one is already there."""
    data = os.path.join(out, "data")
    scfg = suite_config(cfg)
    if os.path.exists(os.path.join(data, "suite.json")):
        with open(os.path.join(data, "suite.json"), encoding="utf-8") as fh:
            if json.load(fh) == json.loads(json.dumps(scfg.to_dict())):
                return Suite.load(data)
    generate_suite(scfg, data)
    return Suite.load(data)


def pretrain_original(cfg, suite: Suite, seed, path=None):
    """Train the "original" model on the union of all domains' training splits."""
    from .batches import Batch

    mcfg = model_config(cfg)
    init = init_model(mcfg, RngStream(seed, "init"))
    mixture = Batch.concat([suite.batch(d, "train") for d in suite.config.domain_names])
    evals = {d: suite.batch(d, "eval") for d in suite.config.domain_names}
    rec = run_pretrain(init, mixture, pretrain_config(cfg, seed), evals,
                       run_id=f"s{seed}/original/pretrain")
    if path is not None:
        save_checkpoint(rec.params, path)
    return rec


def load_or_pretrain(cfg, suite, seed, out):
    path = os.path.join(out, f"seed{seed}", "original.ckpt")
    rows_path = os.path.join(out, f"seed{seed}", "pretrain_rows.json")
    if os.path.exists(path) and os.path.exists(rows_path):
        with open(rows_path, encoding="utf-8") as fh:
            return load_checkpoint(path)[0], json.load(fh)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    rec = pretrain_original(cfg, suite, seed, path)
    with open(rows_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(rec.rows, fh, sort_keys=True)
    return load_checkpoint(path)[0], rec.rows


def unlearn(cfg, suite, original, method, variant, seed, lam=None, run_id=None, out_dir=None):
    lam, envs = variant_envs(cfg, suite, variant, lam)
    ex = cfg.experiment
    spec = unlearn_spec(cfg, method, original, seed)
    return run_unlearning(original, spec, lam, envs, suite.batch(ex.forget, "train"),
                          suite.batch(ex.retain, "train"), unlearn_config(cfg, method, seed),
                          suite.batch(ex.forget, "eval"), suite.batch(ex.retain, "eval"),
                          run_id=run_id or f"s{seed}/{approach_name(method, variant)}/unlearn",
                          out_dir=out_dir, scope=cfg.unlearn.scope,
                          estimator=cfg.unlearn.estimator)


def attack(cfg, suite, start, task, seed, run_id, original=None, start_id="unlearned"):
    ex = cfg.experiment
    data = suite.batch(task, "train").take(slice(0, cfg.finetune.train_examples))
    env = Environment(task, data, "attack", cfg.finetune.batch_size)
    return downstream_attack(start, env, finetune_config(cfg, seed), suite.batch(task, "eval"),
                             suite.batch(ex.forget, "eval"), original=original,
                             forget_domain=ex.forget, start_id=start_id, run_id=run_id)


def relearn(cfg, suite, start, seed, run_id, start_id="unlearned"):
    ex = cfg.experiment
    return relearning_attack(start, suite.batch(ex.forget, "train"), cfg.relearn.k,
                             cfg.relearn.epochs, relearn_config(cfg, seed),
                             suite.batch(ex.forget, "eval"), start_id=start_id, run_id=run_id)


@dataclass
class CellResult:
    key: tuple
    rows: list = field(default_factory=list)
    attacks: list = field(default_factory=list)
    taskvec: list = field(default_factory=list)
    coords: dict = field(default_factory=dict)
    status: str = "ok"
    message: str = ""
    duration: float = 0.0


def _attack_row(seed, approach, method, variant, rep: AttackReport, seen):
    return {"seed": seed, "approach": approach, "method": method, "variant": variant,
            "kind": rep.kind, "task": rep.dataset, "seen": "yes" if seen else "no",
            "epochs": rep.trajectory.epochs, "fq_before": rep.fq_before,
            "fq_after": rep.fq_after, "fq_drop": rep.drop, "ra": rep.ra,
            "fa_final": rep.fa_final, "status": rep.status}


def run_original_cell(cfg, out, seed) -> CellResult:
    """Fine-tune the original model on every evaluation task (the reference curves)."""
    t0 = time.perf_counter()
    suite = Suite.load(os.path.join(out, "data"))
    original, pre_rows = load_or_pretrain(cfg, suite, seed, out)
    res = CellResult((seed, "Original", "original"))
    res.rows += pre_rows
    cell_dir = os.path.join(out, f"seed{seed}", "Original")
    os.makedirs(cell_dir, exist_ok=True)
    fe, re_ = suite.batch(cfg.experiment.forget, "eval"), suite.batch(cfg.experiment.retain, "eval")
    res.rows.append({"run_id": f"s{seed}/Original/eval", "phase": "eval", "step_or_epoch": 0,
                     "fq": forget_quality(original, fe), "utility": accuracy(original, re_)})
    for task in cfg.experiment.eval_tasks:
        rep = attack(cfg, suite, original, task, seed, f"s{seed}/Original/attack/{task}",
                     start_id="original")
        res.rows += rep.rows
        res.attacks.append(_attack_row(seed, "Original", "-", "original", rep, False))
        save_checkpoint(rep.params, os.path.join(cell_dir, f"ft_{task}.ckpt"))
        _write_text(os.path.join(cell_dir, f"attack_{task}.json"), rep.to_text())
    rep = relearn(cfg, suite, original, seed, f"s{seed}/Original/relearn", start_id="original")
    res.rows += rep.rows
    res.attacks.append(_attack_row(seed, "Original", "-", "original", rep, False))
    res.duration = time.perf_counter() - t0
    return res


def run_cell(cfg, out, seed, method, variant) -> CellResult:
    """Unlearn, attack on every evaluation task, relearn, and collect task vectors."""
    t0 = time.perf_counter()
    suite = Suite.load(os.path.join(out, "data"))
    original = load_checkpoint(os.path.join(out, f"seed{seed}", "original.ckpt"))[0]
    name = approach_name(method, variant)
    res = CellResult((seed, name, variant))
    cell_dir = os.path.join(out, f"seed{seed}", approach_dir(name))
    os.makedirs(cell_dir, exist_ok=True)
    rec = unlearn(cfg, suite, original, method, variant, seed, out_dir=cell_dir)
    res.rows += rec.rows
    if rec.status != "ok":
        res.status, res.message = rec.status, rec.message
        res.duration = time.perf_counter() - t0
        return res
    unlearned = load_checkpoint(rec.checkpoints["final"])[0]
    tau_u = task_vector(unlearned, original, "unlearned", "original")
    seen = seen_tasks(cfg, variant)
    for task in cfg.experiment.eval_tasks:
        rep = attack(cfg, suite, unlearned, task, seed, f"s{seed}/{name}/attack/{task}")
        res.rows += rep.rows
        res.attacks.append(_attack_row(seed, name, method, variant, rep, task in seen))
        _write_text(os.path.join(cell_dir, f"attack_{task}.json"), rep.to_text())
        if rep.status != "ok":
            res.status, res.message = "partial", rep.status
            continue
        ft_path = os.path.join(cell_dir, f"ft_{task}.ckpt")
        save_checkpoint(rep.params, ft_path)
        theta_u_ft = load_checkpoint(ft_path)[0]
        theta_ft = load_checkpoint(os.path.join(out, f"seed{seed}", "Original", f"ft_{task}.ckpt"))[0]
        tau_ft = task_vector(theta_ft, original, "original_ft", "original")
        tau_u_ft = task_vector(theta_u_ft, unlearned, "unlearned_ft", "unlearned")
        row = {"seed": seed, "approach": name, "method": method, "variant": variant, "task": task,
               "norm_u": tau_u.norm, "norm_ft": tau_ft.norm, "norm_u_ft": tau_u_ft.norm,
               "cos_u_ft": _safe_cos(tau_u, tau_ft), "cos_uft_u": _safe_cos(tau_u_ft, tau_u)}
        res.taskvec.append(row)
        res.coords[task] = (tau_u, tau_ft, tau_u_ft)
    rep = relearn(cfg, suite, unlearned, seed, f"s{seed}/{name}/relearn")
    res.rows += rep.rows
    res.attacks.append(_attack_row(seed, name, method, variant, rep, False))
    _write_text(os.path.join(cell_dir, "relearn.json"), rep.to_text())
    res.duration = time.perf_counter() - t0
    return res


def run_sweep_cell(cfg, out, seed, lam) -> CellResult:
    """One point of the lambda sweep: single-environment ILU, then one attack."""
    t0 = time.perf_counter()
    suite = Suite.load(os.path.join(out, "data"))
    original = load_checkpoint(os.path.join(out, f"seed{seed}", "original.ckpt"))[0]
    method, task = cfg.sweep.method, cfg.sweep.task
    res = CellResult((seed, "sweep", lam))
    rid = f"s{seed}/sweep/lam{lam!r}"
    rec = unlearn(cfg, suite, original, method, "ilu_single", seed, lam=lam, run_id=rid + "/unlearn")
    res.rows += rec.rows
    row = {"lam": lam, "seed": seed, "method": method, "task": task, "status": rec.status}
    if rec.status == "ok":
        unl = rec.params
        row["utility"] = accuracy(unl, suite.batch(cfg.experiment.retain, "eval"))
        rep = attack(cfg, suite, unl, task, seed, rid + "/attack/" + task)
        res.rows += rep.rows
        row.update(fq_before=rep.fq_before, fq_after=rep.fq_after, fq_drop=rep.drop,
                   ra=rep.ra, fa_final=rep.fa_final, status=rep.status)
    else:
        res.status, res.message = rec.status, rec.message
    res.attacks.append(row)
    res.duration = time.perf_counter() - t0
    return res


def _safe_cos(a, b):
    try:
        return cosine(a, b)
    except ArgumentError:
        return float("nan")


def _write_text(path, text):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _call(job):
    fn, args = job
    try:
        return fn(*args)
    except IluError as exc:
        res = CellResult(tuple(args[2:]), status="error", message=f"{type(exc).__name__}: {exc}")
        return res


def _map(jobs, parallel):
    if parallel <= 1 or len(jobs) <= 1:
        return [_call(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=parallel) as pool:
        return list(pool.map(_call, jobs))


SWEEP_COLUMNS = ("lam", "seed", "method", "task", "fq_before", "fq_after", "fq_drop", "ra",
                 "fa_final", "utility", "status")
TASKVEC_COLUMNS = ("seed", "approach", "method", "variant", "task", "norm_u", "norm_ft",
                   "norm_u_ft", "cos_u_ft", "cos_uft_u")


def run_matrix(cfg: ExperimentConfig, out, parallel=None, sweep=True) -> str:
    """Run the full method x variant x seed matrix; returns ``"ok"`` or ``"partial"``."""
    started = time.time()
    parallel = parallel or cfg.experiment.parallel
    os.makedirs(out, exist_ok=True)
    ensure_data(cfg, out)
    ex = cfg.experiment
    seeds = list(ex.seeds)
    originals = _map([(run_original_cell, (cfg, out, s)) for s in seeds], parallel)
    jobs = [(run_cell, (cfg, out, s, m, v)) for s in seeds for m in ex.methods for v in ex.variants]
    cells = _map(jobs, parallel)
    sweeps = []
    if sweep:
        sweeps = _map([(run_sweep_cell, (cfg, out, seeds[0], lam)) for lam in cfg.sweep.lambdas],
                      parallel)
    results = originals + cells + sweeps
    status = "ok" if all(r.status == "ok" for r in results) else "partial"
    for r in results:
        if r.status != "ok":
            log.error("cell %s: %s %s", r.key, r.status, r.message)
    write_bundle(cfg, out, originals, cells, sweeps)
    write_run_manifest(os.path.join(out, "run_manifest.txt"), "run-matrix", cfg.to_text(),
                       os.path.join(out, "data"), started, time.time(),
                       {"status": status, "cells": len(results),
                        "cell_seconds": {"/".join(map(str, r.key)): round(r.duration, 1)
                                         for r in results}})
    write_manifest(out, status)
    return status


def write_bundle(cfg, out, originals, cells, sweeps):
    rows = [r for res in originals + cells + sweeps for r in res.rows]
    write_csv(os.path.join(out, "metrics.csv"), METRIC_COLUMNS, rows)
    attacks = [a for res in originals + cells for a in res.attacks]
    write_csv(os.path.join(out, "attacks.csv"), ATTACK_COLUMNS, attacks)
    write_csv(os.path.join(out, "lambda_sweep.csv"), SWEEP_COLUMNS,
              [a for res in sweeps for a in res.attacks])
    write_csv(os.path.join(out, "taskvec", "cosines.csv"), TASKVEC_COLUMNS,
              [t for res in cells for t in res.taskvec])
    write_coords(cfg, out, cells)
    write_heatmap(cfg, out, attacks)


def write_coords(cfg, out, cells):
    """Plane of (tau_base, tau_ft) per seed/method/task; ILU vectors projected into it."""
    by = {}
    for res in cells:
        seed, name, variant = res.key
        for task, vecs in res.coords.items():
            method = name.split("+")[0]
            by.setdefault((seed, method, task), {})[variant] = vecs
    parts = []
    for (seed, method, task) in sorted(by):
        d = by[(seed, method, task)]
        if "base" not in d:
            continue
        tau_b, tau_ft, tau_b_ft = d["base"]
        others = {f"{method}->ft": tau_b_ft}
        for v in ("ilu_single", "ilu_multi"):
            if v in d:
                others[approach_name(method, v)] = d[v][0]
                others[approach_name(method, v) + "->ft"] = d[v][2]
        try:
            text = coords_csv(method, tau_b, "ft", tau_ft, others)
        except ArgumentError as exc:
            text = f"# degenerate basis: {exc}\n"
        parts.append(f"# seed={seed} method={method} task={task}\n" + text)
    _write_text(os.path.join(out, "taskvec", "coords.csv"), "".join(parts))


def heatmap_from_attacks(cfg, attacks):
    """Mean over seeds of final-epoch FQ: ``{approach: {setting: fq}}``.

    Settings are ``no_finetune`` (FQ of the unlearned model itself) followed
    by the evaluation tasks.
    """
    before, after = {}, {}
    for a in attacks:
        if a["kind"] != "downstream" or a["approach"] == "Original":
            continue
        before.setdefault(a["approach"], {})[str(a["seed"])] = float(a["fq_before"])
        after.setdefault(a["approach"], {}).setdefault(a["task"], []).append(float(a["fq_after"]))
    out = {}
    for approach in before:
        row = {"no_finetune": float(np.mean(list(before[approach].values())))}
        for task in cfg.experiment.eval_tasks:
            if task in after[approach]:
                row[task] = float(np.mean(after[approach][task]))
        out[approach] = row
    return out


def write_heatmap(cfg, out, attacks):
    hm = heatmap_from_attacks(cfg, attacks)
    cols = ["approach", "no_finetune"] + list(cfg.experiment.eval_tasks)
    order = [approach_name(m, v) for m in cfg.experiment.methods for v in cfg.experiment.variants]
    write_csv(os.path.join(out, "heatmap.csv"), cols,
              [dict(approach=a, **hm[a]) for a in order if a in hm])


def recompute_ra(metrics_rows, run_id) -> float:
    """RA of one attack run straight from its per-epoch metrics rows."""
    traj = sorted((int(r["step_or_epoch"]), float(r["fq"])) for r in metrics_rows
                  if r["run_id"] == run_id and r["fq"] != "")
    return robust_accuracy([fq for epoch, fq in traj if epoch >= 1])
