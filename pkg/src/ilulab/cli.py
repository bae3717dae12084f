"""Command-line entry point: ``ilulab <command> [options]``.

Exit codes are stable: 0 success, 1 partial matrix (some cell aborted),
2 configuration or input error, 3 numeric abort. ``ILU_LOG`` selects the
log level (``error``, ``info`` or ``debug``; default ``info``).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time

from . import pipeline
from .config import ExperimentConfig
from .errors import ConfigError, IluError, NumericError
from .metrics import accuracy
from .models import load_checkpoint, save_checkpoint

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
log = logging.getLogger("ilulab")


def _setup_logging():
    level = os.environ.get("ILU_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigError(f"ILU_LOG must be one of error, info, debug (got {level!r})")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig().validate()
    if args.parallel is not None:
        cfg.experiment.parallel = args.parallel
    if args.seed is not None:
        cfg.experiment.seeds = [args.seed]
    return cfg.validate()


def _seed(args, cfg):
    return args.seed if args.seed is not None else cfg.experiment.seeds[0]


def _status_code(status):
    if status == "ok":
        return EXIT_OK
    if status == "numeric_abort":
        return EXIT_NUMERIC
    return EXIT_PARTIAL


def _start(args, cfg, suite, seed):
    """The checkpoint an attack starts from: ``--from`` or the seed's original model."""
    if args.start:
        return load_checkpoint(args.start)[0], os.path.basename(args.start)
    return pipeline.load_or_pretrain(cfg, suite, seed, args.out)[0], "original"


# --- commands ----------------------------------------------------------------

def cmd_gen_data(args, cfg):
    pipeline.ensure_data(cfg, args.out)
    print(os.path.join(args.out, "data"))
    return EXIT_OK


def cmd_pretrain(args, cfg):
    suite = pipeline.ensure_data(cfg, args.out)
    seed = _seed(args, cfg)
    params, _ = pipeline.load_or_pretrain(cfg, suite, seed, args.out)
    for d in suite.config.domain_names:
        print(f"{d}: eval accuracy {accuracy(params, suite.batch(d, 'eval')):.4f}")
    return EXIT_OK


def _variant(args, cfg):
    lam = cfg.unlearn.lam if args.lam is None else args.lam
    if lam == 0:
        return "base", 0.0
    if args.envs:
        envs = [e.strip() for e in args.envs.split(",") if e.strip()]
        cfg.experiment.multi_envs = envs
        if len(envs) == 1:
            cfg.experiment.single_env = envs[0]
        cfg.validate()
        return ("ilu_single" if len(envs) == 1 else "ilu_multi"), lam
    return "ilu_single", lam


def cmd_unlearn(args, cfg):
    suite = pipeline.ensure_data(cfg, args.out)
    seed = _seed(args, cfg)
    original, _ = pipeline.load_or_pretrain(cfg, suite, seed, args.out)
    method = args.method or cfg.experiment.methods[0]
    variant, lam = _variant(args, cfg)
    run_dir = os.path.join(args.out, f"seed{seed}", f"unlearn_{method}_lam{lam!r}")
    rec = pipeline.unlearn(cfg, suite, original, method, variant, seed, lam=lam,
                           run_id=f"s{seed}/{method}/lam{lam!r}/unlearn", out_dir=run_dir)
    pipeline.write_csv(os.path.join(run_dir, "metrics.csv"), pipeline.METRIC_COLUMNS, rec.rows)
    last = [r for r in rec.rows if r.get("fq", "") != ""][-1]
    print(f"{rec.checkpoints.get('final', '-')}: FQ {last['fq']:.4f} utility "
          f"{last['utility']:.4f} status {rec.status}")
    return _status_code(rec.status)


def cmd_attack(args, cfg):
    suite = pipeline.ensure_data(cfg, args.out)
    seed = _seed(args, cfg)
    start, start_id = _start(args, cfg, suite, seed)
    task = args.task or cfg.experiment.eval_tasks[0]
    if args.epochs is not None:
        cfg.finetune.max_epochs = args.epochs
    rep = pipeline.attack(cfg, suite, start, task, seed, f"s{seed}/{start_id}/attack/{task}",
                          start_id=start_id)
    out = os.path.join(args.out, f"seed{seed}", f"attack_{start_id}_{task}")
    pipeline.write_csv(os.path.join(out, "metrics.csv"), pipeline.METRIC_COLUMNS, rep.rows)
    pipeline._write_text(os.path.join(out, "report.json"), rep.to_text())
    print(_attack_line(rep))
    return _status_code(rep.status)


def _attack_line(rep):
    ra = "n/a" if rep.ra is None else f"{rep.ra:.4f}"
    return (f"{rep.kind} {rep.dataset}: FQ {rep.fq_before:.4f} -> {rep.fq_after:.4f} "
            f"(drop {rep.drop:+.4f}) RA {ra} FA {rep.fa_final:.4f} epochs "
            f"{rep.trajectory.epochs} status {rep.status}")


def cmd_relearn(args, cfg):
    suite = pipeline.ensure_data(cfg, args.out)
    seed = _seed(args, cfg)
    if args.k is not None:
        cfg.relearn.k = args.k
    if args.epochs is not None:
        cfg.relearn.epochs = args.epochs
    start, start_id = _start(args, cfg, suite, seed)
    rep = pipeline.relearn(cfg, suite, start, seed, f"s{seed}/{start_id}/relearn",
                           start_id=start_id)
    out = os.path.join(args.out, f"seed{seed}", f"relearn_{start_id}")
    pipeline.write_csv(os.path.join(out, "metrics.csv"), pipeline.METRIC_COLUMNS, rep.rows)
    pipeline._write_text(os.path.join(out, "report.json"), rep.to_text())
    print(_attack_line(rep))
    return _status_code(rep.status)


def cmd_taskvec(args, cfg):
    """Task vectors of one unlearned checkpoint against a downstream fine-tune."""
    from .taskvec import coords_csv, cosine_csv, task_vector

    if not args.start:
        raise ConfigError("taskvec needs --from <unlearned checkpoint>")
    suite = pipeline.ensure_data(cfg, args.out)
    seed = _seed(args, cfg)
    original, _ = pipeline.load_or_pretrain(cfg, suite, seed, args.out)
    unlearned = load_checkpoint(args.start)[0]
    task = args.task or cfg.experiment.eval_tasks[0]
    ft_o = pipeline.attack(cfg, suite, original, task, seed, f"s{seed}/original/ft/{task}")
    ft_u = pipeline.attack(cfg, suite, unlearned, task, seed, f"s{seed}/unlearned/ft/{task}")
    out = os.path.join(args.out, f"seed{seed}", f"taskvec_{task}")
    os.makedirs(out, exist_ok=True)
    # reload the stored float32 values so the vectors match what a reader of the files sees
    paths = {}
    for name, rep in (("original_ft", ft_o), ("unlearned_ft", ft_u)):
        paths[name] = os.path.join(out, f"{name}.ckpt")
        save_checkpoint(rep.params, paths[name])
    theta_o_ft = load_checkpoint(paths["original_ft"])[0]
    theta_u_ft = load_checkpoint(paths["unlearned_ft"])[0]
    vecs = {"tau_u": task_vector(unlearned, original, "unlearned", "original"),
            "tau_ft": task_vector(theta_o_ft, original, "original_ft", "original"),
            "tau_u_ft": task_vector(theta_u_ft, unlearned, "unlearned_ft", "unlearned")}
    pipeline._write_text(os.path.join(out, "cosines.csv"), cosine_csv(vecs))
    pipeline._write_text(os.path.join(out, "coords.csv"),
                         coords_csv("tau_u", vecs["tau_u"], "tau_ft", vecs["tau_ft"],
                                    {"tau_u_ft": vecs["tau_u_ft"]}))
    print(open(os.path.join(out, "cosines.csv"), encoding="utf-8").read(), end="")
    return EXIT_OK


def cmd_sweep_lambda(args, cfg):
    if args.lam_list:
        cfg.sweep.lambdas = [float(x) for x in args.lam_list.split(",")]
    if args.method:
        cfg.sweep.method = args.method
    if args.task:
        cfg.sweep.task = args.task
    cfg.validate()
    suite = pipeline.ensure_data(cfg, args.out)
    seed = _seed(args, cfg)
    pipeline.load_or_pretrain(cfg, suite, seed, args.out)
    jobs = [(pipeline.run_sweep_cell, (cfg, args.out, seed, lam)) for lam in cfg.sweep.lambdas]
    results = pipeline._map(jobs, cfg.experiment.parallel)
    rows = [a for r in results for a in r.attacks]
    pipeline.write_csv(os.path.join(args.out, "lambda_sweep.csv"), pipeline.SWEEP_COLUMNS, rows)
    for row in rows:
        print(f"lambda {row['lam']}: FQ {row.get('fq_before', float('nan')):.4f} -> "
              f"{row.get('fq_after', float('nan')):.4f} status {row['status']}")
    return EXIT_OK if all(r.status == "ok" for r in results) else EXIT_PARTIAL


def cmd_run_matrix(args, cfg):
    t0 = time.perf_counter()
    status = pipeline.run_matrix(cfg, args.out, parallel=cfg.experiment.parallel)
    log.info("run-matrix finished in %.0f s with status %s", time.perf_counter() - t0, status)
    print(os.path.join(args.out, "manifest.json"))
    return EXIT_OK if status == "ok" else EXIT_PARTIAL


def cmd_report(args, cfg):
    from .report import render_report

    written = render_report(args.bundle or args.out)
    for path in written:
        print(path)
    return EXIT_OK


def cmd_gradcheck(args, cfg):
    from .gradcheck import format_results, run_gradchecks

    results = run_gradchecks(_seed(args, cfg))
    print(format_results(results))
    return EXIT_OK if all(r.ok for r in results) else EXIT_NUMERIC


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic dataset suite"),
    "pretrain": (cmd_pretrain, "train the original model for one seed"),
    "unlearn": (cmd_unlearn, "run one unlearning job (lambda 0 = baseline)"),
    "attack": (cmd_attack, "downstream fine-tuning attack on one task"),
    "relearn": (cmd_relearn, "relearning attack with k forget examples"),
    "taskvec": (cmd_taskvec, "task-vector cosines and 2D coordinates"),
    "sweep-lambda": (cmd_sweep_lambda, "lambda sweep for single-environment ILU"),
    "run-matrix": (cmd_run_matrix, "full method x variant x seed matrix into a bundle"),
    "report": (cmd_report, "render SVG plots and a summary from a bundle"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of every analytic gradient"),
}


def _global_flags(suppress):
    """Global flags, accepted before or after the command name."""
    p = argparse.ArgumentParser(add_help=False)
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    p.add_argument("--config", help="experiment config file (INI)", **kw)
    p.add_argument("--seed", type=int, help="run a single seed", **kw)
    p.add_argument("--out", help="output directory (default: ilu_out)",
                   **(kw or {"default": "ilu_out"}))
    p.add_argument("--parallel", type=int, help="number of worker processes", **kw)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    parser = argparse.ArgumentParser(prog="ilulab", parents=[_global_flags(suppress=False)],
                                     description="Invariance-regularized unlearning on toy models.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (_fn, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, parents=[common])
        if name in ("unlearn", "sweep-lambda"):
            p.add_argument("--method", choices=("GA", "NPO", "RMU"))
        if name == "unlearn":
            p.add_argument("--lambda", dest="lam", type=float, help="invariance weight")
            p.add_argument("--envs", help="comma-separated invariance environments")
        if name == "sweep-lambda":
            p.add_argument("--lambda", dest="lam_list", help="comma-separated lambda grid")
        if name in ("attack", "taskvec", "sweep-lambda"):
            p.add_argument("--task", help="downstream task name")
        if name in ("attack", "relearn", "taskvec"):
            p.add_argument("--from", dest="start", help="checkpoint to attack (default: original)")
        if name in ("attack", "relearn"):
            p.add_argument("--epochs", type=int, help="fine-tuning epochs")
        if name == "relearn":
            p.add_argument("--k", type=int, help="number of forget examples")
        if name == "report":
            p.add_argument("bundle", nargs="?", help="bundle directory (default: --out)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for attr in ("lam", "lam_list", "envs", "task", "start", "epochs", "k", "method", "bundle"):
        if not hasattr(args, attr):
            setattr(args, attr, None)
    try:
        _setup_logging()
        cfg = _config(args)
        return COMMANDS[args.command][0](args, cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (IluError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
