"""Command-line entry point: ``structslam {gen-scene,run,eval,jacobian-check}``.

Exit codes: 0 success, 1 failed check, 2 solver failure, 3 configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

EXIT_OK, EXIT_CHECK, EXIT_SOLVER, EXIT_CONFIG = 0, 1, 2, 3
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment/scene JSON file")
    common.add_argument("--seed", type=int, help="single seed (overrides the config)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, default=1, help="worker processes for independent runs")
    common.add_argument("--deterministic", action="store_true", help="single-threaded, bitwise-reproducible runs")

    p = argparse.ArgumentParser(prog="structslam", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen-scene", parents=[common], help="write a synthetic scene JSON")
    g.add_argument("--preset", default=None, help="scene preset (default, low-texture, corridor-loop)")
    sub.add_parser("run", parents=[common], help="run an experiment config")
    e = sub.add_parser("eval", parents=[common], help="ATE between two trajectory files")
    e.add_argument("est")
    e.add_argument("gt")
    e.add_argument("--mode", choices=("sim3", "se3"), default="sim3")
    j = sub.add_parser("jacobian-check", parents=[common], help="finite-difference Jacobian suite")
    j.add_argument("--trials", type=int, default=1000)
    j.add_argument("--tol", type=float, default=1e-5)
    return p


def _setup_env(args) -> None:
    # must run before numpy is imported
    if args.threads < 1:
        raise ValueError("--threads must be >= 1")
    if args.deterministic or args.threads > 1:
        # one BLAS thread per worker: fixed reduction order, no oversubscription
        for v in _THREAD_VARS:
            os.environ[v] = "1"
    level = os.environ.get("PLP_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _load_json(path):
    with open(path) as fh:
        return json.load(fh)


def _gen_scene(args) -> int:
    from .sim import SceneConfig, generate_scene, preset_config, scene_to_dict

    if args.config:
        doc = _load_json(args.config)
        cfg = SceneConfig.from_dict(doc.get("scene", doc))
    else:
        cfg = preset_config(args.preset or "default")
    if args.preset and args.config:
        raise ValueError("--preset and --config are mutually exclusive")
    seed = 0 if args.seed is None else args.seed
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, f"scene_{cfg.name}_seed{seed}.json")
    with open(path, "w") as fh:
        json.dump(scene_to_dict(generate_scene(cfg, seed)), fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(path)
    return EXIT_OK


def _run(args) -> int:
    from dataclasses import replace

    from .pipeline import ExperimentConfig, run_experiment
    from .report import write_report

    if not args.config:
        raise ValueError("run requires --config")
    cfg = ExperimentConfig.from_dict(_load_json(args.config))
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    if args.out:
        cfg = replace(cfg, out=args.out)
    results = run_experiment(cfg, workers=args.threads)
    paths = write_report(results, cfg, cfg.out)
    for r in results:
        row = r.row
        print(f"{row['run_id']}  ate={row['ate_rmse_m']:.6g} m  rejected={row['rejected_outliers']}")
    print(paths["csv"])
    return EXIT_OK


def _eval(args) -> int:
    from .metrics import compute_ate
    from .sim import trajectory_from_dict

    _, est = trajectory_from_dict(_load_json(args.est))
    _, gt = trajectory_from_dict(_load_json(args.gt))
    m = compute_ate(est, gt, args.mode)
    # sub-picometre differences are round-off
    print(round(m.ate_rmse, 12))
    if args.out:
        from .report import write_json

        os.makedirs(args.out, exist_ok=True)
        write_json(m.to_dict(), os.path.join(args.out, "ate.json"))
    return EXIT_OK


def _jacobian_check(args) -> int:
    from .jaccheck import jacobian_check

    if args.trials < 1:
        raise ValueError("--trials must be positive")
    res = jacobian_check(args.trials, 0 if args.seed is None else args.seed)
    for k in ("point_pose", "point_X", "line_pose", "line_theta"):
        print(f"{k:12s} {res[k]:.3e}")
    print(f"max relative error {res['max']:.3e}")
    return EXIT_OK if res["max"] < args.tol else EXIT_CHECK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        _setup_env(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    from .errors import SolverError

    handler = {"gen-scene": _gen_scene, "run": _run, "eval": _eval, "jacobian-check": _jacobian_check}[args.command]
    try:
        return handler(args)
    except SolverError as exc:
        print(f"solver failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (OSError, json.JSONDecodeError, ValueError, KeyError) as exc:
        print(f"configuration error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
