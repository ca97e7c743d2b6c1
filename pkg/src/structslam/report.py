"""CSV/JSON writers and matplotlib figures for experiment results."""
from __future__ import annotations

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import umeyama_align  # noqa: E402
from .pipeline import CSV_COLUMNS  # noqa: E402


def write_csv(rows: list[dict], path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(CSV_COLUMNS), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in CSV_COLUMNS})


def write_json(doc: dict, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _centres(poses):
    return np.array([p.center for p in poses])


def plot_trajectories(results, path: str) -> None:
    """Top-down view of ground truth and Sim(3)-aligned estimates, one run per pipeline."""
    fig, ax = plt.subplots(figsize=(5, 5))
    seen = set()
    for res in results:
        p = res.row["pipeline"]
        if p in seen:
            continue
        seen.add(p)
        G = _centres(res.gt_poses)
        if len(seen) == 1:
            ax.plot(G[:, 0], G[:, 1], "k-", lw=2, label="ground truth")
            I = umeyama_align(_centres(res.init_poses), G).apply(_centres(res.init_poses))
            ax.plot(I[:, 0], I[:, 1], ":", color="0.5", label="initial")
        E = umeyama_align(_centres(res.est_poses), G).apply(_centres(res.est_poses))
        ax.plot(E[:, 0], E[:, 1], "o--", ms=3, label=p)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(fontsize=8)
    ax.set_title(f"seed {results[0].row['seed']}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_ape(results, path: str) -> None:
    """Per-frame absolute position error for the first seed of each pipeline."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    seen = set()
    for res in results:
        p = res.row["pipeline"]
        if p in seen:
            continue
        seen.add(p)
        ax.plot(np.arange(len(res.ape)), 100 * res.ape, "o-", ms=3, label=p)
    ax.set_xlabel("keyframe")
    ax.set_ylabel("APE [cm]")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_ate_summary(rows: list[dict], path: str) -> None:
    """Mean ATE RMSE per pipeline with the spread over seeds."""
    pipes = [p for p in ("P", "PL", "PLP") if any(r["pipeline"] == p for r in rows)]
    vals = [np.array([r["ate_rmse_m"] for r in rows if r["pipeline"] == p]) * 100 for p in pipes]
    fig, ax = plt.subplots(figsize=(4, 3.5))
    ax.bar(pipes, [v.mean() for v in vals], yerr=[v.std() for v in vals], capsize=4, color="0.7")
    for i, v in enumerate(vals):
        ax.plot(np.full(len(v), i), v, "k.", ms=3)
    ax.set_ylabel("ATE RMSE [cm]")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_report(results, cfg, out_dir: str) -> dict:
    """Write CSV, JSON and figures into ``out_dir``; returns the artefact paths."""
    os.makedirs(out_dir, exist_ok=True)
    rows = [r.row for r in results]
    paths = {
        "csv": os.path.join(out_dir, "results.csv"),
        "json": os.path.join(out_dir, "results.json"),
        "trajectory": os.path.join(out_dir, "trajectory.png"),
        "ape": os.path.join(out_dir, "ape.png"),
        "ate": os.path.join(out_dir, "ate_summary.png"),
    }
    write_csv(rows, paths["csv"])
    write_json(
        {
            "version": 1,
            "config_hash": cfg.config_hash(),
            "config": cfg.to_dict(),
            "rows": rows,
            "solver_reports": [dict(run_id=r.row["run_id"], **r.report) for r in results],
        },
        paths["json"],
    )
    if results:
        first_seed = results[0].row["seed"]
        plot_trajectories([r for r in results if r.row["seed"] == first_seed], paths["trajectory"])
        plot_ape([r for r in results if r.row["seed"] == first_seed], paths["ape"])
        plot_ate_summary(rows, paths["ate"])
    return paths
