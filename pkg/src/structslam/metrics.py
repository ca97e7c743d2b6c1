"""Trajectory alignment and absolute trajectory error."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import PoseSE3
from .errors import DegenerateTrajectory, LengthMismatch
from .loop import Sim3Transform


def positions(traj) -> np.ndarray:
    """(N,3) camera centres from a list of poses or an array of positions."""
    if len(traj) and isinstance(traj[0], PoseSE3):
        return np.array([p.center for p in traj])
    return np.asarray(traj, dtype=float).reshape(-1, 3)


def umeyama_align(est, gt, with_scale: bool = True) -> Sim3Transform:
    """Similarity (or rigid) transform minimising ``sum ||gt - S est||^2``."""
    E, G = positions(est), positions(gt)
    if len(E) != len(G):
        raise LengthMismatch(f"{len(E)} estimated vs {len(G)} reference positions")
    if len(E) < 3:
        raise DegenerateTrajectory("need at least 3 positions")
    mu_e, mu_g = E.mean(axis=0), G.mean(axis=0)
    Ec, Gc = E - mu_e, G - mu_g
    sv = np.linalg.svd(Ec, compute_uv=False)
    sg = np.linalg.svd(Gc, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-300) or sg[1] <= 1e-9 * max(sg[0], 1e-300):
        raise DegenerateTrajectory("positions are collinear or coincident")
    C = Gc.T @ Ec / len(E)
    U, D, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / np.mean(np.sum(Ec**2, axis=1))) if with_scale else 1.0
    t = mu_g - s * R @ mu_e
    return Sim3Transform(s, R, t)


@dataclass
class TrajectoryMetrics:
    ate_rmse: float
    ape: np.ndarray
    transform: Sim3Transform
    mode: str

    @property
    def mean_ape(self) -> float:
        return float(np.mean(self.ape))

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "ate_rmse_m": self.ate_rmse,
            "mean_ape_m": self.mean_ape,
            "ape_m": self.ape.tolist(),
            "scale": self.transform.s,
            "rotation": self.transform.R.tolist(),
            "translation": self.transform.t.tolist(),
        }


def compute_ate(est, gt, mode: str = "sim3") -> TrajectoryMetrics:
    """ATE RMSE after ``sim3`` or ``se3`` alignment, with per-frame APE."""
    if mode not in ("sim3", "se3"):
        raise ValueError(f"unknown alignment mode {mode!r}")
    E, G = positions(est), positions(gt)
    if len(E) != len(G):
        raise LengthMismatch(f"{len(E)} estimated vs {len(G)} reference positions")
    S = umeyama_align(E, G, with_scale=(mode == "sim3"))
    ape = np.linalg.norm(G - S.apply(E), axis=1)
    return TrajectoryMetrics(float(np.sqrt(np.mean(ape**2))), ape, S, mode)
