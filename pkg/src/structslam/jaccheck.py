"""Central finite-difference check of the analytic point and line Jacobians."""
from __future__ import annotations

import numpy as np
from scipy.spatial.transform import Rotation

from .camera import CameraIntrinsics, _left_jacobian
from .jacobians import line_residuals, point_residuals
from .lines import pluecker_from_endpoints, to_orthonormal

DEFAULT_K = CameraIntrinsics(500.0, 480.0, 320.0, 240.0)


def relative_error(J, J_fd, floor=1e-8) -> np.ndarray:
    """Per-configuration ``max|J - J_fd| / max(max|J_fd|, floor)``."""
    num = np.abs(J - J_fd).reshape(len(J), -1).max(axis=1)
    den = np.maximum(np.abs(J_fd).reshape(len(J), -1).max(axis=1), floor)
    return num / den


def random_configurations(n: int, rng, K: CameraIntrinsics = DEFAULT_K):
    """Random poses with a point and a segment in front of each camera.

    Returns a dict of stacked arrays: ``R, t, X, uv, U, W, seg``.
    """
    R = Rotation.random(n, random_state=rng).as_matrix()
    t = rng.normal(scale=1.0, size=(n, 3))
    Rt = np.swapaxes(R, 1, 2)

    def world(Xc):
        return np.einsum("nij,nj->ni", Rt, Xc - t)

    def cam_point():
        uv = rng.uniform([20, 20], [620, 460], size=(n, 2))
        z = rng.uniform(1.0, 5.0, size=n)
        return np.column_stack([(uv[:, 0] - K.cx) / K.fx * z, (uv[:, 1] - K.cy) / K.fy * z, z])

    X = world(cam_point())
    uv = rng.uniform([20, 20], [620, 460], size=(n, 2))
    A, B = world(cam_point()), world(cam_point())
    U = np.empty((n, 3, 3))
    W = np.empty((n, 2, 2))
    for i in range(n):
        O = to_orthonormal(pluecker_from_endpoints(B[i], A[i]))
        U[i], W[i] = O.U, O.W
    seg = rng.uniform([20, 20], [620, 460], size=(n, 2, 2))
    return {"R": R, "t": t, "X": X, "uv": uv, "U": U, "W": W, "seg": seg}


def _retract_pose(R, t, delta):
    dR = Rotation.from_rotvec(delta[:, :3]).as_matrix()
    V = np.array([_left_jacobian(w) for w in delta[:, :3]])
    return dR @ R, np.einsum("nij,nj->ni", dR, t) + np.einsum("nij,nj->ni", V, delta[:, 3:])


def _retract_line(U, W, delta):
    c, s = np.cos(delta[:, 3]), np.sin(delta[:, 3])
    R2 = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
    return U @ Rotation.from_rotvec(delta[:, :3]).as_matrix(), W @ R2


def finite_difference_jacobians(cfg, K: CameraIntrinsics = DEFAULT_K, h: float = 1e-6):
    """Central differences of the point and line residuals (step ``h``)."""
    n = len(cfg["R"])
    R, t = cfg["R"], cfg["t"]
    Jp_pose = np.empty((n, 2, 6))
    Jp_X = np.empty((n, 2, 3))
    Jl_pose = np.empty((n, 2, 6))
    Jl_line = np.empty((n, 2, 4))
    for k in range(6):
        d = np.zeros((n, 6))
        d[:, k] = h
        Rp, tp = _retract_pose(R, t, d)
        Rm, tm = _retract_pose(R, t, -d)
        ep = point_residuals(Rp, tp, cfg["X"], K, cfg["uv"], False)[0]
        em = point_residuals(Rm, tm, cfg["X"], K, cfg["uv"], False)[0]
        Jp_pose[:, :, k] = (ep - em) / (2 * h)
        ep = line_residuals(Rp, tp, cfg["U"], cfg["W"], cfg["seg"], K, False)[0]
        em = line_residuals(Rm, tm, cfg["U"], cfg["W"], cfg["seg"], K, False)[0]
        Jl_pose[:, :, k] = (ep - em) / (2 * h)
    for k in range(3):
        d = np.zeros((n, 3))
        d[:, k] = h
        ep = point_residuals(R, t, cfg["X"] + d, K, cfg["uv"], False)[0]
        em = point_residuals(R, t, cfg["X"] - d, K, cfg["uv"], False)[0]
        Jp_X[:, :, k] = (ep - em) / (2 * h)
    for k in range(4):
        d = np.zeros((n, 4))
        d[:, k] = h
        Up, Wp = _retract_line(cfg["U"], cfg["W"], d)
        Um, Wm = _retract_line(cfg["U"], cfg["W"], -d)
        ep = line_residuals(R, t, Up, Wp, cfg["seg"], K, False)[0]
        em = line_residuals(R, t, Um, Wm, cfg["seg"], K, False)[0]
        Jl_line[:, :, k] = (ep - em) / (2 * h)
    return {"point_pose": Jp_pose, "point_X": Jp_X, "line_pose": Jl_pose, "line_theta": Jl_line}


def analytic_jacobians(cfg, K: CameraIntrinsics = DEFAULT_K):
    _, _, Jpp, JpX = point_residuals(cfg["R"], cfg["t"], cfg["X"], K, cfg["uv"])
    _, _, Jlp, Jll = line_residuals(cfg["R"], cfg["t"], cfg["U"], cfg["W"], cfg["seg"], K)
    return {"point_pose": Jpp, "point_X": JpX, "line_pose": Jlp, "line_theta": Jll}


def jacobian_check(trials: int = 1000, seed: int = 0, K: CameraIntrinsics = DEFAULT_K) -> dict:
    """Maximum relative error of each analytic Jacobian block over ``trials`` random configurations."""
    rng = np.random.default_rng(seed)
    cfg = random_configurations(trials, rng, K)
    A = analytic_jacobians(cfg, K)
    F = finite_difference_jacobians(cfg, K)
    out = {k: float(relative_error(A[k], F[k]).max()) for k in A}
    out["max"] = max(out.values())
    out["trials"] = trials
    return out
