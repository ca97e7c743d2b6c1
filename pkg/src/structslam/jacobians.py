"""Vectorised residuals and analytic Jacobians for point and line observations.

All functions take stacked arrays (leading axis = observation) so the
solver can evaluate a whole window in a handful of numpy calls.  Pose
Jacobians are with respect to a left increment ``(omega, rho)``; line
Jacobians are with respect to the orthonormal increment ``(theta_vec, theta)``
with ``U <- U Exp(theta_vec)`` and ``W <- W R(theta)``.
"""
from __future__ import annotations

import numpy as np

from .camera import CameraIntrinsics, line_intrinsics


def _skew_batch(v: np.ndarray) -> np.ndarray:
    S = np.zeros(v.shape[:-1] + (3, 3))
    S[..., 0, 1] = -v[..., 2]
    S[..., 0, 2] = v[..., 1]
    S[..., 1, 0] = v[..., 2]
    S[..., 1, 2] = -v[..., 0]
    S[..., 2, 0] = -v[..., 1]
    S[..., 2, 1] = v[..., 0]
    return S


def point_residuals(R, t, X, K: CameraIntrinsics, uv, with_jacobians=True):
    """Pixel residual ``project(X) - uv``.

    Returns ``(e, depth, J_pose, J_point)`` with shapes (N,2), (N,), (N,2,6),
    (N,2,3); Jacobians are ``None`` when not requested.
    """
    Xc = np.einsum("nij,nj->ni", R, X) + t
    z = Xc[:, 2]
    iz = 1.0 / z
    u = K.fx * Xc[:, 0] * iz + K.cx
    v = K.fy * Xc[:, 1] * iz + K.cy
    e = np.stack([u, v], axis=1) - uv
    if not with_jacobians:
        return e, z, None, None
    n = len(X)
    Jproj = np.zeros((n, 2, 3))
    Jproj[:, 0, 0] = K.fx * iz
    Jproj[:, 0, 2] = -K.fx * Xc[:, 0] * iz**2
    Jproj[:, 1, 1] = K.fy * iz
    Jproj[:, 1, 2] = -K.fy * Xc[:, 1] * iz**2
    J_pose = np.empty((n, 2, 6))
    J_pose[:, :, :3] = -Jproj @ _skew_batch(Xc)
    J_pose[:, :, 3:] = Jproj
    J_point = Jproj @ R
    return e, z, J_pose, J_point


def line_residuals(R, t, U, W, seg, K: CameraIntrinsics, with_jacobians=True):
    """Line residual: signed distances of the segment endpoints to the reprojected line.

    ``seg`` is (N,2,2) with rows ``x_s`` and ``x_e``.  Returns
    ``(e, mc_norm, J_pose, J_line)`` with shapes (N,2), (N,), (N,2,6), (N,2,4).
    """
    KL = line_intrinsics(K)
    w1, w2 = W[:, 0, 0], W[:, 1, 0]
    u1, u2, u3 = U[:, :, 0], U[:, :, 1], U[:, :, 2]
    m = w1[:, None] * u1
    d = w2[:, None] * u2
    Rm = np.einsum("nij,nj->ni", R, m)
    Rd = np.einsum("nij,nj->ni", R, d)
    tRd = np.cross(t, Rd)
    mc = Rm + tRd
    l = mc @ KL.T
    n2 = l[:, 0] ** 2 + l[:, 1] ** 2
    nrm = np.sqrt(n2)
    xh = np.concatenate([seg, np.ones(seg.shape[:2] + (1,))], axis=2)  # (N,2,3)
    dots = np.einsum("nkj,nj->nk", xh, l)
    e = dots / nrm[:, None]
    if not with_jacobians:
        return e, np.linalg.norm(mc, axis=1), None, None
    # de/dl: (N,2,3)
    lxy = np.zeros_like(l)
    lxy[:, :2] = l[:, :2]
    de_dl = xh / nrm[:, None, None] - dots[:, :, None] * lxy[:, None, :] / (nrm**3)[:, None, None]
    de_dmc = de_dl @ KL  # (N,2,3)
    J_pose = np.empty((len(R), 2, 6))
    J_pose[:, :, :3] = -de_dmc @ _skew_batch(mc)
    J_pose[:, :, 3:] = -de_dmc @ _skew_batch(Rd)
    # dL_c/dL_w restricted to the moment rows: [R, [t]x R]
    A_m = de_dmc @ R
    A_d = de_dmc @ (_skew_batch(t) @ R)
    z = np.zeros_like(u1)
    dm = np.stack([z, -w1[:, None] * u3, w1[:, None] * u2, -w2[:, None] * u1], axis=2)  # (N,3,4)
    dd = np.stack([w2[:, None] * u3, z, -w2[:, None] * u1, w1[:, None] * u2], axis=2)
    J_line = A_m @ dm + A_d @ dd
    return e, np.linalg.norm(mc, axis=1), J_pose, J_line
