"""Pinhole camera, rigid poses and the line-projection intrinsic matrix.

Poses are world-to-camera (``X_c = R X_w + t``).  Tangent increments are
ordered ``(omega, rho)`` -- rotation first, then translation -- and applied
on the left: ``retract(T, delta) = Exp(delta) * T``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import BehindCamera

ORTHO_TOL = 1e-12
MIN_DEPTH = 1e-9


def skew(v) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def so3_exp(omega) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(omega, dtype=float)).as_matrix()


def so3_log(R) -> np.ndarray:
    return Rotation.from_matrix(R).as_rotvec()


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Closest rotation in the Frobenius sense (polar decomposition)."""
    U, _, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] *= -1
        Q = U @ Vt
    return Q


def rotation_drift(R: np.ndarray) -> float:
    return float(np.max(np.abs(R.T @ R - np.eye(R.shape[0]))))


def _left_jacobian(omega: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(omega)
    W = skew(omega)
    if theta < 1e-5:
        # series to O(theta^4); exact to double precision at this range
        return np.eye(3) + 0.5 * W + W @ W / 6.0
    a = (1.0 - np.cos(theta)) / theta**2
    b = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + a * W + b * W @ W


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(np.isfinite(vals)):
            raise ValueError("intrinsics must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]))


@dataclass(frozen=True, eq=False)
class PoseSE3:
    """World-to-camera rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if rotation_drift(R) > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            R = orthonormalize(R)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    @property
    def R(self) -> np.ndarray:
        return self.rotation

    @property
    def t(self) -> np.ndarray:
        return self.translation

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.rotation.T @ self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return X @ self.rotation.T + self.translation

    def inverse(self) -> "PoseSE3":
        return inverse(self)

    def __matmul__(self, other: "PoseSE3") -> "PoseSE3":
        return compose(self, other)

    def allclose(self, other: "PoseSE3", atol=1e-12) -> bool:
        return np.allclose(self.rotation, other.rotation, atol=atol) and np.allclose(
            self.translation, other.translation, atol=atol
        )


def compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    """Pose applying ``b`` first, then ``a``."""
    return PoseSE3(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(p: PoseSE3) -> PoseSE3:
    Rt = p.rotation.T
    return PoseSE3(Rt, -Rt @ p.translation)


def se3_exp(delta) -> PoseSE3:
    delta = np.asarray(delta, dtype=float)
    omega, rho = delta[:3], delta[3:]
    return PoseSE3(so3_exp(omega), _left_jacobian(omega) @ rho)


def se3_log(p: PoseSE3) -> np.ndarray:
    omega = so3_log(p.rotation)
    rho = np.linalg.solve(_left_jacobian(omega), p.translation)
    return np.concatenate([omega, rho])


def se3_retract(pose: PoseSE3, delta) -> PoseSE3:
    delta = np.asarray(delta, dtype=float)
    if not np.any(delta):
        return pose
    return compose(se3_exp(delta), pose)


def project_point(pose: PoseSE3, K: CameraIntrinsics, X) -> np.ndarray:
    Xc = pose.apply(X)
    if Xc[2] <= MIN_DEPTH:
        raise BehindCamera(f"camera-frame depth {Xc[2]:.3g} <= 0")
    return np.array([K.fx * Xc[0] / Xc[2] + K.cx, K.fy * Xc[1] / Xc[2] + K.cy])


def projection_matrix(pose: PoseSE3, K: CameraIntrinsics) -> np.ndarray:
    return K.matrix @ np.hstack([pose.rotation, pose.translation[:, None]])


def line_intrinsics(K: CameraIntrinsics) -> np.ndarray:
    """Matrix mapping a camera-frame Plücker moment to an image line."""
    return np.array(
        [
            [K.fy, 0.0, 0.0],
            [0.0, K.fx, 0.0],
            [-K.fy * K.cx, -K.fx * K.cy, K.fx * K.fy],
        ]
    )


def homogeneous(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.concatenate([x, np.ones(x.shape[:-1] + (1,))], axis=-1)
