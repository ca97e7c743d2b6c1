"""3D line representations and two-view line geometry.

Sign conventions (used consistently everywhere in this package):

* A line through ``X1`` and ``X2`` has direction ``d = X1 - X2`` and moment
  ``m = X2 x X1``, equivalently ``m = X x d`` for any point ``X`` on it.
  With this choice the rigid transform ``m_c = R m + [t]x R d`` and the
  dual Plücker matrix ``pi1 pi2^T - pi2 pi1^T = [[d]x, m; -m^T, 0]`` agree.
* The image line of a camera-frame line is ``l = K_L m_c``; for a segment
  imaged from ``X2`` (start) to ``X1`` (end) this is a positive multiple of
  ``x_s x x_e``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import (
    CameraIntrinsics,
    PoseSE3,
    homogeneous,
    line_intrinsics,
    orthonormalize,
    projection_matrix,
    rotation_drift,
    skew,
    so3_exp,
)
from .errors import BehindCamera, DegenerateLine, DegenerateProjection, NearEpipolarPlane

KLEIN_EPS = 1e-300


@dataclass(frozen=True, eq=False)
class PlueckerLine:
    m: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "m", np.asarray(self.m, dtype=float).reshape(3))
        object.__setattr__(self, "d", np.asarray(self.d, dtype=float).reshape(3))

    @classmethod
    def from_vector(cls, v) -> "PlueckerLine":
        v = np.asarray(v, dtype=float)
        return cls(v[:3], v[3:])

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.m, self.d])

    def normalized(self) -> "PlueckerLine":
        return PlueckerLine.from_vector(self.vector / np.linalg.norm(self.vector))

    def klein(self) -> float:
        """Normalised Klein-quadric violation ``|m.d| / (|m||d|)``."""
        return klein_residual(self)

    def point_closest_to_origin(self) -> np.ndarray:
        return np.cross(self.d, self.m) / np.dot(self.d, self.d)


@dataclass(frozen=True, eq=False)
class OrthonormalLine:
    U: np.ndarray
    W: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "U", np.asarray(self.U, dtype=float).reshape(3, 3))
        object.__setattr__(self, "W", np.asarray(self.W, dtype=float).reshape(2, 2))


@dataclass(frozen=True, eq=False)
class LineSegment3:
    start: np.ndarray
    end: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.start, dtype=float).reshape(3)
        e = np.asarray(self.end, dtype=float).reshape(3)
        if np.linalg.norm(s - e) <= 0:
            raise DegenerateLine("segment endpoints coincide")
        object.__setattr__(self, "start", s)
        object.__setattr__(self, "end", e)

    def pluecker(self) -> PlueckerLine:
        # direction from start to end
        return pluecker_from_endpoints(self.end, self.start)


@dataclass(frozen=True, eq=False)
class ImageLineSegment:
    xs: np.ndarray
    xe: np.ndarray

    def __post_init__(self):
        xs = np.asarray(self.xs, dtype=float).reshape(2)
        xe = np.asarray(self.xe, dtype=float).reshape(2)
        if np.array_equal(xs, xe):
            raise DegenerateLine("image segment endpoints coincide")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "xe", xe)

    @classmethod
    def from_array(cls, a) -> "ImageLineSegment":
        a = np.asarray(a, dtype=float).reshape(2, 2)
        return cls(a[0], a[1])

    def as_array(self) -> np.ndarray:
        return np.vstack([self.xs, self.xe])

    def line(self) -> np.ndarray:
        return np.cross(homogeneous(self.xs), homogeneous(self.xe))


def klein_residual(L: PlueckerLine) -> float:
    return abs(float(np.dot(L.m, L.d))) / max(np.linalg.norm(L.m) * np.linalg.norm(L.d), KLEIN_EPS)


def direction_cosine(a, b) -> float:
    """Cosine between two homogeneous 6-vectors (sign-sensitive)."""
    a = a.vector if isinstance(a, PlueckerLine) else np.asarray(a, dtype=float)
    b = b.vector if isinstance(b, PlueckerLine) else np.asarray(b, dtype=float)
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def pluecker_from_endpoints(X1, X2) -> PlueckerLine:
    X1 = np.asarray(X1, dtype=float)
    X2 = np.asarray(X2, dtype=float)
    if np.linalg.norm(X1 - X2) < 1e-12:
        raise DegenerateLine("endpoints coincide")
    return PlueckerLine(np.cross(X2, X1), X1 - X2)


def to_orthonormal(L: PlueckerLine) -> OrthonormalLine:
    m, d = L.m, L.d
    nm, nd = np.linalg.norm(m), np.linalg.norm(d)
    if nd == 0.0:
        raise DegenerateLine("zero direction")
    if nm > 1e-15 * nd:
        md = np.cross(m, d)
        nmd = np.linalg.norm(md)
        if nmd == 0.0:
            raise DegenerateLine("moment parallel to direction")
        U = np.column_stack([m / nm, d / nd, md / nmd])
    else:
        # line through the origin: any unit normal to d serves as u1
        Q, _ = np.linalg.qr(np.column_stack([d, np.eye(3)[:, np.argmin(np.abs(d))]]), mode="complete")
        u2 = d / nd
        u1 = Q[:, 1] - np.dot(Q[:, 1], u2) * u2
        u1 /= np.linalg.norm(u1)
        U = np.column_stack([u1, u2, np.cross(u1, u2)])
        nm = 0.0
    if rotation_drift(U) > 1e-12:
        U = orthonormalize(U)
    s = np.hypot(nm, nd)
    W = np.array([[nm, -nd], [nd, nm]]) / s
    return OrthonormalLine(U, W)


def from_orthonormal(O: OrthonormalLine) -> PlueckerLine:
    w1, w2 = O.W[0, 0], O.W[1, 0]
    return PlueckerLine(w1 * O.U[:, 0], w2 * O.U[:, 1])


def _rot2(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def update_orthonormal(O: OrthonormalLine, delta) -> OrthonormalLine:
    delta = np.asarray(delta, dtype=float)
    if not np.any(delta):
        return O
    U = O.U @ so3_exp(delta[:3])
    W = O.W @ _rot2(delta[3])
    if rotation_drift(U) > 1e-12:
        U = orthonormalize(U)
    if rotation_drift(W) > 1e-12:
        W = orthonormalize(W)
    return OrthonormalLine(U, W)


def line_transform_matrix(T: PoseSE3) -> np.ndarray:
    """6x6 matrix acting on (m, d) for a rigid transform."""
    R, t = T.rotation, T.translation
    M = np.zeros((6, 6))
    M[:3, :3] = R
    M[:3, 3:] = skew(t) @ R
    M[3:, 3:] = R
    return M


def transform_line(T: PoseSE3, L: PlueckerLine) -> PlueckerLine:
    R, t = T.rotation, T.translation
    d_c = R @ L.d
    return PlueckerLine(R @ L.m + np.cross(t, d_c), d_c)


def project_line(K: CameraIntrinsics, L_c: PlueckerLine) -> np.ndarray:
    if np.linalg.norm(L_c.m) <= 1e-12 * max(1.0, np.linalg.norm(L_c.d)):
        raise DegenerateProjection("line passes through the camera centre")
    return line_intrinsics(K) @ L_c.m


def line_reprojection_error(l, seg: ImageLineSegment) -> np.ndarray:
    l = np.asarray(l, dtype=float)
    n2 = l[0] ** 2 + l[1] ** 2
    if n2 <= 1e-18:
        raise DegenerateProjection("image line at infinity")
    n = np.sqrt(n2)
    return np.array([homogeneous(seg.xs) @ l, homogeneous(seg.xe) @ l]) / n


def dual_pluecker_matrix(pi1, pi2) -> np.ndarray:
    pi1 = np.asarray(pi1, dtype=float)
    pi2 = np.asarray(pi2, dtype=float)
    return np.outer(pi1, pi2) - np.outer(pi2, pi1)


def triangulate_two_view(l1, P1, l2, P2, min_angle: float = 1e-6) -> PlueckerLine:
    """Intersect the interpretation planes of two image lines.

    The returned line is scaled to unit 6-norm and signed so that its
    reprojection into the first view is a positive multiple of ``l1``.
    """
    l1 = np.asarray(l1, dtype=float)
    l2 = np.asarray(l2, dtype=float)
    pi1 = np.asarray(P1).T @ l1
    pi2 = np.asarray(P2).T @ l2
    a1, a2 = pi1[:3], pi2[:3]
    sin_angle = np.linalg.norm(np.cross(a1, a2)) / (np.linalg.norm(a1) * np.linalg.norm(a2))
    if not np.isfinite(sin_angle) or sin_angle < np.sin(min_angle):
        raise NearEpipolarPlane(f"interpretation planes {sin_angle:.2e} rad apart")
    Ls = dual_pluecker_matrix(pi1, pi2)
    d = np.array([Ls[2, 1], Ls[0, 2], Ls[1, 0]])
    m = Ls[:3, 3]
    v = np.concatenate([m, d])
    v /= np.linalg.norm(v)
    if np.dot(line_projection_matrix(P1) @ v, l1) < 0:
        v = -v
    return PlueckerLine.from_vector(v)


def line_projection_matrix(P) -> np.ndarray:
    """3x6 matrix taking world Plücker coordinates to the image line under ``P``.

    For ``P = K[R|t]`` this equals ``K_L [R, [t]x R]``.
    """
    P = np.asarray(P, dtype=float)
    M, p4 = P[:, :3], P[:, 3]
    cof = np.linalg.det(M) * np.linalg.inv(M).T
    return np.hstack([cof, skew(p4) @ M])


def pluecker_matrix(L: PlueckerLine) -> np.ndarray:
    """4x4 matrix mapping a plane to its intersection point with ``L``."""
    M = np.zeros((4, 4))
    M[:3, :3] = skew(L.m)
    M[:3, 3] = L.d
    M[3, :3] = -L.d
    return M


def intersect_plane(L: PlueckerLine, pi) -> np.ndarray:
    X = pluecker_matrix(L) @ np.asarray(pi, dtype=float)
    if abs(X[3]) < 1e-300:
        raise DegenerateProjection("line parallel to plane")
    return X[:3] / X[3]


def perpendicular_foot(x, l) -> np.ndarray:
    """Closest point on image line ``l`` to pixel ``x`` (division-safe form)."""
    l = np.asarray(l, dtype=float)
    xh = homogeneous(x)
    n2 = l[0] ** 2 + l[1] ** 2
    return xh[:2] - (xh @ l / n2) * l[:2]


def trim_endpoints(L: PlueckerLine, seg: ImageLineSegment, pose: PoseSE3, K: CameraIntrinsics) -> LineSegment3:
    """Endpoints of the infinite world line ``L`` cut by the observed segment."""
    L_c = transform_line(pose, L)
    l = project_line(K, L_c)
    if l[0] ** 2 + l[1] ** 2 <= 1e-18:
        raise DegenerateProjection("image line at infinity")
    P = projection_matrix(pose, K)
    out = []
    for x in (seg.xs, seg.xe):
        foot = perpendicular_foot(x, l)
        # line through the foot along the normal of l
        l_perp = np.cross(homogeneous(foot), np.array([l[0], l[1], 0.0]))
        X = intersect_plane(L, P.T @ l_perp)
        if pose.apply(X)[2] <= 0:
            raise BehindCamera("trimmed endpoint behind the camera")
        out.append(X)
    return LineSegment3(out[0], out[1])
