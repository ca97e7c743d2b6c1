"""Keyframes, landmarks, observations and plane associations."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import CameraIntrinsics, PoseSE3
from .lines import ImageLineSegment, LineSegment3, PlueckerLine, trim_endpoints
from .planes import Plane3, refine_members

I2 = np.eye(2)


@dataclass
class Observation:
    """One 2D measurement of a landmark in a keyframe.

    ``meas`` is a pixel (2,) for points and a segment (2,2) with rows
    ``x_s, x_e`` for lines.
    """

    id: int
    kf: int
    landmark: int
    kind: str
    meas: np.ndarray
    info: np.ndarray = field(default_factory=lambda: I2.copy())

    def __post_init__(self):
        if self.kind not in ("point", "line"):
            raise ValueError(f"unknown observation kind {self.kind!r}")
        self.meas = np.asarray(self.meas, dtype=float)


@dataclass
class LineLandmark:
    pluecker: PlueckerLine
    ref_kf: int
    endpoints: LineSegment3 | None = None


@dataclass
class MapStore:
    K: CameraIntrinsics
    keyframes: dict[int, PoseSE3] = field(default_factory=dict)
    points: dict[int, np.ndarray] = field(default_factory=dict)
    point_refs: dict[int, int] = field(default_factory=dict)
    lines: dict[int, LineLandmark] = field(default_factory=dict)
    planes: dict[int, Plane3] = field(default_factory=dict)
    observations: list[Observation] = field(default_factory=list)

    def observations_of(self, kind: str, landmark: int) -> list[Observation]:
        return [o for o in self.observations if o.kind == kind and o.landmark == landmark]

    def remove_line(self, lid: int) -> None:
        self.lines.pop(lid, None)
        self.observations = [o for o in self.observations if not (o.kind == "line" and o.landmark == lid)]

    def remove_point(self, pid: int) -> None:
        self.points.pop(pid, None)
        self.point_refs.pop(pid, None)
        self.observations = [o for o in self.observations if not (o.kind == "point" and o.landmark == pid)]
        for k, pl in list(self.planes.items()):
            if pid in pl.member_ids:
                self.planes[k] = pl.with_members(pl.member_ids - {pid})

    def reference_segment(self, lid: int) -> ImageLineSegment | None:
        ref = self.lines[lid].ref_kf
        for o in self.observations:
            if o.kind == "line" and o.landmark == lid and o.kf == ref:
                return ImageLineSegment.from_array(o.meas)
        return None

    def retrim(self, lid: int) -> LineSegment3 | None:
        """Re-estimate the endpoints of a line from its reference observation."""
        lm = self.lines[lid]
        seg = self.reference_segment(lid)
        if seg is None:
            return None
        lm.endpoints = trim_endpoints(lm.pluecker, seg, self.keyframes[lm.ref_kf], self.K)
        return lm.endpoints

    def median_depth(self, kf: int) -> float:
        pose = self.keyframes[kf]
        ids = {o.landmark for o in self.observations if o.kf == kf and o.kind == "point"}
        z = [pose.apply(self.points[i])[2] for i in ids if i in self.points]
        z = [v for v in z if v > 0]
        return float(np.median(z)) if z else 1.0


def apply_point_plane_step(store: MapStore) -> MapStore:
    """Project every plane's member points onto the plane (signed projection)."""
    for pl in store.planes.values():
        refine_members(pl, store.points)
    return store


def plane_term(store: MapStore) -> float:
    """Sum of member point-to-plane distances."""
    total = 0.0
    for pl in store.planes.values():
        for k in pl.member_ids:
            if k in store.points:
                total += abs(float(store.points[k] @ pl.n + pl.d))
    return total
