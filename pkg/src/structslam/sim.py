"""Synthetic indoor scenes, noisy observations and drift/plane fixtures."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .camera import CameraIntrinsics, PoseSE3
from .errors import ConfigError, InfeasibleConfig
from .planes import Plane3

SCHEMA_VERSION = 1
MIN_DEPTH = 0.2


@dataclass(frozen=True)
class SceneConfig:
    name: str = "default"
    trajectory: str = "orbit"  # orbit | loop
    n_keyframes: int = 10
    n_points: int = 120
    n_lines: int = 40
    plane_point_fraction: float = 0.8
    plane_line_fraction: float = 0.8
    fx: float = 500.0
    fy: float = 500.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480
    orbit_radius: float = 4.0
    orbit_arc_deg: float = 60.0
    orbit_bob: float = 0.4
    loop_radius: float = 2.5
    room_half: float = 5.0
    jitter: float = 0.05

    def __post_init__(self):
        if self.trajectory not in ("orbit", "loop"):
            raise ConfigError(f"unknown trajectory {self.trajectory!r}")
        if self.n_keyframes < 2:
            raise ConfigError("need at least 2 keyframes")
        if self.n_points < 0 or self.n_lines < 0:
            raise ConfigError("counts must be non-negative")
        for f in ("plane_point_fraction", "plane_line_fraction"):
            if not 0.0 <= getattr(self, f) <= 1.0:
                raise ConfigError(f"{f} must lie in [0, 1]")

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        preset = d.pop("preset", None)
        base = preset_config(preset) if preset else cls()
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown scene keys: {sorted(unknown)}")
        return replace(base, **d)


PRESETS = {
    "default": SceneConfig(),
    "low-texture": SceneConfig(name="low-texture", n_points=16, n_lines=40),
    "corridor-loop": SceneConfig(name="corridor-loop", trajectory="loop", n_keyframes=20, n_points=200, n_lines=60),
}


def preset_config(name: str) -> SceneConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown scene preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass(frozen=True)
class ScenePlane:
    """Rectangular patch ``origin + a*u + b*v`` with ``a, b`` in ``[0, extent]``."""

    origin: np.ndarray
    u: np.ndarray
    v: np.ndarray
    extent: tuple

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.u, self.v)
        return n / np.linalg.norm(n)

    def equation(self) -> Plane3:
        n = self.normal
        return Plane3(n, -float(n @ self.origin))

    def sample(self, rng, n: int) -> np.ndarray:
        ab = rng.uniform(0.0, 1.0, size=(n, 2)) * np.asarray(self.extent)
        return self.origin + ab[:, :1] * self.u + ab[:, 1:] * self.v

    def contains(self, X, tol=1e-9) -> bool:
        r = np.asarray(X) - self.origin
        a, b = r @ self.u, r @ self.v
        return -tol <= a <= self.extent[0] + tol and -tol <= b <= self.extent[1] + tol


@dataclass
class SyntheticScene:
    config: SceneConfig
    seed: int
    poses: list[PoseSE3]
    timestamps: np.ndarray
    planes: list[ScenePlane]
    points: np.ndarray
    point_plane: np.ndarray
    lines: np.ndarray  # (M, 2, 3) start, end
    line_plane: np.ndarray
    loop: tuple | None = None

    @property
    def K(self) -> CameraIntrinsics:
        return self.config.intrinsics


@dataclass
class ObservationSet:
    """Per-frame measurements; ``*_id`` is the (possibly corrupted) association, ``*_gt`` the truth."""

    p_frame: np.ndarray
    p_gt: np.ndarray
    p_id: np.ndarray
    p_uv: np.ndarray
    p_label: np.ndarray
    p_outlier: np.ndarray
    l_frame: np.ndarray
    l_gt: np.ndarray
    l_id: np.ndarray
    l_seg: np.ndarray
    l_outlier: np.ndarray
    corrupted_frames: list = field(default_factory=list)


def _look_at(c, target, up=(0.0, 0.0, 1.0)) -> PoseSE3:
    z = np.asarray(target, dtype=float) - c
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.vstack([x, y, z])
    return PoseSE3(R, -R @ c)


def _trajectory(cfg: SceneConfig, rng) -> list[PoseSE3]:
    n = cfg.n_keyframes
    if cfg.trajectory == "orbit":
        target = np.array([3.0, 3.0, 1.0])
        half = np.deg2rad(cfg.orbit_arc_deg) / 2
        angles = np.deg2rad(225.0) + np.linspace(-half, half, n)
        poses = []
        heights = 0.5 + cfg.orbit_bob * np.sin(np.linspace(0.0, 2 * np.pi, n))
        for a, h in zip(angles, heights):
            c = target + cfg.orbit_radius * np.array([np.cos(a), np.sin(a), 0.0]) + np.array([0, 0, h])
            c = c + rng.normal(scale=cfg.jitter, size=3)
            poses.append(_look_at(c, target + rng.normal(scale=cfg.jitter, size=3)))
        return poses
    # closed loop: the last keyframe coincides with the first
    angles = 2 * np.pi * np.arange(n) / (n - 1)
    angles[-1] = 0.0
    poses = []
    for a in angles:
        c = np.array([cfg.loop_radius * np.cos(a), cfg.loop_radius * np.sin(a), 1.5])
        # walk forward along the loop, looking slightly outwards
        poses.append(_look_at(c, c + np.array([np.cos(a + 1.2), np.sin(a + 1.2), -0.1])))
    return poses


def _planes(cfg: SceneConfig) -> list[ScenePlane]:
    ex, ey, ez = np.eye(3)
    if cfg.trajectory == "orbit":
        return [
            ScenePlane(np.array([0.5, 0.5, 0.0]), ex, ey, (2.5, 2.5)),  # floor
            ScenePlane(np.array([3.0, 0.0, 0.0]), ey, ez, (3.0, 2.5)),  # wall x = 3
            ScenePlane(np.array([0.0, 3.0, 0.0]), ez, ex, (2.5, 3.0)),  # wall y = 3
        ]
    h = cfg.room_half
    return [
        ScenePlane(np.array([-h, -h, 0.0]), ex, ey, (2 * h, 2 * h)),
        ScenePlane(np.array([h, -h, 0.0]), ey, ez, (2 * h, 3.0)),
        ScenePlane(np.array([-h, h, 0.0]), ez, ex, (3.0, 2 * h)),
        ScenePlane(np.array([-h, -h, 0.0]), ez, ey, (3.0, 2 * h)),
        ScenePlane(np.array([-h, -h, 0.0]), ex, ez, (2 * h, 3.0)),
    ]


def _free_box(cfg: SceneConfig):
    if cfg.trajectory == "orbit":
        return np.array([1.2, 1.2, 0.2]), np.array([2.8, 2.8, 2.3])
    h = cfg.room_half
    return np.array([-h + 0.3, -h + 0.3, 0.2]), np.array([h - 0.3, h - 0.3, 2.8])


def project(pose: PoseSE3, K: CameraIntrinsics, X) -> tuple[np.ndarray, np.ndarray]:
    """Pixels and depths for an (N,3) array."""
    Xc = pose.apply(np.atleast_2d(X))
    z = Xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.column_stack([K.fx * Xc[:, 0] / z + K.cx, K.fy * Xc[:, 1] / z + K.cy])
    return uv, z


def _in_view(cfg: SceneConfig, pose, X) -> np.ndarray:
    uv, z = project(pose, cfg.intrinsics, X)
    return (z > MIN_DEPTH) & (uv[:, 0] >= 1) & (uv[:, 0] <= cfg.width - 1) & (uv[:, 1] >= 1) & (uv[:, 1] <= cfg.height - 1)


def _point_views(cfg, poses, X) -> np.ndarray:
    return np.sum([_in_view(cfg, p, X) for p in poses], axis=0)


def _segment_views(cfg, poses, S) -> np.ndarray:
    return np.sum([_in_view(cfg, p, S[:, 0]) & _in_view(cfg, p, S[:, 1]) for p in poses], axis=0)


def _sample_visible(draw, count_views, n, rng, max_rounds=200):
    """Rejection-sample ``n`` items visible from at least two keyframes."""
    out = []
    for _ in range(max_rounds):
        if len(out) >= n:
            break
        cand = draw(max(2 * (n - len(out)), 8))
        ok = count_views(cand) >= 2
        out.extend(cand[ok][: n - len(out)])
    if len(out) < n:
        raise InfeasibleConfig(f"could only place {len(out)} of {n} landmarks visible from two keyframes")
    return np.array(out)


def _split(total: int, k: int) -> list[int]:
    base = [total // k] * k
    for i in range(total % k):
        base[i] += 1
    return base


def generate_scene(cfg: SceneConfig, seed: int) -> SyntheticScene:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5CE7E]))
    poses = _trajectory(cfg, rng)
    planes = _planes(cfg)
    lo, hi = _free_box(cfg)
    pts, pt_lbl, segs, seg_lbl = [], [], [], []

    n_plane_pts = int(round(cfg.n_points * cfg.plane_point_fraction))
    for k, (pl, cnt) in enumerate(zip(planes, _split(n_plane_pts, len(planes)))):
        if cnt:
            P = _sample_visible(lambda m, pl=pl: pl.sample(rng, m), lambda X: _point_views(cfg, poses, X), cnt, rng)
            pts.append(P)
            pt_lbl.append(np.full(cnt, k))
    n_free = cfg.n_points - n_plane_pts
    if n_free:
        pts.append(_sample_visible(lambda m: rng.uniform(lo, hi, size=(m, 3)), lambda X: _point_views(cfg, poses, X), n_free, rng))
        pt_lbl.append(np.full(n_free, -1))

    def plane_segments(pl, m):
        mid = pl.sample(rng, m)
        ang = rng.uniform(0, np.pi, size=m)
        length = rng.uniform(0.4, 1.2, size=m)
        d = np.cos(ang)[:, None] * pl.u + np.sin(ang)[:, None] * pl.v
        S = np.stack([mid - 0.5 * length[:, None] * d, mid + 0.5 * length[:, None] * d], axis=1)
        inside = np.array([pl.contains(s[0]) and pl.contains(s[1]) for s in S], dtype=bool)
        return S[inside] if inside.any() else S[:0]

    def free_segments(m):
        mid = rng.uniform(lo, hi, size=(m, 3))
        d = rng.normal(size=(m, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        length = rng.uniform(0.4, 1.0, size=m)
        return np.stack([mid - 0.5 * length[:, None] * d, mid + 0.5 * length[:, None] * d], axis=1)

    n_plane_lines = int(round(cfg.n_lines * cfg.plane_line_fraction))
    for k, (pl, cnt) in enumerate(zip(planes, _split(n_plane_lines, len(planes)))):
        if cnt:
            segs.append(_sample_visible(lambda m, pl=pl: plane_segments(pl, m), lambda S: _segment_views(cfg, poses, S), cnt, rng))
            seg_lbl.append(np.full(cnt, k))
    n_free_lines = cfg.n_lines - n_plane_lines
    if n_free_lines:
        segs.append(_sample_visible(free_segments, lambda S: _segment_views(cfg, poses, S), n_free_lines, rng))
        seg_lbl.append(np.full(n_free_lines, -1))

    loop = (cfg.n_keyframes - 1, 0) if cfg.trajectory == "loop" else None
    return SyntheticScene(
        config=cfg,
        seed=int(seed),
        poses=poses,
        timestamps=0.1 * np.arange(cfg.n_keyframes),
        planes=planes,
        points=np.concatenate(pts) if pts else np.zeros((0, 3)),
        point_plane=np.concatenate(pt_lbl).astype(int) if pt_lbl else np.zeros(0, dtype=int),
        lines=np.concatenate(segs) if segs else np.zeros((0, 2, 3)),
        line_plane=np.concatenate(seg_lbl).astype(int) if seg_lbl else np.zeros(0, dtype=int),
        loop=loop,
    )


def render_observations(
    scene: SyntheticScene,
    noise_px: float = 0.0,
    outlier_rate: float = 0.0,
    mask_corruption_rate: float = 0.0,
    seed: int = 0,
    point_outlier_rate: float = 0.0,
) -> ObservationSet:
    """Project every visible landmark into every keyframe.

    ``outlier_rate`` reassigns line correspondences to a random other line;
    ``point_outlier_rate`` does the same for points.  ``mask_corruption_rate``
    is the per-frame probability of merging two plane labels (or splitting
    one when only one plane is visible).
    """
    for name, r in (("outlier_rate", outlier_rate), ("mask_corruption_rate", mask_corruption_rate),
                    ("point_outlier_rate", point_outlier_rate)):
        if not 0.0 <= r <= 1.0:
            raise ConfigError(f"{name} must lie in [0, 1]")
    if noise_px < 0:
        raise ConfigError("noise_px must be non-negative")
    cfg, K = scene.config, scene.K
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x0B5]))
    pf, pg, puv, plab = [], [], [], []
    lf, lg, lseg = [], [], []
    corrupted = []
    for f, pose in enumerate(scene.poses):
        if len(scene.points):
            vis = np.flatnonzero(_in_view(cfg, pose, scene.points))
            uv, _ = project(pose, K, scene.points[vis])
            labels = scene.point_plane[vis].copy()
            if mask_corruption_rate and rng.random() < mask_corruption_rate:
                present = np.unique(labels[labels >= 0])
                if len(present) >= 2:
                    a, b = rng.choice(present, size=2, replace=False)
                    labels[labels == b] = a
                    corrupted.append((f, "merge", int(a), int(b)))
                elif len(present) == 1:
                    sel = np.flatnonzero(labels == present[0])
                    labels[sel[: len(sel) // 2]] = 1000 + present[0]
                    corrupted.append((f, "split", int(present[0]), 1000 + int(present[0])))
            pf.append(np.full(len(vis), f))
            pg.append(vis)
            puv.append(uv)
            plab.append(labels)
        if len(scene.lines):
            vis = np.flatnonzero(_in_view(cfg, pose, scene.lines[:, 0]) & _in_view(cfg, pose, scene.lines[:, 1]))
            s, _ = project(pose, K, scene.lines[vis, 0])
            e, _ = project(pose, K, scene.lines[vis, 1])
            lf.append(np.full(len(vis), f))
            lg.append(vis)
            lseg.append(np.stack([s, e], axis=1))

    def cat(a, shape, dtype=float):
        return np.concatenate(a).astype(dtype) if a else np.zeros(shape, dtype=dtype)

    p_uv = cat(puv, (0, 2))
    l_seg = cat(lseg, (0, 2, 2))
    if noise_px > 0:
        p_uv = p_uv + rng.normal(scale=noise_px, size=p_uv.shape)
        l_seg = l_seg + rng.normal(scale=noise_px, size=l_seg.shape)
    p_gt, l_gt = cat(pg, 0, int), cat(lg, 0, int)

    def corrupt(gt, rate, n_total):
        ids = gt.copy()
        flags = np.zeros(len(gt), dtype=bool)
        if rate > 0 and n_total > 1:
            flags = rng.random(len(gt)) < rate
            shift = rng.integers(1, n_total, size=len(gt))
            ids[flags] = (gt[flags] + shift[flags]) % n_total
        return ids, flags

    l_id, l_out = corrupt(l_gt, outlier_rate, len(scene.lines))
    p_id, p_out = corrupt(p_gt, point_outlier_rate, len(scene.points))
    return ObservationSet(
        p_frame=cat(pf, 0, int), p_gt=p_gt, p_id=p_id, p_uv=p_uv, p_label=cat(plab, 0, int), p_outlier=p_out,
        l_frame=cat(lf, 0, int), l_gt=l_gt, l_id=l_id, l_seg=l_seg, l_outlier=l_out,
        corrupted_frames=corrupted,
    )


def simulate_scale_drift(poses: list[PoseSE3], drift: float = 0.1):
    """Re-integrate camera centres with a per-step scale growing to ``1 + drift``.

    Returns ``(drifted_poses, sigma)`` with ``sigma_i = (1 + drift)^(i/(n-1))``;
    rotations are untouched.
    """
    n = len(poses)
    sigma = (1.0 + drift) ** (np.arange(n) / max(n - 1, 1))
    C = np.array([p.center for p in poses])
    Ce = C.copy()
    for i in range(n - 1):
        Ce[i + 1] = Ce[i] + sigma[i] * (C[i + 1] - C[i])
    out = [PoseSE3(p.rotation, -p.rotation @ c) for p, c in zip(poses, Ce)]
    return out, sigma


def planar_fixture(seed: int, n_per_plane: int = 200, outlier_fraction: float = 0.2, noise: float = 0.005):
    """Three planar patches plus uniform outliers and two corrupted masks.

    The first mask merges planes 0 and 1 (with half the outliers); the
    second holds plane 2 and the remaining outliers.  Returns a dict with
    ``points``, ``labels`` (true plane index, -1 for outliers), ``masks``
    (index arrays) and ``planes`` (true :class:`Plane3`).
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x9A4E]))
    ex, ey, ez = np.eye(3)
    patches = [
        ScenePlane(np.array([0.0, 0.0, 0.0]), ex, ey, (2.0, 2.0)),
        ScenePlane(np.array([2.0, 0.0, 0.0]), ey, ez, (2.0, 2.0)),
        ScenePlane(np.array([0.0, 2.5, 0.0]), ez, ex, (2.0, 2.0)),
    ]
    pts, labels = [], []
    for k, pl in enumerate(patches):
        P = pl.sample(rng, n_per_plane) + rng.normal(scale=noise, size=(n_per_plane, 3))
        pts.append(P)
        labels.append(np.full(n_per_plane, k))
    n_in = n_per_plane * len(patches)
    n_out = int(round(outlier_fraction * n_in / (1.0 - outlier_fraction)))
    O = rng.uniform([0.0, 0.0, 0.0], [2.0, 2.5, 2.0], size=(n_out, 3))
    pts.append(O)
    labels.append(np.full(n_out, -1))
    P = np.concatenate(pts)
    y = np.concatenate(labels)
    out_idx = np.flatnonzero(y == -1)
    half = len(out_idx) // 2
    m1 = np.concatenate([np.flatnonzero((y == 0) | (y == 1)), out_idx[:half]])
    m2 = np.concatenate([np.flatnonzero(y == 2), out_idx[half:]])
    return {"points": P, "labels": y, "masks": [np.sort(m1), np.sort(m2)], "planes": [p.equation() for p in patches]}


# ---------------------------------------------------------------- serialisation


def _pose_dict(p: PoseSE3) -> dict:
    return {"R": p.rotation.tolist(), "t": p.translation.tolist()}


def _pose_from(d) -> PoseSE3:
    return PoseSE3(np.array(d["R"]), np.array(d["t"]))


def scene_to_dict(scene: SyntheticScene) -> dict:
    return {
        "version": SCHEMA_VERSION,
        "kind": "scene",
        "seed": scene.seed,
        "config": asdict(scene.config),
        "timestamps": scene.timestamps.tolist(),
        "poses": [_pose_dict(p) for p in scene.poses],
        "planes": [
            {"origin": p.origin.tolist(), "u": p.u.tolist(), "v": p.v.tolist(), "extent": list(p.extent)}
            for p in scene.planes
        ],
        "points": scene.points.tolist(),
        "point_plane": scene.point_plane.tolist(),
        "lines": scene.lines.tolist(),
        "line_plane": scene.line_plane.tolist(),
        "loop": list(scene.loop) if scene.loop else None,
    }


def scene_from_dict(d: dict) -> SyntheticScene:
    if d.get("version") != SCHEMA_VERSION or d.get("kind") != "scene":
        raise ConfigError("not a version-1 scene document")
    return SyntheticScene(
        config=SceneConfig(**d["config"]),
        seed=int(d["seed"]),
        poses=[_pose_from(p) for p in d["poses"]],
        timestamps=np.array(d["timestamps"], dtype=float),
        planes=[ScenePlane(np.array(p["origin"]), np.array(p["u"]), np.array(p["v"]), tuple(p["extent"])) for p in d["planes"]],
        points=np.array(d["points"], dtype=float).reshape(-1, 3),
        point_plane=np.array(d["point_plane"], dtype=int),
        lines=np.array(d["lines"], dtype=float).reshape(-1, 2, 3),
        line_plane=np.array(d["line_plane"], dtype=int),
        loop=tuple(d["loop"]) if d.get("loop") else None,
    )


def observations_to_dict(obs: ObservationSet) -> dict:
    out = {"version": SCHEMA_VERSION, "kind": "observations"}
    for k, v in asdict(obs).items():
        out[k] = v.tolist() if isinstance(v, np.ndarray) else v
    return out


def trajectory_to_dict(poses: list[PoseSE3], timestamps=None) -> dict:
    ts = np.arange(len(poses), dtype=float) if timestamps is None else np.asarray(timestamps, dtype=float)
    return {
        "version": SCHEMA_VERSION,
        "kind": "trajectory",
        "timestamps": ts.tolist(),
        "poses": [_pose_dict(p) for p in poses],
    }


def trajectory_from_dict(d: dict) -> tuple[np.ndarray, list[PoseSE3]]:
    if d.get("kind") != "trajectory":
        raise ConfigError("not a trajectory document")
    return np.array(d["timestamps"], dtype=float), [_pose_from(p) for p in d["poses"]]
