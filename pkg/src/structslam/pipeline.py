"""End-to-end experiment: scene -> observations -> map -> local BA -> metrics."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from itertools import combinations

import numpy as np

from .ba import (
    BAProblem,
    RobustKernel,
    SolverConfig,
    relocalize,
    residuals,
    solve_bundle,
    solve_local_ba,
    triangulate_point,
)
from .camera import PoseSE3, projection_matrix, se3_retract
from .errors import (
    BehindCamera,
    ConfigError,
    DegenerateConfiguration,
    DegenerateProjection,
    NearEpipolarPlane,
    NoModelFound,
)
from .lines import (
    ImageLineSegment,
    LineSegment3,
    PlueckerLine,
    dual_pluecker_matrix,
    line_projection_matrix,
    triangulate_two_view,
)
from .loop import build_loop_graph, correct_map, estimate_loop_sim3, optimize_pose_graph
from .mapstore import LineLandmark, MapStore, Observation
from .metrics import compute_ate
from .planes import Plane3, adaptive_thresholds, fit_plane_svd, point_plane_distance, project_onto_plane, sequential_ransac_planes
from .sim import SceneConfig, generate_scene, render_observations

log = logging.getLogger(__name__)

PIPELINES = ("P", "PL", "PLP")
# minimum triangulation parallax, as a cosine between viewing rays (about 1.15 deg)
MAX_PARALLAX_COS = 0.9998
CSV_COLUMNS = (
    "run_id",
    "seed",
    "config_hash",
    "pipeline",
    "ate_rmse_m",
    "mean_ape_m",
    "rejected_outliers",
    "false_rejections",
    "injected_outliers",
    "init_ate_m",
    "mean_reproj_px",
    "n_points",
    "n_lines",
    "n_planes",
    "iterations",
)


@dataclass(frozen=True)
class ExperimentConfig:
    scene: SceneConfig = SceneConfig()
    noise_px: float = 1.0
    outlier_rate: float = 0.0
    point_outlier_rate: float = 0.0
    mask_corruption_rate: float = 0.0
    pipelines: tuple = ("PL",)
    init_rot_deg: float = 1.0
    init_trans_m: float = 0.05
    loop_closure: bool = False
    max_iters: int = 50
    chi2: float = 5.991
    trim_ratio: float = 0.1
    seeds: tuple = (0,)
    out: str = "out"

    def __post_init__(self):
        if not self.pipelines or any(p not in PIPELINES for p in self.pipelines):
            raise ConfigError(f"pipelines must be a non-empty subset of {PIPELINES}")
        if len(set(self.pipelines)) != len(self.pipelines):
            raise ConfigError("duplicate pipeline toggles")
        if self.noise_px < 0 or self.init_rot_deg < 0 or self.init_trans_m < 0:
            raise ConfigError("noise and perturbation magnitudes must be non-negative")
        if self.max_iters < 1 or not self.chi2 > 0 or not self.trim_ratio > 0:
            raise ConfigError("invalid solver settings")
        if not self.seeds:
            raise ConfigError("at least one seed required")

    @property
    def solver(self) -> SolverConfig:
        return SolverConfig(max_iters=self.max_iters, chi2=self.chi2, trim_ratio=self.trim_ratio)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pipelines"] = list(self.pipelines)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "scene" in d:
                d["scene"] = SceneConfig.from_dict(d["scene"])
            for k in ("pipelines", "seeds"):
                if k in d:
                    if not isinstance(d[k], list):
                        raise ConfigError(f"{k} must be a list")
                    d[k] = tuple(int(s) if k == "seeds" else s for s in d[k])
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def config_hash(self) -> str:
        """Hash of everything that affects a row (seeds and output path excluded)."""
        d = self.to_dict()
        d.pop("seeds")
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class RunResult:
    row: dict
    gt_poses: list
    est_poses: list
    init_poses: list
    ape: np.ndarray
    report: dict = field(default_factory=dict)


def perturb_poses(poses: list[PoseSE3], rot_deg: float, trans_m: float, rng, anchor: int = 0) -> list[PoseSE3]:
    """Left-perturb every pose except ``anchor`` (rotation about, and shift of, the camera centre)."""
    out = []
    for i, p in enumerate(poses):
        if i == anchor:
            out.append(p)
            continue
        w = rng.normal(scale=np.deg2rad(rot_deg) / np.sqrt(3), size=3)
        dc = rng.normal(scale=trans_m / np.sqrt(3), size=3)
        c = p.center + dc
        q = se3_retract(p, np.concatenate([w, np.zeros(3)]))
        out.append(PoseSE3(q.rotation, -q.rotation @ c))
    return out


def _triangulate_points(store: MapStore, obs, use_ids) -> None:
    K = store.K
    by_id: dict[int, list[int]] = {}
    for k in np.flatnonzero(np.isin(obs.p_id, use_ids)):
        by_id.setdefault(int(obs.p_id[k]), []).append(k)
    for pid in sorted(by_id):
        rows = by_id[pid]
        frames = [int(obs.p_frame[k]) for k in rows]
        if len(set(frames)) < 2:
            continue
        poses = [store.keyframes[f] for f in frames]
        # world-frame viewing rays; skip points seen without parallax
        rays = np.array([p.rotation.T @ np.linalg.solve(K.matrix, np.r_[uv, 1.0]) for p, uv in zip(poses, obs.p_uv[rows])])
        rays /= np.linalg.norm(rays, axis=1, keepdims=True)
        if np.min(rays @ rays.T) > MAX_PARALLAX_COS:
            continue
        try:
            X = triangulate_point(poses, obs.p_uv[rows], K)
        except (DegenerateProjection, ValueError, np.linalg.LinAlgError):
            continue
        if any(p.apply(X)[2] <= 0 for p in poses):
            continue
        store.points[pid] = X
        store.point_refs[pid] = min(frames)


def _multiview_line(planes: np.ndarray) -> np.ndarray:
    """Plücker 6-vector of the line common to several interpretation planes (rows)."""
    A = planes / np.linalg.norm(planes[:, :3], axis=1, keepdims=True)
    _, _, Vt = np.linalg.svd(A)
    Ls = dual_pluecker_matrix(Vt[0], Vt[1])
    v = np.concatenate([Ls[:3, 3], [Ls[2, 1], Ls[0, 2], Ls[1, 0]]])
    return v / np.linalg.norm(v)


def _triangulate_lines(store: MapStore, obs, gate_px: float, chi2: float = 5.991) -> None:
    """Hypothesise from every observation pair, keep the best-supported one and
    refit on all views that agree with it."""
    K = store.K
    by_id: dict[int, list[int]] = {}
    for k in range(len(obs.l_id)):
        by_id.setdefault(int(obs.l_id[k]), []).append(k)
    P = {f: projection_matrix(p, K) for f, p in store.keyframes.items()}
    LP = {f: line_projection_matrix(M) for f, M in P.items()}
    for lid in sorted(by_id):
        rows = by_id[lid]
        frames = [int(obs.l_frame[k]) for k in rows]
        xh = np.concatenate([obs.l_seg[rows], np.ones((len(rows), 2, 1))], axis=2)
        lines = np.cross(xh[:, 0], xh[:, 1])
        proj = np.array([LP[f] for f in frames])
        planes = np.array([P[f].T @ l for f, l in zip(frames, lines)])

        def errors(v):
            img = proj @ v
            d = np.einsum("nkj,nj->nk", xh, img) / np.linalg.norm(img[:, :2], axis=1)[:, None]
            return np.sum(d**2, axis=1)

        best = None
        for a, b in combinations(range(len(rows)), 2):
            if frames[a] == frames[b]:
                continue
            try:
                v = triangulate_two_view(lines[a], P[frames[a]], lines[b], P[frames[b]]).vector
            except NearEpipolarPlane:
                continue
            with np.errstate(divide="ignore", invalid="ignore"):
                e = errors(v)
            if not np.all(np.isfinite(e)):
                continue
            score = float(np.sum(np.minimum(e, gate_px**2)))
            if best is None or score < best[0]:
                best = (score, e, a)
        if best is None:
            continue
        _, e, a = best
        inl = np.flatnonzero(e < gate_px**2)
        v = None
        for _ in range(5):
            if len(set(frames[i] for i in inl)) < 2:
                v = None
                break
            v = _multiview_line(planes[inl])
            if np.dot(proj[a] @ v, lines[a]) < 0:
                v = -v
            # shrink the gate to a robust scale of the current inliers so that
            # mismatches lying near the true line cannot bias the refit
            with np.errstate(divide="ignore", invalid="ignore"):
                e = errors(v)
            sigma = 1.4826 * np.median(np.sqrt(e[inl]))
            thr = min(max(chi2, (3.0 * sigma) ** 2), gate_px**2)
            new = np.flatnonzero(np.nan_to_num(e, nan=np.inf) < thr)
            if np.array_equal(new, inl):
                break
            inl = new
        if v is None or a not in inl:
            continue
        L = PlueckerLine.from_vector(v)
        seg = ImageLineSegment.from_array(obs.l_seg[rows[a]])
        ends = _trim(store, L, seg, frames[a])
        if ends is None:
            continue
        store.lines[lid] = LineLandmark(L, frames[a], ends)


def _trim(store, L, seg, kf) -> LineSegment3 | None:
    from .lines import trim_endpoints

    try:
        return trim_endpoints(L, seg, store.keyframes[kf], store.K)
    except (BehindCamera, DegenerateProjection):
        return None


def build_map(scene, obs, init_poses, use_points=True, use_lines=True, gate_px=20.0) -> MapStore:
    store = MapStore(scene.K, keyframes={i: p for i, p in enumerate(init_poses)})
    if use_points:
        _triangulate_points(store, obs, np.unique(obs.p_id))
    if use_lines:
        _triangulate_lines(store, obs, gate_px)
    oid = 0
    if use_points:
        for k in range(len(obs.p_id)):
            if int(obs.p_id[k]) in store.points:
                store.observations.append(Observation(oid, int(obs.p_frame[k]), int(obs.p_id[k]), "point", obs.p_uv[k]))
            oid += 1
    else:
        oid += len(obs.p_id)
    if use_lines:
        for k in range(len(obs.l_id)):
            if int(obs.l_id[k]) in store.lines:
                store.observations.append(Observation(oid + k, int(obs.l_frame[k]), int(obs.l_id[k]), "line", obs.l_seg[k]))
    return store


def point_labels(obs) -> dict[int, int]:
    """Majority segmentation label per point landmark (-1 when unlabelled)."""
    votes: dict[int, dict[int, int]] = {}
    for pid, lab in zip(obs.p_id.tolist(), obs.p_label.tolist()):
        v = votes.setdefault(pid, {})
        v[lab] = v.get(lab, 0) + 1
    return {pid: max(sorted(v), key=lambda k: v[k]) for pid, v in votes.items()}


def fit_map_planes(points: dict, labels: dict, median_depth: float, seed: int) -> list[Plane3]:
    th = adaptive_thresholds(median_depth)
    groups: dict[int, list[int]] = {}
    for pid in sorted(points):
        lab = labels.get(pid, -1)
        if lab >= 0:
            groups.setdefault(lab, []).append(pid)
    sets = [np.array([points[i] for i in ids]) for _, ids in sorted(groups.items())]
    ids = [np.array(ids) for _, ids in sorted(groups.items())]
    try:
        return sequential_ransac_planes(sets, th, seed=seed, ids=ids)
    except NoModelFound:
        return []


def _plane_step(labels, seed, store: MapStore):
    """Between-round hook: fit planes on the current points and project members."""

    def hook(problem: BAProblem):
        depths = []
        for k, pose in problem.poses.items():
            z = [pose.apply(problem.points[o.landmark])[2] for o in problem.observations if o.kf == k and o.kind == "point"]
            if z:
                depths.append(np.median(z))
        md = float(np.median(depths)) if depths else 1.0
        planes = fit_map_planes(problem.points, labels, md, seed)
        store.planes = {i: pl for i, pl in enumerate(planes)}
        for pl in planes:
            for k in pl.member_ids:
                if k in problem.points:
                    problem.points[k] = project_onto_plane(problem.points[k], pl)

    return hook


def mean_reprojection_error(problem: BAProblem, exclude=(), culled_lines=()) -> float:
    ex, cl = set(exclude), set(culled_lines)
    obs = [o for o in problem.observations if o.id not in ex and not (o.kind == "line" and o.landmark in cl)]
    if not obs:
        return float("nan")
    r = residuals(problem, obs)
    return float(np.mean([np.linalg.norm(v) for v in r.values()]))


def run_single(cfg: ExperimentConfig, pipeline: str, seed: int, kernel: RobustKernel | None = RobustKernel()) -> RunResult:
    if pipeline not in PIPELINES:
        raise ConfigError(f"unknown pipeline {pipeline!r}")
    scene = generate_scene(cfg.scene, seed)
    obs = render_observations(
        scene, cfg.noise_px, cfg.outlier_rate, cfg.mask_corruption_rate, seed + 1_000_003, cfg.point_outlier_rate
    )
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1417]))
    init = perturb_poses(scene.poses, cfg.init_rot_deg, cfg.init_trans_m, rng)
    use_lines = pipeline in ("PL", "PLP")
    # bootstrap the keyframes from points alone, as tracking would before
    # new lines are inserted into the map
    boot = build_map(scene, obs, init, use_points=True, use_lines=False)
    boot_problem = BAProblem.from_map(boot, fixed={0})
    solve_bundle(boot_problem, kernel, cfg.solver)
    boot_problem.write_back(boot)
    store = build_map(scene, obs, [boot.keyframes[i] for i in range(len(init))], use_points=True, use_lines=use_lines)
    problem = BAProblem.from_map(store, fixed={0})
    hook = _plane_step(point_labels(obs), seed, store) if pipeline == "PLP" else None
    report = solve_local_ba(problem, kernel, cfg.solver, between_rounds=hook)
    if hook is not None:
        # the plane term is not part of the LM cost, so re-apply it to the final map
        hook(problem)
    reproj = mean_reprojection_error(
        problem, report.rejected_observations + report.invalid_observations, report.rejected_lines
    )
    problem.write_back(store, report)

    if cfg.loop_closure and scene.loop is not None:
        i, j = scene.loop
        Z = estimate_loop_sim3(store, i, j)
        graph = build_loop_graph(store.keyframes, (i, j, Z))
        nodes, _ = optimize_pose_graph(graph)
        correct_map(store, {k: (graph.nodes[k], nodes[k]) for k in nodes})
        # global BA over the corrected map, anchored at the first keyframe
        gba = BAProblem.from_map(store, fixed={0})
        gba.write_back(store, solve_local_ba(gba, kernel, cfg.solver))

    est = [store.keyframes[i] for i in range(len(scene.poses))]
    m = compute_ate(est, scene.poses, "sim3")
    m0 = compute_ate(init, scene.poses, "sim3")

    line_obs_ids = {o.id: o for o in problem.observations if o.kind == "line"}
    n_p = len(obs.p_id)
    rejected = set(report.rejected_observations)
    culled = set(report.rejected_lines)
    removed = {k for k, o in line_obs_ids.items() if k in rejected or o.landmark in culled}
    flagged = {n_p + k for k in np.flatnonzero(obs.l_outlier)}
    present = flagged & set(line_obs_ids)
    row = {
        "run_id": f"{cfg.config_hash()}-{pipeline}-{seed}",
        "seed": int(seed),
        "config_hash": cfg.config_hash(),
        "pipeline": pipeline,
        "ate_rmse_m": m.ate_rmse,
        "mean_ape_m": m.mean_ape,
        "rejected_outliers": len(present & removed),
        "false_rejections": len(rejected - flagged),
        "injected_outliers": len(present),
        "init_ate_m": m0.ate_rmse,
        "mean_reproj_px": reproj,
        "n_points": len(store.points),
        "n_lines": len(store.lines),
        "n_planes": len(store.planes),
        "iterations": report.iterations,
    }
    return RunResult(row, scene.poses, est, init, m.ape, report.to_dict())


def _run_job(job):
    cfg, p, seed = job
    return run_single(cfg, p, seed)


def run_experiment(cfg: ExperimentConfig, workers: int = 1) -> list[RunResult]:
    """Every (seed, pipeline) pair, ordered by seed then pipeline regardless of completion order."""
    jobs = [(cfg, p, s) for s in sorted(cfg.seeds) for p in cfg.pipelines]
    if workers <= 1 or len(jobs) == 1:
        return [_run_job(j) for j in jobs]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, jobs))


def relocalization_trial(scene_cfg: SceneConfig, seed: int, noise_px=1.0, rot_deg=5.0, trans_m=0.2, frame=None):
    """Relocalise one keyframe against the ground-truth map.

    Returns ``(ape_points_only, ape_points_lines)`` in metres, both started
    from the same perturbed pose and using the same noisy measurements.
    """
    scene = generate_scene(scene_cfg, seed)
    obs = render_observations(scene, noise_px, 0.0, 0.0, seed + 7)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x2E10]))
    f = int(rng.integers(len(scene.poses))) if frame is None else frame
    gt = scene.poses[f]
    init = perturb_poses([PoseSE3.identity(), gt], rot_deg, trans_m, rng)[1]
    store = MapStore(scene.K)
    store.points = {i: X for i, X in enumerate(scene.points)}
    from .lines import pluecker_from_endpoints

    store.lines = {i: LineLandmark(pluecker_from_endpoints(S[1], S[0]), f) for i, S in enumerate(scene.lines)}
    pm = [(int(obs.p_id[k]), obs.p_uv[k]) for k in np.flatnonzero(obs.p_frame == f)]
    lm = [(int(obs.l_id[k]), obs.l_seg[k]) for k in np.flatnonzero(obs.l_frame == f)]
    out = []
    for matches in (lm[:0], lm):
        pose, _ = relocalize(store, pm, matches, init)
        out.append(float(np.linalg.norm(pose.center - gt.center)))
    return tuple(out)
