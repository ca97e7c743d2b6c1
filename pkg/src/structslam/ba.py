"""Robust bundle adjustment over keyframe poses, points and lines.

Levenberg-Marquardt with Huber-weighted Gauss-Newton normal equations.
Landmarks (points: 3 dof, lines: 4 dof orthonormal increments) are
marginalised with a Schur complement; the reduced pose system is solved
with a dense Cholesky factorisation.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.spatial.transform import Rotation

from .camera import CameraIntrinsics, PoseSE3, _left_jacobian, orthonormalize
from .errors import (
    BehindCamera,
    DegenerateProjection,
    DivergedSolve,
    GaugeUnderconstrained,
    InsufficientObservations,
)
from .jacobians import line_residuals, point_residuals
from .lines import (
    ImageLineSegment,
    OrthonormalLine,
    PlueckerLine,
    from_orthonormal,
    to_orthonormal,
    trim_endpoints,
)
from .mapstore import MapStore, Observation

log = logging.getLogger(__name__)

CHI2_2DOF_95 = 5.991


@dataclass(frozen=True)
class RobustKernel:
    """Huber kernel on the squared whitened residual ``s = e^T Omega e``."""

    delta: float = float(np.sqrt(CHI2_2DOF_95))

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("Huber delta must be positive")

    def rho(self, s):
        s = np.asarray(s, dtype=float)
        d2 = self.delta**2
        return np.where(s <= d2, s, 2.0 * self.delta * np.sqrt(np.maximum(s, d2)) - d2)

    def weight(self, s):
        s = np.asarray(s, dtype=float)
        return np.where(s <= self.delta**2, 1.0, self.delta / np.sqrt(np.maximum(s, self.delta**2)))


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 50
    rel_tol: float = 1e-8
    chi2: float = CHI2_2DOF_95
    trim_ratio: float = 0.1
    max_damping: float = 1e12
    cost_floor: float = 1e-20


@dataclass
class SolverReport:
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    cost_trace: list = field(default_factory=list)
    rejected_observations: list = field(default_factory=list)
    rejected_lines: list = field(default_factory=list)
    invalid_observations: list = field(default_factory=list)
    inliers: int = 0
    converged: bool = False

    def merge(self, other: "SolverReport") -> "SolverReport":
        self.iterations += other.iterations
        self.final_cost = other.final_cost
        self.cost_trace.extend(other.cost_trace[1:] if self.cost_trace else other.cost_trace)
        self.invalid_observations.extend(i for i in other.invalid_observations if i not in self.invalid_observations)
        self.converged = other.converged
        return self

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "cost_trace": list(self.cost_trace),
            "rejected_observations": sorted(self.rejected_observations),
            "rejected_lines": sorted(self.rejected_lines),
            "invalid_observations": sorted(self.invalid_observations),
            "inliers": self.inliers,
            "converged": self.converged,
        }


@dataclass
class BAProblem:
    K: CameraIntrinsics
    poses: dict[int, PoseSE3]
    points: dict[int, np.ndarray] = field(default_factory=dict)
    lines: dict[int, OrthonormalLine] = field(default_factory=dict)
    observations: list[Observation] = field(default_factory=list)
    fixed_poses: set = field(default_factory=set)
    fixed_landmarks: bool = False
    line_refs: dict[int, int] = field(default_factory=dict)

    @classmethod
    def from_map(cls, store: MapStore, window=None, fixed=None, fixed_landmarks=False) -> "BAProblem":
        """Problem over ``window`` keyframes (default: all) and the landmarks they observe.

        Keyframes outside the window that observe those landmarks enter as
        fixed poses.
        """
        window = set(store.keyframes) if window is None else set(window)
        obs_in = [o for o in store.observations if o.kf in window]
        pids = {o.landmark for o in obs_in if o.kind == "point" and o.landmark in store.points}
        lids = {o.landmark for o in obs_in if o.kind == "line" and o.landmark in store.lines}
        obs = [
            o
            for o in store.observations
            if (o.kind == "point" and o.landmark in pids) or (o.kind == "line" and o.landmark in lids)
        ]
        kfs = {o.kf for o in obs} | window
        fixed_set = set(fixed or ()) | (kfs - window)
        return cls(
            K=store.K,
            poses={k: store.keyframes[k] for k in sorted(kfs)},
            points={i: np.array(store.points[i], dtype=float) for i in sorted(pids)},
            lines={i: to_orthonormal(store.lines[i].pluecker) for i in sorted(lids)},
            observations=sorted(obs, key=lambda o: o.id),
            fixed_poses=fixed_set,
            fixed_landmarks=fixed_landmarks,
            line_refs={i: store.lines[i].ref_kf for i in sorted(lids)},
        )

    def write_back(self, store: MapStore, report: SolverReport | None = None) -> None:
        store.keyframes.update(self.poses)
        for i, X in self.points.items():
            if i in store.points:
                store.points[i] = X.copy()
        for i, O in self.lines.items():
            if i in store.lines:
                store.lines[i].pluecker = from_orthonormal(O)
        if report is not None:
            dropped = set(report.rejected_observations)
            store.observations = [o for o in store.observations if o.id not in dropped]
            for lid in report.rejected_lines:
                store.remove_line(lid)
            for lid in list(store.lines):
                try:
                    store.retrim(lid)
                except (BehindCamera, DegenerateProjection):
                    store.remove_line(lid)

    def pluecker(self, lid: int) -> PlueckerLine:
        return from_orthonormal(self.lines[lid])

    def observation(self, oid: int) -> Observation:
        for o in self.observations:
            if o.id == oid:
                return o
        raise KeyError(oid)


@dataclass
class _State:
    R: np.ndarray
    t: np.ndarray
    X: np.ndarray
    U: np.ndarray
    W: np.ndarray


def _whitener(info: np.ndarray) -> np.ndarray:
    # Omega = L L^T  ->  whitened residual L^T e
    return np.linalg.cholesky(info).T


def _rot2_batch(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def _fix_drift(Rs: np.ndarray) -> np.ndarray:
    eye = np.eye(Rs.shape[-1])
    drift = np.abs(np.swapaxes(Rs, -1, -2) @ Rs - eye).max(axis=(-1, -2))
    for i in np.flatnonzero(drift > 1e-12):
        Rs[i] = orthonormalize(Rs[i])
    return Rs


class _Packed:
    """Array view of a problem restricted to a set of active observations."""

    def __init__(self, problem: BAProblem, active: list[Observation], optimize_landmarks: bool):
        self.problem = problem
        self.K = problem.K
        self.pose_ids = sorted(problem.poses)
        pidx = {k: i for i, k in enumerate(self.pose_ids)}
        free = [k for k in self.pose_ids if k not in problem.fixed_poses]
        self.free_pose_ids = free
        pobs = [o for o in active if o.kind == "point"]
        lobs = [o for o in active if o.kind == "line"]
        self.point_ids = sorted({o.landmark for o in pobs})
        self.line_ids = sorted({o.landmark for o in lobs})
        xidx = {k: i for i, k in enumerate(self.point_ids)}
        lidx = {k: i for i, k in enumerate(self.line_ids)}
        self.pobs, self.lobs = pobs, lobs

        self.n_pose = 6 * len(free)
        self.n_pts = 3 * len(self.point_ids) if optimize_landmarks else 0
        self.n_lin = 4 * len(self.line_ids) if optimize_landmarks else 0
        self.n = self.n_pose + self.n_pts + self.n_lin
        self.dummy = self.n
        self.optimize_landmarks = optimize_landmarks

        pose_col = np.full(len(self.pose_ids), self.dummy)
        for s, k in enumerate(free):
            pose_col[pidx[k]] = 6 * s
        self.pose_col = pose_col

        self.p_kf = np.array([pidx[o.kf] for o in pobs], dtype=int)
        self.p_lm = np.array([xidx[o.landmark] for o in pobs], dtype=int)
        self.p_uv = np.array([o.meas for o in pobs], dtype=float).reshape(-1, 2)
        self.l_kf = np.array([pidx[o.kf] for o in lobs], dtype=int)
        self.l_lm = np.array([lidx[o.landmark] for o in lobs], dtype=int)
        self.l_seg = np.array([o.meas for o in lobs], dtype=float).reshape(-1, 2, 2)
        self.p_Lt = np.array([_whitener(o.info) for o in pobs]).reshape(-1, 2, 2)
        self.l_Lt = np.array([_whitener(o.info) for o in lobs]).reshape(-1, 2, 2)

        if optimize_landmarks:
            x_col = self.n_pose + 3 * np.arange(len(self.point_ids))
            l_col = self.n_pose + self.n_pts + 4 * np.arange(len(self.line_ids))
        else:
            x_col = np.full(len(self.point_ids), self.dummy)
            l_col = np.full(len(self.line_ids), self.dummy)
        self.p_cols = np.concatenate(
            [self.pose_col[self.p_kf][:, None] + np.arange(6), x_col[self.p_lm][:, None] + np.arange(3)], axis=1
        ) if len(pobs) else np.zeros((0, 9), dtype=int)
        self.l_cols = np.concatenate(
            [self.pose_col[self.l_kf][:, None] + np.arange(6), l_col[self.l_lm][:, None] + np.arange(4)], axis=1
        ) if len(lobs) else np.zeros((0, 10), dtype=int)
        # fixed blocks all scatter into the dummy slab
        self.p_cols = np.where(self.p_cols >= self.dummy, self.dummy + (self.p_cols - self.dummy) % 6, self.p_cols)
        self.l_cols = np.where(self.l_cols >= self.dummy, self.dummy + (self.l_cols - self.dummy) % 6, self.l_cols)

    def state(self) -> _State:
        pr = self.problem
        R = np.array([pr.poses[k].rotation for k in self.pose_ids]).reshape(-1, 3, 3)
        t = np.array([pr.poses[k].translation for k in self.pose_ids]).reshape(-1, 3)
        X = np.array([pr.points[k] for k in self.point_ids], dtype=float).reshape(-1, 3)
        U = np.array([pr.lines[k].U for k in self.line_ids]).reshape(-1, 3, 3)
        W = np.array([pr.lines[k].W for k in self.line_ids]).reshape(-1, 2, 2)
        return _State(R, t, X, U, W)

    def store(self, s: _State) -> None:
        pr = self.problem
        for i, k in enumerate(self.pose_ids):
            if k not in pr.fixed_poses:
                pr.poses[k] = PoseSE3(s.R[i], s.t[i])
        if self.optimize_landmarks:
            for i, k in enumerate(self.point_ids):
                pr.points[k] = s.X[i].copy()
            for i, k in enumerate(self.line_ids):
                pr.lines[k] = OrthonormalLine(s.U[i], s.W[i])

    def residuals(self, s: _State, jac=False):
        out = {}
        if len(self.pobs):
            e, z, Jp, Jx = point_residuals(
                s.R[self.p_kf], s.t[self.p_kf], s.X[self.p_lm], self.K, self.p_uv, with_jacobians=jac
            )
            ew = np.einsum("nij,nj->ni", self.p_Lt, e)
            out["point"] = (ew, z, None if Jp is None else self.p_Lt @ np.concatenate([Jp, Jx], axis=2))
        if len(self.lobs):
            e, mcn, Jp, Jl = line_residuals(
                s.R[self.l_kf], s.t[self.l_kf], s.U[self.l_lm], s.W[self.l_lm], self.l_seg, self.K, with_jacobians=jac
            )
            ew = np.einsum("nij,nj->ni", self.l_Lt, e)
            out["line"] = (ew, mcn, None if Jp is None else self.l_Lt @ np.concatenate([Jp, Jl], axis=2))
        return out

    def cost(self, s: _State, kernel: RobustKernel | None) -> float:
        total = 0.0
        for kind, (ew, aux, _) in self.residuals(s).items():
            if kind == "point" and np.any(aux <= 1e-9):
                return np.inf
            if not np.all(np.isfinite(ew)):
                return np.inf
            sq = np.einsum("ni,ni->n", ew, ew)
            total += float(np.sum(kernel.rho(sq) if kernel else sq))
        return total

    def normal_equations(self, s: _State, kernel: RobustKernel | None):
        size = self.n + 6
        H = np.zeros((size, size))
        g = np.zeros(size)
        for kind, (ew, _, J) in self.residuals(s, jac=True).items():
            cols = self.p_cols if kind == "point" else self.l_cols
            sq = np.einsum("ni,ni->n", ew, ew)
            w = kernel.weight(sq) if kernel else np.ones_like(sq)
            JtJ = np.einsum("nki,nkj->nij", J, J) * w[:, None, None]
            Jte = np.einsum("nki,nk->ni", J, ew) * w[:, None]
            np.add.at(H, (cols[:, :, None], cols[:, None, :]), JtJ)
            np.add.at(g, cols, Jte)
        return H[: self.n, : self.n], g[: self.n]

    def solve(self, H, g, lam):
        """Damped step via Schur complement on the pose block."""
        npo = self.n_pose
        nx, nl = self.n_pts, self.n_lin
        Hd = H + lam * np.eye(self.n)
        if nx + nl == 0:
            c = cho_factor(Hd)
            return cho_solve(c, -g)
        Hpp = Hd[:npo, :npo]
        Hpl = Hd[:npo, npo:]
        gp, gl = g[:npo], g[npo:]
        inv = np.zeros((nx + nl, nx + nl))
        if nx:
            idx = npo + np.arange(nx).reshape(-1, 3)
            blocks = Hd[idx[:, :, None], idx[:, None, :]]
            ib = np.linalg.inv(blocks)
            loc = idx - npo
            inv[loc[:, :, None], loc[:, None, :]] = ib
        if nl:
            idx = npo + nx + np.arange(nl).reshape(-1, 4)
            blocks = Hd[idx[:, :, None], idx[:, None, :]]
            ib = np.linalg.inv(blocks)
            loc = idx - npo
            inv[loc[:, :, None], loc[:, None, :]] = ib
        if npo:
            Y = Hpl @ inv
            S = Hpp - Y @ Hpl.T
            c = cho_factor(S)
            dp = cho_solve(c, -gp + Y @ gl)
            dl = inv @ (-gl - Hpl.T @ dp)
            return np.concatenate([dp, dl])
        return inv @ (-gl)

    def retract(self, s: _State, delta: np.ndarray) -> _State:
        R, t = s.R.copy(), s.t.copy()
        if self.n_pose:
            dp = delta[: self.n_pose].reshape(-1, 6)
            idx = np.array([self.pose_ids.index(k) for k in self.free_pose_ids])
            dR = Rotation.from_rotvec(dp[:, :3]).as_matrix()
            V = np.array([_left_jacobian(w) for w in dp[:, :3]])
            R[idx] = _fix_drift(dR @ R[idx])
            t[idx] = np.einsum("nij,nj->ni", dR, t[idx]) + np.einsum("nij,nj->ni", V, dp[:, 3:])
        X, U, W = s.X, s.U, s.W
        if self.n_pts:
            X = s.X + delta[self.n_pose : self.n_pose + self.n_pts].reshape(-1, 3)
        if self.n_lin:
            dl = delta[self.n_pose + self.n_pts :].reshape(-1, 4)
            U = _fix_drift(s.U @ Rotation.from_rotvec(dl[:, :3]).as_matrix())
            W = _fix_drift(s.W @ _rot2_batch(dl[:, 3]))
        return _State(R, t, X, U, W)


def _valid_observations(problem: BAProblem, candidates: list[Observation]) -> tuple[list, list]:
    """Split observations into usable ones and ids failing cheirality/degeneracy."""
    good, bad = [], []
    for o in candidates:
        pose = problem.poses[o.kf]
        if o.kind == "point":
            if pose.apply(problem.points[o.landmark])[2] <= 1e-9:
                bad.append(o.id)
                continue
        else:
            L = problem.pluecker(o.landmark)
            mc = pose.rotation @ L.m + np.cross(pose.translation, pose.rotation @ L.d)
            if np.linalg.norm(mc) <= 1e-12:
                bad.append(o.id)
                continue
        good.append(o)
    return good, bad


def _levenberg_marquardt(problem, active, kernel, config: SolverConfig, optimize_landmarks=True) -> SolverReport:
    packed = _Packed(problem, active, optimize_landmarks)
    s = packed.state()
    cost = packed.cost(s, kernel)
    rep = SolverReport(initial_cost=cost, final_cost=cost, cost_trace=[cost])
    if not np.isfinite(cost):
        raise DivergedSolve("initial cost is not finite")
    if packed.n == 0 or cost <= config.cost_floor:
        rep.converged = True
        return rep
    lam = None
    accepted_any = False
    for _ in range(config.max_iters):
        H, g = packed.normal_equations(s, kernel)
        if lam is None:
            lam = 1e-4 * max(float(np.max(np.diag(H))), 1e-12)
        if np.max(np.abs(g)) <= 1e-14 * max(1.0, cost):
            rep.converged = True
            break
        predicted = None
        while True:
            try:
                delta = packed.solve(H, g, lam)
                if predicted is None:
                    # decrease of the local quadratic model for the least-damped step
                    predicted = float(-2.0 * g @ delta - delta @ H @ delta)
                s_new = packed.retract(s, delta)
                new_cost = packed.cost(s_new, kernel)
            except np.linalg.LinAlgError:
                new_cost = np.inf
            if new_cost < cost:
                lam = max(lam / 10.0, 1e-300)
                break
            lam *= 10.0
            if lam > config.max_damping:
                break
        if lam > config.max_damping:
            # a start that is already stationary (model decrease at round-off
            # level) is converged, not diverged
            stationary = predicted is not None and predicted <= 1e-9 * cost
            if not accepted_any and cost > config.cost_floor and not stationary:
                raise DivergedSolve(f"damping exceeded {config.max_damping:g} without progress")
            rep.converged = True
            break
        accepted_any = True
        rel = (cost - new_cost) / cost
        s, cost = s_new, new_cost
        rep.iterations += 1
        rep.cost_trace.append(cost)
        if rel < config.rel_tol or cost <= config.cost_floor:
            rep.converged = True
            break
    packed.store(s)
    rep.final_cost = cost
    return rep


def residuals(problem: BAProblem, observations=None) -> dict[int, np.ndarray]:
    """Raw (unwhitened) residual per observation id, in observation-id order."""
    out = {}
    for o in sorted(observations or problem.observations, key=lambda o: o.id):
        pose = problem.poses[o.kf]
        if o.kind == "point":
            e, z, _, _ = point_residuals(
                pose.rotation[None], pose.translation[None], problem.points[o.landmark][None], problem.K, o.meas[None], False
            )
            if z[0] <= 1e-9:
                raise BehindCamera(f"observation {o.id}")
        else:
            O = problem.lines[o.landmark]
            e, _, _, _ = line_residuals(
                pose.rotation[None], pose.translation[None], O.U[None], O.W[None], o.meas[None], problem.K, False
            )
        out[o.id] = e[0]
    return out


def stacked_residuals(problem: BAProblem) -> np.ndarray:
    r = residuals(problem)
    return np.concatenate([r[k] for k in sorted(r)]) if r else np.zeros(0)


def robust_cost(problem: BAProblem, kernel: RobustKernel | None = RobustKernel()) -> float:
    total = 0.0
    for o in problem.observations:
        e = residuals(problem, [o])[o.id]
        sq = float(e @ o.info @ e)
        total += float(kernel.rho(sq)) if kernel else sq
    return total


def point_jacobians(problem: BAProblem, obs: Observation):
    pose = problem.poses[obs.kf]
    _, z, Jp, Jx = point_residuals(
        pose.rotation[None], pose.translation[None], problem.points[obs.landmark][None], problem.K, obs.meas[None]
    )
    if z[0] <= 1e-9:
        raise BehindCamera(f"observation {obs.id}")
    return Jx[0], Jp[0]


def line_jacobians(problem: BAProblem, obs: Observation):
    pose = problem.poses[obs.kf]
    O = problem.lines[obs.landmark]
    e, mcn, Jp, Jl = line_residuals(
        pose.rotation[None], pose.translation[None], O.U[None], O.W[None], obs.meas[None], problem.K
    )
    if mcn[0] <= 1e-12 or not np.all(np.isfinite(e)):
        raise DegenerateProjection(f"observation {obs.id}")
    return Jl[0], Jp[0]


def _chi2(problem: BAProblem, obs: Observation) -> float:
    e = residuals(problem, [obs])[obs.id]
    return float(e @ obs.info @ e)


def _median_depths(problem: BAProblem, active) -> dict[int, float]:
    depths: dict[int, list] = {}
    for o in active:
        if o.kind == "point":
            z = problem.poses[o.kf].apply(problem.points[o.landmark])[2]
            if z > 0:
                depths.setdefault(o.kf, []).append(z)
    return {k: float(np.median(v)) for k, v in depths.items()}


def _reference_segments(problem: BAProblem, active) -> dict[int, tuple[int, ImageLineSegment]]:
    refs = {}
    for o in sorted(active, key=lambda o: o.id):
        if o.kind != "line":
            continue
        want = problem.line_refs.get(o.landmark)
        if o.landmark in refs and refs[o.landmark][0] == want:
            continue
        if o.landmark not in refs or o.kf == want:
            refs[o.landmark] = (o.kf, ImageLineSegment.from_array(o.meas))
    return refs


def _trim_all(problem: BAProblem, refs) -> dict[int, object]:
    out = {}
    for lid, (kf, seg) in refs.items():
        try:
            out[lid] = trim_endpoints(problem.pluecker(lid), seg, problem.poses[kf], problem.K)
        except (BehindCamera, DegenerateProjection):
            out[lid] = None
    return out


def _gate(problem, active, refs, before, config: SolverConfig):
    """Observations failing the chi-square test and lines failing the trimming test."""
    bad_obs = [o.id for o in active if _chi2(problem, o) > config.chi2]
    depth = _median_depths(problem, active)
    fallback = float(np.median(list(depth.values()))) if depth else 1.0
    after = _trim_all(problem, refs)
    bad_lines = []
    for lid, (kf, _) in refs.items():
        a, b = before.get(lid), after.get(lid)
        if b is None:
            bad_lines.append(lid)
            continue
        if a is None:
            continue
        z = depth.get(kf, fallback)
        shift = max(np.linalg.norm(b.start - a.start), np.linalg.norm(b.end - a.end))
        if shift >= config.trim_ratio * z:
            bad_lines.append(lid)
    return bad_obs, bad_lines


def solve_bundle(problem: BAProblem, kernel: RobustKernel | None = RobustKernel(), config: SolverConfig | None = None) -> SolverReport:
    """One robust LM pass over all free poses and landmarks, without gating."""
    config = config or SolverConfig()
    if not (problem.fixed_poses & set(problem.poses)) and not problem.fixed_landmarks:
        raise GaugeUnderconstrained("bundle adjustment needs at least one fixed keyframe")
    active, bad = _valid_observations(problem, problem.observations)
    rep = _levenberg_marquardt(problem, active, kernel, config, optimize_landmarks=not problem.fixed_landmarks)
    rep.invalid_observations = bad
    rep.inliers = len(active)
    return rep


def solve_motion_only(problem: BAProblem, kernel: RobustKernel | None = RobustKernel(), max_iters: int = 50, config=None) -> SolverReport:
    """Optimise the free pose(s) with every landmark held fixed."""
    config = config or SolverConfig(max_iters=max_iters)
    active, bad = _valid_observations(problem, problem.observations)
    if len(active) < 4:
        raise InsufficientObservations(f"{len(active)} usable observations, need 4")
    rep = _levenberg_marquardt(problem, active, kernel, config, optimize_landmarks=False)
    rep.invalid_observations = bad
    rep.inliers = len(active)
    return rep


def solve_local_ba(
    problem: BAProblem,
    kernel: RobustKernel | None = RobustKernel(),
    config: SolverConfig | None = None,
    between_rounds=None,
) -> SolverReport:
    """Two-round local BA with chi-square and endpoint-trimming outlier rejection.

    ``between_rounds(problem)`` runs after the first round's rejections,
    before the second round (used for the point-on-plane projection).
    """
    config = config or SolverConfig()
    if not (problem.fixed_poses & set(problem.poses)):
        raise GaugeUnderconstrained("local BA needs at least one fixed keyframe")
    active, bad = _valid_observations(problem, problem.observations)
    refs = _reference_segments(problem, active)
    before = _trim_all(problem, refs)

    report = _levenberg_marquardt(problem, active, kernel, config)
    report.invalid_observations = list(bad)
    rejected_obs: set = set()
    rejected_lines: set = set()
    for rnd in range(2):
        bo, bl = _gate(problem, active, refs, before, config)
        rejected_obs.update(bo)
        rejected_lines.update(bl)
        active = [
            o for o in active if o.id not in rejected_obs and not (o.kind == "line" and o.landmark in rejected_lines)
        ]
        refs = {k: v for k, v in refs.items() if k not in rejected_lines}
        if rnd == 0:
            if between_rounds is not None:
                between_rounds(problem)
            report.merge(_levenberg_marquardt(problem, active, kernel, config))
    report.rejected_observations = sorted(rejected_obs)
    report.rejected_lines = sorted(rejected_lines)
    report.inliers = len(active)
    log.debug("local BA: %d iterations, %d obs rejected, %d lines culled",
              report.iterations, len(rejected_obs), len(rejected_lines))
    return report


def relocalize(
    store: MapStore,
    point_matches,
    line_matches,
    init: PoseSE3,
    kernel: RobustKernel | None = RobustKernel(),
    max_iters: int = 50,
    config: SolverConfig | None = None,
):
    """Refine a camera pose against the map from 3D-2D point and line matches.

    ``point_matches``: iterable of ``(point_id, uv)``; ``line_matches``:
    iterable of ``(line_id, segment (2,2))``.  Returns ``(pose, report)``;
    ``report.inliers`` counts matches surviving the chi-square gate.
    """
    config = config or SolverConfig(max_iters=max_iters)
    point_matches, line_matches = list(point_matches), list(line_matches)
    if len(point_matches) + len(line_matches) < 4:
        raise InsufficientObservations("need at least 4 point/line matches")
    obs, pts, lns = [], {}, {}
    for pid, uv in point_matches:
        pts[pid] = np.asarray(store.points[pid], dtype=float)
        obs.append(Observation(len(obs), 0, pid, "point", uv))
    for lid, seg in line_matches:
        lns[lid] = to_orthonormal(store.lines[lid].pluecker)
        obs.append(Observation(len(obs), 0, lid, "line", seg))
    problem = BAProblem(store.K, {0: init}, pts, lns, obs, fixed_landmarks=True)
    active, bad = _valid_observations(problem, obs)
    if len(active) < 4:
        raise InsufficientObservations("fewer than 4 matches in front of the initial pose")
    report = _levenberg_marquardt(problem, active, kernel, config, optimize_landmarks=False)
    report.invalid_observations = bad
    # re-admit everything once the pose is close, then gate
    active, bad = _valid_observations(problem, obs)
    inl = [o for o in active if _chi2(problem, o) <= config.chi2]
    if len(inl) >= 4:
        report.merge(_levenberg_marquardt(problem, inl, kernel, config, optimize_landmarks=False))
        inl = [o for o in active if _chi2(problem, o) <= config.chi2]
    report.rejected_observations = sorted(o.id for o in obs if o not in inl)
    report.inliers = len(inl)
    return problem.poses[0], report


def triangulate_point(poses: list[PoseSE3], uvs, K: CameraIntrinsics) -> np.ndarray:
    """Linear multi-view triangulation (homogeneous DLT)."""
    from .camera import projection_matrix

    uvs = np.asarray(uvs, dtype=float).reshape(-1, 2)
    if len(poses) < 2 or len(poses) != len(uvs):
        raise InsufficientObservations("need at least two views")
    rows = []
    for pose, (u, v) in zip(poses, uvs):
        P = projection_matrix(pose, K)
        rows.append(u * P[2] - P[0])
        rows.append(v * P[2] - P[1])
    A = np.array(rows)
    A /= np.linalg.norm(A, axis=1, keepdims=True)
    _, _, Vt = np.linalg.svd(A)
    Xh = Vt[-1]
    if abs(Xh[3]) < 1e-12:
        raise DegenerateProjection("point at infinity")
    return Xh[:3] / Xh[3]


def dlt_pnp(X, uv, K: CameraIntrinsics) -> PoseSE3:
    """Pose from at least six 3D-2D correspondences by normalised DLT."""
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    uv = np.asarray(uv, dtype=float).reshape(-1, 2)
    if len(X) < 6:
        raise InsufficientObservations("DLT needs at least 6 correspondences")
    xn = (np.linalg.inv(K.matrix) @ np.column_stack([uv, np.ones(len(uv))]).T).T
    mu = X.mean(axis=0)
    sc = np.sqrt(3.0) / max(np.mean(np.linalg.norm(X - mu, axis=1)), 1e-12)
    T = np.eye(4)
    T[:3, :3] *= sc
    T[:3, 3] = -sc * mu
    Xh = (T @ np.column_stack([X, np.ones(len(X))]).T).T
    A = np.zeros((2 * len(X), 12))
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -xn[:, [0]] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -xn[:, [1]] * Xh
    _, _, Vt = np.linalg.svd(A)
    P = Vt[-1].reshape(3, 4) @ T
    M = P[:, :3]
    U, S, Vt2 = np.linalg.svd(M)
    R = U @ Vt2
    scale = S.mean()
    if np.linalg.det(R) < 0:
        R, scale = -R, -scale
    t = P[:, 3] / scale
    pose = PoseSE3(R, t)
    if np.median(pose.apply(X)[:, 2]) < 0:
        raise DegenerateProjection("DLT pose places points behind the camera")
    return pose
