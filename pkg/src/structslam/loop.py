"""Similarity transforms, Sim(3) pose-graph optimisation and map correction."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .camera import PoseSE3, orthonormalize, rotation_drift, skew, so3_exp, so3_log
from .errors import DegenerateProjection, BehindCamera, MissingReference, Underconstrained
from .lines import PlueckerLine
from .mapstore import MapStore

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Sim3Transform:
    """``X -> s R X + t``."""

    s: float
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        s = float(self.s)
        if not (np.isfinite(s) and s > 0):
            raise ValueError(f"Sim3 scale must be positive, got {s}")
        R = np.array(self.R, dtype=float).reshape(3, 3)
        if rotation_drift(R) > 1e-12 or np.linalg.det(R) < 0:
            R = orthonormalize(R)
        t = np.array(self.t, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Sim3Transform":
        return cls(1.0, np.eye(3), np.zeros(3))

    @classmethod
    def from_pose(cls, pose: PoseSE3, s: float = 1.0) -> "Sim3Transform":
        """Similarity ``s * T`` for a rigid pose ``T``."""
        return cls(s, pose.rotation, s * pose.translation)

    def to_pose(self) -> PoseSE3:
        """Rigid pose ``(R, t / s)`` carried by a keyframe similarity."""
        return PoseSE3(self.R, self.t / self.s)

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return self.s * X @ self.R.T + self.t

    def compose(self, other: "Sim3Transform") -> "Sim3Transform":
        """``self * other`` (``other`` applied first)."""
        return Sim3Transform(self.s * other.s, self.R @ other.R, self.s * self.R @ other.t + self.t)

    __matmul__ = compose

    def inverse(self) -> "Sim3Transform":
        Rt = self.R.T
        return Sim3Transform(1.0 / self.s, Rt, -Rt @ self.t / self.s)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.s * self.R
        M[:3, 3] = self.t
        return M

    def line_matrix(self) -> np.ndarray:
        return sim3_line_matrix(self)

    def log(self) -> np.ndarray:
        """Decoupled 7-vector ``(log R, t, log s)``."""
        return np.concatenate([so3_log(self.R), self.t, [np.log(self.s)]])

    @classmethod
    def exp(cls, v) -> "Sim3Transform":
        v = np.asarray(v, dtype=float)
        return cls(np.exp(v[6]), so3_exp(v[:3]), v[3:6])

    def allclose(self, other: "Sim3Transform", atol=1e-9) -> bool:
        return (
            abs(self.s - other.s) <= atol
            and np.allclose(self.R, other.R, atol=atol)
            and np.allclose(self.t, other.t, atol=atol)
        )


def sim3_apply_point(S: Sim3Transform, X) -> np.ndarray:
    return S.apply(X)


def sim3_line_matrix(S: Sim3Transform) -> np.ndarray:
    M = np.zeros((6, 6))
    M[:3, :3] = S.s * S.R
    M[:3, 3:] = skew(S.t) @ S.R
    M[3:, 3:] = S.R
    return M


def sim3_apply_line(S: Sim3Transform, L: PlueckerLine) -> PlueckerLine:
    return PlueckerLine.from_vector(sim3_line_matrix(S) @ L.vector)


@dataclass
class PoseGraph:
    """Keyframe similarities with relative constraints.

    An edge ``(i, j, Z, w)`` measures ``Z ~ S_i S_j^{-1}``; its residual is
    ``sqrt(w) * log(Z S_j S_i^{-1})``.
    """

    nodes: dict[int, Sim3Transform]
    edges: list[tuple[int, int, Sim3Transform, float]] = field(default_factory=list)
    fixed: set = field(default_factory=set)

    def add_edge(self, i: int, j: int, Z: Sim3Transform, weight: float = 1.0) -> None:
        if i not in self.nodes or j not in self.nodes:
            raise KeyError(f"edge ({i}, {j}) references an unknown node")
        if not weight > 0:
            raise ValueError("edge weight must be positive")
        self.edges.append((i, j, Z, float(weight)))

    def is_connected(self) -> bool:
        if not self.nodes:
            return False
        adj: dict[int, set] = {k: set() for k in self.nodes}
        for i, j, _, _ in self.edges:
            adj[i].add(j)
            adj[j].add(i)
        start = next(iter(self.nodes))
        seen, stack = {start}, [start]
        while stack:
            for n in adj[stack.pop()]:
                if n not in seen:
                    seen.add(n)
                    stack.append(n)
        return len(seen) == len(self.nodes)


def edge_residual(Z: Sim3Transform, Si: Sim3Transform, Sj: Sim3Transform) -> np.ndarray:
    return (Z @ Sj @ Si.inverse()).log()


def pose_graph_cost(graph: PoseGraph, nodes=None) -> float:
    nodes = graph.nodes if nodes is None else nodes
    total = 0.0
    for i, j, Z, w in graph.edges:
        r = edge_residual(Z, nodes[i], nodes[j])
        total += w * float(r @ r)
    return total


@dataclass
class PoseGraphReport:
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    cost_trace: list = field(default_factory=list)
    converged: bool = False


def _edge_jacobians(Z, Si, Sj, h=1e-6):
    """Central-difference Jacobians of one edge residual w.r.t. left increments."""
    Ji = np.empty((7, 7))
    Jj = np.empty((7, 7))
    for k in range(7):
        e = np.zeros(7)
        e[k] = h
        Ep, Em = Sim3Transform.exp(e), Sim3Transform.exp(-e)
        Ji[:, k] = (edge_residual(Z, Ep @ Si, Sj) - edge_residual(Z, Em @ Si, Sj)) / (2 * h)
        Jj[:, k] = (edge_residual(Z, Si, Ep @ Sj) - edge_residual(Z, Si, Em @ Sj)) / (2 * h)
    return Ji, Jj


def optimize_pose_graph(graph: PoseGraph, max_iters: int = 50, tol: float = 1e-12):
    """Damped Gauss-Newton over the free node similarities.

    Returns ``(nodes, report)``; ``graph`` is not modified.
    """
    if not (graph.fixed & set(graph.nodes)):
        raise Underconstrained("pose graph needs at least one fixed node")
    if not graph.is_connected():
        raise Underconstrained("pose graph is not connected")
    free = [k for k in sorted(graph.nodes) if k not in graph.fixed]
    col = {k: 7 * i for i, k in enumerate(free)}
    nodes = dict(graph.nodes)
    cost = pose_graph_cost(graph, nodes)
    rep = PoseGraphReport(initial_cost=cost, final_cost=cost, cost_trace=[cost])
    n = 7 * len(free)
    if n == 0 or cost <= 1e-30:
        rep.converged = True
        return nodes, rep
    lam = 1e-9
    for _ in range(max_iters):
        H = np.zeros((n, n))
        g = np.zeros(n)
        for i, j, Z, w in graph.edges:
            r = edge_residual(Z, nodes[i], nodes[j])
            Ji, Jj = _edge_jacobians(Z, nodes[i], nodes[j])
            blocks = [(col.get(i), Ji), (col.get(j), Jj)]
            for ca, Ja in blocks:
                if ca is None:
                    continue
                g[ca : ca + 7] += w * Ja.T @ r
                for cb, Jb in blocks:
                    if cb is not None:
                        H[ca : ca + 7, cb : cb + 7] += w * Ja.T @ Jb
        while True:
            try:
                delta = cho_solve(cho_factor(H + lam * np.diag(np.diag(H) + 1e-12)), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            trial = dict(nodes)
            for k in free:
                trial[k] = Sim3Transform.exp(delta[col[k] : col[k] + 7]) @ nodes[k]
            new_cost = pose_graph_cost(graph, trial)
            if new_cost <= cost:
                lam = max(lam / 10, 1e-12)
                break
            lam *= 10
            if lam > 1e12:
                rep.converged = True
                rep.final_cost = cost
                return nodes, rep
        rel = (cost - new_cost) / max(cost, 1e-300)
        nodes, cost = trial, new_cost
        rep.iterations += 1
        rep.cost_trace.append(cost)
        if rel < tol or cost <= 1e-30:
            rep.converged = True
            break
    rep.final_cost = cost
    log.debug("pose graph: %d iterations, cost %.3e -> %.3e", rep.iterations, rep.initial_cost, cost)
    return nodes, rep


def build_loop_graph(poses: dict[int, PoseSE3], loop: tuple[int, int, Sim3Transform], chain_weight=1.0, loop_weight=10.0):
    """Chain-plus-loop graph from estimated keyframe poses; the first keyframe is fixed.

    ``loop = (i, j, Z)`` with ``Z ~ S_i S_j^{-1}``.
    """
    ids = sorted(poses)
    nodes = {k: Sim3Transform.from_pose(poses[k]) for k in ids}
    g = PoseGraph(nodes, fixed={ids[0]})
    for a, b in zip(ids[:-1], ids[1:]):
        g.add_edge(a, b, nodes[a] @ nodes[b].inverse(), chain_weight)
    i, j, Z = loop
    g.add_edge(i, j, Z, loop_weight)
    return g


def estimate_loop_sim3(store: MapStore, i: int, j: int, min_matches: int = 3) -> Sim3Transform:
    """``Z ~ S_i S_j^{-1}`` from the point landmarks seen by both keyframes.

    Aligns the landmarks' coordinates in camera ``j`` onto those in camera
    ``i`` (Umeyama with scale), as a 3D-3D loop detector would.
    """
    from .metrics import umeyama_align

    seen_i = {o.landmark for o in store.observations if o.kind == "point" and o.kf == i}
    seen_j = {o.landmark for o in store.observations if o.kind == "point" and o.kf == j}
    common = sorted((seen_i & seen_j) & set(store.points))
    if len(common) < min_matches:
        raise Underconstrained(f"only {len(common)} shared landmarks between keyframes {i} and {j}")
    X = np.array([store.points[k] for k in common])
    return umeyama_align(store.keyframes[j].apply(X), store.keyframes[i].apply(X), with_scale=True)


def correct_map(store: MapStore, corrections: dict[int, tuple[Sim3Transform, Sim3Transform]]) -> MapStore:
    """Re-express keyframes and landmarks after a similarity correction.

    ``corrections[kf] = (S_old, S_new)``.  Landmarks move with their
    reference keyframe via ``S_new^{-1} S_old``.  Lines whose endpoints can no
    longer be trimmed keep their infinite-line state with ``endpoints=None``.
    """
    for pid in store.points:
        if store.point_refs.get(pid) not in corrections:
            raise MissingReference(f"point {pid} has no corrected reference keyframe")
    for lid, lm in store.lines.items():
        if lm.ref_kf not in corrections:
            raise MissingReference(f"line {lid} has no corrected reference keyframe")
    maps = {k: S_new.inverse() @ S_old for k, (S_old, S_new) in corrections.items()}
    for pid, X in store.points.items():
        store.points[pid] = maps[store.point_refs[pid]].apply(X)
    for lm in store.lines.values():
        lm.pluecker = sim3_apply_line(maps[lm.ref_kf], lm.pluecker)
    for k, (_, S_new) in corrections.items():
        if k in store.keyframes:
            store.keyframes[k] = S_new.to_pose()
    for lid in list(store.lines):
        try:
            store.retrim(lid)
        except (BehindCamera, DegenerateProjection):
            store.lines[lid].endpoints = None
    return store


def fuse_duplicate_points(store: MapStore, eps: float) -> dict[int, int]:
    """Merge point landmarks closer than ``eps``; returns ``{removed: kept}``.

    The lower id survives and inherits the observations of the other.
    """
    ids = sorted(store.points)
    if len(ids) < 2:
        return {}
    from scipy.spatial import cKDTree

    P = np.array([store.points[i] for i in ids])
    merged: dict[int, int] = {}
    for a, b in sorted(cKDTree(P).query_pairs(eps)):
        keep = merged.get(ids[a], ids[a])
        drop = ids[b]
        if drop in merged or drop == keep:
            continue
        merged[drop] = keep
    for drop, keep in merged.items():
        for o in store.observations:
            if o.kind == "point" and o.landmark == drop:
                o.landmark = keep
        store.points.pop(drop, None)
        store.point_refs.pop(drop, None)
        for k, pl in list(store.planes.items()):
            if drop in pl.member_ids:
                store.planes[k] = pl.with_members((pl.member_ids - {drop}) | {keep})
    return merged
