"""Infinite-plane landmarks and spatially coherent plane fitting.

Plane hypotheses are verified with a binary labelling energy: a 0/1 unary
term (inlier within ``eps_d`` or outlier beyond it) plus a Potts penalty
``lam`` on every neighbourhood-graph edge whose endpoints disagree.  The
energy is submodular, so the optimal labelling for a fixed plane is an s-t
minimum cut.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import breadth_first_order, maximum_flow
from scipy.spatial import cKDTree

from .errors import DegenerateConfiguration, NoModelFound

# capacities are quantised to integers for the max-flow solver
FLOW_SCALE = 1_000_000


@dataclass(frozen=True, eq=False)
class Plane3:
    n: np.ndarray
    d: float
    member_ids: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        n = np.asarray(self.n, dtype=float).reshape(3)
        norm = np.linalg.norm(n)
        if norm == 0 or not np.isfinite(self.d):
            raise ValueError("invalid plane")
        object.__setattr__(self, "n", n / norm)
        object.__setattr__(self, "d", float(self.d) / norm)
        object.__setattr__(self, "member_ids", frozenset(self.member_ids))

    @property
    def vector(self) -> np.ndarray:
        return np.append(self.n, self.d)

    def flipped(self) -> "Plane3":
        return Plane3(-self.n, -self.d, self.member_ids)

    def with_members(self, ids) -> "Plane3":
        return Plane3(self.n, self.d, ids)


@dataclass(frozen=True)
class GeometricThresholds:
    eps_d: float = 0.02
    T_theta: float = 0.8
    T_d: float = 0.04
    eps_Pi: float = 0.01
    lam: float = 0.6
    max_hypotheses: int = 200
    min_inliers: int = 20

    def __post_init__(self):
        if not self.eps_d > 0:
            raise ValueError("eps_d must be positive")
        if not 0 < self.T_theta < 1:
            raise ValueError("T_theta must lie in (0, 1)")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")

    @property
    def radius(self) -> float:
        return 2.0 * self.eps_d


@dataclass(frozen=True, eq=False)
class NeighborhoodGraph:
    vertices: np.ndarray
    edges: np.ndarray  # (E, 2) int, i < j

    @property
    def n(self) -> int:
        return len(self.vertices)


def point_plane_distance(v, pi) -> float | np.ndarray:
    if isinstance(pi, Plane3):
        n, d = pi.n, pi.d
    else:
        n, d = np.asarray(pi[:3], dtype=float), float(pi[3])
    v = np.asarray(v, dtype=float)
    return np.abs(v @ n + d) / np.linalg.norm(n)


def fit_plane_svd(points) -> Plane3:
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(P) < 3:
        raise DegenerateConfiguration("need at least three points")
    c = P.mean(axis=0)
    _, s, Vt = np.linalg.svd(P - c, full_matrices=False)
    if s[1] < 1e-12 * s[0] or s[0] == 0:
        raise DegenerateConfiguration("points are collinear")
    n = Vt[2]
    return Plane3(n, -n @ c)


def plane_from_three(a, b, c) -> Plane3 | None:
    n = np.cross(b - a, c - a)
    norm = np.linalg.norm(n)
    if norm < 1e-12 * max(np.linalg.norm(b - a) * np.linalg.norm(c - a), 1e-300):
        return None
    n = n / norm
    return Plane3(n, -n @ a)


def build_neighborhood_graph(points, r: float) -> NeighborhoodGraph:
    if not r > 0:
        raise ValueError("radius must be positive")
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(P) < 2:
        return NeighborhoodGraph(P, np.zeros((0, 2), dtype=int))
    pairs = cKDTree(P).query_pairs(r, output_type="ndarray")
    if len(pairs):
        # fixed edge order keeps RANSAC runs reproducible
        pairs = np.sort(pairs, axis=1)
        pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
    return NeighborhoodGraph(P, pairs.astype(int).reshape(-1, 2))


def unary_costs(dist: np.ndarray, eps_d: float) -> tuple[np.ndarray, np.ndarray]:
    """Costs of labelling each vertex outlier (0) and inlier (1)."""
    near = dist < eps_d
    return near.astype(float), (~near).astype(float)


def labeling_energy(labels, pi: Plane3, graph: NeighborhoodGraph, th: GeometricThresholds) -> float:
    labels = np.asarray(labels).astype(bool)
    if len(labels) != graph.n:
        raise ValueError("labels must cover every vertex")
    dist = point_plane_distance(graph.vertices, pi)
    cost0, cost1 = unary_costs(dist, th.eps_d)
    unary = np.where(labels, cost1, cost0).sum()
    if len(graph.edges):
        cut = np.count_nonzero(labels[graph.edges[:, 0]] != labels[graph.edges[:, 1]])
    else:
        cut = 0
    return float(unary + th.lam * cut)


def graphcut_labels(pi: Plane3, graph: NeighborhoodGraph, th: GeometricThresholds) -> np.ndarray:
    """Exact minimiser of the labelling energy for a fixed plane."""
    n = graph.n
    dist = point_plane_distance(graph.vertices, pi)
    cost0, cost1 = unary_costs(dist, th.eps_d)
    if th.lam == 0 or len(graph.edges) == 0 or n == 0:
        return cost1 < cost0
    src, snk = n, n + 1
    w = int(round(th.lam * FLOW_SCALE))
    e = graph.edges
    idx = np.arange(n)
    # source side == inlier; cutting s->v pays cost0, cutting v->t pays cost1
    rows = np.concatenate([np.full(n, src), idx, e[:, 0], e[:, 1]])
    cols = np.concatenate([idx, np.full(n, snk), e[:, 1], e[:, 0]])
    caps = np.concatenate(
        [
            np.rint(cost0 * FLOW_SCALE),
            np.rint(cost1 * FLOW_SCALE),
            np.full(len(e), w),
            np.full(len(e), w),
        ]
    ).astype(np.int32)
    keep = caps > 0
    C = coo_matrix((caps[keep], (rows[keep], cols[keep])), shape=(n + 2, n + 2)).tocsr()
    C.sum_duplicates()
    flow = maximum_flow(C, src, snk, method="dinic").flow
    residual = (C - flow).tocsr()
    residual.data[residual.data < 0] = 0
    residual.eliminate_zeros()
    reach = breadth_first_order(residual, src, directed=True, return_predecessors=False)
    labels = np.zeros(n + 2, dtype=bool)
    labels[reach] = True
    return labels[:n]


@dataclass
class _Candidate:
    plane: Plane3
    labels: np.ndarray
    residual: float
    count: int


def _local_optimize(plane, graph, th, max_rounds=4) -> _Candidate | None:
    best = None
    for _ in range(max_rounds):
        labels = graphcut_labels(plane, graph, th)
        count = int(labels.sum())
        if count < 3 or (best is not None and count <= best.count):
            break
        try:
            refit = fit_plane_svd(graph.vertices[labels])
        except DegenerateConfiguration:
            break
        res = float(np.sqrt(np.mean(point_plane_distance(graph.vertices[labels], refit) ** 2)))
        best = _Candidate(refit, labels, res, count)
        plane = refit
    return best


def _ransac_one(P: np.ndarray, th: GeometricThresholds, rng: np.random.Generator, confidence=0.99):
    graph = build_neighborhood_graph(P, th.radius)
    n = len(P)
    best: _Candidate | None = None
    best_score = -1
    needed = th.max_hypotheses
    it = 0
    while it < th.max_hypotheses:
        it += 1
        sample = rng.choice(n, size=3, replace=False)
        hyp = plane_from_three(*P[sample])
        if hyp is None:
            continue
        score = int(np.count_nonzero(point_plane_distance(P, hyp) < th.eps_d))
        if score <= best_score:
            continue
        best_score = score
        cand = _local_optimize(hyp, graph, th)
        if cand is None:
            continue
        if best is None or cand.count > best.count:
            best = cand
            best_score = max(best_score, cand.count)
            w = min(cand.count / n, 1 - 1e-12)
            needed = int(np.ceil(np.log(1 - confidence) / np.log(1 - w**3))) if w > 0 else th.max_hypotheses
        if best is not None and best.residual < th.eps_Pi and it >= needed:
            break
    if best is None or best.count < th.min_inliers:
        return None, graph
    return best, graph


def _polish(P: np.ndarray, th: GeometricThresholds, rounds: int = 3) -> Plane3:
    # refit on the tight core of the inliers; points near a seam with another
    # surface pass the eps_d test but bias the normal
    plane = fit_plane_svd(P)
    for _ in range(rounds):
        core = point_plane_distance(P, plane) < 0.5 * th.eps_d
        if core.sum() < 3:
            break
        plane = fit_plane_svd(P[core])
    return plane


def sequential_ransac_planes(point_sets, th: GeometricThresholds, seed: int = 0, ids=None) -> list[Plane3]:
    """Extract planes from candidate point sets (one per segmentation mask).

    ``point_sets`` is a list of (N_i, 3) arrays; ``ids`` optionally gives the
    matching landmark identifiers (defaults to running indices within each
    set).  Each set may yield zero, one or several planes: after a plane is
    accepted its cut inliers are removed and extraction repeats on the rest,
    which is how a mask covering two planes gets split.
    """
    rng = np.random.default_rng(seed)
    planes: list[Plane3] = []
    if ids is None:
        ids = [np.arange(len(s)) for s in point_sets]
    any_input = False
    for P, pid in zip(point_sets, ids):
        P = np.asarray(P, dtype=float).reshape(-1, 3)
        pid = np.asarray(pid)
        remaining = np.arange(len(P))
        while len(remaining) >= max(3, th.min_inliers):
            any_input = True
            cand, graph = _ransac_one(P[remaining], th, rng)
            if cand is None:
                break
            inl = np.flatnonzero(cand.labels)
            try:
                plane = _polish(P[remaining[inl]], th)
            except DegenerateConfiguration:
                break
            planes.append(plane.with_members(pid[remaining[inl]].tolist()))
            taken = cand.labels
            remaining = remaining[~taken]
    if not planes:
        if not any_input:
            raise NoModelFound("not enough points for a plane hypothesis")
        raise NoModelFound("no hypothesis reached the minimum inlier count")
    return planes


def try_merge(pi: Plane3, pj: Plane3, th: GeometricThresholds, points=None) -> Plane3 | None:
    """Merge two nearly coincident planes, or return ``None``.

    ``points`` maps landmark id -> xyz; when given, the merged equation is
    refit on the union of members (with ``eps_Pi`` as the acceptance residual),
    otherwise the two equations are averaged.
    """
    c = float(pi.n @ pj.n)
    if abs(c) <= th.T_theta:
        return None
    qj = pj if c > 0 else pj.flipped()
    if abs(pi.d - qj.d) >= th.T_d:
        return None
    members = pi.member_ids | pj.member_ids
    if points is not None and len(members) >= 3:
        P = np.array([points[k] for k in sorted(members)])
        merged = _refit_with_residual(P, th)
        if merged is None:
            return None
        if merged.n @ pi.n < 0:
            merged = merged.flipped()
        return merged.with_members(members)
    n = pi.n + qj.n
    return Plane3(n / np.linalg.norm(n), 0.5 * (pi.d + qj.d), members)


def _refit_with_residual(P, th, max_rounds=5) -> Plane3 | None:
    plane = fit_plane_svd(P)
    for _ in range(max_rounds):
        dist = point_plane_distance(P, plane)
        res = float(np.sqrt(np.mean(dist**2)))
        if res < th.eps_Pi:
            return plane
        keep = dist < th.eps_d
        if keep.sum() < 3 or keep.all():
            return None
        plane = fit_plane_svd(P[keep])
    return None


def project_onto_plane(v, pi: Plane3) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    signed = v @ pi.n + pi.d
    return v - np.multiply.outer(signed, pi.n)


def refine_members(pi: Plane3, points: dict) -> dict:
    """Move every member landmark onto the plane (signed orthogonal projection).

    Updates ``points`` in place and returns it.
    """
    for k in pi.member_ids:
        if k in points:
            points[k] = project_onto_plane(points[k], pi)
    return points


@dataclass(frozen=True)
class AdaptiveCoefficients:
    c_d: float = 0.02
    c_T: float = 0.04
    c_P: float = 0.01


def adaptive_thresholds(
    median_scene_depth: float, base: GeometricThresholds | None = None, coeffs: AdaptiveCoefficients = AdaptiveCoefficients()
) -> GeometricThresholds:
    if not median_scene_depth > 0:
        raise ValueError("median scene depth must be positive")
    base = base or GeometricThresholds()
    z = float(median_scene_depth)
    return replace(base, eps_d=coeffs.c_d * z, T_d=coeffs.c_T * z, eps_Pi=coeffs.c_P * z)
