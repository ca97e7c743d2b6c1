import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from structslam.ba import (
    CHI2_2DOF_95,
    BAProblem,
    RobustKernel,
    SolverConfig,
    dlt_pnp,
    relocalize,
    residuals,
    robust_cost,
    solve_bundle,
    solve_local_ba,
    solve_motion_only,
    stacked_residuals,
    triangulate_point,
)
from structslam.camera import PoseSE3, project_point, se3_retract
from structslam.errors import GaugeUnderconstrained, InsufficientObservations
from structslam.lines import klein_residual, pluecker_from_endpoints
from structslam.mapstore import LineLandmark, MapStore, Observation
from structslam.metrics import compute_ate
from structslam.pipeline import mean_reprojection_error

from .helpers import noiseless_store, perturbed
from .strategies import K500, random_pose


def test_residuals_vanish_at_ground_truth():
    _, _, store = noiseless_store()
    p = BAProblem.from_map(store, fixed={0})
    assert np.abs(stacked_residuals(p)).max() < 1e-9


def test_point_residual_is_prediction_minus_measurement():
    X = np.array([0.2, -0.1, 3.0])
    uv = project_point(PoseSE3.identity(), K500, X)
    obs = Observation(0, 0, 0, "point", uv - [1.0, 0.0])
    p = BAProblem(K500, {0: PoseSE3.identity()}, {0: X}, {}, [obs])
    assert np.allclose(residuals(p)[0], [1.0, 0.0], atol=1e-12)


@given(st.floats(0.0, 100.0))
def test_huber_kernel(s):
    k = RobustKernel()
    assert k.delta == pytest.approx(np.sqrt(CHI2_2DOF_95))
    assert float(k.rho(s)) <= s + 1e-12
    assert 0 < float(k.weight(s)) <= 1
    if s <= CHI2_2DOF_95:
        assert float(k.rho(s)) == pytest.approx(s)
        assert float(k.weight(s)) == 1


def test_kernel_rejects_bad_delta():
    with pytest.raises(ValueError):
        RobustKernel(0.0)


def test_gauge_must_be_fixed():
    _, _, store = noiseless_store(with_lines=False)
    p = BAProblem.from_map(store)
    with pytest.raises(GaugeUnderconstrained):
        solve_local_ba(p)
    with pytest.raises(GaugeUnderconstrained):
        solve_bundle(p)


def test_cost_trace_non_increasing():
    _, _, store = noiseless_store(seed=2, noise_px=1.0)
    init = perturbed([store.keyframes[i] for i in sorted(store.keyframes)], 1)
    for i, P in enumerate(init):
        if i:
            store.keyframes[i] = P
    rep = solve_local_ba(BAProblem.from_map(store, fixed={0}))
    for tr in (rep.cost_trace,):
        assert all(b <= a * (1 + 1e-12) for a, b in zip(tr, tr[1:]) if np.isfinite(a))
    assert rep.iterations > 0


def test_local_ba_noiseless_window_converges():
    scene, _, store = noiseless_store(seed=1)
    # perturb the free poses and landmarks a little, then refine
    rng = np.random.default_rng(0)
    for i in range(2, len(scene.poses)):
        store.keyframes[i] = se3_retract(store.keyframes[i], rng.normal(scale=2e-3, size=6))
    for k in store.points:
        store.points[k] = store.points[k] + rng.normal(scale=5e-3, size=3)
    p = BAProblem.from_map(store, fixed={0, 1})
    rep = solve_local_ba(p)
    assert rep.rejected_observations == [] and rep.rejected_lines == []
    assert mean_reprojection_error(p) < 1e-8
    assert compute_ate([p.poses[i] for i in range(10)], scene.poses).ate_rmse < 1e-6
    assert all(klein_residual(p.pluecker(l)) <= 1e-9 for l in p.lines)


def test_motion_only_from_ground_truth_takes_no_step():
    _, _, store = noiseless_store(seed=3)
    p = BAProblem.from_map(store, window={4}, fixed_landmarks=True)
    p.fixed_poses = set(p.poses) - {4}
    before = p.poses[4]
    rep = solve_motion_only(p)
    assert rep.iterations == 0
    assert rep.final_cost == rep.initial_cost
    assert p.poses[4] is before


def _frame_store(seed, n_points, n_lines, depth=2.0):
    rng = np.random.default_rng(seed)
    gt = random_pose(rng)
    store = MapStore(K500)
    Xc = np.column_stack([rng.uniform(-1, 1, (n_points, 2)) * depth * 0.6, rng.uniform(0.7, 1.3, n_points) * depth])
    store.points = {i: gt.inverse().apply(x) for i, x in enumerate(Xc)}
    segs = {}
    for j in range(n_lines):
        a = np.r_[rng.uniform(-0.6, 0.6, 2) * depth, rng.uniform(0.7, 1.3) * depth]
        b = a + np.r_[rng.uniform(-0.5, 0.5, 2), rng.uniform(-0.2, 0.2)]
        A, B = gt.inverse().apply(a), gt.inverse().apply(b)
        store.lines[j] = LineLandmark(pluecker_from_endpoints(B, A), 0)
        segs[j] = np.array([project_point(gt, K500, A), project_point(gt, K500, B)])
    uvs = {i: project_point(gt, K500, X) for i, X in store.points.items()}
    return gt, store, uvs, segs


def test_motion_only_recovers_perturbed_pose():
    gt, store, uvs, segs = _frame_store(0, 50, 20)
    obs = [Observation(i, 0, i, "point", uv) for i, uv in uvs.items()]
    obs += [Observation(100 + j, 0, j, "line", s) for j, s in segs.items()]
    from structslam.lines import to_orthonormal

    init = perturbed([PoseSE3.identity(), gt], 5, rot_deg=5, trans_m=0.1)[1]
    p = BAProblem(K500, {0: init}, dict(store.points), {j: to_orthonormal(l.pluecker) for j, l in store.lines.items()},
                  obs, fixed_landmarks=True)
    solve_motion_only(p)
    est = p.poses[0]
    dR = est.R @ gt.R.T
    assert np.arccos(np.clip((np.trace(dR) - 1) / 2, -1, 1)) < 1e-6
    assert np.linalg.norm(est.center - gt.center) < 1e-6


def test_relocalize_with_noise():
    gt, store, uvs, segs = _frame_store(1, 100, 30)
    rng = np.random.default_rng(2)
    pm = [(i, uv + rng.normal(size=2)) for i, uv in uvs.items()]
    lm = [(j, s + rng.normal(size=(2, 2))) for j, s in segs.items()]
    init = perturbed([PoseSE3.identity(), gt], 3, rot_deg=10, trans_m=0.3)[1]
    pose, rep = relocalize(store, pm, lm, init)
    assert np.linalg.norm(pose.center - gt.center) < 0.01
    assert rep.inliers >= 0.9 * 130


def test_relocalize_needs_matches():
    _, store, _, _ = _frame_store(0, 10, 0)
    with pytest.raises(InsufficientObservations):
        relocalize(store, [], [], PoseSE3.identity())


def test_robust_cost_matches_squared_sum_on_inliers():
    _, _, store = noiseless_store(seed=4, noise_px=0.5)
    p = BAProblem.from_map(store, fixed={0})
    r = stacked_residuals(p)
    assert robust_cost(p, None) == pytest.approx(float(r @ r))
    assert robust_cost(p) <= robust_cost(p, None)


def test_chi2_gate_rejects_gross_point_outlier():
    _, _, store = noiseless_store(seed=5, with_lines=False)
    bad = store.observations[10]
    bad.meas = bad.meas + np.array([40.0, -30.0])
    rep = solve_local_ba(BAProblem.from_map(store, fixed={0, 1}))
    assert rep.rejected_observations == [bad.id]


def test_triangulate_point_and_dlt_pnp_exact():
    rng = np.random.default_rng(6)
    base = random_pose(rng)
    poses = [se3_retract(base, rng.normal(scale=0.1, size=6)) for _ in range(3)]
    X = base.inverse().apply(np.array([0.1, 0.2, 3.0]))
    uvs = [project_point(P, K500, X) for P in poses]
    assert np.allclose(triangulate_point(poses, uvs, K500), X, atol=1e-8)
    gt, store, uvs, _ = _frame_store(7, 12, 0)
    ids = sorted(uvs)
    est = dlt_pnp(np.array([store.points[i] for i in ids]), np.array([uvs[i] for i in ids]), K500)
    assert est.allclose(gt, atol=1e-8)
    with pytest.raises(InsufficientObservations):
        dlt_pnp(np.zeros((5, 3)), np.zeros((5, 2)), K500)


def test_write_back_drops_culled_lines():
    _, _, store = noiseless_store(seed=0)
    p = BAProblem.from_map(store, fixed={0})
    rep = solve_local_ba(p)
    lid = next(iter(store.lines))
    rep.rejected_lines = [lid]
    p.write_back(store, rep)
    assert lid not in store.lines
    assert not store.observations_of("line", lid)
    assert all(store.lines[l].endpoints is not None for l in store.lines)


def test_solver_config_defaults():
    c = SolverConfig()
    assert c.chi2 == 5.991 and c.trim_ratio == 0.1


def test_diverged_solve_when_no_step_reduces_cost(monkeypatch):
    import structslam.ba as ba
    from structslam.errors import DivergedSolve

    _, _, store = noiseless_store(seed=0, with_lines=False, noise_px=1.0)
    p = BAProblem.from_map(store, fixed={0})
    orig = ba._Packed.cost
    calls = {"n": 0}

    def worse(self, s, kernel):
        calls["n"] += 1
        c = orig(self, s, kernel)
        return c if calls["n"] == 1 else c + 1e6

    monkeypatch.setattr(ba._Packed, "cost", worse)
    with pytest.raises(DivergedSolve):
        solve_bundle(p)


def test_stationary_start_is_converged_not_diverged():
    _, _, store = noiseless_store(seed=1, with_lines=False, noise_px=1.0)
    p = BAProblem.from_map(store, fixed={0})
    solve_bundle(p, config=SolverConfig(rel_tol=0.0, max_iters=200))
    rep = solve_bundle(p)
    assert rep.converged and rep.iterations <= 1
