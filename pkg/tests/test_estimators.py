import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rediff import estimators as est
from rediff.environment import EnvironmentSpec, UsageError, realize
from rediff.sde import (
    AuxDynamics, BallRegion, BoxRegion, ExitBatch, GridSpec, PathConfig, SlabRegion, quenched_batch,
)

ORACLE = 0.7310585786300049
BACK_L3 = 0.0474258731775667809  # 1 - (1 - e^-3)/(1 - e^-6)
INTERVAL = BoxRegion((-1.0,), (1.0,))


def batch_at(points, faces=None):
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    return ExitBatch(pts, np.ones(n), np.asarray(faces if faces is not None else np.zeros(n), dtype=np.int64),
                     np.zeros(n, np.uint64), np.zeros(n, np.uint64), np.ones(n, np.int64), np.zeros(n, np.int64))


def aux_from(grid, region, a, b, empty=None):
    n = grid.size
    empty = np.zeros(n, bool) if empty is None else empty
    return est.AuxFieldEstimate(region, grid, np.ones(n), np.asarray(a, float), np.asarray(b, float), empty, 1, 0.0)


# ------------------------------------------------------------------ exit probabilities


def test_wilson_reference():
    lo, hi = est.wilson_interval(50, 100)
    assert lo == pytest.approx(0.403831530365996, abs=1e-12)
    assert hi == pytest.approx(0.596168469634004, abs=1e-12)


@given(st.integers(1, 10_000), st.data())
def test_wilson_contains_estimate(n, data):
    k = data.draw(st.integers(0, n))
    e = est.ExitProbEstimate.from_counts(k, n)
    assert 0.0 <= e.ci_lo <= e.p_hat <= e.ci_hi <= 1.0


def test_backward_all_front_and_empty():
    b = batch_at([[1.0]] * 10)
    assert est.exit_prob_backward(b, [1.0], 1.0).p_hat == 0.0
    assert est.exit_prob_front(b, [1.0], 1.0).p_hat == 1.0
    with pytest.raises(UsageError):
        est.exit_prob_backward(batch_at(np.zeros((0, 1))), [1.0], 1.0)


def test_backward_drifted_slab_matches_closed_form():
    env = realize(EnvironmentSpec(dim=1, v=[0.5]), 0)
    slab = SlabRegion.from_scale((1.0,), 1.0, 3.0)
    b = quenched_batch(env, slab, 20_000, PathConfig(dt=1e-2, t_max=500), 3)
    e = est.exit_prob_backward(b, [1.0], 3.0)
    assert abs(e.p_hat - BACK_L3) <= 3 * math.sqrt(BACK_L3 * (1 - BACK_L3) / e.n)
    f = est.exit_prob_front(b, [1.0], 3.0)
    assert f.count + e.count == e.n


# ------------------------------------------------------------------ decay scans


def test_decay_scan_exact_exponential():
    xs = [2.0, 4.0, 6.0, 8.0]
    rows = [{"x": x, "p_hat": math.exp(-0.7 * x), "ci_lo": 0, "ci_hi": 1, "n": 10 ** 6} for x in xs]
    s = est.DecayScan(rows[::-1])
    assert [r["x"] for r in s.rows] == xs
    assert s.slope == pytest.approx(-0.7, abs=1e-12)
    assert s.upper95 < 0 and s.decays()


def test_decay_scan_flags_and_resolution(tmp_path):
    mk = lambda xs, ps: est.DecayScan.from_estimates(xs, [est.ExitProbEstimate.from_counts(p, 100) for p in ps])
    s = mk([1, 2, 3, 4], [20, 5, 0, 1])
    assert "zero rows dropped" in s.flags and s.slope is not None
    s = mk([1, 2, 3], [10, 0, 2])
    assert s.slope is None and not s.decays()
    s = mk([1, 2, 3], [0, 0, 0])
    assert s.below_resolution and s.decays()
    mk([1, 2, 3], [50, 20, 5]).to_csv(tmp_path / "scan.csv")
    assert (tmp_path / "scan.csv").read_text().splitlines()[0] == "L,p_hat,ci_lo,ci_hi,n"


def test_T_scan_driftless_fails():
    cfg = PathConfig(dt=1e-2, t_max=1000)
    res = est.condition_T_scan(EnvironmentSpec(dim=1), [1.0], 1.0, [1.0, 2.0, 3.0], [[1.0]], 3000, cfg, seed=1)
    assert not res.verdict
    assert res.message == "slope CI contains 0"
    (scan,) = res.scans.values()
    assert scan.lower95 < 0 < scan.upper95
    for r in scan.rows:
        assert abs(r["p_hat"] - 0.5) <= 3 * math.sqrt(0.25 / r["n"])


def test_T_scan_requires_three_increasing():
    with pytest.raises(UsageError):
        est.condition_T_scan(EnvironmentSpec(dim=1), [1.0], 1.0, [1.0, 2.0], [[1.0]], 10, PathConfig())


def test_perturbed_directions_are_unit():
    dirs = est.perturbed_directions([1.0, 0.0, 0.0], 0.2)
    assert len(dirs) == 3
    for d in dirs:
        assert np.linalg.norm(d) == pytest.approx(1.0, abs=1e-15)
    assert dirs[1] @ dirs[0] == pytest.approx(math.cos(0.2), abs=1e-14)


# ------------------------------------------------------------------ velocity, CLT


def test_velocity_drifted_bm():
    spec = EnvironmentSpec(dim=2, v=[0.5, -0.25])
    v = est.velocity_estimate(spec, 4.0, 4000, PathConfig(dt=1e-2), seed=2)
    assert np.all(np.abs(v.v_hat - spec.v) <= 3 * v.se)
    np.testing.assert_allclose(v.se, 1 / math.sqrt(4.0 * 4000), rtol=0.1)


def test_velocity_divfree_zero_amplitude():
    spec = EnvironmentSpec(family="divergence-free", dim=2, v=[1.0, 0.0], amp_stream=0.0)
    v = est.velocity_estimate(spec, 2.0, 2000, PathConfig(dt=1e-2), seed=0)
    assert np.all(np.abs(v.v_hat - spec.v) <= 3 * v.se)


@pytest.mark.parametrize("a", [None, [[4.0, 0.0], [0.0, 1.0]]])
def test_clt_covariance_bm(a):
    spec = EnvironmentSpec(dim=2, a=a, nu=4.0 if a else 1.0)
    snaps = est.clt_snapshot(spec, [1.0, 2.0], 4000, PathConfig(dt=1e-2), seed=4)
    target = np.eye(2) if a is None else np.diag([4.0, 1.0])
    for s in snaps:
        assert np.all(np.abs(s.covariance - target) <= 3 * s.entry_se + 1e-12)
        assert s.min_eigenvalue > 0


# ------------------------------------------------------------------ occupation and aux


def test_occupation_bm_interval():
    grid = GridSpec(0.05, (-1.0,), (1.0,))
    occ = est.occupation_density(EnvironmentSpec(dim=1), INTERVAL, grid, 50_000, PathConfig(dt=1e-3), seed=5)
    centers = grid.centers()[:, 0]
    assert np.max(np.abs(occ.g_hat - (1 - np.abs(centers)))) <= 0.04
    assert abs(occ.cell_sum - occ.mean_exit_time) <= 3 * occ.exit_time_se


def test_occupation_drift_only_segment():
    spec = EnvironmentSpec(dim=2, v=[1.0, 0.0])
    grid = GridSpec(0.1, (-1.0, -1.0), (1.0, 1.0))
    box = BoxRegion((-1.0, -1.0), (1.0, 1.0))
    occ = est.occupation_density(spec, box, grid, 5, PathConfig(dt=1e-3, noiseless=True), seed=0)
    centers = grid.centers()
    hot = centers[occ.g_hat > 0]
    assert np.all(np.abs(hot[:, 1]) < 0.1) and np.all(hot[:, 0] > 0) and np.all(hot[:, 0] < 1)


def test_aux_constant_field_exact():
    a = [[2.0, 0.5], [0.5, 1.0]]
    spec = EnvironmentSpec(dim=2, v=[0.3, -0.2], a=a, nu=3.0)
    ball = BallRegion((0.0, 0.0), 1.0)
    aux = est.estimate_aux_coefficients(spec, ball, est.grid_for(ball, 0.1), 500, PathConfig(dt=1e-3), seed=1)
    full = ~aux.empty
    assert np.max(np.abs(aux.a_hat[full] - np.asarray(a))) <= 1e-12
    assert np.max(np.abs(aux.b_hat[full] - np.array([0.3, -0.2]))) <= 1e-12


def test_aux_identity_families_bit_exact():
    spec = EnvironmentSpec(family="gradient", dim=2, lam=0.5, amp_potential=0.05)
    ball = BallRegion((0.0, 0.0), 1.0)
    aux = est.estimate_aux_coefficients(spec, ball, est.grid_for(ball, 0.1), 300, PathConfig(dt=1e-3), seed=2)
    full = ~aux.empty
    assert np.all(aux.a_hat[full] == np.eye(2))
    assert np.linalg.norm(aux.b_hat[full], axis=1).max() <= spec.beta + 1e-12


def test_aux_smooth_field_lipschitz_bound():
    spec = EnvironmentSpec(dim=1, v=[0.0], amp_drift=0.5, range=1.0, profile="wave")
    lip = spec.certified()["K"]
    grid = GridSpec(0.05, (-1.0,), (1.0,))
    aux = est.estimate_aux_coefficients(spec, INTERVAL, grid, 2000, PathConfig(dt=1e-3), seed=3)
    env = realize(spec, 0)
    _, b_true, _ = env.fast_field(grid.centers())
    full = ~aux.empty
    assert np.all(np.abs(aux.b_hat[full, 0] - b_true[full, 0]) <= lip * 0.05)


def test_aux_convex_invariants_bump():
    spec = EnvironmentSpec(family="generic-bump", dim=2, nu=2.0, amp_matrix=0.5, amp_drift=0.3, v=[0.2, 0.0])
    ball = BallRegion((0.0, 0.0), 1.0)
    aux = est.estimate_aux_coefficients(spec, ball, est.grid_for(ball, 0.1), 500, PathConfig(dt=1e-3), seed=4)
    full = ~aux.empty
    ev = np.linalg.eigvalsh(aux.a_hat[full])
    assert ev.min() >= 0.5 - 1e-12 and ev.max() <= 2.0 + 1e-12
    assert np.linalg.norm(aux.b_hat[full], axis=1).max() <= spec.beta + 1e-12


def test_aux_exit_constant_fields():
    grid = GridSpec(0.1, (-1.0,), (1.0,))
    for drift, target in ((0.0, 0.5), (0.5, ORACLE)):
        aux = aux_from(grid, INTERVAL, np.ones((grid.size, 1, 1)), np.full((grid.size, 1), drift))
        b, rate = est.aux_exit_batch(aux, INTERVAL, 20_000, PathConfig(dt=1e-3), seed=6)
        p = float(np.mean(b.position[:, 0] > 0))
        assert abs(p - target) <= 3 * math.sqrt(target * (1 - target) / 20_000)
        assert rate == 0.0


def test_aux_exit_fallback_counted():
    grid = GridSpec(0.1, (-1.0,), (1.0,))
    empty = np.abs(grid.centers()[:, 0]) > 0.5
    aux = aux_from(grid, INTERVAL, np.ones((grid.size, 1, 1)), np.zeros((grid.size, 1)), empty)
    b, rate = est.aux_exit_batch(aux, INTERVAL, 500, PathConfig(dt=1e-3), seed=7)
    assert rate > 0
    rec, fb = est.simulate_aux_exit(aux, [0.0], INTERVAL, PathConfig(dt=1e-3), 1)
    assert rec.face == "boundary" and fb >= 0
    with pytest.raises(UsageError):
        est.simulate_aux_exit(aux, [0.9], INTERVAL, PathConfig(dt=1e-3), 1)


def test_aux_from_deterministic_matches_quenched():
    spec = EnvironmentSpec(dim=1, v=[0.5])
    grid = GridSpec(0.05, (-1.0,), (1.0,))
    aux = est.estimate_aux_coefficients(spec, INTERVAL, grid, 2000, PathConfig(dt=1e-3), seed=8)
    ab, _ = est.aux_exit_batch(aux, INTERVAL, 20_000, PathConfig(dt=1e-3), seed=9)
    qb = quenched_batch(realize(spec, 0), INTERVAL, 20_000, PathConfig(dt=1e-3), 10)
    pa, pq = np.mean(ab.position[:, 0] > 0), np.mean(qb.position[:, 0] > 0)
    assert abs(pa - pq) <= 3 * math.sqrt(2 * ORACLE * (1 - ORACLE) / 20_000)


# ------------------------------------------------------------------ energy distance


def test_energy_identical_and_symmetric():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(200, 2))
    b = rng.normal(size=(150, 2)) + 0.1
    assert est.energy_distance(a, a) == 0.0
    assert est.energy_distance(a, b) == est.energy_distance(b, a)
    r = est.compare_exit_distributions(a, a.copy(), 99)
    assert r.statistic == 0.0 and r.p_value == 1.0


@given(st.integers(0, 10 ** 6), st.integers(2, 40), st.integers(2, 40))
def test_energy_nonnegative_symmetric(seed, na, nb):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(na, 2)), rng.normal(size=(nb, 2))
    e = est.energy_distance(a, b)
    assert e >= 0.0 and e == est.energy_distance(b, a)


def test_energy_separated_faces():
    rng = np.random.default_rng(1)
    front = np.column_stack([np.ones(100), rng.uniform(-1, 1, 100)])
    back = np.column_stack([-np.ones(100), rng.uniform(-1, 1, 100)])
    r = est.compare_exit_distributions(front, back, 199, seed=2)
    assert r.p_value <= 1 / 200


def test_energy_permutation_statistic_matches_direct():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(60, 2)), rng.normal(size=(40, 2)) + 0.3
    r = est.compare_exit_distributions(a, b, 19, seed=1)
    assert r.statistic == pytest.approx(est.energy_distance(a, b), rel=1e-12)
    assert 0 < r.p_value <= 1
    assert r.to_dict()["permutations"] == 19


def test_energy_null_calibration():
    rng = np.random.default_rng(4)
    passing = 0
    for rep in range(20):
        a = rng.normal(size=(300, 2))
        b = rng.normal(size=(300, 2))
        a /= np.linalg.norm(a, axis=1, keepdims=True)
        b /= np.linalg.norm(b, axis=1, keepdims=True)
        passing += est.compare_exit_distributions(a, b, 99, seed=rep).p_value > 0.01
    assert passing >= 18


# ------------------------------------------------------------------ condition (K)


def test_K_check_cases():
    ball = BallRegion((0.0, 0.0), 10.0)
    grid = GridSpec(1.0, (-10.0, -10.0), (10.0, 10.0))
    a = np.tile(np.eye(2), (grid.size, 1, 1))
    b = np.tile([0.5, 0.0], (grid.size, 1))
    rep = est.condition_K_check(aux_from(grid, ball, a, b), [1.0, 0.0], eps=0.1, R=1.0)
    assert rep.passed and rep.margin == pytest.approx(0.4) and rep.eligible > 0
    b2 = b.copy()
    b2[grid.index_of([2.5, 0.5])] = [-0.1, 0.0]
    rep = est.condition_K_check(aux_from(grid, ball, a, b2), [1.0, 0.0], eps=0.1, R=1.0)
    assert not rep.passed and rep.minimum <= -0.1
    rep = est.condition_K_check(aux_from(grid, ball, a, b2), [1.0, 0.0], eps=0.1, R=3.0)
    assert rep.passed and rep.empty_infimum and rep.eligible == 0


# ------------------------------------------------------------------ supermartingale


def test_supermartingale_initial_value_and_driftless():
    env = realize(EnvironmentSpec(dim=1), 0)
    # u is convex in its middle branch, so the driftless check needs a small eps
    rep = est.supermartingale_check(env, [1.0], 1.0, 2.0, 0.1, 0.01, 1.0, 0.5, lambda0=0.0, n=5000,
                                    cfg=PathConfig(dt=1e-2, t_max=20.0), seed=1)
    assert rep.initial_mean == 1.0
    assert rep.passed and all(m >= 0 for m in rep.means)
    assert np.all(np.diff(rep.times) > 0)


def test_supermartingale_search_positive():
    env = realize(EnvironmentSpec(dim=1, v=[0.5]), 0)
    rep = est.supermartingale_check(env, [1.0], 1.0, 2.0, 0.1, 0.5, 1.0, 0.5, n=5000,
                                    cfg=PathConfig(dt=1e-2, t_max=20.0), seed=2)
    assert rep.lambda0 > 0 and rep.passed and rep.max_violation <= 2.0


# ------------------------------------------------------------------ tails


def test_bernstein_drift_only_scan_i_zero():
    spec = EnvironmentSpec(dim=2, v=[0.6, 0.8])
    res = est.bernstein_tail_scan(spec, 1.0, [1.0, 2.0, 3.0], 50, PathConfig(dt=1e-2, noiseless=True))
    assert all(r["p_hat"] == 0.0 for r in res.scans["i"].rows)
    assert res.verdicts["i"]


def test_bernstein_bm_sup_tail():
    res = est.bernstein_tail_scan(EnvironmentSpec(dim=1), 1.0, [1.0, 1.5, 2.0], 20_000, PathConfig(dt=1e-2))
    ii = {r["x"]: r["p_hat"] for r in res.scans["ii"].rows}
    # P[sup |B| >= 1 on [0,1]] about 0.63 for the discrete skeleton plus bridge correction
    assert 0.55 < ii[1.0] < 0.7


def test_exit_time_tail_drift_only_zero():
    spec = EnvironmentSpec(family="gradient", dim=1, lam=1.0)
    res = est.exit_time_tail_scan(spec, 0.5, [1.0, 2.0, 4.0], [1.5, 2.0], 20,
                                  PathConfig(dt=1e-3, noiseless=True))
    for scan in res.scans.values():
        assert all(r["p_hat"] == 0.0 for r in scan.rows)
    with pytest.raises(UsageError):
        est.exit_time_tail_scan(EnvironmentSpec(family="generic-bump", dim=1), 0.5, [1, 2, 3], [1], 5,
                                PathConfig())


def test_exit_time_tail_small_multiplier_not_decaying():
    spec = EnvironmentSpec(family="gradient", dim=1, lam=1.0)
    res = est.exit_time_tail_scan(spec, 0.5, [2.0, 4.0, 6.0], [0.5], 2000, PathConfig(dt=1e-2))
    assert not res.verdicts["0.5"]


# ------------------------------------------------------------------ green shells and heat kernel


def test_green_shape_values():
    assert est.green_shape(0.5, 1) == 1.0
    assert est.green_shape(0.5, 2, diam=2.0) == pytest.approx(math.log(4.0))
    assert est.green_shape(0.5, 3) == pytest.approx(2.0)


def test_green_shell_d1():
    grid = GridSpec(0.005, (-1.0,), (1.0,))
    occ = est.occupation_density(EnvironmentSpec(dim=1), INTERVAL, grid, 20_000, PathConfig(dt=1e-4), seed=6)
    rep = est.green_shell_ratio(occ, 1, INTERVAL)
    assert rep.passed
    assert max(rep.max_ratio) <= 1.1


def test_heat_kernel_pure_bm():
    spec = EnvironmentSpec(family="divergence-free", dim=2, v=[1.0, 0.0], amp_stream=0.0)
    rep = est.heat_kernel_displacement_check(spec, [1.0, 4.0], 4000, PathConfig(dt=1e-2), seed=7)
    assert rep.verdict
    for t in ("1", "4"):
        m, s = np.array(rep.mean_displacement[t]), np.array(rep.mean_se[t])
        assert np.all(np.abs(m) <= 3 * s)
    with pytest.raises(UsageError):
        est.heat_kernel_displacement_check(EnvironmentSpec(dim=2), [1.0], 10, PathConfig())


def test_aux_dynamics_nearest_fill():
    grid = GridSpec(0.5, (-1.0,), (1.0,))
    empty = np.array([True, False, False, True])
    aux = aux_from(grid, INTERVAL, np.ones((4, 1, 1)), np.array([[0.0], [0.1], [0.2], [0.0]]), empty)
    dyn = aux.dynamics()
    assert isinstance(dyn, AuxDynamics)
    assert list(dyn.cell_map) == [1, 1, 2, 2]
