import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rediff.analysis import constant_drift_exit_prob
from rediff.environment import EnvironmentSpec, UsageError, realize
from rediff.sde import (
    BallRegion, BoxRegion, ExitBatch, GridSpec, NumericError, OccupationAccumulator, PathConfig,
    SlabRegion, annealed_batch, quenched_batch, simulate_exit, sqrt_spd, step,
)

ORACLE = 0.7310585786300049  # (1 - e^-1) / (1 - e^-2)
INTERVAL = BoxRegion((-1.0,), (1.0,))


def det(v, a=None, dim=1):
    nu = 1.0
    if a is not None:
        ev = np.linalg.eigvalsh(a)
        nu = max(ev.max(), 1 / ev.min())
    return EnvironmentSpec(dim=dim, v=list(v), a=a, nu=nu)


def front_freq(batch, hi=1.0):
    k = int(np.sum(batch.position[:, 0] >= hi - 1e-12))
    p = k / len(batch)
    return p, math.sqrt(p * (1 - p) / len(batch))


# ------------------------------------------------------------------ primitives


def test_sqrt_spd_examples():
    np.testing.assert_array_equal(sqrt_spd(np.eye(3)), np.eye(3))
    np.testing.assert_array_equal(sqrt_spd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]))
    np.testing.assert_allclose(sqrt_spd([[2.0, 1.0], [1.0, 2.0]]),
                               [[1.41421356237309505, 0.0], [0.70710678118654752, 1.22474487139158905]],
                               rtol=0, atol=1e-15)


def test_sqrt_spd_reports_pivot():
    with pytest.raises(NumericError) as err:
        sqrt_spd([[1.0, 2.0], [2.0, 1.0]])
    assert err.value.pivot == 1


@given(st.integers(0, 10 ** 6), st.integers(1, 5), st.floats(1.0, 10.0))
def test_sqrt_spd_reconstructs(seed, d, nu):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    ev = rng.uniform(1 / nu, nu, size=d)
    a = (q * ev) @ q.T
    a = 0.5 * (a + a.T)
    s = sqrt_spd(a)
    assert np.allclose(np.triu(s, 1), 0.0)
    assert np.max(np.abs(s @ s.T - a)) <= 1e-12


def test_step_examples():
    env = realize(det([0.0, 0.0], a=[[4.0, 0.0], [0.0, 1.0]], dim=2), 0)
    np.testing.assert_allclose(step(env, [0.0, 0.0], 0.01, [1.0, 1.0]), [0.2, 0.1], rtol=0, atol=1e-15)
    env = realize(det([0.3, -0.2], dim=2), 0)
    np.testing.assert_allclose(step(env, [1.0, 1.0], 0.5, [0.0, 0.0]), [1.15, 0.9], atol=1e-15)
    bm = realize(det([0.0]), 0)
    assert step(bm, [0.5], 0.04, [1.5])[0] == pytest.approx(0.5 + 0.2 * 1.5, abs=1e-15)


# ------------------------------------------------------------------ regions and configs


def test_region_validation():
    with pytest.raises(UsageError):
        SlabRegion((1.0, 1.0), 1.0, 1.0)
    with pytest.raises(UsageError):
        SlabRegion((1.0,), 0.0, 1.0)
    with pytest.raises(UsageError):
        BoxRegion((0.0,), (0.0,))
    with pytest.raises(UsageError):
        BallRegion((0.0,), -1.0)
    with pytest.raises(UsageError):
        PathConfig(dt=0.0)
    with pytest.raises(UsageError):
        PathConfig(record_occupation=True)


def test_slab_lateral_rules():
    assert SlabRegion.from_scale((1.0, 0.0), 1.0, 3.0, "L2").lateral == 9.0
    assert SlabRegion.from_scale((1.0, 0.0), 1.0, 3.0, "delta", 0.25).lateral == 6.0
    assert SlabRegion.from_scale((1.0,), 2.0, 3.0).back == 6.0


def test_grid_index():
    g = GridSpec(0.5, (-1.0, -1.0), (1.0, 1.0))
    assert g.shape == (4, 4) and g.size == 16 and g.volume == 0.25
    assert g.index_of([-0.9, -0.9]) == 0
    assert g.index_of([0.9, 0.9]) == 15
    assert g.index_of([1.1, 0.0]) == -1
    np.testing.assert_allclose(g.centers()[g.index_of([0.1, -0.6])], [0.25, -0.75])


def test_x0_outside_rejected():
    env = realize(det([0.0]), 0)
    with pytest.raises(UsageError):
        simulate_exit(env, [2.0], INTERVAL, PathConfig(dt=1e-3), 0)


# ------------------------------------------------------------------ exits


def test_drift_only_exit_is_exact():
    env = realize(det([1.0]), 0)
    rec = simulate_exit(env, [0.0], SlabRegion((1.0,), 1.0, 1.0), PathConfig(dt=1e-3, noiseless=True), 1)
    assert rec.face == "front"
    assert rec.time == pytest.approx(1.0, abs=1e-9)
    assert rec.position[0] == pytest.approx(1.0, abs=1e-12)


def test_timeout_recorded():
    env = realize(det([0.0]), 0)
    rec = simulate_exit(env, [0.0], INTERVAL, PathConfig(dt=1e-2, t_max=0.05), 3)
    assert rec.face in ("timeout", "boundary")
    if rec.face == "timeout":
        assert rec.time == pytest.approx(0.05)
        assert -1 < rec.position[0] < 1


def test_bm_symmetry_and_exit_time():
    env = realize(det([0.0]), 0)
    b = quenched_batch(env, INTERVAL, 40_000, PathConfig(dt=1e-3), 11)
    p, se = front_freq(b)
    assert abs(p - 0.5) <= 3 * se
    tse = b.time.std(ddof=1) / math.sqrt(len(b))
    assert abs(b.mean_exit_time() - 1.0) <= 3 * tse + 1e-3


def test_annealed_drift_oracle():
    b = annealed_batch(det([0.5]), INTERVAL, 10_000, PathConfig(dt=1e-3), 5)
    p, se = front_freq(b)
    assert abs(p - ORACLE) <= 3 * se


def test_bridge_beats_naive():
    env = realize(det([0.5]), 0)
    errs = {}
    for mode in ("naive", "bridge"):
        ests = [front_freq(quenched_batch(env, INTERVAL, 4000, PathConfig(dt=1e-2, exit_mode=mode), 100 + r))[0]
                for r in range(10)]
        errs[mode] = abs(np.mean(ests) - ORACLE)
    assert errs["bridge"] < errs["naive"]


def test_dt_refinement_within_noise():
    env = realize(det([0.5]), 0)
    p1, s1 = front_freq(quenched_batch(env, INTERVAL, 20_000, PathConfig(dt=2e-3), 1))
    p2, s2 = front_freq(quenched_batch(env, INTERVAL, 20_000, PathConfig(dt=1e-3), 2))
    assert abs(p1 - p2) <= 3 * math.hypot(s1, s2)


def test_exit_positions_on_reported_face():
    spec = EnvironmentSpec(family="generic-bump", dim=2, nu=2.0, amp_matrix=0.5, amp_drift=0.3, v=[0.2, 0.0])
    slab = SlabRegion.from_scale((0.6, 0.8), 1.0, 1.5, "L2")
    b = annealed_batch(spec, slab, 3000, PathConfig(dt=1e-3), 9)
    ell = np.array(slab.ell)
    s = b.position @ ell
    lat = np.linalg.norm(b.position - s[:, None] * ell, axis=1)
    for i, rec in enumerate(b):
        if rec.face == "front":
            assert abs(s[i] - slab.front) <= 1e-9 * slab.front
        elif rec.face == "back":
            assert abs(s[i] + slab.back) <= 1e-9 * slab.back
        elif rec.face == "lateral":
            assert abs(lat[i] - slab.lateral) <= 1e-9 * slab.lateral
    counts = b.face_counts()
    assert counts["front"] + counts["back"] + counts["lateral"] + counts["timeout"] == len(b)


def test_ball_exit_on_sphere():
    b = annealed_batch(EnvironmentSpec(dim=3), BallRegion((0.0, 0.0, 0.0), 1.0), 500, PathConfig(dt=1e-3), 4)
    r = np.linalg.norm(b.position, axis=1)
    assert np.all(np.abs(r - 1.0) <= 1e-9)
    assert set(b.face_counts()) >= {"boundary"}


# ------------------------------------------------------------------ determinism and occupation


def test_annealed_equals_quenched_for_deterministic():
    spec = det([0.5])
    cfg = PathConfig(dt=1e-3)
    a = annealed_batch(spec, INTERVAL, 3000, cfg, 8)
    q = quenched_batch(realize(spec, 0), INTERVAL, 3000, cfg, 8)
    assert np.array_equal(a.position, q.position) and np.array_equal(a.time, q.time)


def test_batches_independent_of_workers_and_repeatable():
    spec = EnvironmentSpec(family="gradient", dim=2, lam=0.5, amp_potential=0.05)
    slab = SlabRegion.from_scale((1.0, 0.0), 1.0, 2.0, "L2")
    cfg = PathConfig(dt=1e-2)
    b1 = annealed_batch(spec, slab, 5000, cfg, 3, workers=1)
    b2 = annealed_batch(spec, slab, 5000, cfg, 3, workers=4)
    b3 = annealed_batch(spec, slab, 5000, cfg, 3, workers=1)
    assert b1.numeric_equal(b2) and b1.numeric_equal(b3)


def test_occupation_total_equals_exit_time():
    env = realize(det([0.0]), 0)
    grid = GridSpec(0.05, (-1.0,), (1.0,))
    cfg = PathConfig(dt=1e-3, record_occupation=True, grid=grid)
    b, occ = quenched_batch(env, INTERVAL, 20_000, cfg, 12, with_occupation=True)
    assert occ.binned_time == pytest.approx(b.time.sum(), rel=1e-9)
    tse = b.time.std(ddof=1) / math.sqrt(len(b))
    assert abs(occ.binned_time / len(b) - 1.0) <= 3 * tse + 1e-3


def test_accumulator_merge_exact():
    env = realize(EnvironmentSpec(family="generic-bump", dim=2, nu=2.0, amp_matrix=0.4, amp_drift=0.2), 1)
    grid = GridSpec(0.1, (-1.0, -1.0), (1.0, 1.0))
    cfg = PathConfig(dt=1e-3, record_occupation=True, grid=grid)
    ball = BallRegion((0.0, 0.0), 1.0)
    acc_seq = OccupationAccumulator(grid)
    parts = []
    for s in (1, 2):
        acc = OccupationAccumulator(grid)
        for k in range(50):
            simulate_exit(env, [0.0, 0.0], ball, cfg, 1000 * s + k, accumulator=acc)
            simulate_exit(env, [0.0, 0.0], ball, cfg, 1000 * s + k, accumulator=acc_seq)
        parts.append(acc)
    merged = parts[0].merge(parts[1])
    assert np.array_equal(merged.visits, acc_seq.visits)
    np.testing.assert_allclose(merged.time, acc_seq.time, rtol=0, atol=1e-12)
    np.testing.assert_allclose(merged.a_sum, acc_seq.a_sum, rtol=0, atol=1e-12)
    np.testing.assert_allclose(merged.b_sum, acc_seq.b_sum, rtol=0, atol=1e-12)
    assert np.all(merged.time >= 0)


def test_csv_and_summary(tmp_path):
    b = quenched_batch(realize(det([0.5]), 0), INTERVAL, 10, PathConfig(dt=1e-2), 0)
    b.to_csv(tmp_path / "x.csv")
    lines = (tmp_path / "x.csv").read_text().splitlines()
    assert lines[0] == "env_seed,path_seed,face,exit_time,x_1"
    assert len(lines) == 11
    s = b.summary(spec=det([0.5]), master_seed=0)
    assert s["n"] == 10 and sum(s["face_counts"].values()) == 10
    assert len(s["manifest"]["spec_hash"]) == 16


def test_closed_form_helper_consistency():
    assert constant_drift_exit_prob(0.5, -1.0, 1.0, 0.0) == pytest.approx(ORACLE, abs=1e-15)
    assert isinstance(quenched_batch(realize(det([0.5]), 0), INTERVAL, 1, PathConfig(dt=1e-2), 0), ExitBatch)
