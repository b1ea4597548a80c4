"""Statistical estimators built on path batches."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.spatial import cKDTree

from . import _kernels as K
from .analysis import TestFunctionU, eval_u
from .environment import EnvironmentRealization, EnvironmentSpec, UsageError
from .rng import TAG_PERM, TAG_REPLICATE, StreamRNG, child_seed
from .sde import (
    AuxDynamics,
    BallRegion,
    BoxRegion,
    ExitBatch,
    FreeSpace,
    GridSpec,
    PathConfig,
    SlabRegion,
    annealed_batch,
    aux_batch,
    quenched_batch,
)

Z95 = 1.959963984540054


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    if hasattr(obj, "to_dict"):
        return _jsonable(obj.to_dict())
    return obj


def _run(dynamics, region, n, cfg, seed, workers=1, x0=None, **kw):
    """Dispatch on the kind of dynamics: spec (annealed), realization (quenched) or aux field."""
    if isinstance(dynamics, EnvironmentSpec):
        return annealed_batch(dynamics, region, n, cfg, seed, workers, x0=x0, **kw)
    if isinstance(dynamics, EnvironmentRealization):
        return quenched_batch(dynamics, region, n, cfg, seed, workers, x0=x0, **kw)
    if isinstance(dynamics, AuxFieldEstimate):
        dynamics = dynamics.dynamics()
    if isinstance(dynamics, AuxDynamics):
        kw.pop("snap_times", None)
        kw.pop("zbridge", None)
        return aux_batch(dynamics, region, n, cfg, seed, workers, x0=x0, **kw)
    raise UsageError(f"cannot simulate {type(dynamics).__name__}")


def _dim_of(dynamics):
    if isinstance(dynamics, EnvironmentSpec):
        return int(dynamics.dim)
    if isinstance(dynamics, EnvironmentRealization):
        return dynamics.dim
    return dynamics.grid.dim


# ---------------------------------------------------------------- exit probabilities


def wilson_interval(k, n, z=Z95):
    if n <= 0:
        raise UsageError("n must be positive")
    p = k / n
    den = 1.0 + z * z / n
    c = (p + z * z / (2 * n)) / den
    h = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    lo = 0.0 if k == 0 else min(p, max(0.0, c - h))
    hi = 1.0 if k == n else max(p, min(1.0, c + h))
    return lo, hi


@dataclass
class ExitProbEstimate:
    p_hat: float
    ci_lo: float
    ci_hi: float
    n: int
    count: int
    timeouts: int

    @classmethod
    def from_counts(cls, k, n, timeouts=0):
        lo, hi = wilson_interval(k, n)
        return cls(k / n, lo, hi, int(n), int(k), int(timeouts))

    @property
    def se(self):
        return math.sqrt(self.p_hat * (1 - self.p_hat) / self.n)

    def to_dict(self):
        return {"p_hat": self.p_hat, "ci": [self.ci_lo, self.ci_hi], "n": self.n,
                "count": self.count, "timeouts": self.timeouts, "se": self.se}


def exit_prob_backward(records: ExitBatch, ell, L) -> ExitProbEstimate:
    """Fraction of records that did not leave through {x.ell >= L}; timeouts count as non-front."""
    if records is None or len(records) == 0:
        raise UsageError("no records")
    proj = records.position @ np.asarray(ell, dtype=float)
    tol = 1e-9 * max(1.0, abs(L))
    back = int(np.sum(proj < L - tol))
    timeouts = int(np.sum(records.face_code == K.TIMEOUT))
    return ExitProbEstimate.from_counts(back, len(records), timeouts)


def exit_prob_front(records: ExitBatch, ell, L) -> ExitProbEstimate:
    est = exit_prob_backward(records, ell, L)
    return ExitProbEstimate.from_counts(est.n - est.count, est.n, est.timeouts)


# ---------------------------------------------------------------- decay fits

_FEATURES = {"L": 1, "L2": 2, "L3": 3, "r2": 2}


@dataclass
class DecayScan:
    """Rows (x, p_hat, ci, n) and an OLS fit of log p_hat against x^power."""

    rows: list
    feature: str = "L"
    slope: float | None = None
    intercept: float | None = None
    slope_se: float | None = None
    dropped: list = field(default_factory=list)
    flags: list = field(default_factory=list)

    def __post_init__(self):
        self.rows = sorted(self.rows, key=lambda r: r["x"])
        self.fit()

    @classmethod
    def from_estimates(cls, xs, estimates, feature="L"):
        rows = [{"x": float(x), "p_hat": e.p_hat, "ci_lo": e.ci_lo, "ci_hi": e.ci_hi,
                 "n": e.n, "count": e.count, "timeouts": e.timeouts}
                for x, e in zip(xs, estimates)]
        return cls(rows, feature)

    def fit(self):
        power = _FEATURES[self.feature]
        use = [r for r in self.rows if r["p_hat"] > 0]
        self.dropped = [r["x"] for r in self.rows if r["p_hat"] <= 0]
        self.flags = []
        if self.dropped:
            self.flags.append("zero rows dropped")
        if not use:
            self.flags.append("decay below resolution")
        if len(use) < 3:
            self.slope = self.intercept = self.slope_se = None
            return
        x = np.array([r["x"] ** power for r in use])
        y = np.log([r["p_hat"] for r in use])
        var = np.array([(1 - r["p_hat"]) / (r["n"] * r["p_hat"]) for r in use])
        xc = x - x.mean()
        sxx = float(xc @ xc)
        c = xc / sxx
        self.slope = float(c @ y)
        self.intercept = float(y.mean() - self.slope * x.mean())
        self.slope_se = float(math.sqrt(c @ (c * var)))

    @property
    def upper95(self):
        return None if self.slope is None else self.slope + Z95 * self.slope_se

    @property
    def lower95(self):
        return None if self.slope is None else self.slope - Z95 * self.slope_se

    @property
    def below_resolution(self):
        return "decay below resolution" in self.flags

    def decays(self):
        """Slope 95% upper bound < 0, or no events at any x (flagged, counted as a pass)."""
        if self.below_resolution:
            return True
        return self.slope is not None and self.upper95 < 0

    def to_dict(self):
        return {"feature": self.feature, "rows": self.rows, "slope": self.slope,
                "intercept": self.intercept, "slope_se": self.slope_se,
                "slope_ci": None if self.slope is None else [self.lower95, self.upper95],
                "dropped": self.dropped, "flags": self.flags}

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["L", "p_hat", "ci_lo", "ci_hi", "n"])
            for r in self.rows:
                w.writerow([r["x"], repr(r["p_hat"]), repr(r["ci_lo"]), repr(r["ci_hi"]), r["n"]])


@dataclass
class TScanResult:
    scans: dict
    verdict: bool
    message: str
    config: dict

    def to_dict(self):
        return {"verdict": self.verdict, "message": self.message, "config": self.config,
                "scans": {k: v.to_dict() for k, v in self.scans.items()}}


def _dir_key(d):
    return ",".join(f"{x:.6g}" for x in d)


def condition_T_scan(dynamics, ell, b, Ls, directions, n, cfg: PathConfig, seed=0,
                     workers=1, lateral="L2", delta=None) -> TScanResult:
    """Annealed backward-exit probabilities on U_{ell',b,L} for each ell' and L."""
    Ls = [float(L) for L in Ls]
    if len(Ls) < 3 or any(b2 <= a2 for a2, b2 in zip(Ls, Ls[1:])):
        raise UsageError("L list must be increasing with at least 3 entries")
    dim = _dim_of(dynamics)
    lat = "none" if dim == 1 else lateral
    scans = {}
    for i, lp in enumerate(directions):
        lp = np.asarray(lp, dtype=float)
        ests = []
        for j, L in enumerate(Ls):
            region = SlabRegion.from_scale(lp, b, L, lat, delta)
            s = child_seed(child_seed(seed, i, TAG_REPLICATE), j, TAG_REPLICATE)
            batch = _run(dynamics, region, n, cfg, s, workers)
            ests.append(exit_prob_backward(batch, lp, L))
        scans[_dir_key(lp)] = DecayScan.from_estimates(Ls, ests, "L")
    ok = all(s.decays() for s in scans.values())
    if ok:
        msg = "consistent with (T): every slope upper bound < 0"
        if any(s.below_resolution for s in scans.values()):
            msg += " (some scans below resolution)"
    elif any(s.slope is None and not s.below_resolution for s in scans.values()):
        msg = "too few positive rows to fit a slope"
    else:
        msg = "slope CI contains 0"
    return TScanResult(scans, ok, msg, {"ell": list(map(float, ell)), "b": b, "L": Ls,
                                        "directions": [list(map(float, d)) for d in directions],
                                        "n": n, "lateral": lat, "delta": delta, "seed": seed,
                                        "path": cfg.describe()})


def perturbed_directions(ell, angle):
    """ell and its rotations by +-angle in the (e1, e2) plane of the first two components."""
    ell = np.asarray(ell, dtype=float)
    if ell.shape[0] == 1:
        return [ell]
    out = [ell]
    for s in (1.0, -1.0):
        c, t = math.cos(s * angle), math.sin(s * angle)
        r = ell.copy()
        r[0], r[1] = c * ell[0] - t * ell[1], t * ell[0] + c * ell[1]
        out.append(r / np.linalg.norm(r))
    return out


# ---------------------------------------------------------------- velocity and CLT


@dataclass
class VelocityEstimate:
    v_hat: np.ndarray
    se: np.ndarray
    horizon: float
    n: int

    def to_dict(self):
        return {"v_hat": self.v_hat.tolist(), "se": self.se.tolist(), "horizon": self.horizon, "n": self.n}


def velocity_estimate(dynamics, horizon, n, cfg: PathConfig, seed=0, workers=1) -> VelocityEstimate:
    if not horizon > 0 or n < 2:
        raise UsageError("need horizon > 0 and n >= 2")
    run_cfg = PathConfig(dt=cfg.dt, t_max=horizon, exit_mode=cfg.exit_mode, noiseless=cfg.noiseless)
    batch = _run(dynamics, FreeSpace(_dim_of(dynamics)), n, run_cfg, seed, workers)
    disp = batch.position / horizon
    return VelocityEstimate(disp.mean(axis=0), disp.std(axis=0, ddof=1) / math.sqrt(n), float(horizon), int(n))


@dataclass
class CLTSnapshot:
    s: float
    covariance: np.ndarray
    entry_se: np.ndarray
    min_eigenvalue: float
    n: int

    def to_dict(self):
        return {"s": self.s, "covariance": self.covariance.tolist(), "entry_se": self.entry_se.tolist(),
                "min_eigenvalue": self.min_eigenvalue, "n": self.n}


def clt_snapshot(dynamics, s_list, n, cfg: PathConfig, seed=0, workers=1):
    """Covariance of (X_s - s v_hat)/sqrt(s) at each s, v_hat taken at the largest s."""
    d = _dim_of(dynamics)
    s_list = sorted(float(s) for s in s_list)
    if not s_list or s_list[0] <= 0 or n < d + 1:
        raise UsageError("need positive times and n >= d+1")
    run_cfg = PathConfig(dt=cfg.dt, t_max=s_list[-1], exit_mode=cfg.exit_mode, noiseless=cfg.noiseless)
    batch = _run(dynamics, FreeSpace(d), n, run_cfg, seed, workers, snap_times=s_list)
    v_hat = batch.snapshots[:, -1, :].mean(axis=0) / s_list[-1]
    out = []
    for k, s in enumerate(s_list):
        y = (batch.snapshots[:, k, :] - s * v_hat) / math.sqrt(s)
        cov = np.cov(y, rowvar=False, ddof=1).reshape(d, d)
        yc = y - y.mean(axis=0)
        prod = yc[:, :, None] * yc[:, None, :]
        se = prod.std(axis=0, ddof=1) / math.sqrt(n)
        out.append(CLTSnapshot(s, cov, se, float(np.linalg.eigvalsh(cov).min()), int(n)))
    return out


# ---------------------------------------------------------------- occupation and aux fields


def _bbox(region):
    if isinstance(region, BallRegion):
        c = np.asarray(region.center)
        return c - region.radius, c + region.radius
    if isinstance(region, BoxRegion):
        return np.asarray(region.lo), np.asarray(region.hi)
    raise UsageError("bounded region required")


def grid_for(region, cell):
    lo, hi = _bbox(region)
    return GridSpec(cell, tuple(lo), tuple(hi))


def distance_to_boundary(region, x):
    x = np.asarray(x, dtype=float)
    if isinstance(region, BallRegion):
        return region.radius - float(np.linalg.norm(x - np.asarray(region.center)))
    if isinstance(region, BoxRegion):
        return float(min(np.min(x - region.lo), np.min(np.asarray(region.hi) - x)))
    if isinstance(region, SlabRegion):
        s = float(x @ np.asarray(region.ell))
        dist = min(region.front - s, s + region.back)
        if region.lateral is not None:
            dist = min(dist, region.lateral - float(np.linalg.norm(x - s * np.asarray(region.ell))))
        return dist
    raise UsageError("unsupported region")


@dataclass
class OccupationResult:
    grid: GridSpec
    g_hat: np.ndarray
    mean_exit_time: float
    exit_time_se: float
    cell_sum: float
    n: int
    total_time: float

    def to_dict(self):
        return {"grid": {"cell": self.grid.cell, "lo": self.grid.lo, "hi": self.grid.hi,
                         "shape": self.grid.shape},
                "mean_exit_time": self.mean_exit_time, "exit_time_se": self.exit_time_se,
                "cell_sum": self.cell_sum, "n": self.n, "total_time": self.total_time}

    def to_csv(self, path):
        write_grid_csv(path, self.grid, self.g_hat)


def write_grid_csv(path, grid, values):
    centers = grid.centers()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell", *[f"c_{k + 1}" for k in range(grid.dim)], "value"])
        for i, (c, v) in enumerate(zip(centers, values)):
            w.writerow([i, *[repr(float(t)) for t in c], repr(float(v))])


def occupation_density(dynamics, region, grid: GridSpec, n, cfg: PathConfig, seed=0,
                       workers=1, x0=None) -> OccupationResult:
    """g_hat(cell) = residence time / (n * cell volume) for paths started at x0 (default 0)."""
    occ_cfg = PathConfig(dt=cfg.dt, t_max=cfg.t_max, exit_mode=cfg.exit_mode, record_occupation=True,
                         grid=grid, noiseless=cfg.noiseless)
    batch, occ = _run(dynamics, region, n, occ_cfg, seed, workers, x0=x0, with_occupation=True)
    g = occ.density()
    return OccupationResult(grid, g, batch.mean_exit_time(),
                            float(batch.time.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0,
                            float(g.sum() * grid.volume), int(n), occ.total_time)


@dataclass
class AuxFieldEstimate:
    """Occupation-weighted cell averages of a and b over (environment, path) pairs."""

    region: object
    grid: GridSpec
    mass: np.ndarray
    a_hat: np.ndarray
    b_hat: np.ndarray
    empty: np.ndarray
    n: int
    mass_floor: float

    def dynamics(self):
        """Piecewise-constant coefficients; empty cells borrow the nearest non-empty cell."""
        centers = self.grid.centers()
        full = np.flatnonzero(~self.empty)
        if full.size == 0:
            raise UsageError("aux field has no non-empty cell")
        _, nearest = cKDTree(centers[full]).query(centers)
        cell_map = full[nearest]
        a = self.a_hat.copy()
        b = self.b_hat.copy()
        a[self.empty] = np.eye(self.grid.dim)
        b[self.empty] = 0.0
        return AuxDynamics(self.grid, a, b, cell_map.astype(np.int64))

    def cell_of(self, x):
        return self.grid.index_of(x)

    def to_dict(self):
        return {"region": self.region.describe(), "grid": {"cell": self.grid.cell, "lo": self.grid.lo,
                                                             "hi": self.grid.hi},
                "n": self.n, "mass_floor": self.mass_floor,
                "non_empty_cells": int((~self.empty).sum()), "cells": int(self.grid.size),
                "defaults": {"zero_cell": "a=Id, b=0", "boundary": "a=Id, b=0"}}

    def to_csv(self, path):
        d = self.grid.dim
        centers = self.grid.centers()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cell", *[f"c_{k + 1}" for k in range(d)], "mass", "empty",
                        *[f"a_{i + 1}{j + 1}" for i in range(d) for j in range(d)],
                        *[f"b_{k + 1}" for k in range(d)]])
            for i in range(self.grid.size):
                w.writerow([i, *centers[i].tolist(), repr(float(self.mass[i])), int(self.empty[i]),
                            *self.a_hat[i].ravel().tolist(), *self.b_hat[i].tolist()])


def estimate_aux_coefficients(dynamics, region, grid: GridSpec, n, cfg: PathConfig, seed=0,
                              workers=1, mass_floor=None) -> AuxFieldEstimate:
    if n < 1:
        raise UsageError("n must be >= 1")
    occ_cfg = PathConfig(dt=cfg.dt, t_max=cfg.t_max, exit_mode=cfg.exit_mode, record_occupation=True,
                         grid=grid, noiseless=cfg.noiseless)
    _, occ = _run(dynamics, region, n, occ_cfg, seed, workers, with_occupation=True)
    if mass_floor is None:
        mass_floor = 0.0
    empty = ~(occ.time > mass_floor)
    d = grid.dim
    with np.errstate(invalid="ignore", divide="ignore"):
        a_hat = occ.a_sum / occ.time[:, None, None]
        b_hat = occ.b_sum / occ.time[:, None]
    a_hat[empty] = np.nan
    b_hat[empty] = np.nan
    return AuxFieldEstimate(region, grid, occ.time / n, a_hat, b_hat, empty, int(n), float(mass_floor))


def simulate_aux_exit(aux, x0, region, cfg: PathConfig, seed):
    dyn = aux.dynamics() if isinstance(aux, AuxFieldEstimate) else aux
    if isinstance(aux, AuxFieldEstimate):
        c = aux.cell_of(x0)
        if c < 0 or aux.empty[c]:
            raise UsageError("x0 must lie in a non-empty cell")
    batch = aux_batch(dyn, region, 1, cfg, seed, x0=x0)
    return batch[0], int(batch.fallback[0])


def aux_exit_batch(aux, region, n, cfg: PathConfig, seed, workers=1, x0=None):
    """Exit sample of the aux diffusion plus its fallback rate (share of steps in empty cells)."""
    dyn = aux.dynamics() if isinstance(aux, AuxFieldEstimate) else aux
    batch = aux_batch(dyn, region, n, cfg, seed, workers, x0=x0)
    rate = float(batch.fallback.sum() / max(1, batch.steps.sum()))
    return batch, rate


# ---------------------------------------------------------------- exit-law comparison


@njit(cache=True)
def _pair_sum(x, y):
    s = 0.0
    for i in range(x.shape[0]):
        acc = 0.0
        for j in range(y.shape[0]):
            r = 0.0
            for k in range(x.shape[1]):
                t = x[i, k] - y[j, k]
                r += t * t
            acc += math.sqrt(r)
        s += acc
    return s


@njit(cache=True)
def _distance_matrix(z, out):
    n = z.shape[0]
    for i in range(n):
        for j in range(i, n):
            r = 0.0
            for k in range(z.shape[1]):
                t = z[i, k] - z[j, k]
                r += t * t
            r = math.sqrt(r)
            out[i, j] = r
            out[j, i] = r


def _canonical(a, b):
    ka = (a.shape[0], a.tobytes())
    kb = (b.shape[0], b.tobytes())
    return (a, b) if ka <= kb else (b, a)


def energy_distance(a, b):
    """V-statistic 2 E|A-B| - E|A-A'| - E|B-B'|; symmetric and exactly 0 for equal samples."""
    a = np.ascontiguousarray(np.asarray(a, dtype=float).reshape(len(a), -1))
    b = np.ascontiguousarray(np.asarray(b, dtype=float).reshape(len(b), -1))
    a, b = _canonical(a, b)
    na, nb = len(a), len(b)
    mab = _pair_sum(a, b) / (na * nb)
    maa = _pair_sum(a, a) / (na * na)
    mbb = _pair_sum(b, b) / (nb * nb)
    return max(0.0, 2.0 * mab - (maa + mbb))


@dataclass
class DiscrepancyReport:
    statistic: float
    p_value: float
    permutations: int
    n_a: int
    n_b: int

    def to_dict(self):
        return {"statistic": self.statistic, "p_value": self.p_value, "permutations": self.permutations,
                "n_a": self.n_a, "n_b": self.n_b}


def compare_exit_distributions(a, b, permutations=199, seed=0, block=64) -> DiscrepancyReport:
    """Energy distance with a label-permutation p-value (1 + #{perm >= obs}) / (1 + P)."""
    a = np.asarray(a, dtype=float).reshape(len(a), -1)
    b = np.asarray(b, dtype=float).reshape(len(b), -1)
    if len(a) == 0 or len(b) == 0:
        raise UsageError("both samples must be nonempty")
    stat = energy_distance(a, b)
    na, nb = len(a), len(b)
    if stat == 0.0 or permutations < 1:
        return DiscrepancyReport(stat, 1.0, int(permutations), na, nb)
    a, b = _canonical(np.ascontiguousarray(a), np.ascontiguousarray(b))
    na, nb = len(a), len(b)
    pooled = np.ascontiguousarray(np.vstack([a, b]))
    N = len(pooled)
    D = np.empty((N, N), dtype=np.float32)
    _distance_matrix(pooled.astype(np.float32), D)
    rows = D.astype(np.float64).sum(axis=1)
    total = rows.sum()
    gen = StreamRNG(child_seed(seed, 0, TAG_PERM)).generator()

    def stats(Z):
        M = (D @ Z).astype(np.float64)
        s_aa = np.einsum("ij,ij->j", Z.astype(np.float64), M)
        r_a = rows @ Z.astype(np.float64)
        s_ab = r_a - s_aa
        s_bb = total - 2.0 * r_a + s_aa
        return 2.0 * s_ab / (na * nb) - s_aa / na ** 2 - s_bb / nb ** 2

    ident = np.zeros((N, 1), dtype=np.float32)
    ident[:na, 0] = 1.0
    obs = stats(ident)[0]
    hits = 0
    done = 0
    while done < permutations:
        m = min(block, permutations - done)
        Z = np.zeros((N, m), dtype=np.float32)
        for c in range(m):
            Z[gen.permutation(N)[:na], c] = 1.0
        hits += int(np.sum(stats(Z) >= obs))
        done += m
    del D
    return DiscrepancyReport(stat, (1 + hits) / (1 + permutations), int(permutations), na, nb)


# ---------------------------------------------------------------- condition (K)


@dataclass
class KConditionReport:
    eps: float
    minimum: float
    eligible: int
    passed: bool
    empty_infimum: bool
    argmin_center: list | None

    @property
    def margin(self):
        return self.minimum - self.eps

    def to_dict(self):
        return {"eps": self.eps, "minimum": self.minimum, "eligible": self.eligible, "pass": self.passed,
                "empty_infimum": self.empty_infimum, "margin": self.margin,
                "argmin_center": self.argmin_center}


def condition_K_check(aux: AuxFieldEstimate, ell, eps=0.05, R=1.0) -> KConditionReport:
    """inf of b_hat.ell over non-empty cells deeper than 5R inside U, excluding the cell of 0."""
    ell = np.asarray(ell, dtype=float)
    centers = aux.grid.centers()
    zero_cell = aux.grid.index_of(np.zeros(aux.grid.dim))
    best = math.inf
    arg = None
    count = 0
    for i in np.flatnonzero(~aux.empty):
        if i == zero_cell:
            continue
        if distance_to_boundary(aux.region, centers[i]) <= 5 * R:
            continue
        count += 1
        val = float(aux.b_hat[i] @ ell)
        if val < best:
            best, arg = val, centers[i].tolist()
    if count == 0:
        return KConditionReport(float(eps), math.inf, 0, True, True, None)
    return KConditionReport(float(eps), best, count, best > eps, False, arg)


# ---------------------------------------------------------------- supermartingale


@dataclass
class SupermartingaleReport:
    lambda0: float
    times: list
    means: list
    ses: list
    max_violation: float
    passed: bool
    initial_mean: float
    n: int
    alpha: dict
    searched: bool

    def to_dict(self):
        return dict(self.__dict__)


def _v_matrix(u, lam, times, exit_time, proj):
    t_stop = np.minimum(np.asarray(times)[None, :], exit_time[:, None])
    return np.exp(lam * t_stop) * u(proj)


def _monotone_stats(vals):
    means = vals.mean(axis=0)
    ses = vals.std(axis=0, ddof=1) / math.sqrt(len(vals))
    diffs = np.diff(vals, axis=1)
    dm = diffs.mean(axis=0)
    dse = diffs.std(axis=0, ddof=1) / math.sqrt(len(vals))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(dse > 0, dm / np.where(dse > 0, dse, 1.0), np.where(dm > 0, np.inf, 0.0))
    return means, ses, float(z.max()) if z.size else 0.0


def supermartingale_check(dynamics, ell, b, L, R, eps, nu, beta, lambda0="search", n=10000,
                          cfg: PathConfig = None, seed=0, workers=1, times=None, tol_se=2.0,
                          lateral="L2", delta=None) -> SupermartingaleReport:
    """Mean of v_lambda(t ^ T, X.ell) at bucket times; bisects for the largest passing lambda."""
    cfg = cfg or PathConfig(dt=1e-3, t_max=50.0)
    u = TestFunctionU.build(nu, beta, eps, R, b, L)
    d = _dim_of(dynamics)
    region = SlabRegion.from_scale(ell, b, L, "none" if d == 1 else lateral, delta)
    if times is None:
        times = np.linspace(0.0, min(cfg.t_max, 4.0 * L), 11).tolist()
    times = sorted(float(t) for t in times)
    run_cfg = PathConfig(dt=cfg.dt, t_max=max(cfg.t_max, times[-1]), exit_mode=cfg.exit_mode,
                         noiseless=cfg.noiseless)
    batch = _run(dynamics, region, n, run_cfg, seed, workers, snap_times=times)
    proj = batch.snapshots @ np.asarray(ell, dtype=float)
    ufun = lambda r: eval_u(u, r)
    uvals = ufun(proj)

    def evaluate(lam):
        vals = np.exp(lam * np.minimum(np.asarray(times)[None, :], batch.time[:, None])) * uvals
        return vals, _monotone_stats(vals)

    searched = lambda0 == "search"
    if searched:
        lo, hi = 0.0, 1.0
        if evaluate(hi)[1][2] <= tol_se:
            lo = hi
        else:
            for _ in range(30):
                mid = 0.5 * (lo + hi)
                if evaluate(mid)[1][2] <= tol_se:
                    lo = mid
                else:
                    hi = mid
        lam = lo
    else:
        lam = float(lambda0)
    vals, (means, ses, viol) = evaluate(lam)
    passed = viol <= tol_se and (lam > 0 or not searched)
    return SupermartingaleReport(float(lam), times, means.tolist(), ses.tolist(), viol, bool(passed),
                                 float(means[0]), int(n), u.alpha.to_dict(), searched)


# ---------------------------------------------------------------- tail scans


@dataclass
class TailScans:
    scans: dict
    verdicts: dict
    config: dict

    def to_dict(self):
        return {"scans": {k: v.to_dict() for k, v in self.scans.items()}, "verdicts": self.verdicts,
                "config": self.config}


def bernstein_tail_scan(dynamics, gamma, Ls, n, cfg: PathConfig, seed=0, workers=1, beta=None,
                        zbridge=True) -> TailScans:
    """Three running-supremum tails: Z_{gL} >= 2 g beta L, Z_1 >= g L, Z_{gL} >= L^2."""
    Ls = sorted(float(L) for L in Ls)
    d = _dim_of(dynamics)
    if beta is None:
        spec = dynamics.spec if isinstance(dynamics, EnvironmentRealization) else dynamics
        beta = spec.beta
    times = sorted({1.0, *[gamma * L for L in Ls]})
    run_cfg = PathConfig(dt=cfg.dt, t_max=times[-1], exit_mode=cfg.exit_mode, noiseless=cfg.noiseless)
    batch = _run(dynamics, FreeSpace(d), n, run_cfg, seed, workers, snap_times=times, zbridge=zbridge)
    z = batch.sup_displacement
    col = {t: i for i, t in enumerate(times)}
    est = {"i": [], "ii": [], "iii": []}
    for L in Ls:
        zt = z[:, col[gamma * L]]
        est["i"].append(ExitProbEstimate.from_counts(int(np.sum(zt >= 2 * gamma * beta * L)), n))
        est["ii"].append(ExitProbEstimate.from_counts(int(np.sum(z[:, col[1.0]] >= gamma * L)), n))
        est["iii"].append(ExitProbEstimate.from_counts(int(np.sum(zt >= L * L)), n))
    scans = {"i": DecayScan.from_estimates(Ls, est["i"], "L"),
             "ii": DecayScan.from_estimates(Ls, est["ii"], "L2"),
             "iii": DecayScan.from_estimates(Ls, est["iii"], "L3")}
    return TailScans(scans, {k: s.decays() for k, s in scans.items()},
                     {"gamma": gamma, "L": Ls, "n": n, "beta": beta, "path": run_cfg.describe()})


def exit_time_tail_scan(dynamics, delta, Ls, mus, n, cfg: PathConfig, seed=0, workers=1, b=1.0,
                        ell=None) -> TailScans:
    """P[T_V >= mu L] on the slab truncated laterally at L/sqrt(delta), per multiplier mu."""
    spec = dynamics.spec if isinstance(dynamics, EnvironmentRealization) else dynamics
    if isinstance(spec, EnvironmentSpec) and spec.family not in ("gradient", "deterministic"):
        raise UsageError("exit-time tails are defined for the gradient family")
    Ls = sorted(float(L) for L in Ls)
    mus = sorted(float(m) for m in mus)
    d = _dim_of(dynamics)
    ell = np.asarray(ell if ell is not None else spec.ell, dtype=float)
    ests = {m: [] for m in mus}
    for j, L in enumerate(Ls):
        region = SlabRegion.from_scale(ell, b, L, "none" if d == 1 else "delta", delta)
        run_cfg = PathConfig(dt=cfg.dt, t_max=mus[-1] * L * (1 + 1e-9) + cfg.dt, exit_mode=cfg.exit_mode,
                             noiseless=cfg.noiseless)
        batch = _run(dynamics, region, n, run_cfg, child_seed(seed, j, TAG_REPLICATE), workers)
        for m in mus:
            ests[m].append(ExitProbEstimate.from_counts(int(np.sum(batch.time >= m * L)), n))
    scans = {f"{m:g}": DecayScan.from_estimates(Ls, ests[m], "L") for m in mus}
    verdicts = {k: s.decays() for k, s in scans.items()}
    return TailScans(scans, verdicts, {"delta": delta, "L": Ls, "mu": mus, "n": n, "b": b,
                                       "any_decays": any(verdicts.values())})


# ---------------------------------------------------------------- Green function shells


def green_shape(r, d, diam=2.0):
    r = np.asarray(r, dtype=float)
    if d == 1:
        return np.ones_like(r)
    if d == 2:
        return np.log(diam / r)
    return r ** (2.0 - d)


@dataclass
class ShellReport:
    edges: list
    radii: list
    max_ratio: list
    cells: list
    slope: float | None
    passed: bool
    excluded: list

    def to_dict(self):
        return dict(self.__dict__)


def green_shell_ratio(occ: OccupationResult, d, region, edges=None, min_slope=-0.1) -> ShellReport:
    """Max over cells of g_hat / shape in radial shells; bounded iff log-log slope >= min_slope."""
    lo, hi = _bbox(region) if not isinstance(region, SlabRegion) else (None, None)
    diam = float(np.max(hi - lo)) if lo is not None else 2.0
    centers = occ.grid.centers()
    r = np.linalg.norm(centers, axis=1)
    if edges is None:
        # even the exact shapes tilt by -r/(1-r) in d=1,3, so stay well inside
        rmax = 0.12 * 0.5 * diam
        edges = np.geomspace(max(2 * occ.grid.cell, rmax / 6), rmax, 6)
    edges = list(map(float, edges))
    radii, ratios, counts, excluded = [], [], [], []
    for k in range(len(edges) - 1):
        sel = (r >= edges[k]) & (r < edges[k + 1]) & (occ.g_hat > 0)
        if not np.any(sel):
            excluded.append([edges[k], edges[k + 1]])
            continue
        ratio = occ.g_hat[sel] / green_shape(r[sel], d, diam)
        radii.append(math.sqrt(edges[k] * edges[k + 1]))
        ratios.append(float(ratio.max()))
        counts.append(int(sel.sum()))
    slope = None
    if len(radii) >= 2:
        slope = float(np.polyfit(np.log(radii), np.log(ratios), 1)[0])
    return ShellReport(edges, radii, ratios, counts, slope,
                       bool(slope is not None and slope >= min_slope), excluded)


# ---------------------------------------------------------------- heat kernel


@dataclass
class HeatKernelReport:
    times: list
    scans: dict
    mean_displacement: dict
    mean_se: dict
    verdict: bool

    def to_dict(self):
        return {"times": self.times, "scans": {k: v.to_dict() for k, v in self.scans.items()},
                "mean_displacement": self.mean_displacement, "mean_se": self.mean_se,
                "verdict": self.verdict}


def heat_kernel_displacement_check(dynamics, times, n, cfg: PathConfig, seed=0, workers=1,
                                   r_grid=(1.0, 1.5, 2.0, 2.5, 3.0)) -> HeatKernelReport:
    spec = dynamics.spec if isinstance(dynamics, EnvironmentRealization) else dynamics
    if spec.family != "divergence-free":
        raise UsageError("heat-kernel check needs the divergence-free family")
    d = int(spec.dim)
    times = sorted(float(t) for t in times)
    run_cfg = PathConfig(dt=cfg.dt, t_max=times[-1], exit_mode=cfg.exit_mode)
    batch = _run(dynamics, FreeSpace(d), n, run_cfg, seed, workers, snap_times=times)
    v = np.asarray(spec.v)
    scans, means, ses = {}, {}, {}
    for k, t in enumerate(times):
        y = batch.snapshots[:, k, :] - v * t
        rad = np.linalg.norm(y, axis=1) / math.sqrt(t)
        ests = [ExitProbEstimate.from_counts(int(np.sum(rad >= r)), n) for r in r_grid]
        scans[f"{t:g}"] = DecayScan.from_estimates(list(r_grid), ests, "r2")
        means[f"{t:g}"] = y.mean(axis=0).tolist()
        ses[f"{t:g}"] = (y.std(axis=0, ddof=1) / math.sqrt(n)).tolist()
    return HeatKernelReport(times, scans, means, ses, all(s.decays() for s in scans.values()))
