"""Euler-Maruyama paths with first-exit detection and occupation statistics."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels as K
from .environment import (
    EnvironmentRealization,
    EnvironmentSpec,
    UsageError,
    coefficients,
)
from .rng import TAG_ENV, TAG_PATH, as_key, derive_many

FACE_NAMES = {K.FRONT: "front", K.BACK: "back", K.LATERAL: "lateral",
              K.TIMEOUT: "timeout", K.BOUNDARY: "boundary"}
FACE_CODES = {v: k for k, v in FACE_NAMES.items()}

# paths are processed in fixed chunks so the merge order never depends on workers
CHUNK = 2048


class NumericError(ArithmeticError):
    def __init__(self, pivot, message=None):
        super().__init__(message or f"matrix is not positive definite (pivot {pivot})")
        self.pivot = pivot


def _unit(v, name):
    v = np.asarray(v, dtype=float)
    if abs(np.linalg.norm(v) - 1.0) > 1e-12:
        raise UsageError(f"{name} must be a unit vector")
    return v


# ---------------------------------------------------------------- regions


@dataclass(frozen=True)
class SlabRegion:
    """{x : -back < x.ell < front}, optionally cut to |x - (x.ell)ell| < lateral."""

    ell: tuple
    back: float
    front: float
    lateral: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "ell", tuple(float(t) for t in _unit(self.ell, "ell")))
        if not self.back > 0 or not self.front > 0:
            raise UsageError("slab depths must be positive")
        if self.lateral is not None and not self.lateral > 0:
            raise UsageError("lateral bound must be positive")

    @classmethod
    def from_scale(cls, ell, b, L, lateral="none", delta=None):
        """U_{ell,b,L}; ``lateral`` is "none", "L2" (L^2) or "delta" (L/sqrt(delta))."""
        if lateral == "none":
            lat = None
        elif lateral == "L2":
            lat = float(L) ** 2
        elif lateral == "delta":
            if delta is None or not delta > 0:
                raise UsageError("delta must be positive for the L/sqrt(delta) truncation")
            lat = float(L) / math.sqrt(delta)
        else:
            raise UsageError(f"unknown lateral rule {lateral!r}")
        return cls(ell=tuple(ell), back=float(b) * float(L), front=float(L), lateral=lat)

    @property
    def dim(self):
        return len(self.ell)

    def kernel_params(self):
        lat = -1.0 if self.lateral is None else self.lateral
        return K.SLAB, np.array([*self.ell, self.back, self.front, lat])

    def describe(self):
        return {"kind": "slab", **asdict(self)}


@dataclass(frozen=True)
class BoxRegion:
    lo: tuple
    hi: tuple

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(float(t) for t in self.lo))
        object.__setattr__(self, "hi", tuple(float(t) for t in self.hi))
        if len(self.lo) != len(self.hi) or any(h <= l for l, h in zip(self.lo, self.hi)):
            raise UsageError("box needs lo < hi componentwise")

    @property
    def dim(self):
        return len(self.lo)

    def kernel_params(self):
        return K.BOX, np.array([*self.lo, *self.hi])

    def describe(self):
        return {"kind": "box", **asdict(self)}


@dataclass(frozen=True)
class BallRegion:
    center: tuple
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(t) for t in self.center))
        if not self.radius > 0:
            raise UsageError("radius must be positive")

    @property
    def dim(self):
        return len(self.center)

    def kernel_params(self):
        return K.BALL, np.array([*self.center, float(self.radius)])

    def describe(self):
        return {"kind": "ball", **asdict(self)}


@dataclass(frozen=True)
class FreeSpace:
    """No boundary: paths run until T_max (used for velocity and CLT snapshots)."""

    dim: int

    def kernel_params(self):
        return K.FREE, np.zeros(1)

    def describe(self):
        return {"kind": "free", "dim": self.dim}


def region_contains(region, x):
    rkind, rfp = region.kernel_params()
    x = np.asarray(x, dtype=float)
    return bool(K.region_inside(rkind, x.shape[0], rfp, x, np.empty_like(x)))


# ---------------------------------------------------------------- configs


@dataclass(frozen=True)
class GridSpec:
    """Cubic cells of side ``cell`` tiling the box [lo, hi]."""

    cell: float
    lo: tuple
    hi: tuple

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(float(t) for t in self.lo))
        object.__setattr__(self, "hi", tuple(float(t) for t in self.hi))
        if not self.cell > 0:
            raise UsageError("cell size must be positive")
        if len(self.lo) != len(self.hi) or any(h <= l for l, h in zip(self.lo, self.hi)):
            raise UsageError("grid box needs lo < hi componentwise")

    @property
    def dim(self):
        return len(self.lo)

    @property
    def shape(self):
        return tuple(int(math.ceil((h - l) / self.cell - 1e-9)) for l, h in zip(self.lo, self.hi))

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def volume(self):
        return self.cell ** self.dim

    def centers(self):
        axes = [l + (np.arange(n) + 0.5) * self.cell for l, n in zip(self.lo, self.shape)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.dim)

    def index_of(self, x):
        """Linear cell index of ``x`` or -1 outside the box."""
        idx = np.floor((np.asarray(x, float) - self.lo) / self.cell).astype(int)
        if np.any(idx < 0) or np.any(idx >= self.shape):
            return -1
        return int(np.ravel_multi_index(tuple(idx), self.shape))


@dataclass(frozen=True)
class PathConfig:
    dt: float = 1e-4
    t_max: float = 100.0
    exit_mode: str = "bridge"
    record_occupation: bool = False
    grid: GridSpec | None = None
    noiseless: bool = False

    def __post_init__(self):
        if not self.dt > 0:
            raise UsageError("dt must be positive")
        if not self.t_max > 0:
            raise UsageError("t_max must be positive")
        if self.exit_mode not in ("naive", "bridge"):
            raise UsageError(f"unknown exit mode {self.exit_mode!r}")
        if self.record_occupation and self.grid is None:
            raise UsageError("occupation recording needs a grid")

    def describe(self):
        out = asdict(self)
        if self.grid is not None:
            out["grid"] = asdict(self.grid)
        return out


# ---------------------------------------------------------------- records


@dataclass
class ExitRecord:
    position: np.ndarray
    time: float
    face: str
    env_seed: int
    path_seed: int


@dataclass
class ExitBatch:
    """Array-backed list of exit records."""

    position: np.ndarray
    time: np.ndarray
    face_code: np.ndarray
    env_seed: np.ndarray
    path_seed: np.ndarray
    steps: np.ndarray
    fallback: np.ndarray
    snapshots: np.ndarray | None = None
    sup_displacement: np.ndarray | None = None

    def __len__(self):
        return len(self.time)

    def __getitem__(self, i):
        return ExitRecord(self.position[i].copy(), float(self.time[i]),
                          FACE_NAMES[int(self.face_code[i])],
                          int(self.env_seed[i]), int(self.path_seed[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def dim(self):
        return self.position.shape[1]

    def face_counts(self):
        return {name: int(np.sum(self.face_code == code)) for code, name in FACE_NAMES.items()}

    def mean_exit_time(self):
        return float(self.time.mean())

    def numeric_equal(self, other):
        return all(np.array_equal(getattr(self, f), getattr(other, f))
                   for f in ("position", "time", "face_code", "env_seed", "path_seed", "steps"))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["env_seed", "path_seed", "face", "exit_time",
                        *[f"x_{k + 1}" for k in range(self.dim)]])
            for i in range(len(self)):
                w.writerow([int(self.env_seed[i]), int(self.path_seed[i]),
                            FACE_NAMES[int(self.face_code[i])], repr(float(self.time[i])),
                            *[repr(float(v)) for v in self.position[i]]])

    def summary(self, config=None, spec=None, master_seed=None):
        out = {
            "n": len(self),
            "face_counts": self.face_counts(),
            "mean_exit_time": self.mean_exit_time(),
            "exit_time_se": float(self.time.std(ddof=1) / math.sqrt(len(self))) if len(self) > 1 else 0.0,
        }
        if config is not None:
            out["config"] = config
        if spec is not None or master_seed is not None:
            out["manifest"] = {
                "spec_hash": spec_hash(spec) if spec is not None else None,
                "master_seed": master_seed,
            }
        return out

    def write_summary(self, path, **kw):
        with open(path, "w") as fh:
            json.dump(self.summary(**kw), fh, indent=2, sort_keys=True)


def spec_hash(spec):
    data = spec.to_json() if hasattr(spec, "to_json") else json.dumps(spec, sort_keys=True)
    return hashlib.sha256(data.encode()).hexdigest()[:16]


@dataclass
class OccupationAccumulator:
    """Per-cell residence time and time-weighted sums of a and b."""

    grid: GridSpec
    time: np.ndarray = None
    a_sum: np.ndarray = None
    b_sum: np.ndarray = None
    visits: np.ndarray = None
    total_time: float = 0.0
    n_paths: int = 0

    def __post_init__(self):
        n, d = self.grid.size, self.grid.dim
        if self.time is None:
            self.time = np.zeros(n)
            self.a_sum = np.zeros((n, d, d))
            self.b_sum = np.zeros((n, d))
            self.visits = np.zeros(n, dtype=np.int64)

    def add(self, other):
        if other.grid != self.grid:
            raise UsageError("cannot merge accumulators on different grids")
        self.time += other.time
        self.a_sum += other.a_sum
        self.b_sum += other.b_sum
        self.visits += other.visits
        self.total_time += other.total_time
        self.n_paths += other.n_paths
        return self

    def merge(self, other):
        out = OccupationAccumulator(self.grid)
        return out.add(self).add(other)

    @property
    def binned_time(self):
        return float(self.time.sum())

    def density(self):
        """Residence time per path per unit volume."""
        return self.time / (max(self.n_paths, 1) * self.grid.volume)


# ---------------------------------------------------------------- primitives


def sqrt_spd(a):
    """Lower Cholesky factor sigma with sigma sigma^T = a."""
    a = np.ascontiguousarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise UsageError("square matrix required")
    if np.max(np.abs(a - a.T), initial=0.0) > 1e-12 * max(1.0, np.max(np.abs(a))):
        raise NumericError(-1, "matrix is not symmetric")
    out = np.empty_like(a)
    piv = K.cholesky_into(a, out)
    if piv >= 0:
        raise NumericError(int(piv))
    return out


def step(env, x, dt, xi):
    """One Euler-Maruyama step x + b dt + sigma sqrt(dt) xi."""
    if not dt > 0:
        raise UsageError("dt must be positive")
    c = coefficients(env, x)
    return np.asarray(x, float) + c.b * dt + sqrt_spd(c.a) @ np.asarray(xi, float) * math.sqrt(dt)


@dataclass
class AuxDynamics:
    """Piecewise-constant coefficients on a grid (cell -> a, b), with a fallback map."""

    grid: GridSpec
    a: np.ndarray
    b: np.ndarray
    cell_map: np.ndarray
    sigma: np.ndarray = field(init=False)

    def __post_init__(self):
        self.sigma = np.stack([sqrt_spd(m) if np.all(np.isfinite(m)) and np.trace(m) > 0 else np.eye(self.grid.dim)
                               for m in self.a])


def _simulate(spec, env_seeds, path_seeds, region, x0, cfg, workers=1,
              aux=None, snap_times=None, zbridge=False):
    """Shared batch driver: fixed-size chunks, merged in chunk order."""
    n = len(path_seeds)
    d = region.dim
    x0 = np.asarray(x0 if x0 is not None else np.zeros(d), dtype=float)
    if x0.shape != (d,):
        raise UsageError(f"x0 must have length {d}")
    if not region_contains(region, x0):
        raise UsageError("x0 must lie strictly inside the region")
    if aux is None:
        ienv, fenv, amat, asig = spec.kernel_arrays()
        if int(ienv[1]) != d:
            raise UsageError("environment and region dimensions differ")
        aux_lo, aux_h, aux_shape = np.zeros(d), 1.0, np.ones(d, dtype=np.int64)
        aux_a, aux_sig = np.zeros((1, d, d)), np.zeros((1, d, d))
        aux_b, aux_map = np.zeros((1, d)), np.zeros(1, dtype=np.int64)
    else:
        ienv = np.array([K.AUX, d, 0], dtype=np.int64)
        fenv = np.zeros(K.F_VEC + 2 * d)
        amat = asig = np.eye(d)
        aux_lo = np.asarray(aux.grid.lo, float)
        aux_h = float(aux.grid.cell)
        aux_shape = np.asarray(aux.grid.shape, dtype=np.int64)
        aux_a, aux_sig, aux_b = aux.a, aux.sigma, aux.b
        aux_map = np.asarray(aux.cell_map, dtype=np.int64)
    rkind, rfp = region.kernel_params()
    grid = cfg.grid if cfg.record_occupation else None
    snap_steps = np.array(
        [] if snap_times is None else [int(round(s / cfg.dt)) for s in snap_times], dtype=np.int64)
    nsnap = len(snap_steps)
    env_seeds = np.asarray(env_seeds, dtype=np.uint64)
    path_seeds = np.asarray(path_seeds, dtype=np.uint64)

    pos = np.empty((n, d))
    tim = np.empty(n)
    face = np.empty(n, dtype=np.int64)
    steps = np.empty(n, dtype=np.int64)
    fallback = np.empty(n, dtype=np.int64)
    snap_pos = np.zeros((n, nsnap, d))
    snap_z = np.zeros((n, nsnap))
    if grid is not None:
        occ_lo = np.asarray(grid.lo, float)
        occ_h = float(grid.cell)
        occ_shape = np.asarray(grid.shape, dtype=np.int64)
    else:
        occ_lo, occ_h, occ_shape = np.zeros(d), 1.0, np.ones(d, dtype=np.int64)

    chunks = [(s, min(s + CHUNK, n)) for s in range(0, n, CHUNK)]

    def work(bounds):
        s, e = bounds
        if grid is not None:
            acc = OccupationAccumulator(grid)
            ot, oa, ob, ov = acc.time, acc.a_sum, acc.b_sum, acc.visits
        else:
            acc = None
            ot, oa, ob, ov = np.zeros(1), np.zeros((1, d, d)), np.zeros((1, d)), np.zeros(1, dtype=np.int64)
        K.run_paths(ienv, fenv, amat, asig, env_seeds[s:e], path_seeds[s:e],
                    aux_lo, aux_h, aux_shape, aux_a, aux_sig, aux_b, aux_map,
                    rkind, rfp, x0, float(cfg.dt), float(cfg.t_max),
                    cfg.exit_mode == "bridge", bool(cfg.noiseless),
                    grid is not None, occ_lo, occ_h, occ_shape, ot, oa, ob, ov,
                    snap_steps, snap_pos[s:e], snap_z[s:e], bool(zbridge),
                    pos[s:e], tim[s:e], face[s:e], steps[s:e], fallback[s:e])
        if acc is not None:
            acc.n_paths = e - s
            acc.total_time = float(np.sum(tim[s:e]))
        return acc

    if workers and workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            accs = list(pool.map(work, chunks))
    else:
        accs = [work(c) for c in chunks]
    occ = None
    if grid is not None:
        occ = OccupationAccumulator(grid)
        for acc in accs:
            occ.add(acc)
    batch = ExitBatch(pos, tim, face, env_seeds.copy(), path_seeds.copy(), steps, fallback,
                      snap_pos if nsnap else None, snap_z if nsnap else None)
    return batch, occ


def path_seeds(master_seed, n, start=0):
    return derive_many(as_key(master_seed), start, n, TAG_PATH)


def env_seeds(master_seed, n, start=0):
    return derive_many(as_key(master_seed), start, n, TAG_ENV)


def simulate_exit(env: EnvironmentRealization, x0, region, cfg: PathConfig, path_seed,
                  accumulator: OccupationAccumulator | None = None) -> ExitRecord:
    batch, occ = _simulate(env.spec, [env.key], [as_key(path_seed)], region, x0, cfg)
    if accumulator is not None and occ is not None:
        accumulator.add(occ)
    return batch[0]


def annealed_batch(spec: EnvironmentSpec, region, n, cfg: PathConfig, master_seed,
                   workers=1, x0=None, snap_times=None, zbridge=False, with_occupation=False):
    """Each path draws a fresh environment, then its own noise."""
    if n < 1:
        raise UsageError("n must be >= 1")
    batch, occ = _simulate(spec, env_seeds(master_seed, n), path_seeds(master_seed, n),
                           region, x0, cfg, workers, snap_times=snap_times, zbridge=zbridge)
    return (batch, occ) if with_occupation else batch


def quenched_batch(env: EnvironmentRealization, region, n, cfg: PathConfig, master_seed,
                   workers=1, x0=None, snap_times=None, zbridge=False, with_occupation=False):
    """All paths in one fixed environment."""
    if n < 1:
        raise UsageError("n must be >= 1")
    seeds = np.full(n, env.key, dtype=np.uint64)
    batch, occ = _simulate(env.spec, seeds, path_seeds(master_seed, n),
                           region, x0, cfg, workers, snap_times=snap_times, zbridge=zbridge)
    return (batch, occ) if with_occupation else batch


def aux_batch(aux: AuxDynamics, region, n, cfg: PathConfig, master_seed, workers=1, x0=None,
              with_occupation=False):
    if n < 1:
        raise UsageError("n must be >= 1")
    seeds = np.zeros(n, dtype=np.uint64)
    batch, occ = _simulate(None, seeds, path_seeds(master_seed, n), region, x0, cfg,
                           workers, aux=aux)
    return (batch, occ) if with_occupation else batch
