"""Stationary, finite-range random coefficient fields.

A realization is a jittered-lattice superposition of compactly supported
bumps.  The lattice has side ``R``; each cell holds one point drawn
uniformly in the ball of radius ``R/4`` around the cell center, and the bump
around it has support radius ``r0 = R/4``.  Every bump therefore lives
inside the ball of radius ``R/2`` inscribed in its own cell: supports never
overlap, and the field on two sets at distance ``>= R`` is built from
disjoint sets of cell marks.  A uniform global offset of the lattice over
one fundamental cell restores stationarity in law.
"""
from __future__ import annotations

import itertools
import json
import math
import threading
from dataclasses import dataclass, field, fields

import numpy as np

from . import _kernels as K
from .rng import TAG_ENV, TAG_REMARK, as_key, child_seed, derive_many, StreamRNG

FAMILIES = {
    "deterministic": K.DET,
    "generic-bump": K.BUMP,
    "divergence-free": K.DIVFREE,
    "gradient": K.GRAD,
}
PROFILES = {"constant": K.CONST, "wave": K.WAVE, "step": K.STEP}
MAX_DIM = 6

# sup of |grad psi| and of the Hessian operator norm for psi(y) = (1 - |y|^2)^3
GRAD_MAX = 96.0 / (25.0 * math.sqrt(5.0))
HESS_MAX = 6.0

_TOL_UNIT = 1e-12


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending field."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


class UsageError(ValueError):
    pass


def bump_kernel(r):
    """psi(r) = (1 - r^2)^3 for |r| < 1, else 0 (vectorized)."""
    r = np.asarray(r, dtype=float)
    w = np.clip(1.0 - r * r, 0.0, None)
    return w ** 3


def bump_kernel_derivatives(r):
    """(psi', psi'') of the radial profile."""
    r = np.asarray(r, dtype=float)
    inside = np.abs(r) < 1.0
    w = 1.0 - r * r
    d1 = np.where(inside, -6.0 * r * w * w, 0.0)
    d2 = np.where(inside, -6.0 * w * w + 24.0 * r * r * w, 0.0)
    return d1, d2


@dataclass
class EnvironmentSpec:
    """Law of the random environment (one of four families).

    ``a`` (constant diffusion matrix) and ``profile`` are only used by the
    deterministic family.  ``beta_cap`` and ``eta`` default to the certified
    bounds of the construction; explicit values must dominate them.
    """

    family: str = "deterministic"
    dim: int = 1
    range: float = 1.0
    nu: float = 1.0
    beta_cap: float | None = None
    eta: float | None = None
    lam: float = 1.0
    ell: list | None = None
    v: list | None = None
    amp_matrix: float = 0.0
    amp_drift: float = 0.0
    amp_stream: float = 0.0
    amp_potential: float = 0.0
    seed: int = 0
    a: list | None = None
    profile: str = "constant"

    def __post_init__(self):
        self.validate()

    # --------------------------------------------------------------- checks
    def validate(self):
        if self.family not in FAMILIES:
            raise ConfigError("family", f"unknown family {self.family!r}")
        if not (isinstance(self.dim, (int, np.integer)) and 1 <= self.dim <= MAX_DIM):
            raise ConfigError("dim", f"must be an integer in [1, {MAX_DIM}]")
        d = int(self.dim)
        if not self.range > 0:
            raise ConfigError("range", "must be positive")
        if not self.nu >= 1:
            raise ConfigError("nu", "must be >= 1")
        if not self.lam > 0:
            raise ConfigError("lambda", "must be positive")
        ell = np.zeros(d) if self.ell is None else np.asarray(self.ell, dtype=float)
        if self.ell is None:
            ell[0] = 1.0
        if ell.shape != (d,):
            raise ConfigError("ell", f"must have length {d}")
        if abs(np.linalg.norm(ell) - 1.0) > _TOL_UNIT:
            raise ConfigError("ell", "must be a unit vector")
        self.ell = [float(t) for t in ell]
        v = np.zeros(d) if self.v is None else np.asarray(self.v, dtype=float)
        if v.shape != (d,):
            raise ConfigError("v", f"must have length {d}")
        self.v = [float(t) for t in v]
        for name in ("amp_matrix", "amp_drift", "amp_stream", "amp_potential"):
            if not getattr(self, name) >= 0:
                raise ConfigError(name, "must be non-negative")
        if self.profile not in PROFILES:
            raise ConfigError("profile", f"unknown profile {self.profile!r}")
        if self.a is not None:
            if self.family != "deterministic":
                raise ConfigError("a", "only the deterministic family takes a constant matrix")
            am = np.asarray(self.a, dtype=float)
            if am.shape != (d, d):
                raise ConfigError("a", f"must be {d}x{d}")
            if np.max(np.abs(am - am.T)) > 1e-12:
                raise ConfigError("a", "must be symmetric")
            ev = np.linalg.eigvalsh(am)
            if ev.min() < 1.0 / self.nu - 1e-12 or ev.max() > self.nu + 1e-12:
                raise ConfigError("nu", "spectrum of a must lie in [1/nu, nu]")
            self.a = am.tolist()
        if self.family == "generic-bump" and self.amp_matrix > 1.0 - 1.0 / self.nu + 1e-15:
            raise ConfigError("amp_matrix", "must be <= 1 - 1/nu for certified ellipticity")
        cert = self.certified()
        if self.beta_cap is not None and self.beta_cap < cert["beta"] - 1e-12:
            raise ConfigError("beta_cap", f"below the certified drift bound {cert['beta']:.6g}")
        if self.eta is not None and self.eta < cert["eta"] - 1e-12:
            raise ConfigError("eta", f"below the certified potential/stream bound {cert['eta']:.6g}")

    @property
    def r0(self):
        return self.range / 4.0

    def certified(self):
        """Certified (nu, beta, K, eta) of the construction."""
        d = int(self.dim)
        v = float(np.linalg.norm(self.v)) if self.v is not None else 0.0
        r0 = self.range / 4.0
        nu, beta, lip, eta = 1.0, v, 0.0, 0.0
        if self.family == "deterministic":
            if self.a is not None:
                ev = np.linalg.eigvalsh(np.asarray(self.a))
                nu = float(max(ev.max(), 1.0 / ev.min()))
            if self.profile == "wave":
                beta = v + self.amp_drift * math.sqrt(d)
                lip = self.amp_drift * 2.0 * math.pi / self.range
            elif self.profile == "step":
                lip = math.inf if v > 0 else 0.0
        elif self.family == "generic-bump":
            nu = 1.0 / (1.0 - self.amp_matrix) if self.amp_matrix < 1 else math.inf
            beta = v + self.amp_drift
            lip = (self.amp_matrix + self.amp_drift) * GRAD_MAX / r0
        elif self.family == "divergence-free":
            beta = v + self.amp_stream * GRAD_MAX / r0
            lip = self.amp_stream * HESS_MAX / r0 ** 2
            eta = self.amp_stream
        else:
            beta = self.lam + self.amp_potential * GRAD_MAX / r0
            lip = self.amp_potential * HESS_MAX / r0 ** 2
            eta = self.amp_potential
        return {"nu": max(nu, 1.0), "beta": beta, "K": lip, "eta": eta}

    @property
    def beta(self):
        return self.beta_cap if self.beta_cap is not None else self.certified()["beta"]

    @property
    def eta_bound(self):
        return self.eta if self.eta is not None else self.certified()["eta"]

    # --------------------------------------------------------------- arrays
    def kernel_arrays(self):
        d = int(self.dim)
        ienv = np.array([FAMILIES[self.family], d, PROFILES[self.profile]], dtype=np.int64)
        fenv = np.concatenate([
            [self.range, self.r0, self.amp_matrix, self.amp_drift, self.amp_stream,
             self.amp_potential, self.lam],
            self.ell, self.v,
        ]).astype(float)
        amat = np.eye(d) if self.a is None else np.asarray(self.a, dtype=float)
        asig = np.linalg.cholesky(amat)
        return ienv, fenv, amat, asig

    # --------------------------------------------------------- serialization
    def to_dict(self):
        out = {}
        for f in fields(self):
            key = "lambda" if f.name == "lam" else f.name
            out[key] = getattr(self, f.name)
        out["dim"] = int(out["dim"])
        return out

    @classmethod
    def from_dict(cls, data):
        names = {("lambda" if f.name == "lam" else f.name): f.name for f in fields(cls)}
        kwargs = {}
        for key, value in data.items():
            if key not in names:
                raise ConfigError(key, "unknown environment key")
            kwargs[names[key]] = value
        return cls(**kwargs)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    @classmethod
    def from_toml(cls, text):
        return cls.from_dict(_load_toml(text))


def _load_toml(text):
    try:
        import tomllib
    except ModuleNotFoundError:  # python < 3.11
        import tomli as tomllib
    return tomllib.loads(text)


@dataclass
class CoefficientSample:
    a: np.ndarray
    b: np.ndarray


@dataclass
class EnvironmentRealization:
    """One environment: a pure function of (spec, seed).

    Marks of a lattice cell are generated from (seed, cell index) on first
    use and memoized; concurrent fills of the same cell produce identical
    marks, so the cache never changes any value.
    """

    spec: EnvironmentSpec
    seed: int
    offset: np.ndarray = field(repr=False)
    _cache: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        self._arrays = self.spec.kernel_arrays()

    @property
    def key(self):
        return as_key(self.seed)

    @property
    def dim(self):
        return int(self.spec.dim)

    def cell_of(self, x):
        return tuple(int(c) for c in np.floor((np.asarray(x, float) - self.offset) / self.spec.range))

    def cell_center(self, cell):
        return self.offset + (np.asarray(cell, dtype=float) + 0.5) * self.spec.range

    def marks(self, cell):
        cell = tuple(int(c) for c in cell)
        mk = self._cache.get(cell)
        if mk is None:
            mk = self._generate(cell, self.key)
            with self._lock:
                mk = self._cache.setdefault(cell, mk)
        return mk

    def _generate(self, cell, key):
        _, fenv, _, _ = self._arrays
        d = self.dim
        carr = np.asarray(cell, dtype=np.int64)
        mk = np.zeros(K.marks_size(d))
        ckey = np.uint64(K.cell_key(key, carr))
        K.gen_marks(ckey, self.cell_center(cell), d, fenv,
                    FAMILIES[self.spec.family], mk)
        return mk

    def bump_center(self, cell):
        return self.marks(cell)[: self.dim].copy()

    # ------------------------------------------------------------ evaluation
    def _neighborhood(self, x):
        c0 = self.cell_of(x)
        for off in itertools.product((-1, 0, 1), repeat=self.dim):
            yield tuple(c + o for c, o in zip(c0, off))

    def evaluate(self, x, marks_for=None):
        """Reference evaluation summing the bumps of the 3^d neighboring cells.

        ``marks_for`` overrides the mark lookup (used by the finite-range test).
        Returns (a, b, potential).
        """
        spec = self.spec
        d = self.dim
        x = np.asarray(x, dtype=float).reshape(d)
        ienv, fenv, amat, _ = self._arrays
        fam = int(ienv[0])
        a = np.empty((d, d))
        b = np.empty(d)
        if fam == K.DET:
            K.det_coeffs(ienv, fenv, amat, x, a, b)
            return a, b, 0.0
        lookup = marks_for or self.marks
        da = np.zeros((d, d))
        db = np.zeros(d)
        pot = 0.0
        for cell in self._neighborhood(x):
            _, p = K.bump_contrib(fam, d, fenv, lookup(cell), x, da, db)
            pot += p
        eye = np.eye(d)
        for i in range(d):
            for j in range(d):
                a[i, j] = eye[i, j] + da[i, j]
        v = np.asarray(spec.v)
        if fam == K.GRAD:
            ell = np.asarray(spec.ell)
            for k in range(d):
                b[k] = spec.lam * ell[k] + db[k]
            lx = 0.0
            for k in range(d):
                lx += ell[k] * x[k]
            return a, b, pot + spec.lam * lx
        for k in range(d):
            b[k] = v[k] + db[k]
        return a, b, 0.0

    def fast_field(self, pts):
        """Single-cell compiled evaluation at many points: (a[n,d,d], b[n,d], potential[n])."""
        pts = np.ascontiguousarray(np.asarray(pts, dtype=float).reshape(-1, self.dim))
        n = pts.shape[0]
        out_a = np.empty((n, self.dim, self.dim))
        out_b = np.empty((n, self.dim))
        out_p = np.empty(n)
        ienv, fenv, amat, asig = self._arrays
        K.field_many(ienv, fenv, amat, asig, self.key, pts, out_a, out_b, out_p)
        return out_a, out_b, out_p


def realize(spec: EnvironmentSpec, seed: int) -> EnvironmentRealization:
    spec.validate()
    offset = np.zeros(int(spec.dim))
    if spec.family != "deterministic":
        K.global_offset(as_key(seed), int(spec.dim), float(spec.range), offset)
    return EnvironmentRealization(spec=spec, seed=int(seed), offset=offset)


def coefficients(env: EnvironmentRealization, x) -> CoefficientSample:
    a, b, _ = env.evaluate(x)
    return CoefficientSample(a=a, b=b)


def divergence_free_coefficients(env: EnvironmentRealization, x) -> CoefficientSample:
    if env.spec.family != "divergence-free":
        raise UsageError(f"divergence_free_coefficients needs the divergence-free family, got {env.spec.family}")
    return coefficients(env, x)


def gradient_coefficients(env: EnvironmentRealization, x):
    """(CoefficientSample, psi) with psi(x) = phi(x) + lam * ell.x."""
    if env.spec.family != "gradient":
        raise UsageError(f"gradient_coefficients needs the gradient family, got {env.spec.family}")
    a, b, pot = env.evaluate(x)
    return CoefficientSample(a=a, b=b), pot


def stream_matrix(env: EnvironmentRealization, x):
    """H(x) = sum_i psi((x - x_i)/r0) A_i for the divergence-free family."""
    d = env.dim
    H = np.zeros((d, d))
    o = d + d * d + d
    for cell in env._neighborhood(np.asarray(x, float)):
        mk = env.marks(cell)
        y = (np.asarray(x, float) - mk[:d]) / env.spec.r0
        H += bump_kernel(np.sqrt(y @ y)) * mk[o:o + d * d].reshape(d, d)
    return H


def potential(env: EnvironmentRealization, x):
    """phi(x) (without the linear part) for the gradient family."""
    d = env.dim
    o = d + d * d + d + d * d
    phi = 0.0
    for cell in env._neighborhood(np.asarray(x, float)):
        mk = env.marks(cell)
        y = (np.asarray(x, float) - mk[:d]) / env.spec.r0
        phi += float(bump_kernel(np.sqrt(y @ y))) * mk[o]
    return phi


# ------------------------------------------------------------------ checks


@dataclass
class RegularityReport:
    eig_min: float
    eig_max: float
    drift_max: float
    lipschitz: float
    potential_max: float
    range_test_pass: bool
    near_changes: int
    probes: int
    fast_path_agrees: bool
    grid: dict
    certified: dict

    def within_certified(self, nu=None, tol=1e-12):
        nu = self.certified["nu"] if nu is None else nu
        return (self.eig_min >= 1.0 / nu - tol and self.eig_max <= nu + tol
                and self.drift_max <= self.certified["beta"] + tol
                and self.lipschitz <= self.certified["K"] * (1 + 1e-9) + tol)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _remarked(env, x, near):
    """Mark lookup that re-randomizes either the far or the near cells of ``x``."""
    rkey = as_key(child_seed(env.seed, 0, TAG_REMARK))
    half = env.spec.range / 2.0

    def lookup(cell):
        dist = np.linalg.norm(env.cell_center(cell) - x)
        is_near = dist <= half
        if is_near == near:
            return env._generate(cell, rkey)
        return env.marks(cell)

    return lookup


def verify_regularity(env: EnvironmentRealization, box, step, pair_count, seed=0, probes=100):
    """Scan ellipticity, drift and Lipschitz ratios; run the exact finite-range test."""
    box = np.asarray(box, dtype=float).reshape(2, env.dim)
    axes = [np.arange(lo, hi + 0.5 * step, step) for lo, hi in box.T]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, env.dim)
    a, b, pot = env.fast_field(grid)
    ev = np.linalg.eigvalsh(a)
    rng = StreamRNG(seed).generator()
    cert = env.spec.certified()

    # Lipschitz ratios on short random segments
    h = min(step, env.spec.r0 / 16.0)
    xs = box[0] + rng.random((pair_count, env.dim)) * (box[1] - box[0])
    dirs = rng.normal(size=(pair_count, env.dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    ys = xs + h * dirs
    ax, bx, _ = env.fast_field(xs)
    ay, by, _ = env.fast_field(ys)
    num = np.linalg.norm((ax - ay).reshape(pair_count, -1), axis=1) + np.linalg.norm(bx - by, axis=1)
    lip = float(np.max(num / np.linalg.norm(xs - ys, axis=1))) if pair_count else 0.0

    # exact finite-range test
    ok = True
    near_changes = 0
    agrees = True
    pts = box[0] + rng.random((probes, env.dim)) * (box[1] - box[0])
    if env.spec.family != "deterministic":
        # half of the probes sit inside bumps so that near re-randomization is visible
        for i in range(0, probes, 2):
            cell = env.cell_of(pts[i])
            c = env.bump_center(cell)
            u = rng.normal(size=env.dim)
            u /= np.linalg.norm(u)
            pts[i] = c + 0.5 * env.spec.r0 * rng.random() * u
    fa, fb, _ = env.fast_field(pts)
    for i, x in enumerate(pts):
        a0, b0, p0 = env.evaluate(x)
        if not (np.array_equal(a0, fa[i]) and np.array_equal(b0, fb[i])):
            agrees = False
        if env.spec.family == "deterministic":
            continue
        a1, b1, p1 = env.evaluate(x, _remarked(env, x, near=False))
        if not (np.array_equal(a0, a1) and np.array_equal(b0, b1) and p0 == p1):
            ok = False
        a2, b2, p2 = env.evaluate(x, _remarked(env, x, near=True))
        if not (np.array_equal(a0, a2) and np.array_equal(b0, b2) and p0 == p2):
            near_changes += 1

    pot_max = 0.0
    if env.spec.family == "gradient":
        lin = env.spec.lam * grid @ np.asarray(env.spec.ell)
        pot_max = float(np.max(np.abs(pot - lin)))
    elif env.spec.family == "divergence-free":
        pot_max = max(float(np.linalg.norm(stream_matrix(env, x))) for x in grid[:: max(1, len(grid) // 500)])
    return RegularityReport(
        eig_min=float(ev.min()), eig_max=float(ev.max()),
        drift_max=float(np.max(np.linalg.norm(b, axis=1))),
        lipschitz=lip, potential_max=pot_max,
        range_test_pass=ok, near_changes=near_changes, probes=int(probes),
        fast_path_agrees=agrees,
        grid={"lo": box[0].tolist(), "hi": box[1].tolist(), "step": step, "points": int(len(grid)),
              "pairs": int(pair_count), "pair_distance": h},
        certified=cert,
    )


@dataclass
class CriterionMargin:
    positive_mean: float
    negative_mean: float
    positive_se: float
    negative_se: float
    negative_fraction: float
    n: int

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def environment_seeds(master_seed, n, start=0):
    return derive_many(as_key(master_seed), start, n, TAG_ENV)


def criterion_margin(spec: EnvironmentSpec, ell, n, seed=0) -> CriterionMargin:
    """Monte Carlo estimate of E[(b(0).ell)+] and E[(b(0).ell)-] over fresh environments."""
    if n < 1:
        raise UsageError("n must be >= 1")
    ell = np.asarray(ell, dtype=float)
    ienv, fenv, amat, asig = spec.kernel_arrays()
    d = int(spec.dim)
    vals = np.empty(n)
    pt = np.zeros((1, d))
    oa = np.empty((1, d, d))
    ob = np.empty((1, d))
    op = np.empty(1)
    for k, s in enumerate(environment_seeds(seed, n)):
        K.field_many(ienv, fenv, amat, asig, s, pt, oa, ob, op)
        vals[k] = ob[0] @ ell
    pos = np.maximum(vals, 0.0)
    neg = np.maximum(-vals, 0.0)
    se = (lambda z: float(z.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0)
    return CriterionMargin(
        positive_mean=float(pos.mean()), negative_mean=float(neg.mean()),
        positive_se=se(pos), negative_se=se(neg),
        negative_fraction=float(np.mean(vals < 0.0)), n=int(n),
    )
