"""Closed-form oracles: the alpha coefficients, the test function u, and 1-d scale functions."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.linalg import solve_banded

MAX_EXPONENT = 300.0


class RangeError(ValueError):
    pass


@dataclass(frozen=True)
class AlphaCoefficients:
    alpha1: float
    alpha2: float
    alpha3: float
    alpha4: float
    alpha5: float
    nu: float
    beta: float
    eps: float
    R: float

    def to_dict(self):
        return asdict(self)


def alpha_coefficients(nu, beta, eps, R) -> AlphaCoefficients:
    if not nu >= 1:
        raise ValueError("nu must be >= 1")
    if not (beta > 0 and eps > 0 and R > 0):
        raise ValueError("beta, eps and R must be positive")
    e = 20.0 * nu * beta * R
    if e > MAX_EXPONENT:
        raise RangeError(f"20*nu*beta*R = {e:.4g} exceeds {MAX_EXPONENT}")
    c = 4.0 * nu * nu * beta
    a2 = min(1.0, (c / eps) * math.exp(-e))
    return AlphaCoefficients(
        alpha1=eps * a2 / c,
        alpha2=a2,
        alpha3=1.0 + c / (eps * a2),
        alpha4=math.exp(-e),
        alpha5=1.0 + math.exp(e),
        nu=float(nu), beta=float(beta), eps=float(eps), R=float(R),
    )


@dataclass(frozen=True)
class TestFunctionU:
    """Piecewise exponential u on [-bL, L] with junctions at -bL+5R and L-5R."""

    alpha: AlphaCoefficients
    b: float
    L: float

    __test__ = False  # not a pytest class

    def __post_init__(self):
        R = self.alpha.R
        if not (self.L > 5 * R and self.b * self.L > 5 * R):
            raise ValueError("slab too small: need L > 5R and bL > 5R")
        if 4 * self.alpha.nu * self.alpha.beta * (self.L + self.b * self.L) > MAX_EXPONENT:
            raise RangeError("slab too wide for a finite evaluation of u")

    @classmethod
    def build(cls, nu, beta, eps, R, b, L):
        return cls(alpha_coefficients(nu, beta, eps, R), float(b), float(L))

    @property
    def left_junction(self):
        return -self.b * self.L + 5 * self.alpha.R

    @property
    def right_junction(self):
        return self.L - 5 * self.alpha.R

    @property
    def _rate(self):
        return self.alpha.alpha2 * self.alpha.eps / self.alpha.nu

    def _left(self, r):
        al, R, bL = self.alpha, self.alpha.R, self.b * self.L
        return al.alpha1 * np.exp(self._rate * (bL - 5 * R)) * (
            al.alpha3 - np.exp(4 * al.nu * al.beta * (r + bL - 5 * R)))

    def _middle(self, r):
        return np.exp(-self._rate * r)

    def _right(self, r):
        al, R, L = self.alpha, self.alpha.R, self.L
        return al.alpha4 * np.exp(-self._rate * (L - 5 * R)) * (
            al.alpha5 - np.exp(4 * al.nu * al.beta * (r - L + 5 * R)))

    def _dleft(self, r):
        al, R, bL = self.alpha, self.alpha.R, self.b * self.L
        k = 4 * al.nu * al.beta
        return -al.alpha1 * np.exp(self._rate * (bL - 5 * R)) * k * np.exp(k * (r + bL - 5 * R))

    def _dmiddle(self, r):
        return -self._rate * np.exp(-self._rate * r)

    def _dright(self, r):
        al, R, L = self.alpha, self.alpha.R, self.L
        k = 4 * al.nu * al.beta
        return -al.alpha4 * np.exp(-self._rate * (L - 5 * R)) * k * np.exp(k * (r - L + 5 * R))

    def __call__(self, r):
        return eval_u(self, r)


def eval_u(params: TestFunctionU, r):
    """u(r); outside [-bL, L] the value at the nearest endpoint is used."""
    r = np.clip(np.asarray(r, dtype=float), -params.b * params.L, params.L)
    lo, hi = params.left_junction, params.right_junction
    out = np.where(r < lo, params._left(r), np.where(r > hi, params._right(r), params._middle(r)))
    return float(out) if out.ndim == 0 else out


def eval_u_derivative(params: TestFunctionU, r):
    r = np.asarray(r, dtype=float)
    lo, hi = params.left_junction, params.right_junction
    out = np.where(r < lo, params._dleft(r), np.where(r > hi, params._dright(r), params._dmiddle(r)))
    return float(out) if out.ndim == 0 else out


def eval_jump(params: TestFunctionU, at):
    """j(r) = u'(r+) - u'(r-) at a junction."""
    if math.isclose(at, params.left_junction, rel_tol=0, abs_tol=1e-15):
        return float(params._dmiddle(at) - params._dleft(at))
    if math.isclose(at, params.right_junction, rel_tol=0, abs_tol=1e-15):
        return float(params._dright(at) - params._dmiddle(at))
    return 0.0


def v_lambda(lam, t, r, params: TestFunctionU):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("t must be >= 0")
    out = np.exp(lam * t) * eval_u(params, r)
    return float(out) if np.ndim(out) == 0 else out


def dump_u_csv(params: TestFunctionU, path, points=1001):
    rs = np.linspace(-params.b * params.L, params.L, points)
    _dump(path, rs, eval_u(params, rs))


# ---------------------------------------------------------------- scale function


def _as_func(c):
    if callable(c):
        return c
    val = float(c)
    return lambda x: np.full_like(np.asarray(x, dtype=float), val)


@dataclass
class ScaleFunction1D:
    x: np.ndarray
    s: np.ndarray
    interval: tuple

    def __call__(self, x):
        return np.interp(x, self.x, self.s)

    def richardson_error(self, a, b):
        """Estimate of the quadrature error at the right end from a half-size grid."""
        coarse = scale_function(a, b, self.interval, (len(self.x) - 1) // 2)
        return abs(self.s[-1] - coarse.s[-1]) / 3.0

    def to_csv(self, path):
        _dump(path, self.x, self.s)


def scale_function(a, b, interval, grid_size=100_000) -> ScaleFunction1D:
    """s(x) = int_lo^x exp(-2 int_lo^y b/a) dy by nested trapezoids."""
    if grid_size < 100:
        raise ValueError("grid size must be >= 100")
    lo, hi = map(float, interval)
    if not hi > lo:
        raise ValueError("interval must be increasing")
    xs = np.linspace(lo, hi, int(grid_size) + 1)
    av = _as_func(a)(xs)
    if np.any(av <= 0):
        raise ValueError("a must be positive on the interval")
    ratio = _as_func(b)(xs) / av
    h = np.diff(xs)
    inner = np.concatenate([[0.0], np.cumsum(0.5 * h * (ratio[1:] + ratio[:-1]))])
    dens = np.exp(-2.0 * inner)
    s = np.concatenate([[0.0], np.cumsum(0.5 * h * (dens[1:] + dens[:-1]))])
    return ScaleFunction1D(xs, s, (lo, hi))


def exit_prob_1d_oracle(a, b, interval, x0, grid_size=100_000):
    """P[exit at the right end] = s(x0)/s(right)."""
    lo, hi = map(float, interval)
    if not lo < x0 < hi:
        raise ValueError("x0 must lie in the open interval")
    sf = scale_function(a, b, interval, grid_size)
    return float(sf(x0) / sf.s[-1])


def exit_prob_fd_oracle(a, b, interval, x0, n=200_000):
    """Finite-difference solve of a/2 h'' + b h' = 0, h(lo)=0, h(hi)=1."""
    lo, hi = map(float, interval)
    xs = np.linspace(lo, hi, n + 1)
    hstep = xs[1] - xs[0]
    xi = xs[1:-1]
    av = _as_func(a)(xi)
    bv = _as_func(b)(xi)
    lower = 0.5 * av / hstep ** 2 - 0.5 * bv / hstep
    diag = -av / hstep ** 2
    upper = 0.5 * av / hstep ** 2 + 0.5 * bv / hstep
    m = n - 1
    ab = np.zeros((3, m))
    ab[0, 1:] = upper[:-1]
    ab[1] = diag
    ab[2, :-1] = lower[1:]
    rhs = np.zeros(m)
    rhs[-1] = -upper[-1]
    h = np.concatenate([[0.0], solve_banded((1, 1), ab, rhs), [1.0]])
    return float(np.interp(x0, xs, h))


def constant_drift_exit_prob(mu, lo, hi, x0, a=1.0):
    """Closed form for constant coefficients."""
    k = 2.0 * mu / a
    if k == 0:
        return (x0 - lo) / (hi - lo)
    return float(np.expm1(-k * (x0 - lo)) / np.expm1(-k * (hi - lo)))


def _dump(path, xs, ys):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["r", "value"])
        for x, y in zip(xs, ys):
            w.writerow([repr(float(x)), repr(float(y))])
