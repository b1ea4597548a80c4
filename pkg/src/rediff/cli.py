"""Command line entry point: run, validate and describe experiments from TOML/JSON configs."""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import estimators as est
from .analysis import RangeError, constant_drift_exit_prob, exit_prob_1d_oracle, exit_prob_fd_oracle
from .environment import ConfigError, EnvironmentSpec, UsageError, realize, verify_regularity
from .rng import TAG_ENV, TAG_REPLICATE, child_seed
from .sde import BallRegion, BoxRegion, GridSpec, NumericError, PathConfig, quenched_batch

SEED_TAG = "splitmix64(master, index, tag)"

_COMMON = {"n": 10000, "dt": 1e-3, "t_max": 100.0, "exit_mode": "bridge"}

KIND_DEFAULTS = {
    "oracle-1d": {"n": 200000, "dt": 1e-4, "grid": 100000, "interval": [-1.0, 1.0], "x0": 0.0,
                  "env_seed": 0},
    "exit-scan": {"n": 50000, "dt": 0.01, "t_max": 1000.0, "ell": None, "b": 1.0,
                  "L": [2.0, 4.0, 6.0, 8.0], "directions": None, "perturb": 0.2,
                  "lateral": "L2", "delta": None},
    "velocity": {"n": 2000, "dt": 0.01, "horizon": 50.0},
    "clt": {"n": 2000, "dt": 0.01, "s": [5.0, 10.0, 20.0]},
    "occupation": {"n": 200000, "region": {"kind": "box", "lo": [-1.0], "hi": [1.0]}, "cell": 0.05,
                   "quenched": False, "env_seed": 0},
    "aux": {"n": 100000, "region": {"kind": "ball", "center": None, "radius": 1.0}, "cell": 0.05,
            "mass_floor": 0.0},
    "compare-exit": {"n": 5000, "n_aux": 200000, "region": {"kind": "ball", "center": None, "radius": 1.0},
                     "cell": 0.05, "permutations": 199, "replicates": 1, "mass_floor": 0.0},
    "check-K": {"n": 100000, "region": {"kind": "ball", "center": None, "radius": 1.0}, "cell": 0.05,
                "eps": 0.05, "ell": None, "R": None, "mass_floor": 0.0},
    "supermartingale": {"n": 20000, "ell": None, "b": 1.0, "L": 2.0, "eps": 0.05, "lambda0": "search",
                        "times": None, "env_seed": 0, "lateral": "L2", "delta": None, "R": None},
    "bernstein": {"n": 100000, "dt": 0.01, "gamma": 1.0, "L": [1.0, 1.5, 2.0, 2.5], "beta": None,
                  "zbridge": True},
    "exit-time-tail": {"n": 20000, "dt": 0.01, "delta": 0.5, "L": [2.0, 4.0, 6.0, 8.0],
                       "mu": [1.0, 2.0, 3.0, 4.0], "b": 1.0},
    "green-shell": {"n": 20000, "dt": 1e-4, "region": {"kind": "ball", "center": None, "radius": 1.0},
                    "cell": 0.01, "box": 0.15, "edges": None},
    "heat-kernel": {"n": 5000, "dt": 0.01, "t": [4.0, 16.0], "r": [1.0, 1.5, 2.0, 2.5, 3.0]},
    "regularity": {"box": None, "step": 0.05, "pairs": 2000, "probes": 100, "env_seed": 0},
}
KINDS = tuple(KIND_DEFAULTS)
TOP_KEYS = {"kind", "seed", "workers", "out", "environment", *KINDS}


@dataclass
class ExperimentConfig:
    kind: str
    environment: EnvironmentSpec
    params: dict
    seed: int = 0
    workers: int = 1
    out: str = "out"

    def resolved(self):
        return {"kind": self.kind, "seed": self.seed, "workers": self.workers, "out": self.out,
                "environment": self.environment.to_dict(), self.kind: self.params}

    def config_hash(self):
        data = self.resolved()
        data.pop("workers")
        data.pop("out")
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()

    def path_config(self, **over):
        p = self.params
        kw = {"dt": p["dt"], "t_max": p["t_max"], "exit_mode": p["exit_mode"]}
        kw.update(over)
        return PathConfig(**kw)


@dataclass
class RunManifest:
    config_hash: str
    master_seed: int
    tool_version: str
    wall_clock: float
    seed_derivation: str = SEED_TAG
    workers: int = 1
    started: str = field(default="")

    def to_dict(self):
        return dict(self.__dict__)


# ---------------------------------------------------------------- parsing


def _no_dupes(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise ConfigError(k, "duplicate key")
        out[k] = v
    return out


def _load(text, fmt):
    if fmt == "json":
        return json.loads(text, object_pairs_hook=_no_dupes)
    from .environment import _load_toml
    return _load_toml(text)


def parse_config(source) -> ExperimentConfig:
    """Parse a TOML or JSON config given as a path or as text."""
    path = Path(source) if isinstance(source, Path) or "\n" not in str(source) else None
    if path is not None and path.is_file():
        text = path.read_text()
        fmt = "json" if path.suffix.lower() == ".json" else "toml"
    elif isinstance(source, Path) or (path is not None and path.suffix.lower() in (".toml", ".json")):
        raise ConfigError("config", f"cannot read {source}")
    else:
        text = str(source)
        fmt = "json" if text.lstrip().startswith("{") else "toml"
    try:
        data = _load(text, fmt)
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError("config", f"cannot parse {fmt}: {exc}") from exc
    return config_from_dict(data)


def _check_number(key, value, positive=False, integer=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(key, "must be a number")
    if integer and int(value) != value:
        raise ConfigError(key, "must be an integer")
    if positive and not value > 0:
        raise ConfigError(key, "must be positive")


def config_from_dict(data) -> ExperimentConfig:
    data = copy.deepcopy(data)
    for key in data:
        if key not in TOP_KEYS:
            raise ConfigError(key, "unknown key")
    sections = [k for k in KINDS if k in data]
    if len(sections) > 1:
        raise ConfigError(sections[1], f"duplicate kind sections: {', '.join(sections)}")
    kind = data.get("kind", sections[0] if sections else None)
    if kind is None:
        raise ConfigError("kind", "missing")
    if kind not in KINDS:
        raise ConfigError("kind", f"unknown kind {kind!r}")
    if sections and sections[0] != kind:
        raise ConfigError(sections[0], f"section does not match kind {kind!r}")
    if "environment" not in data:
        raise ConfigError("environment", "missing")
    env = data["environment"]
    if not isinstance(env, dict):
        raise ConfigError("environment", "must be a table")
    spec = EnvironmentSpec.from_dict(env)
    params = dict(_COMMON)
    params.update(KIND_DEFAULTS[kind])
    for key, value in (data.get(kind) or {}).items():
        if key not in params:
            raise ConfigError(key, f"unknown parameter for {kind}")
        params[key] = value
    for key in ("n", "n_aux", "permutations", "replicates", "grid", "pairs", "probes"):
        if key in params:
            _check_number(key, params[key], positive=True, integer=True)
            if params[key] < 1:
                raise ConfigError(key, "must be >= 1")
            params[key] = int(params[key])
    for key in ("dt", "t_max", "cell", "step", "horizon"):
        if key in params and params[key] is not None:
            _check_number(key, params[key], positive=True)
    if params["exit_mode"] not in ("naive", "bridge"):
        raise ConfigError("exit_mode", "must be naive or bridge")
    for key in ("ell",):
        if params.get(key) is not None:
            v = np.asarray(params[key], dtype=float)
            if v.shape != (spec.dim,) or abs(np.linalg.norm(v) - 1.0) > 1e-12:
                raise ConfigError(key, "must be a unit vector of the environment dimension")
    seed = data.get("seed", 0)
    _check_number("seed", seed, integer=True)
    workers = data.get("workers", 1)
    _check_number("workers", workers, positive=True, integer=True)
    return ExperimentConfig(kind, spec, params, int(seed), int(workers), str(data.get("out", "out")))


def _region(params, dim):
    r = dict(params["region"])
    kind = r.pop("kind", "ball")
    try:
        if kind == "ball":
            c = r.get("center") or [0.0] * dim
            return BallRegion(tuple(c), float(r.get("radius", 1.0)))
        if kind in ("box", "interval"):
            lo, hi = r.get("lo"), r.get("hi")
            lo = [lo] * dim if np.isscalar(lo) else lo
            hi = [hi] * dim if np.isscalar(hi) else hi
            return BoxRegion(tuple(lo), tuple(hi))
    except (TypeError, UsageError) as exc:
        raise ConfigError("region", str(exc)) from exc
    raise ConfigError("region", f"unknown region kind {kind!r}")


def _ell(cfg):
    ell = cfg.params.get("ell")
    return np.asarray(ell if ell is not None else cfg.environment.ell, dtype=float)


# ---------------------------------------------------------------- handlers


def _oracle_1d(cfg, out):
    spec, p = cfg.environment, cfg.params
    if spec.family != "deterministic" or spec.dim != 1:
        raise ConfigError("environment", "oracle-1d needs a deterministic d=1 environment")
    env = realize(spec, p["env_seed"])
    lo, hi = map(float, p["interval"])
    x0 = float(p["x0"])

    def a_fun(x):
        return np.full_like(np.asarray(x, float), float(env.evaluate([0.0])[0][0, 0]))

    def b_fun(x):
        return env.fast_field(np.asarray(x, float).reshape(-1, 1))[1][:, 0]

    oracle = exit_prob_1d_oracle(a_fun, b_fun, (lo, hi), x0, p["grid"])
    fd = exit_prob_fd_oracle(a_fun, b_fun, (lo, hi), x0)
    batch = quenched_batch(env, BoxRegion((lo,), (hi,)), p["n"], cfg.path_config(), cfg.seed, cfg.workers,
                           x0=[x0])
    front = est.exit_prob_front(batch, [1.0], hi)
    ok = abs(front.p_hat - oracle) <= 3 * front.se
    batch.to_csv(out / "exits.csv")
    report = {"oracle": oracle, "fd_oracle": fd, "mc": front.to_dict(),
              "z": (front.p_hat - oracle) / front.se if front.se > 0 else 0.0,
              "mean_exit_time": batch.mean_exit_time(), "face_counts": batch.face_counts()}
    if spec.profile == "constant":
        report["closed_form"] = constant_drift_exit_prob(spec.v[0], lo, hi, x0, spec.a[0][0] if spec.a else 1.0)
    return report, ok, "MC within 3 SE of the oracle" if ok else "MC differs from the oracle by more than 3 SE"


def _exit_scan(cfg, out):
    spec, p = cfg.environment, cfg.params
    ell = _ell(cfg)
    dirs = p["directions"] or est.perturbed_directions(ell, p["perturb"])
    res = est.condition_T_scan(spec, ell, p["b"], p["L"], dirs, p["n"], cfg.path_config(), cfg.seed,
                               cfg.workers, p["lateral"], p["delta"])
    for i, scan in enumerate(res.scans.values()):
        scan.to_csv(out / f"scan_{i}.csv")
    return res.to_dict(), res.verdict, res.message


def _velocity(cfg, out):
    spec, p = cfg.environment, cfg.params
    v = est.velocity_estimate(spec, p["horizon"], p["n"], cfg.path_config(), cfg.seed, cfg.workers)
    rep = v.to_dict()
    expected = None
    if spec.family == "divergence-free" or (spec.family == "deterministic" and spec.profile == "constant"):
        expected = np.asarray(spec.v)
    if expected is None:
        return rep, True, "no closed-form velocity for this family; estimate reported"
    dev = np.abs(v.v_hat - expected) / v.se
    rep["expected"] = expected.tolist()
    rep["deviation_se"] = dev.tolist()
    ok = bool(np.all(dev <= 3))
    return rep, ok, "velocity within 3 SE of E[b]" if ok else "velocity differs from E[b] by more than 3 SE"


def _clt(cfg, out):
    snaps = est.clt_snapshot(cfg.environment, cfg.params["s"], cfg.params["n"], cfg.path_config(),
                             cfg.seed, cfg.workers)
    ok = all(s.min_eigenvalue > 0 for s in snaps)
    return {"snapshots": [s.to_dict() for s in snaps]}, ok, "covariance non-degenerate" if ok else "degenerate covariance"


def _occupation(cfg, out):
    spec, p = cfg.environment, cfg.params
    region = _region(p, spec.dim)
    grid = est.grid_for(region, p["cell"])
    dyn = realize(spec, p["env_seed"]) if p["quenched"] else spec
    occ = est.occupation_density(dyn, region, grid, p["n"], cfg.path_config(), cfg.seed, cfg.workers)
    occ.to_csv(out / "occupation.csv")
    z = abs(occ.cell_sum - occ.mean_exit_time) / occ.exit_time_se if occ.exit_time_se > 0 else 0.0
    ok = z <= 3
    rep = occ.to_dict()
    rep["identity_z"] = z
    return rep, ok, "occupation identity holds within 3 SE" if ok else "occupation identity violated"


def _aux_estimate(cfg, region, n=None, seed=None):
    p = cfg.params
    grid = est.grid_for(region, p["cell"])
    return est.estimate_aux_coefficients(cfg.environment, region, grid, n or p["n"], cfg.path_config(),
                                         cfg.seed if seed is None else seed, cfg.workers, p["mass_floor"])


def _aux_invariants(aux, spec):
    cert = spec.certified()
    nu = max(cert["nu"], spec.nu) if spec.family != "generic-bump" else cert["nu"]
    full = ~aux.empty
    ev = np.linalg.eigvalsh(aux.a_hat[full]) if full.any() else np.ones((1, 1))
    bn = np.linalg.norm(aux.b_hat[full], axis=1) if full.any() else np.zeros(1)
    ok = bool(ev.min() >= 1 / nu - 1e-12 and ev.max() <= nu + 1e-12 and bn.max() <= spec.beta + 1e-12)
    return ok, {"eig_min": float(ev.min()), "eig_max": float(ev.max()), "drift_max": float(bn.max())}


def _aux(cfg, out):
    spec = cfg.environment
    region = _region(cfg.params, spec.dim)
    aux = _aux_estimate(cfg, region)
    aux.to_csv(out / "aux_field.csv")
    ok, inv = _aux_invariants(aux, spec)
    rep = aux.to_dict()
    rep["invariants"] = inv
    return rep, ok, "cell averages within certified bounds" if ok else "cell averages violate certified bounds"


def _compare_exit(cfg, out):
    spec, p = cfg.environment, cfg.params
    region = _region(p, spec.dim)
    rows = []
    for r in range(p["replicates"]):
        base = child_seed(cfg.seed, r, TAG_REPLICATE)
        aux = _aux_estimate(cfg, region, p["n_aux"], child_seed(base, 0, TAG_REPLICATE))
        ann = est.annealed_batch(spec, region, p["n"], cfg.path_config(), child_seed(base, 1, TAG_REPLICATE),
                                 cfg.workers)
        ab, rate = est.aux_exit_batch(aux, region, p["n"], cfg.path_config(), child_seed(base, 2, TAG_REPLICATE),
                                      cfg.workers)
        rep = est.compare_exit_distributions(ann.position, ab.position, p["permutations"],
                                             child_seed(base, 3, TAG_REPLICATE))
        rows.append({"replicate": r, "statistic": rep.statistic, "p_value": rep.p_value, "fallback_rate": rate})
    with open(out / "compare.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    valid = all(r["fallback_rate"] < 0.01 for r in rows)
    good = sum(r["p_value"] > 0.01 for r in rows)
    need = math.ceil(0.9 * len(rows))
    ok = valid and good >= need
    msg = (f"{good}/{len(rows)} replicates with p > 0.01" if valid
           else "fallback rate above 1%: comparison invalid")
    return {"replicates": rows, "passing": good, "valid": valid}, ok, msg


def _check_k(cfg, out):
    spec, p = cfg.environment, cfg.params
    region = _region(p, spec.dim)
    aux = _aux_estimate(cfg, region)
    aux.to_csv(out / "aux_field.csv")
    R = p["R"] if p["R"] is not None else spec.range
    rep = est.condition_K_check(aux, _ell(cfg), p["eps"], R)
    msg = "condition (K) holds" + (" (empty infimum)" if rep.empty_infimum else "") if rep.passed \
        else "condition (K) fails"
    return rep.to_dict(), rep.passed, msg


def _supermartingale(cfg, out):
    spec, p = cfg.environment, cfg.params
    env = realize(spec, p["env_seed"])
    cert = spec.certified()
    R = p["R"] if p["R"] is not None else spec.range
    rep = est.supermartingale_check(env, _ell(cfg), p["b"], p["L"], R, p["eps"], max(spec.nu, cert["nu"]),
                                    spec.beta, p["lambda0"], p["n"], cfg.path_config(), cfg.seed,
                                    cfg.workers, p["times"], lateral=p["lateral"], delta=p["delta"])
    with open(out / "supermartingale.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "mean", "se"])
        w.writerows(zip(rep.times, rep.means, rep.ses))
    msg = f"lambda0 = {rep.lambda0:.4g}, max upward step {rep.max_violation:.3g} SE"
    return rep.to_dict(), rep.passed, msg


def _bernstein(cfg, out):
    p = cfg.params
    res = est.bernstein_tail_scan(cfg.environment, p["gamma"], p["L"], p["n"],
                                  cfg.path_config(noiseless=cfg.environment.family == "deterministic"
                                                  and cfg.params.get("noiseless", False)),
                                  cfg.seed, cfg.workers, p["beta"], p["zbridge"])
    for k, s in res.scans.items():
        s.to_csv(out / f"tail_{k}.csv")
    ok = all(res.verdicts.values())
    return res.to_dict(), ok, "all three tails decay" if ok else "a tail scan does not decay"


def _exit_time_tail(cfg, out):
    p = cfg.params
    res = est.exit_time_tail_scan(cfg.environment, p["delta"], p["L"], p["mu"], p["n"], cfg.path_config(),
                                  cfg.seed, cfg.workers, p["b"])
    for k, s in res.scans.items():
        s.to_csv(out / f"tail_mu{k}.csv")
    ok = res.config["any_decays"]
    return res.to_dict(), ok, "some multiplier decays" if ok else "no multiplier shows decay"


def _green_shell(cfg, out):
    spec, p = cfg.environment, cfg.params
    region = _region(p, spec.dim)
    h = float(p["box"])
    grid = GridSpec(p["cell"], tuple([-h] * spec.dim), tuple([h] * spec.dim))
    occ = est.occupation_density(spec, region, grid, p["n"], cfg.path_config(), cfg.seed, cfg.workers)
    occ.to_csv(out / "occupation.csv")
    rep = est.green_shell_ratio(occ, spec.dim, region, p["edges"])
    return {"shells": rep.to_dict(), "occupation": occ.to_dict()}, rep.passed, \
        "shell ratios bounded" if rep.passed else "shell ratios grow toward the origin"


def _heat_kernel(cfg, out):
    p = cfg.params
    rep = est.heat_kernel_displacement_check(cfg.environment, p["t"], p["n"], cfg.path_config(), cfg.seed,
                                             cfg.workers, tuple(p["r"]))
    for k, s in rep.scans.items():
        s.to_csv(out / f"heat_t{k}.csv")
    return rep.to_dict(), rep.verdict, "Gaussian-type tails" if rep.verdict else "tail slope not negative"


def _regularity_report(cfg):
    spec, p = cfg.environment, cfg.params
    env = realize(spec, p.get("env_seed", 0))
    box = p.get("box") or [[-2 * spec.range] * spec.dim, [2 * spec.range] * spec.dim]
    return verify_regularity(env, box, p.get("step", 0.05), p.get("pairs", 2000), seed=cfg.seed,
                             probes=p.get("probes", 100))


def _regularity(cfg, out):
    rep = _regularity_report(cfg)
    ok = rep.range_test_pass and rep.fast_path_agrees and rep.within_certified(
        max(cfg.environment.nu, rep.certified["nu"]))
    return rep.to_dict(), ok, "certified bounds and finite range hold" if ok else "regularity check failed"


HANDLERS = {
    "oracle-1d": _oracle_1d, "exit-scan": _exit_scan, "velocity": _velocity, "clt": _clt,
    "occupation": _occupation, "aux": _aux, "compare-exit": _compare_exit, "check-K": _check_k,
    "supermartingale": _supermartingale, "bernstein": _bernstein, "exit-time-tail": _exit_time_tail,
    "green-shell": _green_shell, "heat-kernel": _heat_kernel, "regularity": _regularity,
}


def _dumps(obj):
    return json.dumps(est._jsonable(obj), indent=2, sort_keys=True)


def run(cfg: ExperimentConfig, out=None, fmt="json", stream=None):
    """Run one experiment; returns (exit status, report dict)."""
    stream = stream or sys.stdout
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    result, ok, message = HANDLERS[cfg.kind](cfg, out)
    report = {"kind": cfg.kind, "verdict": "pass" if ok else "fail", "message": message,
              "result": result, "config": cfg.resolved(),
              "seeds": {"master_seed": cfg.seed, "derivation": SEED_TAG, "config_hash": cfg.config_hash()}}
    report["config"].pop("workers")
    report["config"].pop("out")
    text = _dumps(report)
    (out / "report.json").write_text(text + "\n")
    manifest = RunManifest(cfg.config_hash(), cfg.seed, __version__, time.time() - t0,
                           workers=cfg.workers, started=started)
    (out / "manifest.json").write_text(_dumps(manifest.to_dict()) + "\n")
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["kind", "verdict", "message", "config_hash"])
        w.writerow([cfg.kind, report["verdict"], message, cfg.config_hash()])
        stream.write(buf.getvalue())
    else:
        stream.write(_dumps({k: report[k] for k in ("kind", "verdict", "message")}) + "\n")
    return (0 if ok else 2), report


def main(argv=None):
    ap = argparse.ArgumentParser(prog="rediff", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("run", "validate", "describe-env"):
        sp = sub.add_parser(name)
        sp.add_argument("config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int)
        sp.add_argument("--out")
        sp.add_argument("--format", choices=("json", "csv"), default="json")
    args = ap.parse_args(argv)
    try:
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.workers is not None:
            if args.workers < 1:
                raise ConfigError("workers", "must be >= 1")
            cfg.workers = args.workers
        if args.out is not None:
            cfg.out = args.out
        if args.command == "validate":
            print(_dumps(cfg.resolved()))
            return 0
        if args.command == "describe-env":
            rep = _regularity_report(cfg)
            if args.format == "csv":
                w = csv.writer(sys.stdout)
                d = est._jsonable(rep.to_dict())
                w.writerow(list(d))
                w.writerow([json.dumps(v) if isinstance(v, (dict, list)) else v for v in d.values()])
            else:
                print(_dumps(rep.to_dict()))
            return 0
        status, _ = run(cfg, fmt=args.format)
        return status
    except (ConfigError, UsageError, RangeError, NumericError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
