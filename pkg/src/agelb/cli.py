"""Command-line front end: solve, simulate, sweep and the benchmark table.

Configuration comes from flags and optionally from a ``key=value`` file
(``--config``); flags win. Results are CSV rows (10 significant digits) on
stdout or in ``--output``, which is resolved inside ``$AGELB_OUTPUT_DIR``
when that variable is set and the path is relative.
"""

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation

from . import cavity, metrics, phasetype, reference, simulator
from .errors import ConvergenceError, InfeasibleFitError
from .policies import parse_policy

log = logging.getLogger("agelb")

MODES = ("solve", "simulate", "sweep", "table1")
HEADER = ("mode,policy,d,lambda,delta,r,scv,f,k,T,N,ew,eq,er,ew_rel_vs_sq,"
          "iters,residual,runs,sd").split(",")
OUTPUT_DIR_ENV = "AGELB_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    mode: str
    policies: list = field(default_factory=lambda: ["sq"])
    lambdas: list = field(default_factory=lambda: [0.8])
    d: int = 5
    delta: float = 0.1
    r: int = None
    scv: float = 10.0
    f: float = 0.5
    k: int = 1
    T: float = None
    tol: float = cavity.DEFAULT_TOL
    max_iter: int = cavity.DEFAULT_MAX_ITER
    B_cap: int = cavity.B_CAP
    N: int = 1000
    runs: int = 40
    horizon: float = None
    warmup: float = 0.30
    seed: int = 0
    replace: bool = False
    sim_N: list = field(default_factory=list)
    output: str = None
    json: str = None
    jobs: int = 1
    verbose: int = 0

    def sim_horizon(self, N):
        return self.horizon if self.horizon is not None else 1e7 / N


# key -> (parser, flag help)
_KEYS = {
    "policy": (str, "policy, e.g. sq-rtb, sq-re:2, lew"),
    "policies": (str, "comma-separated policies (sweep)"),
    "lambda": (float, "per-server load in [0, 1)"),
    "lambdas": (str, "load grid start:step:end (inclusive) or comma list"),
    "d": (int, "number of sampled servers"),
    "delta": (float, "layer width"),
    "r": (int, "number of finite layers (default: from the job-size tail)"),
    "scv": (float, "job-size SCV"),
    "f": (float, "fraction of work carried by small jobs"),
    "k": (int, "Erlang order of each branch"),
    "T": (float, "threshold for -re policies given without one"),
    "tol": (float, "fixed-point tolerance (L1)"),
    "max-iter": (int, "fixed-point iteration cap"),
    "B-cap": (int, "queue-length truncation cap"),
    "N": (int, "servers in the simulation"),
    "runs": (int, "simulation replications"),
    "horizon": (float, "simulated time per run (default 1e7/N)"),
    "warmup": (float, "warm-up fraction of the horizon"),
    "seed": (int, "base seed"),
    "replace": (None, "sample servers with replacement"),
    "sim-N": (str, "table1: comma list of N to also simulate"),
    "output": (str, "CSV path (default stdout)"),
    "json": (str, "also write rows as JSON lines here"),
    "jobs": (int, "parallel worker processes"),
}


def parse_grid(text):
    """``start:step:end`` (inclusive) or a comma list; empty text is an empty grid."""
    text = text.strip()
    if not text:
        return []
    try:
        if ":" in text:
            start, step, end = (Decimal(p) for p in text.split(":"))
            if step <= 0:
                raise ConfigError(f"grid step must be positive in {text!r}")
            out, x = [], start
            while x <= end:
                out.append(float(x))
                x += step
            return out
        return [float(Decimal(p)) for p in text.split(",") if p.strip()]
    except (InvalidOperation, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"malformed grid {text!r}") from None


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip().replace("_", "-")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            if key == "mode":
                values[key] = value.strip()
                continue
            match = {k.lower(): k for k in _KEYS}.get(key.lower())
            if match is None:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[match] = value.strip()
    return values


def build_parser():
    p = argparse.ArgumentParser(prog="agelb", description=__doc__.split("\n")[0])
    p.add_argument("mode", nargs="?", choices=MODES)
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("-v", "--verbose", action="count", default=0)
    for key, (typ, help_) in _KEYS.items():
        dest = key.replace("-", "_")
        if typ is None:
            p.add_argument(f"--{key}", dest=dest, action="store_true", default=None, help=help_)
        else:
            # parsed later so file values and flags share one validation path
            p.add_argument(f"--{key}", dest=dest, default=None, help=help_)
    return p


def _convert(key, text):
    typ = _KEYS[key][0]
    if typ is None:
        return text if isinstance(text, bool) else str(text).lower() in ("1", "true", "yes", "on")
    if typ is str:
        return str(text)
    try:
        return typ(Decimal(str(text))) if typ is float else int(str(text))
    except (InvalidOperation, ValueError):
        raise ConfigError(f"--{key}: cannot parse {text!r} as {typ.__name__}") from None


def parse_config(argv=None):
    """Resolve flags (and an optional file) into an ExperimentConfig."""
    ns = build_parser().parse_args(argv)
    raw = read_config_file(ns.config) if ns.config else {}
    mode = ns.mode or raw.pop("mode", None)
    raw.pop("mode", None)
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {', '.join(MODES)}")
    for key in _KEYS:
        flag = getattr(ns, key.replace("-", "_"))
        if flag is not None:
            raw[key] = flag
    vals = {key: _convert(key, v) for key, v in raw.items()}

    cfg = ExperimentConfig(mode=mode)
    if "policies" in vals:
        cfg.policies = [s.strip() for s in vals.pop("policies").split(",") if s.strip()]
    if "policy" in vals:
        cfg.policies = [vals.pop("policy")]
    if "lambdas" in vals:
        cfg.lambdas = parse_grid(vals.pop("lambdas"))
    if "lambda" in vals:
        cfg.lambdas = [vals.pop("lambda")]
    if "sim-N" in vals:
        cfg.sim_N = [int(x) for x in parse_grid(vals.pop("sim-N"))]
    for key, v in vals.items():
        setattr(cfg, key.replace("-", "_"), v)
    validate(cfg)
    cfg.verbose = ns.verbose
    return cfg


def resolve_policy(text, T=None):
    """Policy string with ``--T`` filled in for -re variants given bare."""
    name = text.strip().lower()
    if name in ("sq-re", "sq-rtb-re", "re") and T is not None:
        name = f"{name}:{T:g}"
    return name


def validate(cfg):
    for lam in cfg.lambdas:
        if not 0.0 <= lam < 1.0:
            raise ConfigError(f"--lambda: {lam} outside [0, 1)")
    if cfg.d < 1:
        raise ConfigError("--d: must be at least 1")
    if cfg.delta <= 0:
        raise ConfigError("--delta: must be positive")
    if cfg.r is not None and cfg.r < 0:
        raise ConfigError("--r: must be nonnegative")
    if cfg.N < 1 or cfg.runs < 1 or cfg.jobs < 1:
        raise ConfigError("--N, --runs and --jobs must be positive")
    if not 0.0 <= cfg.warmup < 1.0:
        raise ConfigError("--warmup: must lie in [0, 1)")
    if cfg.mode in ("simulate",) and cfg.d > cfg.N and not cfg.replace:
        raise ConfigError("--d: exceeds --N; use --replace to sample with replacement")
    try:
        phasetype.merlang_parameters(cfg.scv, cfg.f, cfg.k)
    except (InfeasibleFitError, ValueError) as exc:
        raise ConfigError(f"job sizes: {exc}") from None
    for text in cfg.policies:
        try:
            parse_policy(resolve_policy(text, cfg.T), phasetype.exponential())
        except ValueError as exc:
            raise ConfigError(f"--policy: {exc}") from None


# ---------------------------------------------------------------------------
# jobs
# ---------------------------------------------------------------------------


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, str):
        return x
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, int):
        return str(x)
    return f"{x:.10g}"


def _base_row(mode, policy, d, lam, delta, scv, f, k):
    pol_name, _, arg = policy.partition(":")
    row = dict.fromkeys(HEADER)
    row.update(mode=mode, policy=pol_name, d=d, **{"lambda": lam}, delta=delta,
               scv=scv, f=f, k=k, T=float(arg) if arg else None)
    return row


def _solve_point(args):
    """One cavity solve; returns a CSV row dict and an error message."""
    mode, policy, d, lam, delta, r, scv, f, k, tol, max_iter, B_cap, with_rel = args
    ph = phasetype.fit_merlang(scv, f, k)
    pol = parse_policy(policy, ph)
    row = _base_row(mode, policy, d, lam, delta, scv, f, k)
    try:
        res = cavity.solve(pol, lam, ph, d, delta, r, tol=tol, max_iter=max_iter, B_cap=B_cap)
    except ConvergenceError as exc:
        tail = ", ".join(f"{h:.3e}" for h in exc.history[-5:])
        return row, f"{policy} d={d} lambda={lam}: {exc} (last residuals {tail})"
    EQ, ER, EW = metrics.mean_metrics(res.dist, lam)
    row.update(r=res.grid.r, ew=EW, eq=EQ, er=ER, iters=res.iterations, residual=res.residual)
    if with_rel and pol.variant == "sq":
        row["ew_rel_vs_sq"] = 0.0
    elif with_rel and lam > 0:
        base = cavity.solve(parse_policy("sq"), lam, ph, d, delta, tol=tol, max_iter=max_iter, B_cap=B_cap)
        ew_sq = metrics.mean_metrics(base.dist, lam)[2]
        row["ew_rel_vs_sq"] = metrics.relative_improvement(ew_sq, EW) if ew_sq > 0 else None
    return row, None


def _simulate_point(args):
    mode, policy, d, lam, delta, r, scv, f, k, N, runs, horizon, warmup, seed, replace = args
    ph = phasetype.fit_merlang(scv, f, k)
    pol = parse_policy(policy, ph)
    grid = cavity.solver_grid(pol, delta, r, ph)
    cfg = simulator.SimConfig(N, lam, d, pol, grid, ph, horizon=horizon, warmup=warmup,
                              runs=runs, seed=seed, replace=replace)
    stats = simulator.run_experiment(cfg)
    row = _base_row(mode, policy, d, lam, delta, scv, f, k)
    row.update(r=grid.r, N=N, ew=stats.mean_wait, eq=stats.mean("mean_queue"),
               er=stats.mean("mean_response"), runs=runs, sd=stats.wait_sd)
    return row, None


def _jobs(cfg):
    """Expand the config into ordered (worker, args) pairs."""
    out = []
    policies = [resolve_policy(p, cfg.T) for p in cfg.policies]
    if cfg.mode in ("solve", "sweep"):
        for pol in policies:
            for lam in cfg.lambdas:
                out.append((_solve_point, (cfg.mode, pol, cfg.d, lam, cfg.delta, cfg.r, cfg.scv, cfg.f,
                                           cfg.k, cfg.tol, cfg.max_iter, cfg.B_cap, True)))
    elif cfg.mode == "simulate":
        for pol in policies:
            for lam in cfg.lambdas:
                out.append((_simulate_point, ("simulate", pol, cfg.d, lam, cfg.delta, cfg.r, cfg.scv, cfg.f,
                                              cfg.k, cfg.N, cfg.runs, cfg.sim_horizon(cfg.N), cfg.warmup,
                                              cfg.seed, cfg.replace)))
    else:
        for row in reference.TABLE1:
            out.append((_solve_point, ("table1", row.policy, row.d, row.lam, row.delta, cfg.r, row.scv, row.f,
                                       row.k, cfg.tol, cfg.max_iter, cfg.B_cap, False)))
            for N in cfg.sim_N:
                out.append((_simulate_point, ("table1", row.policy, row.d, row.lam, row.delta, cfg.r, row.scv,
                                              row.f, row.k, N, cfg.runs, cfg.sim_horizon(N), cfg.warmup,
                                              cfg.seed, cfg.replace)))
    return out


def _call(job):
    fn, args = job
    return fn(args)


def execute(cfg):
    """Run every point; returns ``(rows, errors)`` in job order."""
    jobs = _jobs(cfg)
    if cfg.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_call, jobs))
    else:
        results = [_call(j) for j in jobs]
    rows = [r for r, _ in results]
    errors = [e for _, e in results if e]
    return rows, errors


def format_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HEADER)
    for row in rows:
        writer.writerow([_fmt(row[h]) for h in HEADER])
    return buf.getvalue()


def _resolve_path(path):
    base = os.environ.get(OUTPUT_DIR_ENV)
    if base and not os.path.isabs(path):
        os.makedirs(base, exist_ok=True)
        return os.path.join(base, path)
    return path


def run(cfg, stdout=None):
    """Execute ``cfg`` and write its artifacts; returns the exit status."""
    stdout = stdout or sys.stdout
    rows, errors = execute(cfg)
    text = format_csv(rows)
    if cfg.output:
        with open(_resolve_path(cfg.output), "w") as fh:
            fh.write(text)
    else:
        stdout.write(text)
    if cfg.json:
        with open(_resolve_path(cfg.json), "w") as fh:
            for row in rows:
                fh.write(json.dumps({h: row[h] for h in HEADER}) + "\n")
    for err in errors:
        print(f"agelb: not converged: {err}", file=sys.stderr)
    return 2 if errors else 0


def main(argv=None):
    try:
        cfg = parse_config(argv)
    except ConfigError as exc:
        print(f"agelb: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.WARNING - 10 * min(cfg.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
