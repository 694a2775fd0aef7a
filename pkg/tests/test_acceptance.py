"""Acceptance suite. Each test prints one PASS/FAIL line for its criterion
(with output capture suspended, so the lines always show) and then asserts.
Run standalone with ``python tests/test_acceptance.py``.
"""

import functools
import sys
import time

import numpy as np
import pytest

from agelb import cavity as cv
from agelb import cli, metrics, phasetype, reference
from agelb import simulator as sim
from agelb.policies import Policy, parse_policy

from oracles import hexp_moments, mg1_mean_wait, sq_exp_tail

HEXP = phasetype.hexp(10, 0.5)
BASE_POLICIES = ("sq", "sq-rtb", "sq-re:2", "sq-rtb-re:2", "las", "las-qtb", "re:2", "lew")


def report(capsys, n, ok, summary, details=()):
    with capsys.disabled():
        print()
        for line in details:
            print(f"    {line}")
        print(f"{'PASS' if ok else 'FAIL'} criterion {n}: {summary}", flush=True)


@functools.lru_cache(maxsize=None)
def table_solve(label):
    row = reference.row(label)
    ph = row.ph()
    pol = row.make_policy(ph)
    t0 = time.perf_counter()
    res = cv.solve(pol, row.lam, ph, row.d, row.delta)
    return pol, ph, res, time.perf_counter() - t0


@functools.lru_cache(maxsize=None)
def base_solve(text, lam=0.8):
    pol = parse_policy(text, HEXP)
    return pol, cv.solve(pol, lam, HEXP, 5, 0.1)


@functools.lru_cache(maxsize=1)
def base_sweep():
    """Relative improvement curves, 19 loads x 8 policies, via the CLI driver."""
    cfg = cli.parse_config(["sweep", "--policies", ",".join(BASE_POLICIES), "--lambdas", "0.05:0.05:0.95",
                            "--d", "5", "--delta", "0.1", "--scv", "10", "--f", "0.5", "--k", "1"])
    t0 = time.perf_counter()
    rows, errors = cli.execute(cfg)
    elapsed = time.perf_counter() - t0
    curves = {}
    for r in rows:
        key = r["policy"] if r["T"] is None else f"{r['policy']}:{r['T']:g}"
        curves.setdefault(key, {})[round(r["lambda"], 2)] = r["ew_rel_vs_sq"]
    return curves, errors, elapsed


def test_criterion_1_table_cavity(capsys):
    details, ok = [], True
    for row in reference.TABLE1:
        _, _, res, secs = table_solve(row.label)
        ew = metrics.mean_metrics(res.dist, row.lam)[2]
        good = abs(ew - row.ew_limit) <= 2e-3 and secs < 60 and res.converged
        ok &= good
        details.append(f"{row.label:17s} ew={ew:.5f} published={row.ew_limit:.4f} "
                       f"diff={ew - row.ew_limit:+.5f} time={secs:5.1f}s r={res.grid.r} B={res.dist.B} "
                       f"{'ok' if good else 'MISS'}")
    n_ok = sum(d.endswith("ok") for d in details)
    report(capsys, 1, ok, f"{n_ok}/7 Table rows within 2e-3 of the limit column, each solve < 60 s", details)
    assert ok


def _sim_row(row, runs=40, f=None):
    ph = phasetype.fit_merlang(row.scv, row.f if f is None else f, row.k)
    pol = row.make_policy(ph)
    grid = cv.solver_grid(pol, row.delta, None, ph)
    return sim.run_experiment(sim.SimConfig(1000, row.lam, row.d, pol, grid, ph, runs=runs))


def test_criterion_2_table_simulation(capsys):
    details, ok = [], True
    for label in ("SQ(3)-RTB", "RE(6,2)", "LEW(8)"):
        row = reference.row(label)
        t0 = time.perf_counter()
        stats = _sim_row(row)
        target = row.finite(1000)
        z = abs(stats.mean_wait - target) / stats.wait_sd
        good = z <= 3
        ok &= good
        details.append(f"{label:10s} N=1000 runs=40 mean={stats.mean_wait:.4f} sd={stats.wait_sd:.4f} "
                       f"published={target:.4f} |diff|/sd={z:.2f} ({time.perf_counter() - t0:.0f}s) "
                       f"{'ok' if good else 'MISS'}")
    # diagnostic only: the RE(6,2) row at the small-job fraction used by the row above it
    row = reference.row("RE(6,2)")
    stats = _sim_row(row, f=0.1)
    z = abs(stats.mean_wait - row.finite(1000)) / stats.wait_sd
    details.append(f"[diagnostic, not scored] RE(6,2) with f=1/10: mean={stats.mean_wait:.4f} "
                   f"sd={stats.wait_sd:.4f} |diff|/sd={z:.2f}")
    report(capsys, 2, ok, "simulated N=1000 mean waits within 3 sample sd of the published values", details)
    assert ok


def test_criterion_3_sq_exponential(capsys):
    worst = 0.0
    for d in (2, 3, 5):
        for lam in (0.5, 0.8, 0.95):
            tail = cv.solve(Policy("sq"), lam, phasetype.exponential(), d).dist.queue_tail()
            for ell in range(1, 9):
                want = sq_exp_tail(lam, d, ell)
                got = tail[ell] if ell < len(tail) else 0.0
                worst = max(worst, abs(got - want))
    ok = worst <= 1e-8
    report(capsys, 3, ok, f"SQ(d) exponential tails vs closed form, max abs error {worst:.2e} (tol 1e-8)")
    assert ok


def test_criterion_4_pollaczek_khinchine(capsys):
    s = phasetype.merlang_parameters(10, 0.5, 1)
    second = hexp_moments(s.p, s.mu1, s.mu2)[1]
    details, ok = [], True
    for lam in (0.3, 0.5, 0.7):
        cfg = sim.SimConfig(1, lam, 1, Policy("sq"), cv.solver_grid(Policy("sq"), 0.1), HEXP)
        stats = sim.run_experiment(cfg)
        want = mg1_mean_wait(lam, second)
        rel = stats.mean_wait / want - 1
        good = abs(rel) <= 0.02
        ok &= good
        details.append(f"lambda={lam} sim={stats.mean_wait:.4f} P-K={want:.4f} rel.err={rel:+.4f} "
                       f"{'ok' if good else 'MISS'}")
    report(capsys, 4, ok, "N=d=1 simulation within 2% of Pollaczek-Khinchine for HEXP(10,1/2)", details)
    assert ok


def _monotone_after(history, start=5):
    h = np.asarray(history)[start - 1:]
    return bool(np.all(np.diff(h) < 0))


def test_criterion_5_convergence(capsys):
    details, ok = [], True
    for text in BASE_POLICIES:
        _, res = base_solve(text)
        mono = _monotone_after(res.history)
        good = res.converged and res.residual <= 1e-10 and res.iterations < 50 and mono
        ok &= good
        h = np.asarray(res.history)
        ratios = h[5:] / h[4:-1] if h.size > 5 else h[1:] / h[:-1]
        details.append(f"{text:12s} iterations={res.iterations:2d} residual={res.residual:.1e} "
                       f"monotone after 5={mono} median contraction={np.median(ratios):.3f} "
                       f"{'ok' if good else 'MISS'}")
    report(capsys, 5, ok, "every policy at lambda=0.8 converges to 1e-10 in < 50 geometric iterations", details)
    assert ok


def _identities(pol, ph, res, lam, d):
    pi = res.dist
    idle = abs(pi.idle - (1 - lam))
    total = abs(pi.total() - 1)
    flow = abs(res.rates.idle * pi.idle + float((res.rates.rates * pi.marginals()).sum()) - lam)
    J = metrics.join_law(res, pol, d)
    join = abs(J.busy_mass - lam**d) if pol.variant != "random" else 0.0
    EW = metrics.mean_metrics(pi, lam)[2]
    integral = abs(metrics.integrated_mean(lambda w: metrics.waiting_survival(J, ph, w)) - EW)
    return idle, total, join, flow, integral


def test_criterion_6_identities(capsys):
    cases = []
    for text in BASE_POLICIES:
        pol, res = base_solve(text)
        cases.append((f"{text} @0.8", pol, HEXP, res, 0.8, 5))
    for row in reference.TABLE1:
        pol, ph, res, _ = table_solve(row.label)
        cases.append((row.label, pol, ph, res, row.lam, row.d))
    rnd = Policy("random")
    cases.append(("random @0.6", rnd, HEXP, cv.solve(rnd, 0.6, HEXP, 5), 0.6, 5))
    tols = (1e-8, 1e-10, 1e-8, 1e-8, 1e-4)
    names = ("pi0=1-lambda", "sum pi=1", "busy-join=lambda^d", "flow=lambda", "EW=int F_W")
    worst = np.zeros(5)
    details = []
    for label, pol, ph, res, lam, d in cases:
        errs = np.array(_identities(pol, ph, res, lam, d))
        worst = np.maximum(worst, errs)
        if np.any(errs > tols):
            details.append(f"{label}: " + ", ".join(f"{n}={e:.1e}" for n, e in zip(names, errs)))
    ok = bool(np.all(worst <= tols))
    summary = ", ".join(f"{n} {e:.1e}" for n, e in zip(names, worst))
    report(capsys, 6, ok, f"identities at {len(cases)} fixed points, worst: {summary}", details)
    assert ok


def test_criterion_7_qualitative(capsys):
    curves, errors, _ = base_sweep()
    grid = [round(0.1 * i, 1) for i in range(1, 10)]
    details = []
    a_ok = True
    for text in ("sq-rtb", "sq-re:2", "sq-rtb-re:2"):
        low = min(curves[text][lam] for lam in grid)
        a_ok &= low > 0
        details.append(f"(a) {text:12s} min E_rel over 0.1..0.9 = {low:.4f}")
    b_ok = True
    for text in ("las", "re:2"):
        c = curves[text]
        lams = sorted(c)
        cross = [(a, b) for a, b in zip(lams, lams[1:]) if c[a] > 0 >= c[b]]
        b_ok &= bool(cross) and c[lams[0]] > 0
        where = f"lambda_max in ({cross[0][0]}, {cross[0][1]})" if cross else "no sign change"
        details.append(f"(b) {text:12s} {where}")
    c_ok = True
    for f, want in ((0.5, 0.53), (0.1, 0.12)):
        got = phasetype.merlang_parameters(10, f, 1).small_job_mean
        c_ok &= abs(got - want) <= 0.01
        details.append(f"(c) HEXP(10,{f}) small-job mean {got:.4f} (published {want})")
    ok = a_ok and b_ok and c_ok and not errors
    report(capsys, 7, ok, f"(a) {'ok' if a_ok else 'MISS'}, (b) {'ok' if b_ok else 'MISS'}, (c) {'ok' if c_ok else 'MISS'}",
           details)
    assert ok


def test_criterion_8_sweep(capsys):
    curves, errors, elapsed = base_sweep()
    details, shape_ok = [], True
    for text in BASE_POLICIES[1:]:
        c = curves[text]
        plateau = max(abs(c[lam] - c[0.05]) for lam in (0.1, 0.15, 0.2, 0.25, 0.3))
        decline = c[0.3] > c[0.6] > c[0.9]
        good = plateau < 0.01 and decline
        shape_ok &= good
        details.append(f"{text:12s} E_rel: 0.05->{c[0.05]:.3f} 0.3->{c[0.3]:.3f} 0.6->{c[0.6]:.3f} "
                       f"0.9->{c[0.9]:.3f} plateau spread={plateau:.4f} {'ok' if good else 'MISS'}")
    npts = sum(len(c) for c in curves.values())
    ok = elapsed < 900 and shape_ok and not errors and npts == 152
    report(capsys, 8, ok, f"{npts}-point sweep in {elapsed:.0f} s (< 900 s), plateau then decline for every policy",
           details)
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
