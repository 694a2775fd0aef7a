"""Discrete-event simulation of N FCFS servers fed by a power-of-d dispatcher.

Jobs arrive as a Poisson(lambda*N) stream. Each arrival samples ``d`` servers,
reads ``(layer of head-job age, queue length)`` from each and joins the one
with the smallest aversion score, ties uniform.

Servers are updated lazily: every server keeps the (start, departure) times
of the jobs it holds, and completed jobs are dropped only when the server is
next sampled. FCFS makes a job's start and departure known at assignment,
so no event queue is needed.
"""

import logging
import math
from dataclasses import dataclass, field

import numba
import numpy as np

from . import phasetype
from .policies import LayerGrid, Policy, lew_residuals

log = logging.getLogger(__name__)

CHUNK = 1 << 17
INITIAL_CAPACITY = 32
STREAMS = {"arrivals": 0, "service": 1, "sampling": 2, "ties": 3}
POLICY_CODES = {"random": 0, "sq": 1, "sq-rtb": 2, "sq-re": 3, "sq-rtb-re": 4,
                "las": 5, "las-qtb": 6, "re": 7, "lew": 8}

# accumulator slots
N_JOBS, SUM_WAIT, SUM_RESP, SUM_SIZE, AREA, BUSY, SUM_WAIT2 = range(7)
N_STATS = 7


@dataclass
class SimConfig:
    N: int
    lam: float
    d: int
    policy: Policy
    grid: LayerGrid
    ph: phasetype.PhaseTypeDist
    horizon: float = None
    warmup: float = 0.30
    runs: int = 40
    seed: int = 0
    replace: bool = False

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be positive")
        if not 1 <= self.d <= self.N and not self.replace:
            raise ValueError("need 1 <= d <= N when sampling without replacement")
        if self.d < 1:
            raise ValueError("d must be positive")
        if not 0.0 <= self.lam < 1.0:
            raise ValueError("lambda must lie in [0, 1)")
        if not 0.0 <= self.warmup < 1.0:
            raise ValueError("warm-up fraction must lie in [0, 1)")
        if self.horizon is None:
            self.horizon = 1e7 / self.N


@dataclass
class RunStats:
    run: int
    jobs: int
    mean_wait: float
    mean_response: float
    mean_size: float
    mean_queue: float
    utilization: float
    wait_sd: float


@dataclass
class SimStats:
    config: SimConfig
    runs: list = field(default_factory=list)

    def _col(self, name):
        return np.array([getattr(r, name) for r in self.runs], dtype=float)

    def mean(self, name="mean_wait"):
        return float(self._col(name).mean())

    def sd(self, name="mean_wait"):
        x = self._col(name)
        return float(x.std(ddof=1)) if x.size > 1 else 0.0

    @property
    def jobs(self):
        return int(sum(r.jobs for r in self.runs))

    @property
    def mean_wait(self):
        return self.mean("mean_wait")

    @property
    def wait_sd(self):
        return self.sd("mean_wait")


@numba.njit(cache=True)
def _score(code, k, ell, s, res):
    if k == 0:
        return 0.0, 0.0, 0.0
    if code == 0:
        return 0.0, 0.0, 0.0
    if code == 1:
        return float(ell), 0.0, 0.0
    if code == 2:
        return float(ell), float(k), 0.0
    if code == 3 or code == 6:
        return float(k), float(ell), 0.0
    if code == 4:
        return 1.0 if k > s else 0.0, float(ell), float(k)
    if code == 5 or code == 7:
        return float(k), 0.0, 0.0
    return (ell - 1.0) + res[k], 0.0, 0.0


@numba.njit(cache=True)
def _layer(age, c):
    # c holds c_1..c_r; result k with age in (c_{k-1}, c_k], age 0 -> 1
    lo, hi = 0, c.shape[0]
    while lo < hi:
        mid = (lo + hi) >> 1
        if c[mid] < age:
            lo = mid + 1
        else:
            hi = mid
    return lo + 1


@numba.njit(cache=True)
def _simulate_chunk(t_arr, sizes, u_pick, u_tie, start, dep, head, count, free_at, perm,
                    code, s, c, res, replace, warm, horizon, acc, begin):
    N = head.shape[0]
    cap = start.shape[1]
    d = u_pick.shape[1]
    cand = np.empty(d, dtype=np.int64)
    for i in range(begin, t_arr.shape[0]):
        t = t_arr[i]
        best0 = np.inf
        best1 = np.inf
        best2 = np.inf
        nties = 0
        for j in range(d):
            if replace:
                srv = int(u_pick[i, j] * N)
            else:
                jj = j + int(u_pick[i, j] * (N - j))
                tmp = perm[j]
                perm[j] = perm[jj]
                perm[jj] = tmp
                srv = perm[j]
            # drop completed jobs
            while count[srv] > 0 and dep[srv, head[srv]] <= t:
                head[srv] = (head[srv] + 1) % cap
                count[srv] -= 1
            ell = count[srv]
            if ell == 0:
                k = 0
            else:
                k = _layer(t - start[srv, head[srv]], c)
            a0, a1, a2 = _score(code, k, ell, s, res)
            if a0 < best0 or (a0 == best0 and (a1 < best1 or (a1 == best1 and a2 < best2))):
                best0, best1, best2 = a0, a1, a2
                cand[0] = srv
                nties = 1
            elif a0 == best0 and a1 == best1 and a2 == best2:
                # with replacement the same server can be drawn twice
                dup = False
                for q in range(nties):
                    if cand[q] == srv:
                        dup = True
                if not dup:
                    cand[nties] = srv
                    nties += 1
        pick = cand[int(u_tie[i] * nties)] if nties > 1 else cand[0]
        size = sizes[i]
        st = t if free_at[pick] < t else free_at[pick]
        dp = st + size
        free_at[pick] = dp
        slot = (head[pick] + count[pick]) % cap
        start[pick, slot] = st
        dep[pick, slot] = dp
        count[pick] += 1
        # time-average accounting on [warm, horizon]
        lo = t if t > warm else warm
        hi = dp if dp < horizon else horizon
        if hi > lo:
            acc[AREA] += hi - lo
        lo = st if st > warm else warm
        if hi > lo:
            acc[BUSY] += hi - lo
        if t >= warm:
            w = st - t
            acc[N_JOBS] += 1.0
            acc[SUM_WAIT] += w
            acc[SUM_WAIT2] += w * w
            acc[SUM_RESP] += dp - t
            acc[SUM_SIZE] += size
        if count[pick] == cap:
            return i + 1
    return t_arr.shape[0]


def _stream(seed, run, purpose):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(run, STREAMS[purpose])))


def _grow(start, dep, head, count):
    N, cap = start.shape
    new_cap = 2 * cap
    ns = np.zeros((N, new_cap))
    nd = np.zeros((N, new_cap))
    idx = (head[:, None] + np.arange(cap)[None, :]) % cap
    rows = np.arange(N)[:, None]
    ns[:, :cap] = start[rows, idx]
    nd[:, :cap] = dep[rows, idx]
    head[:] = 0
    return ns, nd


def _policy_arrays(cfg):
    grid = cfg.grid
    c = np.array(grid.thresholds[1:], dtype=float)
    if cfg.policy.variant == "lew":
        res = lew_residuals(cfg.policy.ph, grid)
    else:
        res = np.zeros(grid.r + 2)
    s = grid.index_of(cfg.policy.threshold) if cfg.policy.variant == "sq-rtb-re" else 0
    return POLICY_CODES[cfg.policy.variant], s, c, res


def run_replication(cfg, run=0):
    """Simulate one independent replication; deterministic in ``(cfg.seed, run)``."""
    N, d = cfg.N, cfg.d
    horizon = float(cfg.horizon)
    warm = cfg.warmup * horizon
    window = horizon - warm
    code, s, c, res = _policy_arrays(cfg)
    rng_arr = _stream(cfg.seed, run, "arrivals")
    rng_srv = _stream(cfg.seed, run, "service")
    rng_pick = _stream(cfg.seed, run, "sampling")
    rng_tie = _stream(cfg.seed, run, "ties")

    cap = INITIAL_CAPACITY
    start = np.zeros((N, cap))
    dep = np.zeros((N, cap))
    head = np.zeros(N, dtype=np.int64)
    count = np.zeros(N, dtype=np.int64)
    free_at = np.zeros(N)
    perm = np.arange(N, dtype=np.int64)
    acc = np.zeros(N_STATS)

    total_rate = cfg.lam * N
    t = 0.0
    while total_rate > 0:
        gaps = rng_arr.standard_exponential(CHUNK) / total_rate
        t_arr = t + np.cumsum(gaps)
        done = t_arr[-1] > horizon
        if done:
            t_arr = t_arr[t_arr <= horizon]
        else:
            t = t_arr[-1]
        n = t_arr.size
        sizes = phasetype.sample(cfg.ph, rng_srv, n)
        u_pick = rng_pick.random((n, d))
        u_tie = rng_tie.random(n)
        i = 0
        while i < n:
            i = _simulate_chunk(t_arr, sizes, u_pick, u_tie, start, dep, head, count, free_at, perm,
                                code, s, c, res, cfg.replace, warm, horizon, acc, i)
            if i < n or (count == start.shape[1]).any():
                start, dep = _grow(start, dep, head, count)
                if start.shape[1] > 1 << 16:
                    log.warning("queue of %d jobs at one server: system looks unstable", start.shape[1])
        if done:
            break

    jobs = int(acc[N_JOBS])
    if jobs == 0:
        return RunStats(run, 0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    mw = acc[SUM_WAIT] / jobs
    var = max(acc[SUM_WAIT2] / jobs - mw * mw, 0.0)
    return RunStats(
        run=run,
        jobs=jobs,
        mean_wait=float(mw),
        mean_response=float(acc[SUM_RESP] / jobs),
        mean_size=float(acc[SUM_SIZE] / jobs),
        mean_queue=float(acc[AREA] / (N * window)),
        utilization=float(acc[BUSY] / (N * window)),
        wait_sd=float(math.sqrt(var)),
    )


def run_experiment(cfg, runs=None, progress=None):
    """Run ``cfg.runs`` replications with independent streams and collect them."""
    runs = cfg.runs if runs is None else runs
    stats = SimStats(cfg)
    for run in range(runs):
        stats.runs.append(run_replication(cfg, run))
        if progress is not None:
            progress(stats.runs[-1])
    return stats
