"""Large-system fixed point for aversion-score policies.

One tagged server is an M/PH/1 FCFS queue whose Poisson arrival rate depends
on its queue length ``ell`` and on the layer ``k`` of its head job's age. Two
maps are iterated:

* ``T``: arrival-rate table -> stationary law of that queue, via a DTMC
  observed at service starts and whenever the age crosses a threshold;
* ``H``: stationary law -> arrival-rate table, by letting the tagged server
  compete with ``d - 1`` independent copies of itself.
"""

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.special import comb

from . import numerics, phasetype
from .errors import ConvergenceError
from .policies import FINE_GRAINED, LayerGrid, policy_grid, score_components

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 500
B_START = 10
B_CAP = 400
B_GROWTH = 1.5
B_MASS_TOL = 1e-12
B_RATE_TOL = 1e-10
R_CAP = 400
# the layer cap is 400 at delta = 0.1; finer grids keep the same age horizon
R_HORIZON = 40.0
R_SURVIVAL = 1e-3


def layer_cap(delta):
    return max(R_CAP, int(round(R_HORIZON / delta)))


def auto_layers(ph, delta, survival_target=R_SURVIVAL, cap=None):
    """Smallest ``r`` with ``P(X > r*delta) <= survival_target``, at most
    ``cap`` (default ``max(400, 40 / delta)``)."""
    cap = layer_cap(delta) if cap is None else cap
    lo, hi = 1, cap
    if phasetype.survival(ph, cap * delta) > survival_target:
        return cap
    while lo < hi:
        mid = (lo + hi) // 2
        if phasetype.survival(ph, mid * delta) <= survival_target:
            hi = mid
        else:
            lo = mid + 1
    return lo


def solver_grid(policy, delta, r=None, ph=None, **kw):
    """Layer grid used for ``policy``; ``r=None`` picks it from the job-size tail."""
    if policy.variant in FINE_GRAINED and r is None:
        if ph is None:
            raise ValueError("automatic r needs the job-size distribution")
        r = auto_layers(ph, delta, **kw)
    if policy.variant == "sq-rtb-re" and r is not None:
        r = max(r, int(round(policy.threshold / delta)))
    return policy_grid(policy, delta, r if r is not None else 1)


@dataclass
class ArrivalRateTable:
    """``rates[k-1, ell-1] = lambda_{k,ell}`` for ``k = 1..r+1``, ``ell = 1..B``.

    The last column (``ell = B``) is always zero.
    """

    rates: np.ndarray
    idle: float = 0.0

    def __post_init__(self):
        self.rates = np.array(self.rates, dtype=float)
        self.rates[:, -1] = 0.0

    @property
    def B(self):
        return self.rates.shape[1]

    @property
    def r(self):
        return self.rates.shape[0] - 1


@dataclass
class CavityDistribution:
    """Stationary law of the tagged server.

    ``busy[k-1, ell-1, j]`` is the probability of layer ``k``, queue length
    ``ell`` and service phase ``j``; ``idle`` the probability of an empty queue.
    """

    idle: float
    busy: np.ndarray

    @property
    def B(self):
        return self.busy.shape[1]

    @property
    def r(self):
        return self.busy.shape[0] - 1

    @property
    def m(self):
        return self.busy.shape[2]

    def marginals(self):
        """``x[k-1, ell-1]`` summed over phases."""
        return self.busy.sum(axis=2)

    def total(self):
        return self.idle + float(self.busy.sum())

    def queue_length_pmf(self):
        """``P(Q = ell)`` for ``ell = 0..B``."""
        return np.concatenate([[self.idle], self.busy.sum(axis=(0, 2))])

    def queue_tail(self):
        """``u[ell] = P(Q >= ell)`` for ``ell = 0..B+1``."""
        pmf = self.queue_length_pmf()
        tail = np.cumsum(pmf[::-1])[::-1]
        return np.append(tail, 0.0)

    def padded(self, B):
        if B < self.B:
            raise ValueError("cannot shrink")
        busy = np.zeros((self.r + 1, B, self.m))
        busy[:, : self.B] = self.busy
        return CavityDistribution(self.idle, busy)

    def flat(self):
        return np.concatenate([[self.idle], self.busy.ravel()])


def all_idle(grid, B, m):
    return CavityDistribution(1.0, np.zeros((grid.r + 1, B, m)))


# ---------------------------------------------------------------------------
# T map
# ---------------------------------------------------------------------------


def _birth_matrix(rates_k):
    B = rates_k.size
    return sp.diags([-rates_k, rates_k[:-1]], [0, 1], shape=(B, B))


@dataclass
class DtmcBlocks:
    """Per-layer generators of the queue observed between observation epochs.

    ``F[k-1]`` drives (queue length, phase) while the head job's age stays in
    layer ``k`` and no completion occurs. ``G = (I_B (x) mu)(S (x) alpha)``
    maps a completion to the next service start.
    """

    ph: phasetype.PhaseTypeDist
    grid: LayerGrid
    rates: ArrivalRateTable
    widths: np.ndarray
    _F: list = field(default=None, repr=False)
    _FT: list = field(default=None, repr=False)
    _completion: np.ndarray = field(default=None, repr=False)
    _ops: list = field(default=None, repr=False)

    @property
    def B(self):
        return self.rates.B

    @property
    def m(self):
        return self.ph.m

    @property
    def n(self):
        return self.B * self.m

    @property
    def layers(self):
        return self.grid.r + 1

    def sparse(self, k):
        """``F^(k)`` as a CSR matrix, built on first use."""
        if self._F is None:
            self._F = [None] * self.layers
        if self._F[k - 1] is None:
            B, ph = self.B, self.ph
            IA = sp.kron(sp.identity(B), sp.csr_matrix(ph.A))
            L = _birth_matrix(self.rates.rates[k - 1])
            self._F[k - 1] = (IA + sp.kron(L, sp.identity(ph.m))).tocsr()
        return self._F[k - 1]

    @property
    def F(self):
        return [self.sparse(k) for k in range(1, self.layers + 1)]

    def FT(self, k):
        if self._FT is None:
            self._FT = [None] * self.layers
        if self._FT[k - 1] is None:
            self._FT[k - 1] = self.sparse(k).T.tocsr()
        return self._FT[k - 1]

    def op(self, k):
        if self._ops is None:
            A = np.asarray(self.ph.A)
            # one rate for all layers so the Poisson weights are shared
            q = float(np.max(-np.diag(A)) + self.rates.rates.max(initial=0.0))
            self._ops = [LayerOperator(A, self.rates.rates[i], q) for i in range(self.layers)]
        return self._ops[k - 1]

    def exit_vectors(self):
        """``I_B (x) mu``: completion rate into each post-completion queue length."""
        return sp.kron(sp.identity(self.B), sp.csr_matrix(self.ph.mu[:, None])).toarray()

    def shift(self):
        """Queue-length map at a completion: ``ell -> max(ell - 1, 1)``."""
        S = np.zeros((self.B, self.B))
        S[0, 0] = 1.0
        S[np.arange(1, self.B), np.arange(self.B - 1)] = 1.0
        return S

    def G(self):
        return self.exit_vectors() @ np.kron(self.shift(), self.ph.alpha[None, :])

    # dense materializations, for inspection and small instances
    def lam(self, k):
        w = self.widths[k - 1]
        if np.isinf(w):
            return np.zeros((self.n, self.n))
        return numerics.expm_sub(self.sparse(k).toarray(), w)

    def psi(self, k):
        return numerics.integral_exp(self.sparse(k).toarray(), self.widths[k - 1])

    def xi(self, k):
        return self.psi(k) @ self.G()

    def omega(self, k):
        """``Omega^(k) = Psi^(k) G + Lambda^(k) Omega^(k+1)``."""
        return self.completion_map(k) @ np.kron(self.shift(), self.ph.alpha[None, :])

    def completion_map(self, k=1):
        """``M^(k)`` with ``Omega^(k) = M^(k) (S (x) alpha)``.

        Entry ``((ell, j), c)`` is the probability that, observed at age
        ``c_{k-1}`` in state ``(ell, j)``, the job in service completes
        leaving ``c`` jobs behind (counting itself, i.e. before the shift).
        """
        if k == 1 and self._completion is not None:
            return self._completion
        U = self.exit_vectors()
        M = None
        for layer in range(self.layers, k - 1, -1):
            w = self.widths[layer - 1]
            if np.isinf(w):
                M = spla.splu((-self.sparse(layer)).tocsc()).solve(U)
            else:
                M = _exp_plus_integral(self.op(layer), w, M, U)
        if k == 1:
            self._completion = M
        return M

    def start_kernel(self):
        """Queue length at consecutive service starts: ``(I (x) alpha) M^(1) S``."""
        M = self.completion_map(1)
        Ia = np.kron(np.identity(self.B), self.ph.alpha[None, :])
        return Ia @ M @ self.shift()


class LayerOperator:
    """``F = I_B (x) A + L (x) I_m`` applied through reshapes, no sparse matrix.

    ``L`` is the birth generator with rates ``rates`` (``-rates`` on the
    diagonal, ``rates`` just above it).
    """

    def __init__(self, A, rates, q=None):
        self.A = A
        self.rates = rates
        self.B = rates.size
        self.m = A.shape[0]
        if q is None:
            q = float(np.max(-np.diag(A)) + rates.max(initial=0.0))
        self.q = q
        self._r3 = rates[:, None, None]

    def right(self, X):
        """``F @ X`` for ``X`` of shape ``(B*m, c)``."""
        c = X.shape[1]
        X3 = X.reshape(self.B, self.m, c)
        Y = np.matmul(self.A, X3)
        Y -= self._r3 * X3
        Y[:-1] += self._r3[:-1] * X3[1:]
        return Y.reshape(-1, c)

    def left(self, V):
        """``V @ F`` for row vectors ``V`` of shape ``(c, B*m)``."""
        c = V.shape[0]
        V3 = V.reshape(c, self.B, self.m)
        Y = np.matmul(V3, self.A)
        rv = self.rates[None, :, None]
        Y -= rv * V3
        Y[:, 1:] += rv[:, :-1] * V3[:, :-1]
        return Y.reshape(c, -1)


@lru_cache(maxsize=256)
def _weights(a):
    return numerics.poisson_weights(a)


def _exp_plus_integral(op, t, X, Y):
    """``e^{Ft} X + (int_0^t e^{Fs} ds) Y`` by a single uniformization sweep."""
    q = op.q
    if q == 0:
        return X + t * Y
    steps = max(1, math.ceil(q * t / numerics.MAX_QT_STEP))
    tau = t / steps
    pmf, tail = _weights(q * tau)
    tail = tail / q
    R = X
    for _ in range(steps):
        # Horner on sum_n P^n (pmf_n R + tail_n Y), P = I + F/q
        acc = pmf[-1] * R + tail[-1] * Y
        for i in range(len(pmf) - 2, -1, -1):
            acc = acc + op.right(acc) / q
            acc += pmf[i] * R + tail[i] * Y
        R = acc
    return R


def _left_exp_and_integral(op, t, v):
    """``(v e^{Ft}, v int_0^t e^{Fs} ds)`` for a row vector ``v``."""
    q = op.q
    if q == 0:
        return v.copy(), t * v
    steps = max(1, math.ceil(q * t / numerics.MAX_QT_STEP))
    tau = t / steps
    pmf, tail = _weights(q * tau)
    occ = np.zeros_like(v)
    for _ in range(steps):
        cur = v[None, :]
        E = pmf[0] * cur
        Psi = tail[0] * cur
        for i in range(1, len(pmf)):
            cur = cur + op.left(cur) / q
            E += pmf[i] * cur
            Psi += tail[i] * cur
        occ += Psi[0] / q
        v = E[0]
    return v, occ


def build_blocks(rates, ph, grid):
    """Assemble ``F^(k) = I_B (x) A + L_k (x) I_m`` for every layer."""
    if rates.r != grid.r:
        raise ValueError(f"rate table has {rates.r + 1} layers, grid has {grid.r + 1}")
    return DtmcBlocks(ph, grid, rates, grid.widths())


def dtmc_steady(blocks):
    """Stationary vectors ``pihat[k]`` (k = 0..r) of the embedded DTMC,
    normalized over all layers."""
    z = numerics.stationary(blocks.start_kernel())
    pihat = [np.kron(z, blocks.ph.alpha)]
    for k in range(1, blocks.layers):
        pihat.append(_left_exp_and_integral(blocks.op(k), blocks.widths[k - 1], pihat[-1])[0])
    total = sum(v.sum() for v in pihat)
    return [v / total for v in pihat]


def busy_censor(pihat, blocks):
    """Time-average law given busy: ``nu * pihat^(k-1) Psi^(k)``, shape ``(r+1, B, m)``."""
    out = np.empty((blocks.layers, blocks.B, blocks.m))
    for k in range(1, blocks.layers + 1):
        out[k - 1] = _occupation(blocks, k, pihat[k - 1]).reshape(blocks.B, blocks.m)
    out = np.clip(out, 0.0, None)
    return out / out.sum()


def _occupation(blocks, k, v):
    w = blocks.widths[k - 1]
    if np.isinf(w):
        return spla.splu((-blocks.sparse(k)).T.tocsc()).solve(v)
    return numerics.exp_and_integral_action(blocks.FT(k), w, v)[1]


def solve_queue(rates, ph, grid):
    """T map: busy-conditional law for a given arrival-rate table.

    Same result as ``busy_censor(dtmc_steady(b), b)`` but with one forward
    sweep computing the exponential and integral actions together.
    """
    blocks = build_blocks(rates, ph, grid)
    z = numerics.stationary(blocks.start_kernel())
    v = np.kron(z, ph.alpha)
    out = np.empty((blocks.layers, blocks.B, blocks.m))
    for k in range(1, blocks.layers + 1):
        w = blocks.widths[k - 1]
        if np.isinf(w):
            occ = _occupation(blocks, k, v)
        else:
            v, occ = _left_exp_and_integral(blocks.op(k), w, v)
        out[k - 1] = occ.reshape(blocks.B, blocks.m)
    out = np.clip(out, 0.0, None)
    return out / out.sum()


def assemble(busy, lam):
    """Stationary law: idle with probability ``1 - lam``, busy part scaled to ``lam``."""
    if not 0.0 <= lam < 1.0:
        raise ValueError(f"offered load must lie in [0, 1), got {lam}")
    busy = np.asarray(busy, dtype=float)
    s = busy.sum()
    scaled = busy * (lam / s) if s > 0 else busy * 0.0
    return CavityDistribution(1.0 - lam, scaled)


# ---------------------------------------------------------------------------
# H map
# ---------------------------------------------------------------------------


class ScoreIndex:
    """Groups the states ``(0,0)`` and ``(k, ell)`` by equal aversion score,
    ordered from least to most averse."""

    def __init__(self, policy, grid, B):
        self.policy, self.grid, self.B = policy, grid, B
        K, L = np.meshgrid(np.arange(1, grid.r + 2), np.arange(1, B + 1), indexing="ij")
        k = np.concatenate([[0], K.ravel()])
        ell = np.concatenate([[0], L.ravel()])
        scores = score_components(policy, k, ell, grid)
        order = np.lexsort(scores.T[::-1])
        s = scores[order]
        new_group = np.ones(len(s), dtype=bool)
        new_group[1:] = np.any(s[1:] != s[:-1], axis=1)
        gid_sorted = np.cumsum(new_group) - 1
        self.group = np.empty(len(s), dtype=np.int64)
        self.group[order] = gid_sorted
        self.n_groups = int(gid_sorted[-1]) + 1


def tie_sums(x_flat, index):
    """Return ``(u, v, w)`` per state: mass with score >=, >, and == its own."""
    g = np.bincount(index.group, weights=x_flat, minlength=index.n_groups)
    greater = np.concatenate([np.cumsum(g[::-1])[::-1][1:], [0.0]])
    w = g[index.group]
    v = greater[index.group]
    return v + w, v, w


def join_factor(w, v, d):
    """``d * sum_j C(d-1, j)/(j+1) w^j v^(d-1-j)`` = ``(u^d - v^d)/w``.

    Probability-per-unit-mass that an arrival sampling this state joins it.
    """
    w = np.asarray(w, dtype=float)
    v = np.asarray(v, dtype=float)
    total = np.zeros(np.broadcast(w, v).shape)
    for j in range(d):
        total = total + comb(d - 1, j) / (j + 1) * w**j * v ** (d - 1 - j)
    return d * total


def arrival_rates(pi, policy, d, lam, grid, index=None):
    """H map: state-dependent arrival rates from the stationary law."""
    if d < 1:
        raise ValueError("d must be at least 1")
    if index is None or index.B != pi.B:
        index = ScoreIndex(policy, grid, pi.B)
    x = np.concatenate([[pi.idle], pi.marginals().ravel()])
    _, v, w = tie_sums(x, index)
    rate = lam * join_factor(w, v, d)
    return ArrivalRateTable(rate[1:].reshape(grid.r + 1, pi.B), idle=float(rate[0]))


# ---------------------------------------------------------------------------
# fixed point
# ---------------------------------------------------------------------------


@dataclass
class FixedPointResult:
    dist: CavityDistribution
    rates: ArrivalRateTable
    grid: LayerGrid
    iterations: int
    history: list
    converged: bool
    damped: bool = False

    @property
    def residual(self):
        return self.history[-1] if self.history else float("nan")


def _l1(a, b):
    B = max(a.B, b.B)
    return float(np.abs(a.padded(B).flat() - b.padded(B).flat()).sum())


def fixed_point(policy, lam, ph, grid, d, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER,
                B_start=B_START, B_cap=B_CAP, raise_on_failure=True):
    """Iterate ``pi <- T(H(pi))`` from the empty system until the L1 change
    drops below ``tol``.

    The buffer ``B`` starts small and grows whenever the mass at ``ell = B``
    and the arrival rate just below it are both non-negligible.
    """
    if not 0.0 <= lam < 1.0:
        raise ValueError(f"offered load must lie in [0, 1), got {lam}")
    B = B_start
    pi = all_idle(grid, B, ph.m)
    index = ScoreIndex(policy, grid, B)
    history = []
    damped = False
    rising = 0
    rates = None
    for it in range(1, max_iter + 1):
        while True:
            rates = arrival_rates(pi, policy, d, lam, grid, index)
            new = assemble(solve_queue(rates, ph, grid), lam)
            tail_mass = float(new.busy[:, -1, :].sum())
            edge_rate = float(rates.rates[:, -2].max()) if B > 1 else 0.0
            if B >= B_cap or tail_mass < B_MASS_TOL or edge_rate < B_RATE_TOL * lam * d:
                break
            B = min(B_cap, math.ceil(B * B_GROWTH))
            pi = pi.padded(B)
            index = ScoreIndex(policy, grid, B)
            log.debug("iteration %d: buffer grown to %d", it, B)
        if damped:
            old = pi.padded(new.B)
            new = CavityDistribution(0.5 * (new.idle + old.idle), 0.5 * (new.busy + old.busy))
        res = _l1(new, pi)
        if history and res > history[-1]:
            rising += 1
            if rising >= 5 and not damped:
                damped = True
                log.warning("residual rose for 5 steps; switching to damping 0.5")
        else:
            rising = 0
        history.append(res)
        pi = new
        if res < tol:
            return FixedPointResult(pi, rates, grid, it, history, True, damped)
    if raise_on_failure:
        raise ConvergenceError(
            f"fixed point not reached in {max_iter} iterations (residual {history[-1]:.3e})",
            history[-1], history)
    return FixedPointResult(pi, rates, grid, max_iter, history, False, damped)


def solve(policy, lam, ph, d, delta=0.1, r=None, **kw):
    """Convenience wrapper choosing the policy's layer grid first."""
    grid = solver_grid(policy, delta, r, ph)
    return fixed_point(policy, lam, ph, grid, d, **kw)
