"""Performance measures at a cavity fixed point.

Means follow from the queue-length law and Little's law. Waiting and
response times need the state seen by an arriving job (the join law): a job
joining a server with ``ell`` jobs whose head is in phase ``j`` waits for the
residual of the head plus ``ell - 1`` full jobs, a phase-type time that we
represent by a block chain of copies of ``(alpha, A)``.
"""

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla
from scipy import integrate
from scipy.special import comb

from . import numerics, phasetype
from .cavity import FixedPointResult, ScoreIndex, join_factor, tie_sums
from .policies import LayerGrid

log = logging.getLogger(__name__)

TRUNCATION_TOL = 1e-8
NEGLIGIBLE = 1e-16


class TruncationWarning(UserWarning):
    """Queue-length mass beyond the representable cap was dropped."""


@dataclass
class JoinLaw:
    """``busy[k-1, ell-1, j]``: probability an arrival joins a busy server in
    layer ``k`` with ``ell`` jobs and head phase ``j``; ``idle``: probability
    it joins an idle server."""

    busy: np.ndarray
    idle: float

    @property
    def by_length(self):
        """``J_{ell,j}`` summed over layers, shape ``(B, m)``."""
        return self.busy.sum(axis=0)

    @property
    def busy_mass(self):
        return float(self.busy.sum())

    @property
    def total(self):
        return self.busy_mass + self.idle


def mean_metrics(pi, lam):
    """Return ``(EQ, ER, EW)`` for unit-mean job sizes.

    ``EQ`` is the mean number of jobs at a server; ``ER = EQ / lam`` and
    ``EW = ER - 1``. At ``lam = 0`` the system is empty: ``ER = 1``, ``EW = 0``.
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    ell = np.arange(1, pi.B + 1)
    EQ = float(ell @ pi.busy.sum(axis=(0, 2)))
    if lam == 0:
        return EQ, 1.0, 0.0
    ER = EQ / lam
    return EQ, ER, ER - 1.0


def join_law(pi, policy, d, lam=None, grid=None, index=None):
    """State found by an arriving job that is dispatched by ``policy``.

    ``J = pi * lambda_act / lambda``: an arrival samples ``d`` servers and
    joins a state whose score group is the minimum, split uniformly among
    tied samples. ``pi`` is a CavityDistribution or a FixedPointResult;
    ``lam`` is accepted for symmetry, J does not depend on it.
    """
    if isinstance(pi, FixedPointResult):
        grid = pi.grid if grid is None else grid
        pi = pi.dist
    if grid is None:
        if pi.r > 0:
            raise ValueError("pass the layer grid (or a FixedPointResult) for layered policies")
        grid = LayerGrid((0.0,))
    if index is None or index.B != pi.B:
        index = ScoreIndex(policy, grid, pi.B)
    x = np.concatenate([[pi.idle], pi.marginals().ravel()])
    _, v, w = tie_sums(x, index)
    factor = join_factor(w, v, d)
    busy = pi.busy * factor[1:].reshape(pi.r + 1, pi.B)[:, :, None]
    return JoinLaw(np.clip(busy, 0.0, None), float(pi.idle * factor[0]))


def _chain_vector(join, ph, extra, cap):
    """Initial vector of the block chain whose absorption time is the waiting
    time (``extra = 0``) or the response time (``extra = 1``)."""
    J = join.by_length
    B, m = J.shape
    mass = J.sum(axis=1)
    nz = np.nonzero(mass > NEGLIGIBLE)[0]
    L = int(nz[-1]) + 1 if nz.size else 1
    max_len = cap // m - extra
    if L > max_len:
        lost = float(mass[max_len:].sum())
        if lost > TRUNCATION_TOL:
            msg = f"queue-length mass {lost:.2e} beyond ell = {max_len} dropped from the tail"
            warnings.warn(msg, TruncationWarning, stacklevel=3)
            log.warning(msg)
        L = max_len
    blocks = L + extra
    v = np.zeros(blocks * m)
    # a job joining ell jobs with head phase j runs through ell (+ extra) blocks
    for ell in range(1, L + 1):
        b = blocks - ell - extra
        v[b * m:(b + 1) * m] += J[ell - 1]
    if extra:
        v[(blocks - 1) * m:] += join.idle * ph.alpha
    return v, phasetype.convolution_chain(ph, blocks)


def _chain_survival(v, C, w):
    w = np.atleast_1d(np.asarray(w, dtype=float))
    if (w < 0).any():
        raise ValueError("w must be nonnegative")
    order = np.argsort(w)
    out = np.empty(w.size)
    cur, t = v[None, :], 0.0
    for i in order:
        if w[i] > t:
            cur = numerics.expm_action(C, w[i] - t, cur, left=True)
            t = w[i]
        out[i] = cur.sum()
    return np.clip(out, 0.0, 1.0)


def waiting_survival(join, ph, w, cap=phasetype.MAX_CONVOLUTION_ORDER):
    """``P(W > w) = sum_{ell,j} J_{ell,j} P(X_{ell,j} > w)``; ``w`` may be an array."""
    v, C = _chain_vector(join, ph, 0, cap)
    out = _chain_survival(v, C, w)
    return float(out[0]) if np.ndim(w) == 0 else out


def response_survival(join, ph, w, cap=phasetype.MAX_CONVOLUTION_ORDER):
    """``P(R > w)``: joiners of busy servers add their own size to the wait,
    joiners of idle servers only have their own size."""
    v, C = _chain_vector(join, ph, 1, cap)
    out = _chain_survival(v, C, w)
    return float(out[0]) if np.ndim(w) == 0 else out


def chain_mean(join, ph, response=False, cap=phasetype.MAX_CONVOLUTION_ORDER):
    """Mean waiting (or response) time from the join law by a linear solve."""
    v, C = _chain_vector(join, ph, int(response), cap)
    h = spla.spsolve((-C).tocsc(), np.ones(C.shape[0]))
    return float(v @ h)


def integrated_mean(survival, tol=TRUNCATION_TOL, limit=400):
    """``int_0^inf survival(w) dw`` by adaptive quadrature on ``[0, W_max]``,
    with ``W_max`` doubled until ``survival(W_max) < tol``."""
    wmax = 1.0
    while survival(wmax) >= tol:
        wmax *= 2.0
        if wmax > 1e8:
            raise ValueError("survival function does not decay")
    # split at powers of two so quad sees the fast early decay
    edges = [0.0] + [2.0**i for i in range(-4, int(np.log2(wmax)) + 1)]
    total = 0.0
    for a, b in zip(edges, edges[1:]):
        total += integrate.quad(survival, a, b, limit=limit, epsabs=1e-11, epsrel=1e-10)[0]
    return total


def relative_improvement(ew_baseline, ew_policy):
    """``(EW_base - EW_policy) / EW_base``; positive when the policy is better."""
    if not ew_baseline > 0:
        raise ValueError("baseline mean wait must be positive")
    return (ew_baseline - ew_policy) / ew_baseline


def tie_expectation(u, d):
    """Expected number of sampled servers sharing the shortest queue, given
    all ``d`` sampled servers are busy.

    ``u[i]`` is ``P(Q >= i + 1)``, i.e. the array starts at ``u_1``.
    """
    u = np.asarray(u, dtype=float)
    if u.size == 0 or not u[0] > 0:
        raise ValueError("u_1 must be positive")
    if np.any(np.diff(u) > 1e-15):
        raise ValueError("u must be nonincreasing")
    un = np.append(u, 0.0)
    exact = un[:-1] - un[1:]
    k = np.arange(1, d + 1)
    p = comb(d, k)[None, :] * exact[:, None] ** k[None, :] * un[1:, None] ** (d - k)[None, :]
    return float((p.sum(axis=0) @ k) / u[0] ** d)


def tie_expectation_of(pi, d):
    return tie_expectation(pi.queue_tail()[1:-1], d)
