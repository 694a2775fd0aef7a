"""Phase-type job-size distributions.

A PH law ``(alpha, A)`` is the absorption time of a Markov chain started in
``alpha`` with subgenerator ``A``; its survival function is
``alpha e^{Ax} 1``. Everything here works on small dense matrices.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import numerics
from .errors import InfeasibleFitError, InvalidDistributionError, SizeLimitError, VanishingSurvivalError

MAX_CONVOLUTION_ORDER = 4096


@dataclass(frozen=True, eq=False)
class PhaseTypeDist:
    alpha: np.ndarray
    A: np.ndarray
    mu: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=float).ravel()
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        m = alpha.size
        if A.shape != (m, m):
            raise InvalidDistributionError(f"A has shape {A.shape}, expected {(m, m)}")
        if alpha.min() < -1e-12 or abs(alpha.sum() - 1.0) > 1e-10:
            raise InvalidDistributionError("alpha must be a probability vector")
        off = A - np.diag(np.diag(A))
        rows = A.sum(axis=1)
        if off.min(initial=0.0) < 0 or np.diag(A).max() >= 0 or rows.max() > 1e-12 or rows.min() >= -1e-15:
            raise InvalidDistributionError("A is not a transient subgenerator")
        if abs(np.linalg.det(-A)) < 1e-300 or np.linalg.cond(-A) > 1e14:
            raise InvalidDistributionError("-A is singular; absorption is not certain")
        alpha = np.clip(alpha, 0.0, None)
        alpha.setflags(write=False)
        A.setflags(write=False)
        mu = -A.sum(axis=1)
        mu = np.clip(mu, 0.0, None)
        mu.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "mu", mu)

    @property
    def m(self):
        return self.alpha.size

    def __repr__(self):
        return f"PhaseTypeDist(m={self.m}, mean={moments(self)[0]:.6g})"


def exponential(rate=1.0):
    return PhaseTypeDist(np.array([1.0]), np.array([[-float(rate)]]))


def erlang(k, rate):
    """Erlang with ``k`` phases each of rate ``rate`` (mean ``k / rate``)."""
    A = np.diag(np.full(k, -float(rate))) + np.diag(np.full(k - 1, float(rate)), 1)
    alpha = np.zeros(k)
    alpha[0] = 1.0
    return PhaseTypeDist(alpha, A)


@dataclass(frozen=True)
class MErlangSpec:
    scv: float
    f: float
    k: int
    p: float
    mu1: float
    mu2: float

    @property
    def small_job_mean(self):
        return 1.0 / self.mu1


def merlang_parameters(scv, f, k=1):
    """Solve for ``(p, mu1, mu2)`` of a unit-mean MErlang(scv, f, k).

    Each type-i job is Erlang(k, k*mu_i); type 1 has probability ``p`` and
    carries the fraction ``f`` of the work.
    """
    if not 0.0 < f < 1.0:
        raise ValueError(f"workload fraction f must lie in (0, 1), got {f}")
    if k < 1 or int(k) != k:
        raise ValueError("k must be a positive integer")
    scv_k = 2.0 * (scv + 1.0) / (1.0 + 1.0 / k) - 1.0
    fbar = 1.0 - f
    disc = (scv_k - 1.0) * (scv_k - 1.0 + 8.0 * f * fbar)
    if scv_k < 1.0 - 1e-12 or disc < 0:
        raise InfeasibleFitError(f"no MErlang fit for scv={scv}, f={f}, k={k}")
    root = np.sqrt(max(disc, 0.0))
    mu1 = (scv_k + (4.0 * f - 1.0) + root) / (2.0 * f * (scv_k + 1.0))
    p = mu1 * f
    # unit mean: (1 - p) / mu2 = 1 - f. Same as the mu1 root with f <-> 1 - f.
    mu2 = (1.0 - p) / fbar if p < 1.0 else mu1
    if not (0.0 < p <= 1.0 + 1e-12 and mu2 > 0):
        raise InfeasibleFitError(f"no MErlang fit for scv={scv}, f={f}, k={k}")
    return MErlangSpec(float(scv), float(f), int(k), min(p, 1.0), mu1, mu2)


def fit_merlang(scv, f, k=1):
    """Unit-mean mixture of two Erlang-k branches matching ``scv`` and the
    small-job workload fraction ``f``. ``k = 1`` gives a hyperexponential.

    Returns an order ``2k`` PhaseTypeDist.
    """
    spec = merlang_parameters(scv, f, k)
    if spec.p >= 1.0 or abs(spec.mu1 - spec.mu2) < 1e-14:
        # SCV' = 1 collapses the mixture: both branches are the same Erlang.
        return erlang(k, k * spec.mu1) if k > 1 else exponential(spec.mu1)
    A = np.zeros((2 * k, 2 * k))
    for b, rate in enumerate((spec.mu1, spec.mu2)):
        for i in range(k):
            A[b * k + i, b * k + i] = -k * rate
            if i < k - 1:
                A[b * k + i, b * k + i + 1] = k * rate
    alpha = np.zeros(2 * k)
    alpha[0] = spec.p
    alpha[k] = 1.0 - spec.p
    return PhaseTypeDist(alpha, A)


def hexp(scv, f):
    return fit_merlang(scv, f, 1)


def _neg_inv_ones(ph):
    try:
        return np.linalg.solve(-ph.A, np.ones(ph.m))
    except np.linalg.LinAlgError as exc:
        raise InvalidDistributionError("-A is singular") from exc


def phase_means(ph):
    """Mean absorption time from each starting phase, ``(-A)^{-1} 1``."""
    return _neg_inv_ones(ph)


def moments(ph):
    """Return ``(mean, scv)``."""
    h1 = _neg_inv_ones(ph)
    h2 = np.linalg.solve(-ph.A, h1)
    mean = float(ph.alpha @ h1)
    second = 2.0 * float(ph.alpha @ h2)
    return mean, second / mean**2 - 1.0


def mean(ph):
    return moments(ph)[0]


def second_moment(ph):
    m, scv = moments(ph)
    return (scv + 1.0) * m * m


def _state_at(ph, x):
    """Row vector ``alpha e^{Ax}``."""
    if x < 0:
        raise ValueError("x must be nonnegative")
    if x == 0:
        return ph.alpha.copy()
    return numerics.expm_action(ph.A, x, ph.alpha[None, :], left=True)[0]


def survival(ph, x):
    """``P(X > x) = alpha e^{Ax} 1``."""
    if np.ndim(x) > 0:
        return np.array([survival(ph, xi) for xi in np.asarray(x, dtype=float)])
    return float(np.clip(_state_at(ph, float(x)).sum(), 0.0, 1.0))


def residual_mean(ph, c):
    """Mean remaining size ``E[X - c | X >= c]`` of a job that has received
    ``c`` units of service."""
    v = _state_at(ph, float(c))
    s = v.sum()
    if not s > 0:
        raise VanishingSurvivalError(f"survival at c={c} underflowed to zero")
    return float((v / s) @ _neg_inv_ones(ph))


def convolution_chain(ph, blocks):
    """Subgenerator of ``blocks`` PH(alpha, A) stages run back to back.

    Block-bidiagonal: ``A`` on the diagonal, ``mu alpha`` above it. Returned
    sparse (CSR) since it is only ever applied to vectors.
    """
    m = ph.m
    if blocks * m > MAX_CONVOLUTION_ORDER:
        raise SizeLimitError(f"convolution order {blocks * m} exceeds cap {MAX_CONVOLUTION_ORDER}")
    diag = sp.kron(sp.identity(blocks), sp.csr_matrix(ph.A))
    up = sp.kron(sp.eye(blocks, k=1), sp.csr_matrix(np.outer(ph.mu, ph.alpha)))
    return (diag + up).tocsr()


def convolution_rep(ph, start_phase, copies, cap=MAX_CONVOLUTION_ORDER):
    """PH representation of ``X_j`` followed by ``copies`` i.i.d. copies of X.

    ``start_phase`` is zero-based. The result has order ``(copies + 1) * m``.
    """
    m = ph.m
    if not 0 <= start_phase < m:
        raise ValueError("start_phase out of range")
    if copies < 0:
        raise ValueError("copies must be nonnegative")
    order = (copies + 1) * m
    if order > cap:
        raise SizeLimitError(f"convolution order {order} exceeds cap {cap}")
    C = convolution_chain(ph, copies + 1).toarray()
    alpha = np.zeros(order)
    alpha[start_phase] = 1.0
    return PhaseTypeDist(alpha, C)


def sample(ph, rng, size=None):
    """Draw job sizes by simulating the phase process.

    ``size=None`` returns one float; otherwise an array of that many draws.
    """
    n = 1 if size is None else int(size)
    m = ph.m
    rates = -np.diag(ph.A)
    # jump distribution out of each phase: other phases then absorption
    jump = np.maximum(ph.A, 0.0) / rates[:, None]
    jump[np.arange(m), np.arange(m)] = 0.0
    jump = np.hstack([jump, (ph.mu / rates)[:, None]])
    cum = np.cumsum(jump, axis=1)
    cum[:, -1] = 1.0
    start_cum = np.cumsum(ph.alpha)
    start_cum[-1] = 1.0

    phase = np.searchsorted(start_cum, rng.random(n), side="right")
    out = np.zeros(n)
    alive = np.arange(n)
    while alive.size:
        ph_alive = phase[alive]
        out[alive] += rng.standard_exponential(alive.size) / rates[ph_alive]
        nxt = (rng.random(alive.size)[:, None] >= cum[ph_alive]).sum(axis=1)
        keep = nxt < m
        phase[alive[keep]] = nxt[keep]
        alive = alive[keep]
    return float(out[0]) if size is None else out
