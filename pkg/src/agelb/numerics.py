"""Matrix kernels for subgenerators: exponentials, their integrals and
stationary vectors of stochastic matrices.

Exponentials are computed by uniformization. For a subgenerator ``F`` with
``q >= max |F_ii|`` the matrix ``P = I + F/q`` is nonnegative and

    e^{Ft}            = sum_n Pois(n; qt) P^n
    int_0^t e^{Fs} ds = (1/q) sum_n P(N_qt > n) P^n

so both series have nonnegative terms and no cancellation.
"""

import math

import numpy as np
import scipy.sparse as sp

from .errors import ConvergenceError, NotSubgeneratorError

TAIL_TOL = 1e-14
# Largest q*t handled in one series; e^{-qt} must stay well above underflow.
MAX_QT_STEP = 200.0
# Dense sub-steps are squared, so keep them short to limit the term count.
DENSE_QT_STEP = 1.0
DIRECT_SOLVE_MAX = 2000


def is_subgenerator(F, tol=1e-12):
    F = F.toarray() if sp.issparse(F) else np.asarray(F, dtype=float)
    if F.ndim != 2 or F.shape[0] != F.shape[1]:
        return False
    off = F - np.diag(np.diag(F))
    return bool(off.min(initial=0.0) >= -tol and F.sum(axis=1).max(initial=0.0) <= tol)


def _check_subgenerator(F):
    if not is_subgenerator(F):
        raise NotSubgeneratorError("matrix is not a subgenerator")


def uniformization_rate(F):
    d = F.diagonal() if sp.issparse(F) else np.diag(F)
    return float(np.max(-d, initial=0.0))


def poisson_weights(a, tol=TAIL_TOL):
    """Return ``(pmf, tail)`` for Poisson(a), truncated once the remaining
    tail mass drops below ``tol``. ``tail[n] = P(N > n)``."""
    if a < 0:
        raise ValueError("Poisson mean must be nonnegative")
    if a == 0:
        return np.array([1.0]), np.array([0.0])
    w = math.exp(-a)
    pmf = [w]
    cum = w
    n = 0
    while cum < 1.0 - tol or n < a:
        n += 1
        w *= a / n
        pmf.append(w)
        cum += w
        if n > a + 50 * math.sqrt(a) + 100:
            break
    pmf = np.array(pmf)
    tail = np.clip(1.0 - np.cumsum(pmf), 0.0, None)
    return pmf, tail


def _dense_series(F, t, q):
    n = F.shape[0]
    P = np.eye(n) + F / q
    pmf, tail = poisson_weights(q * t)
    term = np.eye(n)
    E = pmf[0] * term
    Psi = tail[0] * term
    for i in range(1, len(pmf)):
        term = term @ P
        E += pmf[i] * term
        Psi += tail[i] * term
    return E, Psi / q


def _dense_exp_and_integral(F, t):
    F = np.asarray(F, dtype=float)
    n = F.shape[0]
    q = uniformization_rate(F)
    if t == 0:
        return np.eye(n), np.zeros((n, n))
    if q == 0:
        # F is the zero matrix
        return np.eye(n), t * np.eye(n)
    squarings = max(0, math.ceil(math.log2(q * t / DENSE_QT_STEP))) if q * t > DENSE_QT_STEP else 0
    tau = t / 2**squarings
    E, Psi = _dense_series(F, tau, q)
    for _ in range(squarings):
        Psi = Psi + E @ Psi
        E = E @ E
    return E, Psi


def expm_sub(F, t):
    """Matrix exponential ``e^{Ft}`` of a subgenerator, ``t >= 0``.

    The result is nonnegative with row sums at most one.
    """
    _check_subgenerator(F)
    if t < 0 or not np.isfinite(t):
        raise ValueError("t must be finite and nonnegative")
    return _dense_exp_and_integral(F, t)[0]


def integral_exp(F, t):
    """``int_0^t e^{Fs} ds``; equals ``(I - e^{Ft})(-F)^{-1}`` when ``-F`` is
    invertible and ``(-F)^{-1}`` for ``t = inf``."""
    _check_subgenerator(F)
    F = np.asarray(F, dtype=float)
    if t < 0:
        raise ValueError("t must be nonnegative")
    if np.isinf(t):
        try:
            return np.linalg.solve(-F, np.eye(F.shape[0]))
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("-F is singular; integral diverges") from exc
    return _dense_exp_and_integral(F, t)[1]


def exp_and_integral_action(F, t, X, left=False):
    """Apply ``e^{Ft}`` and ``int_0^t e^{Fs} ds`` to ``X`` without forming them.

    ``F`` may be sparse. With ``left=False`` returns ``(e^{Ft} X, Psi X)``;
    with ``left=True``, ``X`` holds row vectors and the result is
    ``(X e^{Ft}, X Psi)``.
    """
    X = np.asarray(X, dtype=float)
    if t == 0:
        return X.copy(), np.zeros_like(X)
    q = uniformization_rate(F)
    if q == 0:
        return X.copy(), t * X
    if left:
        Ft = F.T.tocsr() if sp.issparse(F) else np.asarray(F).T
        E, Psi = exp_and_integral_action(Ft, t, X.T, left=False)
        return E.T, Psi.T
    steps = max(1, math.ceil(q * t / MAX_QT_STEP))
    tau = t / steps
    pmf, tail = poisson_weights(q * tau)
    cur = X
    E = pmf[0] * cur
    Psi = tail[0] * cur
    for i in range(1, len(pmf)):
        cur = cur + (F @ cur) / q
        E = E + pmf[i] * cur
        Psi = Psi + tail[i] * cur
    Psi = Psi / q
    # int_0^{k tau} = sum_{i<k} e^{F i tau} int_0^tau, applied on the right of X
    # means stepping e^{F tau} over the accumulated one-step results.
    if steps > 1:
        E_acc, Psi_acc = E, Psi
        for _ in range(steps - 1):
            E_new, Psi_new = exp_and_integral_action(F, tau, E_acc)
            Psi_acc = Psi_acc + Psi_new
            E_acc = E_new
        E, Psi = E_acc, Psi_acc
    return E, Psi


def expm_action(F, t, X, left=False):
    """``e^{Ft} X`` (or ``X e^{Ft}`` with ``left=True``) by uniformization."""
    return exp_and_integral_action(F, t, X, left=left)[0]


def stationary(P, tol=1e-12, max_iter=100_000):
    """Stationary probability vector of a stochastic matrix.

    Uses a direct solve with one balance equation replaced by the
    normalization for orders up to 2000, and power iteration above.
    """
    P = P.toarray() if sp.issparse(P) else np.asarray(P, dtype=float)
    n = P.shape[0]
    if n == 1:
        return np.ones(1)
    if n <= DIRECT_SOLVE_MAX:
        M = (np.eye(n) - P).T
        M[-1, :] = 1.0
        b = np.zeros(n)
        b[-1] = 1.0
        try:
            v = np.linalg.solve(M, b)
        except np.linalg.LinAlgError:
            v = np.linalg.lstsq(M, b, rcond=None)[0]
        v = np.clip(v, 0.0, None)
        v /= v.sum()
        res = np.abs(v @ P - v).sum()
        if res < tol:
            return v
        # refine: a few power steps clean up roundoff on nearly periodic chains
        for _ in range(50):
            v = v @ P
            v /= v.sum()
            res = np.abs(v @ P - v).sum()
            if res < tol:
                return v
    else:
        v = np.full(n, 1.0 / n)
    history = []
    Pl = 0.5 * (np.eye(n) + P)  # lazy chain: same stationary law, aperiodic
    for _ in range(max_iter):
        v = v @ Pl
        v /= v.sum()
        res = np.abs(v @ P - v).sum()
        history.append(res)
        if res < tol:
            return v
    raise ConvergenceError(f"stationary vector did not converge (residual {res:.3e})", res, history[-20:])
