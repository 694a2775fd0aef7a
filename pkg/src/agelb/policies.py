"""Dispatching policies expressed as aversion scores over (layer, queue length).

A server reports ``(k, ell)``: the layer ``k`` holding the attained service
time of its head job (0 when idle) and its queue length ``ell``. A policy maps
that pair to a tuple of reals; the job goes to the sampled server with the
lexicographically smallest tuple, ties broken uniformly at random.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import phasetype
from .errors import ArityError

VARIANTS = ("random", "sq", "sq-rtb", "sq-re", "sq-rtb-re", "las", "las-qtb", "re", "lew")
THRESHOLD_VARIANTS = ("sq-re", "sq-rtb-re", "re")
# variants whose score depends on layers defined on a Delta grid
FINE_GRAINED = ("sq-rtb", "sq-rtb-re", "las", "las-qtb", "lew")


@dataclass(frozen=True)
class LayerGrid:
    """Thresholds ``0 = c_0 < c_1 < ... < c_r``; ``c_{r+1} = inf`` is implicit.

    ``r = 0`` is a single infinite layer.
    """

    thresholds: tuple

    def __post_init__(self):
        c = tuple(float(x) for x in self.thresholds)
        if not c or c[0] != 0.0:
            raise ValueError("thresholds must start at c_0 = 0")
        if any(b <= a for a, b in zip(c, c[1:])):
            raise ValueError("thresholds must be strictly increasing")
        object.__setattr__(self, "thresholds", c)

    @classmethod
    def uniform(cls, delta, r):
        if delta <= 0 and r > 0:
            raise ValueError("delta must be positive")
        return cls(tuple(k * delta for k in range(r + 1)))

    @property
    def r(self):
        return len(self.thresholds) - 1

    @property
    def delta(self):
        return self.thresholds[1] if self.r else float("inf")

    def widths(self):
        """Width of layers ``1..r+1``; the last one is infinite."""
        c = np.array(self.thresholds)
        return np.append(np.diff(c), np.inf)

    def upper_edge(self, k):
        return self.thresholds[k] if k <= self.r else float("inf")

    def index_of(self, T):
        """Index ``s`` with ``c_s == T`` (within rounding)."""
        c = np.array(self.thresholds)
        s = int(np.argmin(np.abs(c - T)))
        if abs(c[s] - T) > 1e-9 * max(1.0, T):
            raise ValueError(f"threshold {T} is not on the layer grid")
        return s


@dataclass(frozen=True)
class ServerObservation:
    k: int
    ell: int

    def __post_init__(self):
        if (self.k == 0) != (self.ell == 0) or self.k < 0 or self.ell < 0:
            raise ValueError("k = 0 must coincide with ell = 0")


def layer_of(a, grid, busy=True):
    """Layer index of attained service ``a``: 0 idle, ``k`` when
    ``a in (c_{k-1}, c_k]`` (``a = 0`` counts as layer 1), ``r+1`` beyond ``c_r``."""
    if not busy:
        return 0
    if a < 0:
        raise ValueError("attained service must be nonnegative")
    c = grid.thresholds
    k = int(np.searchsorted(c[1:], a, side="left")) + 1
    return k


@dataclass(frozen=True, eq=False)
class Policy:
    variant: str
    threshold: float = None
    ph: phasetype.PhaseTypeDist = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown policy {self.variant!r}")
        if self.variant in THRESHOLD_VARIANTS:
            if self.threshold is None or not self.threshold > 0:
                raise ValueError(f"{self.variant} needs a positive threshold T")
        if self.variant == "lew" and self.ph is None:
            raise ValueError("lew needs the job-size distribution")

    def __eq__(self, other):
        return isinstance(other, Policy) and (self.variant, self.threshold, id(self.ph)) == (
            other.variant, other.threshold, id(other.ph))

    def __hash__(self):
        return hash((self.variant, self.threshold, id(self.ph)))

    @property
    def arity(self):
        return {"random": 1, "sq": 1, "las": 1, "re": 1, "lew": 1, "sq-rtb-re": 3}.get(self.variant, 2)

    @property
    def uses_layers(self):
        return self.variant not in ("random", "sq")

    def label(self, d=None):
        name = self.variant
        if self.threshold is not None:
            name += f":{self.threshold:g}"
        return name if d is None else f"{name}(d={d})"


def parse_policy(text, ph=None):
    """Parse the CLI spelling, e.g. ``sq-rtb``, ``sq-re:2``, ``lew``."""
    name, _, arg = text.strip().lower().partition(":")
    if name not in VARIANTS:
        raise ValueError(f"unknown policy {text!r}; expected one of {', '.join(VARIANTS)}")
    threshold = None
    if name in THRESHOLD_VARIANTS:
        if not arg:
            raise ValueError(f"policy {name} needs a threshold, e.g. {name}:2")
        try:
            threshold = float(arg)
        except ValueError:
            raise ValueError(f"bad threshold in policy {text!r}") from None
    elif arg:
        raise ValueError(f"policy {name} takes no parameter")
    return Policy(name, threshold, ph if name == "lew" else None)


def policy_grid(policy, delta, r):
    """Layer grid a policy operates on.

    SQ-RE and RE only distinguish ages below/above T, so they use ``r = 1``
    with ``c_1 = T``. SQ and random ignore ages (``r = 0``).
    """
    if policy.variant in ("sq-re", "re"):
        return LayerGrid((0.0, policy.threshold))
    if policy.variant in ("random", "sq"):
        return LayerGrid((0.0,))
    grid = LayerGrid.uniform(delta, r)
    if policy.variant == "sq-rtb-re":
        s = grid.index_of(policy.threshold) if policy.threshold <= grid.thresholds[-1] + 1e-12 else None
        if s is None:
            raise ValueError(f"threshold T={policy.threshold} exceeds c_r={grid.thresholds[-1]}")
    return grid


@lru_cache(maxsize=64)
def _lew_residuals(ph, thresholds):
    # E[X | X >= c_k] - c_k for k = 0..r+1; layer r+1 reuses c_r
    c = list(thresholds) + [thresholds[-1]]
    return np.array([phasetype.residual_mean(ph, ck) for ck in c])


def lew_residuals(ph, grid):
    return _lew_residuals(ph, grid.thresholds)


def score_components(policy, k, ell, grid):
    """Vectorized aversion scores.

    ``k`` and ``ell`` are integer arrays of equal shape; returns an array
    with a trailing axis of length ``policy.arity``. Idle entries
    (``k == 0``) score all zeros.
    """
    k = np.asarray(k, dtype=np.int64)
    ell = np.asarray(ell, dtype=np.int64)
    kf = k.astype(float)
    lf = ell.astype(float)
    v = policy.variant
    if v == "random":
        comps = [np.zeros_like(kf)]
    elif v == "sq":
        comps = [lf]
    elif v == "sq-rtb":
        comps = [lf, kf]
    elif v in ("sq-re", "las-qtb"):
        comps = [kf, lf]
    elif v in ("las", "re"):
        comps = [kf]
    elif v == "sq-rtb-re":
        s = grid.index_of(policy.threshold)
        comps = [(k > s).astype(float), lf, kf]
    elif v == "lew":
        res = lew_residuals(policy.ph, grid)
        comps = [np.where(k == 0, 0.0, (lf - 1.0) + res[np.clip(k, 0, grid.r + 1)])]
    out = np.stack(comps, axis=-1)
    out[k == 0] = 0.0
    return out


def aversion(policy, obs, grid):
    """Aversion score of one server observation as a tuple."""
    if isinstance(obs, tuple):
        obs = ServerObservation(*obs)
    if obs.k > grid.r + 1:
        raise ValueError(f"layer {obs.k} beyond r+1 = {grid.r + 1}")
    return tuple(float(x) for x in score_components(policy, obs.k, obs.ell, grid))


def compare(a, b):
    """Lexicographic comparison: -1, 0 or 1."""
    if len(a) != len(b):
        raise ArityError(f"cannot compare scores of arity {len(a)} and {len(b)}")
    for x, y in zip(a, b):
        if x < y:
            return -1
        if x > y:
            return 1
    return 0
