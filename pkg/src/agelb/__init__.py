"""Age-aware power-of-d load balancing: cavity fixed point and finite-N simulation."""

from .phasetype import PhaseTypeDist, fit_merlang, hexp
from .policies import LayerGrid, Policy, parse_policy
from .cavity import solve, fixed_point
from .metrics import mean_metrics, join_law

__all__ = ["PhaseTypeDist", "fit_merlang", "hexp", "LayerGrid", "Policy", "parse_policy",
           "solve", "fixed_point", "mean_metrics", "join_law"]
__version__ = "0.1.0"
