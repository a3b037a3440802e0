"""Optimal lottery solutions of non-convex planning problems.

The solver runs projected subgradient steps on the dual of the
deterministic problem and reads the optimal lottery off the frequency of
the Lagrangian maximizers along the way.
"""

from .core import (
    EpsOptimalityReport,
    InnerResult,
    IterateLog,
    LotteryProblem,
    LotterySolution,
    MultiplierState,
    StepSchedule,
    certify_eps,
    construct_lottery,
    dual_value,
    eval_lagrangian,
    run_iteration_loop,
    subgradient_step,
)
from .errors import (
    ConfigError,
    DualUnboundedError,
    EmptyWindowError,
    EvaluationError,
    InnerSolverError,
    LotteryError,
    SizeCapExceeded,
    WelfareInfeasibleError,
)
from .inner import FocInnerSolver, GridInnerSolver, LogUtility, PowerUtility, SeparableSpec

__version__ = "0.1.0"
