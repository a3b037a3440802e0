"""Exception hierarchy shared by the solver modules and the command line."""

from __future__ import annotations


class LotteryError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(LotteryError, ValueError):
    """Invalid problem, schedule or run configuration."""


class EvaluationError(LotteryError, FloatingPointError):
    """A problem callback returned a non-finite value.

    Parameters
    ----------
    a_index : int
        Action index at which the evaluation failed.
    c : array_like
        Consumption vector at which the evaluation failed.
    what : str
        Name of the offending callback.
    """

    def __init__(self, a_index, c, what="callback"):
        self.a_index = int(a_index)
        self.c = c
        self.what = what
        super().__init__(f"non-finite {what} value at action {a_index}, c={c!r}")


class DualUnboundedError(LotteryError):
    """The Lagrangian is unbounded above at the current multipliers.

    Raised when no pooled multiplier penalizes consumption and the
    consumption box is open above. Callers should treat V as +inf and
    raise the pooled multipliers.
    """


class InnerSolverError(LotteryError):
    """Failure inside Step 1 of the iteration, tagged with the iteration."""

    def __init__(self, k, cause):
        self.k = int(k)
        self.cause = cause
        super().__init__(f"inner solver failed at iteration k={k}: {cause}")


class EmptyWindowError(LotteryError, ValueError):
    """Requested lottery window contains no iterations."""


class SizeCapExceeded(LotteryError):
    """LP instance would exceed the configured size cap.

    Parameters
    ----------
    report : dict
        Variable, row and nonzero counts of the refused instance.
    """

    def __init__(self, report):
        self.report = dict(report)
        super().__init__(f"LP size cap exceeded: {self.report}")


class WelfareInfeasibleError(LotteryError, ValueError):
    """Welfare value lies above the first-best frontier."""
