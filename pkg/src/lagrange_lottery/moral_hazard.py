"""Static principal-agent model with a finite action grid.

The agent picks an effort level ``a``; output ``q`` is drawn from
``p(q | a)`` and the agent consumes ``c(q)``. Utility is
``v(c) + e(a)`` with ``v(c) = c**alpha`` and
``e(a) = kappa * (a_bar - a)**beta``. The planner maximizes the agent's
expected utility subject to expected resource balance and incentive
compatibility of the recommended action.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    IterateLog,
    LotteryProblem,
    LotterySolution,
    MultiplierState,
    StepSchedule,
    construct_lottery,
    run_iteration_loop,
)
from .errors import ConfigError
from .inner import FocInnerSolver, GridInnerSolver, PowerUtility, SeparableSpec

__all__ = [
    "MoralHazardModel",
    "build_prob_table",
    "to_problem",
    "default_schedule",
    "solve_example1",
    "action_summary",
]

IC_SCALINGS = ("inverse", "inverse_square", "none")


@dataclass(frozen=True)
class MoralHazardModel:
    """Parameters of the moral-hazard economy.

    Parameters
    ----------
    a_lo, a_hi, delta_a : float
        Action grid ``a_lo, a_lo + delta_a, ...`` up to ``a_hi``.
    outputs : tuple of float
        Output levels, low to high. The built-in probability law needs
        exactly two.
    c_min, c_max : float
        Consumption bounds in every output state.
    alpha : float
        Consumption utility exponent, ``0 < alpha < 1``.
    kappa, a_bar, beta : float
        Effort utility ``kappa * (a_bar - a)**beta``.
    prob_exponent : float
        Curvature of the output probability law.
    ic_scaling : {"inverse", "inverse_square", "none"}
        Weight ``1/|a - a_hat|``, ``1/|a - a_hat|**2`` or 1 on each
        incentive constraint.
    """

    a_lo: float = 0.05
    a_hi: float = 1.95
    delta_a: float = 0.025
    outputs: tuple = (0.5, 1.5)
    c_min: float = 0.0
    c_max: float = 2.0
    alpha: float = 0.5
    kappa: float = 0.8
    a_bar: float = 2.0
    beta: float = 0.5
    prob_exponent: float = 0.2
    ic_scaling: str = "inverse"

    def __post_init__(self):
        if self.delta_a <= 0 or self.a_hi < self.a_lo:
            raise ConfigError("invalid action grid")
        if not (0 < self.alpha < 1):
            raise ConfigError("alpha must lie in (0, 1)")
        if not self.c_min < self.c_max:
            raise ConfigError("c_min must be below c_max")
        if self.a_hi >= self.a_bar:
            raise ConfigError("actions must stay below a_bar")
        if len(self.outputs) != 2:
            raise ConfigError("the output law is defined for two output levels")
        if self.ic_scaling not in IC_SCALINGS:
            raise ConfigError(f"ic_scaling must be one of {IC_SCALINGS}")

    @property
    def actions(self) -> np.ndarray:
        n = int(np.floor((self.a_hi - self.a_lo) / self.delta_a + 1e-9)) + 1
        return np.round(self.a_lo + self.delta_a * np.arange(n), 12)

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    def v(self, c):
        return np.power(c, self.alpha)

    def effort_utility(self, a):
        return self.kappa * np.power(self.a_bar - np.asarray(a, dtype=float), self.beta)

    def with_(self, **kw) -> "MoralHazardModel":
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d.update(kw)
        return MoralHazardModel(**d)


def build_prob_table(model: MoralHazardModel) -> np.ndarray:
    """Output probabilities, shape ``(n_actions, 2)``; column 1 is the high output.

    ``p(high | a) = (1 - (1 - a)**e) / 2`` below ``a = 1`` and
    ``(1 + (a - 1)**e) / 2`` from ``a = 1`` on.
    """
    a = model.actions
    e = model.prob_exponent
    hi = np.where(a < 1.0,
                  0.5 * (1.0 - np.power(np.abs(1.0 - a), e)),
                  0.5 * (1.0 + np.power(np.abs(a - 1.0), e)))
    return np.stack([1.0 - hi, hi], axis=1)


def _other_index(n: int) -> np.ndarray:
    # other[a, j] = index of the j-th deviation action a_hat != a
    j = np.arange(n - 1)[None, :]
    a = np.arange(n)[:, None]
    return j + (j >= a)


def _scalers(model: MoralHazardModel, other: np.ndarray) -> np.ndarray:
    acts = model.actions
    n = len(acts)
    if n == 1 or model.ic_scaling == "none":
        return np.ones((n - 1, n))
    dist = np.abs(acts[other] - acts[:, None]).T  # (l, n)
    return 1.0 / dist if model.ic_scaling == "inverse" else 1.0 / dist ** 2


def to_problem(model: MoralHazardModel):
    """Lottery problem and separable tables for the model.

    Consumption has one coordinate per output state. The single pooled
    constraint is expected resource balance; per-action constraint ``j``
    at action ``a`` rules out profitable deviation to the ``j``-th other
    action.

    Returns
    -------
    problem : LotteryProblem
    spec : SeparableSpec
    """
    P = build_prob_table(model)
    q = np.asarray(model.outputs, dtype=float)
    acts = model.actions
    n = len(acts)
    ea = model.effort_utility(acts)
    other = _other_index(n)
    v = model.v
    # deviation tables: dP[a, j, r] = p(q_r | a_hat_j) - p(q_r | a)
    dP = P[other] - P[:, None, :]
    dE = ea[other] - ea[:, None]

    def payoff(a, C):
        return v(np.asarray(C, dtype=float)) @ P[a] + ea[a]

    def pooled(a, C):
        return ((np.asarray(C, dtype=float) - q) @ P[a])[..., None]

    def per_action(a, C):
        return v(np.asarray(C, dtype=float)) @ dP[a].T + dE[a]

    ell = n - 1
    problem = LotteryProblem(
        actions=acts, c_lower=np.full(2, model.c_min), c_upper=np.full(2, model.c_max),
        payoff=payoff, pooled=pooled, per_action=per_action if ell else None,
        n_pooled=1, n_per_action=ell,
        constraint_scalers=_scalers(model, other) if ell else None,
        name="moral-hazard")
    spec = SeparableSpec(
        u0=ea, u=P,
        v0=dE.T.reshape(ell, n), v=dP.transpose(1, 0, 2).reshape(ell, n, 2),
        g0=(-(P @ q))[None, :], slope=P[None, :, :],
        w=[PowerUtility(model.alpha)] * 2)
    return problem, spec


def default_schedule(model: MoralHazardModel) -> StepSchedule:
    """``mu_k = (k + 1/delta_a**2) ** -0.8``."""
    return StepSchedule(scale=1.0, offset=1.0 / model.delta_a ** 2, exponent=0.8)


def solve_example1(model: MoralHazardModel | None = None, n_iters: int | None = None,
                   window=None, *, schedule: StepSchedule | None = None, lam0: float = 0.5,
                   cluster_tol: float = 1e-2, inner: str = "foc", grid_points: int = 201,
                   **loop_kw):
    """Run the iteration on the moral-hazard model with the FOC solver.

    Defaults: ``lam = 0.5``, ``gamma = 0``, ``N = 100 / delta_a`` and the
    step schedule of :func:`default_schedule`. The window defaults to the
    last 5% of iterations.

    Returns
    -------
    solution : LotterySolution
    log : IterateLog
    """
    model = model or MoralHazardModel()
    problem, spec = to_problem(model)
    if n_iters is None:
        n_iters = int(round(100.0 / model.delta_a))
    schedule = schedule or default_schedule(model)
    if inner == "foc":
        solver = FocInnerSolver(spec)
    elif inner == "grid":
        solver = GridInnerSolver([grid_points, grid_points], separable=spec)
    else:
        raise ConfigError(f"unknown inner solver {inner!r}")
    init = MultiplierState.initial(problem, lam0=lam0)
    log = run_iteration_loop(problem, init, schedule, n_iters, solver, **loop_kw)
    return construct_lottery(log, window, cluster_tol), log


def action_summary(solution: LotterySolution, model: MoralHazardModel):
    """Per-action mass and mass-weighted mean contract, largest mass first.

    Returns
    -------
    list of (action, probability, consumption)
    """
    acts = model.actions
    out = []
    for a in np.unique(solution.action):
        sel = solution.action == a
        p = solution.prob[sel]
        c = (solution.consumption[sel] * p[:, None]).sum(0) / p.sum()
        out.append((float(acts[a]), float(p.sum()), c))
    out.sort(key=lambda t: -t[1])
    return out
