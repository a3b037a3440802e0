"""Problem abstraction, Lagrangian iteration and lottery reconstruction.

A problem maximizes ``f(a, c)`` over a finite action set ``A`` and a box
``C`` subject to pooled constraints ``g_i(a, c) <= 0`` and per-action
constraints ``h_j(a, c) <= 0``. Its lottery relaxation optimizes over
probability measures on ``A x C`` with constraints holding in expectation
(per-action constraints conditionally on each action). The dual of the
deterministic problem is solved by projected subgradient steps and the
optimal lottery is read off the step-weighted frequency of the argmax
iterates.

All problem callbacks are vectorized over consumption: ``payoff(a, C)``
receives an action index and an array of shape ``(..., d)`` and returns
``(...)``; ``pooled`` and ``per_action`` return ``(..., m)`` and
``(..., l)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Protocol

import numpy as np
from scipy.sparse.csgraph import connected_components
from scipy.sparse import coo_matrix
from scipy.spatial import cKDTree

from .errors import (
    ConfigError,
    EmptyWindowError,
    EvaluationError,
    InnerSolverError,
    LotteryError,
)

__all__ = [
    "LotteryProblem",
    "MultiplierState",
    "StepSchedule",
    "InnerResult",
    "InnerSolver",
    "IterateLog",
    "LotterySolution",
    "EpsOptimalityReport",
    "eval_lagrangian",
    "dual_value",
    "subgradient_step",
    "run_iteration_loop",
    "construct_lottery",
    "certify_eps",
    "violation_path",
    "cluster_points",
]

_CHUNK = 2048


def _empty_constraints(a_index, C):
    C = np.asarray(C, dtype=float)
    return np.zeros(C.shape[:-1] + (0,))


@dataclass(frozen=True, eq=False)
class LotteryProblem:
    """Finite-action planning problem with a box consumption set.

    Parameters
    ----------
    actions : array_like, shape (n, k) or (n,)
        Ordered action points. One-dimensional input is read as scalar
        actions.
    c_lower, c_upper : array_like, shape (d,)
        Consumption box bounds, ``c_lower < c_upper`` coordinatewise.
        ``c_upper`` may be ``inf`` for solvers that can cope with it.
    payoff : callable
        ``payoff(a_index, C) -> (...)``.
    pooled : callable or None
        ``pooled(a_index, C) -> (..., m)``; constraints hold in expectation
        over the whole lottery.
    per_action : callable or None
        ``per_action(a_index, C) -> (..., l)``; constraints hold in
        expectation conditional on each action.
    n_pooled, n_per_action : int
        ``m`` and ``l``.
    constraint_scalers : array_like, shape (l, n), optional
        Positive weight applied to ``h_j`` at action ``a`` wherever the
        constraint enters the Lagrangian or the multiplier update.
    pooled_scalers : array_like, shape (m,), optional
        Positive weight applied to ``g_i`` in the same way.
    name : str
        Label used in reports.
    """

    actions: np.ndarray
    c_lower: np.ndarray
    c_upper: np.ndarray
    payoff: Callable
    pooled: Callable | None = None
    per_action: Callable | None = None
    n_pooled: int = 0
    n_per_action: int = 0
    constraint_scalers: np.ndarray | None = None
    pooled_scalers: np.ndarray | None = None
    name: str = "problem"

    def __post_init__(self):
        acts = np.asarray(self.actions, dtype=float)
        if acts.ndim == 1:
            acts = acts[:, None]
        if acts.ndim != 2 or acts.shape[0] == 0:
            raise ConfigError("actions must be a non-empty (n, k) array")
        if len(np.unique(acts, axis=0)) != len(acts):
            raise ConfigError("duplicate action points")
        lo = np.atleast_1d(np.asarray(self.c_lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.c_upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ConfigError("consumption bounds must be matching 1-D arrays")
        if not np.all(lo < hi) or not np.all(np.isfinite(lo)):
            raise ConfigError("consumption box needs finite c_min < c_max")
        n = len(acts)
        if self.pooled is None and self.n_pooled:
            raise ConfigError("n_pooled > 0 but no pooled callback")
        if self.per_action is None and self.n_per_action:
            raise ConfigError("n_per_action > 0 but no per_action callback")
        sc = None
        if self.constraint_scalers is not None:
            sc = np.asarray(self.constraint_scalers, dtype=float)
            if sc.shape != (self.n_per_action, n) or not np.all(sc > 0):
                raise ConfigError("constraint_scalers must be positive with shape (l, n)")
        ps = None
        if self.pooled_scalers is not None:
            ps = np.asarray(self.pooled_scalers, dtype=float)
            if ps.shape != (self.n_pooled,) or not np.all(ps > 0):
                raise ConfigError("pooled_scalers must be positive with shape (m,)")
        object.__setattr__(self, "actions", acts)
        object.__setattr__(self, "c_lower", lo)
        object.__setattr__(self, "c_upper", hi)
        object.__setattr__(self, "constraint_scalers", sc)
        object.__setattr__(self, "pooled_scalers", ps)
        if self.pooled is None:
            object.__setattr__(self, "pooled", _empty_constraints)
        if self.per_action is None:
            object.__setattr__(self, "per_action", _empty_constraints)

    @classmethod
    def from_functions(cls, actions, c_lower, c_upper, f, g=(), h=(), **kw):
        """Build a problem from pointwise scalar callbacks.

        ``f(a, c)``, each ``g_i(a, c)`` and each ``h_j(a, c)`` receive an
        action vector and a consumption vector and return a float. The
        wrappers loop in Python, so this is meant for small problems.
        """
        acts = np.asarray(actions, dtype=float)
        if acts.ndim == 1:
            acts = acts[:, None]
        g, h = list(g), list(h)

        def lift(funcs):
            def call(a_index, C):
                C = np.asarray(C, dtype=float)
                flat = C.reshape(-1, C.shape[-1])
                out = np.array([[fn(acts[a_index], c) for fn in funcs] for c in flat],
                               dtype=float).reshape(len(flat), len(funcs))
                return out.reshape(C.shape[:-1] + (len(funcs),))
            return call

        fv = lift([f])
        return cls(actions=acts, c_lower=c_lower, c_upper=c_upper,
                   payoff=lambda a, C: fv(a, C)[..., 0],
                   pooled=lift(g) if g else None,
                   per_action=lift(h) if h else None,
                   n_pooled=len(g), n_per_action=len(h), **kw)

    @property
    def n_actions(self) -> int:
        return self.actions.shape[0]

    @property
    def dim(self) -> int:
        return self.c_lower.shape[0]

    @property
    def pooled_scale(self) -> np.ndarray:
        if self.pooled_scalers is None:
            return np.ones(self.n_pooled)
        return self.pooled_scalers

    @property
    def per_action_scale(self) -> np.ndarray:
        if self.constraint_scalers is None:
            return np.ones((self.n_per_action, self.n_actions))
        return self.constraint_scalers

    def f(self, a_index, C):
        return np.asarray(self.payoff(a_index, C), dtype=float)

    def g(self, a_index, C):
        """Unscaled pooled constraint values."""
        return np.asarray(self.pooled(a_index, C), dtype=float)

    def h(self, a_index, C):
        """Unscaled per-action constraint values."""
        return np.asarray(self.per_action(a_index, C), dtype=float)

    def in_box(self, c, tol=1e-12) -> bool:
        c = np.asarray(c, dtype=float)
        return bool(np.all(c >= self.c_lower - tol) and np.all(c <= self.c_upper + tol))


@dataclass
class MultiplierState:
    """Pooled multipliers ``lam`` (m,) and per-action multipliers ``gamma`` (l, n)."""

    lam: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=float).reshape(-1)
        self.gamma = np.asarray(self.gamma, dtype=float)
        if self.gamma.ndim != 2:
            raise ConfigError("gamma must be a 2-D (l, n) array")
        if np.any(self.lam < 0) or np.any(self.gamma < 0):
            raise ConfigError("multipliers must be nonnegative")

    @classmethod
    def zeros(cls, problem: LotteryProblem) -> "MultiplierState":
        return cls(np.zeros(problem.n_pooled),
                   np.zeros((problem.n_per_action, problem.n_actions)))

    @classmethod
    def initial(cls, problem: LotteryProblem, lam0: float = 0.5, gamma0: float = 0.0):
        """Constant initial state, by default ``lam = 0.5`` and ``gamma = 0``."""
        return cls(np.full(problem.n_pooled, float(lam0)),
                   np.full((problem.n_per_action, problem.n_actions), float(gamma0)))

    def copy(self) -> "MultiplierState":
        return MultiplierState(self.lam.copy(), self.gamma.copy())

    def check(self, problem: LotteryProblem):
        if self.lam.shape != (problem.n_pooled,):
            raise ConfigError(f"lam has shape {self.lam.shape}, expected ({problem.n_pooled},)")
        if self.gamma.shape != (problem.n_per_action, problem.n_actions):
            raise ConfigError("gamma shape does not match (l, n)")

    @property
    def sq_norm(self) -> float:
        """``sum(lam**2) + sum(gamma**2)``."""
        return float(self.lam @ self.lam + np.sum(self.gamma ** 2))


@dataclass(frozen=True)
class StepSchedule:
    """Step sizes ``mu_k = scale / (k + offset) ** exponent``.

    The exponent must lie in ``(0.5, 1]`` so that the steps are not
    summable while their squares are.
    """

    scale: float = 1.0
    offset: float = 0.0
    exponent: float = 0.8

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ConfigError("step scale must be positive")
        if not (self.offset >= 0):
            raise ConfigError("step offset must be nonnegative")
        if not (0.5 < self.exponent <= 1.0):
            raise ConfigError(f"step exponent {self.exponent} outside (0.5, 1]")

    @property
    def rho(self) -> float:
        return 2.0 * self.exponent - 1.0

    def __call__(self, k: int) -> float:
        return self.scale / (k + self.offset) ** self.exponent

    def steps(self, n: int) -> np.ndarray:
        k = np.arange(1, n + 1, dtype=float)
        return self.scale / (k + self.offset) ** self.exponent


class InnerResult(NamedTuple):
    a_index: int
    c: np.ndarray
    value: float


class InnerSolver(Protocol):
    """Step 1 maximizer: returns the argmax of the Lagrangian over ``A x C``."""

    def argmax(self, problem: LotteryProblem, mult: MultiplierState) -> InnerResult:
        ...


def _point_values(problem: LotteryProblem, a_index: int, c: np.ndarray):
    f = float(problem.f(a_index, c))
    g = problem.g(a_index, c).reshape(problem.n_pooled)
    h = problem.h(a_index, c).reshape(problem.n_per_action)
    if not (math.isfinite(f) and np.all(np.isfinite(g)) and np.all(np.isfinite(h))):
        raise EvaluationError(a_index, c)
    return f, g * problem.pooled_scale, h * problem.per_action_scale[:, a_index]


def eval_lagrangian(problem: LotteryProblem, a_index: int, c, mult: MultiplierState) -> float:
    """Lagrangian ``f - lam . g_hat - gamma[:, a] . h_hat`` at one point."""
    c = np.asarray(c, dtype=float)
    if not 0 <= a_index < problem.n_actions:
        raise IndexError(f"action index {a_index} out of range")
    if not problem.in_box(c):
        raise ValueError(f"c={c} outside the consumption box")
    f, g, h = _point_values(problem, a_index, c)
    return f - float(mult.lam @ g) - float(mult.gamma[:, a_index] @ h)


def dual_value(problem: LotteryProblem, mult: MultiplierState, inner: InnerSolver):
    """Dual function value and the maximizing ``(a_index, c)``.

    The value is recomputed from the problem callbacks at the point the
    inner solver returns, so it is exactly a Lagrangian value.
    """
    res = inner.argmax(problem, mult)
    c = np.asarray(res.c, dtype=float)
    return eval_lagrangian(problem, res.a_index, c, mult), (int(res.a_index), c)


def _project_update(mult: MultiplierState, step: float, a: int, g, h) -> MultiplierState:
    lam = np.maximum(mult.lam + step * g, 0.0)
    gamma = mult.gamma.copy()
    if h.size:
        gamma[:, a] = np.maximum(gamma[:, a] + step * h, 0.0)
    return MultiplierState(lam, gamma)


def subgradient_step(problem: LotteryProblem, mult: MultiplierState, step: float,
                     argmax) -> MultiplierState:
    """Projected multiplier update at the argmax ``(a_index, c)``.

    Only the gamma column of the argmax action moves; every other column
    is copied unchanged.
    """
    a, c = argmax
    _, g, h = _point_values(problem, int(a), np.asarray(c, dtype=float))
    return _project_update(mult, step, int(a), g, h)


@dataclass
class IterateLog:
    """Per-iteration record of a Lagrangian iteration run.

    Constraint values are stored as the iteration sees them, i.e. after
    scaling. ``dual_value[k-1]`` is ``V`` at the multipliers used in
    iteration ``k``, and ``lambda_path[k-1]`` holds those multipliers.
    """

    problem: LotteryProblem
    schedule: StepSchedule
    k: np.ndarray
    action: np.ndarray
    consumption: np.ndarray
    step: np.ndarray
    dual_value: np.ndarray
    payoff: np.ndarray
    max_abs_g: np.ndarray
    max_abs_h: np.ndarray
    initial: MultiplierState
    final: MultiplierState
    weighted_pooled_sum: np.ndarray
    pooled_values: np.ndarray | None = None
    per_action_values: np.ndarray | None = None
    lambda_path: np.ndarray | None = None
    snapshots: list = field(default_factory=list)
    bound_M: float = 0.0
    max_multiplier_sq_norm: float = 0.0

    @property
    def n_iters(self) -> int:
        return int(self.k.shape[0])

    @property
    def step_sum(self) -> float:
        return float(self.step.sum())

    @property
    def min_dual_value(self) -> float:
        return float(self.dual_value.min())

    @property
    def initial_sq_norm(self) -> float:
        """``Lambda`` at the initial multipliers."""
        return self.initial.sq_norm


def run_iteration_loop(problem: LotteryProblem, init: MultiplierState,
                       schedule: StepSchedule, n_iters: int, inner: InnerSolver, *,
                       record_constraints: bool | None = None, snapshot_every: int = 0,
                       progress: Callable[[int, float], None] | None = None) -> IterateLog:
    """Run the projected subgradient iteration for ``n_iters`` steps.

    Parameters
    ----------
    problem : LotteryProblem
    init : MultiplierState
        Starting multipliers; not modified.
    schedule : StepSchedule
    n_iters : int
        Number of iterations, at least 1.
    inner : InnerSolver
        Maximizer of the Lagrangian.
    record_constraints : bool, optional
        Keep every iterate's constraint values. Defaults to on when
        ``m + l <= 64``. Pooled multipliers are kept when this is on or
        when ``m <= 16``.
    snapshot_every : int
        Store a copy of the multipliers every this many iterations.
    progress : callable, optional
        Called as ``progress(k, V)`` after each iteration.

    Returns
    -------
    IterateLog
    """
    if int(n_iters) < 1:
        raise ConfigError("n_iters must be at least 1")
    N = int(n_iters)
    init.check(problem)
    m, ell, d = problem.n_pooled, problem.n_per_action, problem.dim
    if record_constraints is None:
        record_constraints = m + ell <= 64
    gscale = problem.pooled_scale
    hscale = problem.per_action_scale

    ks = np.arange(1, N + 1)
    mus = schedule.steps(N)
    act = np.empty(N, dtype=np.int64)
    cons = np.empty((N, d))
    V = np.empty(N)
    F = np.empty(N)
    mg = np.zeros(N)
    mh = np.zeros(N)
    gv = np.empty((N, m)) if record_constraints else None
    hv = np.empty((N, ell)) if record_constraints else None
    keep_lam = record_constraints or m <= 16
    lp = np.empty((N, m)) if keep_lam else None
    wsum = np.zeros(m)
    snaps = []

    lam = init.lam.copy()
    gamma = init.gamma.copy()
    M = 0.0
    gsq = float(np.sum(gamma ** 2))
    max_sq = float(lam @ lam) + gsq

    for i in range(N):
        k = i + 1
        # skip validation on the hot path; the projection below keeps the state valid
        mult = MultiplierState.__new__(MultiplierState)
        mult.lam, mult.gamma = lam, gamma
        try:
            res = inner.argmax(problem, mult)
            a = int(res.a_index)
            c = np.asarray(res.c, dtype=float)
            f = float(problem.f(a, c))
            g = problem.g(a, c).reshape(m) * gscale
            h = problem.h(a, c).reshape(ell) * hscale[:, a]
            if not (math.isfinite(f) and np.all(np.isfinite(g)) and np.all(np.isfinite(h))):
                raise EvaluationError(a, c)
        except LotteryError as exc:
            raise InnerSolverError(k, exc) from exc
        col = gamma[:, a]
        V[i] = f - float(lam @ g) - float(col @ h)
        F[i] = f
        act[i] = a
        cons[i] = c
        if m:
            mg[i] = np.abs(g).max()
        if ell:
            mh[i] = np.abs(h).max()
        if record_constraints:
            gv[i] = g
            hv[i] = h
        if keep_lam:
            lp[i] = lam
        mu = mus[i]
        wsum += mu * g
        lam = np.maximum(lam + mu * g, 0.0)
        if ell:
            new = np.maximum(col + mu * h, 0.0)
            gsq += float(new @ new - col @ col)
            gamma[:, a] = new
        # projection invariant; only lam and the touched column can change
        if (m and lam.min() < 0.0) or (ell and gamma[:, a].min() < 0.0):
            raise AssertionError(f"negative multiplier after projection at k={k}")
        M = max(M, mg[i], mh[i])
        max_sq = max(max_sq, float(lam @ lam) + gsq)
        if snapshot_every and k % snapshot_every == 0:
            snaps.append((k, MultiplierState(lam.copy(), gamma.copy())))
        if progress is not None:
            progress(k, V[i])

    return IterateLog(problem=problem, schedule=schedule, k=ks, action=act,
                      consumption=cons, step=mus, dual_value=V, payoff=F,
                      max_abs_g=mg, max_abs_h=mh, initial=init.copy(),
                      final=MultiplierState(lam, gamma), weighted_pooled_sum=wsum,
                      pooled_values=gv, per_action_values=hv, lambda_path=lp,
                      snapshots=snaps, bound_M=M, max_multiplier_sq_norm=max_sq)


def cluster_points(X: np.ndarray, tol: float) -> np.ndarray:
    """Label points by single-linkage components under the max-norm.

    Points closer than ``tol`` (strictly) are linked; labels are numbered
    in order of first appearance. ``tol <= 0`` gives every point its own
    label.
    """
    X = np.asarray(X, dtype=float)
    n = len(X)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if tol <= 0:
        return np.arange(n)
    if X.ndim == 1:
        X = X[:, None]
    pairs = cKDTree(X).query_pairs(r=np.nextafter(tol, 0.0), p=np.inf, output_type="ndarray")
    if len(pairs) == 0:
        return np.arange(n)
    adj = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, lab = connected_components(adj, directed=False)
    # renumber by first appearance for determinism
    _, first = np.unique(lab, return_index=True)
    order = np.argsort(first)
    remap = np.empty_like(order)
    remap[order] = np.arange(len(order))
    return remap[lab]


@dataclass
class EpsOptimalityReport:
    """Certificate of approximate optimality for a lottery.

    Violations are in the original (unscaled) constraint units.
    ``analytic_bound`` is ``(lam_final - lam_init) / (s_i * sum(mu))`` and
    bounds the full-history expected pooled violation.
    """

    max_g_violation: float
    max_h_violation: float
    dual_upper_bound: float
    objective: float
    duality_gap_bound: float
    certified_eps: float
    expected_pooled: np.ndarray
    conditional_per_action: np.ndarray
    analytic_bound: np.ndarray | None = None
    full_history: bool = False

    def to_dict(self) -> dict:
        d = {
            "max_g_violation": self.max_g_violation,
            "max_h_violation": self.max_h_violation,
            "dual_upper_bound": self.dual_upper_bound,
            "objective": self.objective,
            "duality_gap_bound": self.duality_gap_bound,
            "certified_eps": self.certified_eps,
            "expected_pooled": self.expected_pooled.tolist(),
            "full_history": self.full_history,
        }
        if self.analytic_bound is not None:
            d["analytic_bound"] = self.analytic_bound.tolist()
        return d


@dataclass
class LotterySolution:
    """Probability measure on ``A x C`` given as weighted atoms.

    Atoms are stored columnwise: ``action[i]``, ``consumption[i]`` and
    ``prob[i]``, sorted by descending probability.
    """

    action: np.ndarray
    consumption: np.ndarray
    prob: np.ndarray
    window: tuple
    objective: float = float("nan")
    eps_report: EpsOptimalityReport | None = None

    @property
    def atoms(self):
        return [(int(a), c.copy(), float(p))
                for a, c, p in zip(self.action, self.consumption, self.prob)]

    def __len__(self):
        return len(self.prob)

    def action_marginal(self, n_actions: int) -> np.ndarray:
        return np.bincount(self.action, weights=self.prob, minlength=n_actions)

    def to_dict(self, problem: LotteryProblem | None = None) -> dict:
        d = {
            "window": [int(self.window[0]), int(self.window[1])],
            "objective": self.objective,
            "atoms": [
                {"action_index": int(a), "consumption": c.tolist(), "probability": float(p)}
                for a, c, p in zip(self.action, self.consumption, self.prob)
            ],
        }
        if problem is not None:
            for at, a in zip(d["atoms"], self.action):
                at["action"] = problem.actions[a].tolist()
        if self.eps_report is not None:
            d["certificate"] = self.eps_report.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LotterySolution":
        atoms = d["atoms"]
        return cls(action=np.array([a["action_index"] for a in atoms], dtype=np.int64),
                   consumption=np.array([a["consumption"] for a in atoms], dtype=float),
                   prob=np.array([a["probability"] for a in atoms], dtype=float),
                   window=tuple(d["window"]), objective=d.get("objective", float("nan")))


def _resolve_window(n: int, window) -> tuple:
    if window is None:
        k0 = n - max(1, math.ceil(0.05 * n)) + 1
        return (k0, n)
    ks, ke = int(window[0]), int(window[1])
    if ke < ks or ks > n or ke < 1:
        raise EmptyWindowError(f"empty window {window} for {n} iterations")
    if ks < 1 or ke > n:
        raise EmptyWindowError(f"window {window} outside [1, {n}]")
    return (ks, ke)


def construct_lottery(log: IterateLog, window=None, cluster_tol: float = 1e-2,
                      certify: bool = True) -> LotterySolution:
    """Step-weighted lottery over a window of iterates.

    Parameters
    ----------
    log : IterateLog
    window : (int, int), optional
        Inclusive 1-based iteration range. Defaults to the last 5%.
    cluster_tol : float
        Iterates with the same action whose consumptions are linked by
        max-norm distances below this value are merged into one atom at
        their probability-weighted mean. Zero disables merging.
    certify : bool
        Attach an :class:`EpsOptimalityReport`.
    """
    ks, ke = _resolve_window(log.n_iters, window)
    sl = slice(ks - 1, ke)
    mu = log.step[sl]
    w = mu / mu.sum()
    acts = log.action[sl]
    C = log.consumption[sl]

    out_a, out_c, out_p, out_first = [], [], [], []
    for a in np.unique(acts):
        idx = np.flatnonzero(acts == a)
        lab = cluster_points(C[idx], cluster_tol)
        nl = lab.max() + 1
        p = np.bincount(lab, weights=w[idx], minlength=nl)
        cm = np.zeros((nl, C.shape[1]))
        np.add.at(cm, lab, C[idx] * w[idx, None])
        cm /= p[:, None]
        first = np.full(nl, len(acts))
        np.minimum.at(first, lab, idx)
        cm = np.clip(cm, log.problem.c_lower, log.problem.c_upper)
        out_a.append(np.full(nl, a))
        out_c.append(cm)
        out_p.append(p)
        out_first.append(first)
    a_ = np.concatenate(out_a)
    c_ = np.concatenate(out_c)
    p_ = np.concatenate(out_p)
    f_ = np.concatenate(out_first)
    order = np.lexsort((f_, -p_))
    p_ = p_[order]
    p_ /= p_.sum()
    sol = LotterySolution(action=a_[order].astype(np.int64), consumption=c_[order], prob=p_,
                          window=(ks, ke))
    if certify:
        full = (ks, ke) == (1, log.n_iters)
        rep = certify_eps(log.problem, sol, log, full_history=full)
        sol.eps_report = rep
        sol.objective = rep.objective
    else:
        sol.objective = _expectations(log.problem, sol.action, sol.consumption, sol.prob)[0]
    return sol


def _expectations(problem: LotteryProblem, actions, C, probs):
    """Expected payoff, expected pooled values and per-action conditional h."""
    m, ell, n = problem.n_pooled, problem.n_per_action, problem.n_actions
    obj = 0.0
    eg = np.zeros(m)
    hsum = np.zeros((ell, n))
    mass = np.zeros(n)
    for a in np.unique(actions):
        idx = np.flatnonzero(actions == a)
        for s in range(0, len(idx), _CHUNK):
            j = idx[s:s + _CHUNK]
            Cj, pj = C[j], probs[j]
            fj = problem.f(a, Cj).reshape(len(j))
            gj = problem.g(a, Cj).reshape(len(j), m)
            hj = problem.h(a, Cj).reshape(len(j), ell)
            if not (np.all(np.isfinite(fj)) and np.all(np.isfinite(gj)) and np.all(np.isfinite(hj))):
                raise EvaluationError(a, Cj)
            obj += float(pj @ fj)
            eg += pj @ gj
            hsum[:, a] += pj @ hj
            mass[a] += pj.sum()
    cond = np.zeros((ell, n))
    nz = mass > 0
    cond[:, nz] = hsum[:, nz] / mass[nz]
    return obj, eg, cond, mass


def certify_eps(problem: LotteryProblem, lottery: LotterySolution, log: IterateLog | None = None,
                dual_upper_bound: float | None = None, full_history: bool = False
                ) -> EpsOptimalityReport:
    """Expected violations, objective and duality gap bound of a lottery.

    The dual bound is the smallest logged ``V``; pass ``dual_upper_bound``
    directly when no log is at hand (e.g. for a reloaded lottery).
    """
    obj, eg, cond, mass = _expectations(problem, lottery.action, lottery.consumption, lottery.prob)
    if dual_upper_bound is None:
        dual_upper_bound = log.min_dual_value if log is not None else float("nan")
    max_g = float(eg.max()) if eg.size else 0.0
    max_h = float(cond[:, mass > 0].max()) if cond.size and np.any(mass > 0) else 0.0
    gap = float(dual_upper_bound) - obj
    eps = max(max_g, max_h, gap, 0.0)
    bound = None
    if log is not None and problem.n_pooled:
        bound = (log.final.lam - log.initial.lam) / (problem.pooled_scale * log.step_sum)
    return EpsOptimalityReport(max_g_violation=max_g, max_h_violation=max_h,
                               dual_upper_bound=float(dual_upper_bound), objective=obj,
                               duality_gap_bound=gap, certified_eps=eps,
                               expected_pooled=eg, conditional_per_action=cond,
                               analytic_bound=bound, full_history=full_history)


def violation_path(log: IterateLog, every: int = 100):
    """Largest expected pooled violation of the full-history lottery over time.

    Returns
    -------
    ks : ndarray
        Sample iterations ``every, 2*every, ...``.
    viol : ndarray
        ``max_i sum_{k'<=k} mu g_i / sum_{k'<=k} mu`` at each sample, in
        unscaled units.
    """
    problem = log.problem
    m = problem.n_pooled
    N = log.n_iters
    ks = np.arange(every, N + 1, every)
    if m == 0 or len(ks) == 0:
        return ks, np.zeros(len(ks))
    if log.pooled_values is not None:
        G = log.pooled_values / problem.pooled_scale
        cum = np.cumsum(log.step[:, None] * G, axis=0)[ks - 1]
    else:
        cum = np.zeros((len(ks), m))
        run = np.zeros(m)
        si = 0
        for s in range(0, N, _CHUNK):
            e = min(N, s + _CHUNK)
            part = np.zeros((e - s, m))
            for a in np.unique(log.action[s:e]):
                j = np.flatnonzero(log.action[s:e] == a)
                part[j] = problem.g(a, log.consumption[s + j]).reshape(len(j), m)
            cs = run + np.cumsum(log.step[s:e, None] * part, axis=0)
            while si < len(ks) and ks[si] <= e:
                cum[si] = cs[ks[si] - 1 - s]
                si += 1
            run = cs[-1]
    musum = np.cumsum(log.step)[ks - 1]
    return ks, (cum / musum[:, None]).max(axis=1)
