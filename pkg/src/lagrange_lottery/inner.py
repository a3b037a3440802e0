"""Maximizers of the Lagrangian over ``A x C``.

Two strategies are provided. :class:`GridInnerSolver` searches a finite
grid exhaustively. :class:`FocInnerSolver` handles problems whose payoff
and per-action constraints are separable in consumption,

    f(a, c)   = u0(a)    + sum_r u[a, r]    w_r(c_r)
    h_j(a, c) = v0[j, a] + sum_r v[j, a, r] w_r(c_r)
    g_i(a, c) = g0[i, a] + sum_r slope[i, a, r] phi_r(c_r)

with concave increasing ``w_r`` and convex increasing ``phi_r`` (identity
by default). For each action the first-order conditions pin down ``c`` in
closed form when ``phi`` is the identity, and by bisection otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import InnerResult, LotteryProblem, MultiplierState
from .errors import ConfigError, DualUnboundedError

__all__ = [
    "PowerUtility",
    "LogUtility",
    "LinearCost",
    "PowerCost",
    "SeparableSpec",
    "GridInnerSolver",
    "FocInnerSolver",
    "golden_section_max",
    "grid_argmax",
    "foc_argmax",
]

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class PowerUtility:
    """``w(c) = scale * c**alpha`` with ``0 < alpha < 1``."""

    alpha: float = 0.5
    scale: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0) or self.scale <= 0:
            raise ConfigError("power utility needs 0 < alpha < 1 and scale > 0")

    def value(self, c):
        return self.scale * np.power(c, self.alpha)

    def deriv(self, c):
        with np.errstate(divide="ignore"):
            return self.scale * self.alpha * np.power(c, self.alpha - 1.0)

    def deriv_inv(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            return np.power(x / (self.scale * self.alpha), 1.0 / (self.alpha - 1.0))


@dataclass(frozen=True)
class LogUtility:
    """``w(c) = scale * log(c)``; needs a strictly positive lower bound."""

    scale: float = 1.0

    def value(self, c):
        return self.scale * np.log(c)

    def deriv(self, c):
        return self.scale / np.asarray(c, dtype=float)

    def deriv_inv(self, x):
        with np.errstate(divide="ignore"):
            return self.scale / np.asarray(x, dtype=float)


@dataclass(frozen=True)
class LinearCost:
    """``phi(c) = c``."""

    def value(self, c):
        return np.asarray(c, dtype=float)

    def deriv(self, c):
        return np.ones_like(np.asarray(c, dtype=float))


@dataclass(frozen=True)
class PowerCost:
    """``phi(c) = c**power`` with ``power >= 1`` on ``c >= 0``."""

    power: float = 2.0

    def __post_init__(self):
        if self.power < 1.0:
            raise ConfigError("PowerCost needs power >= 1")

    def value(self, c):
        return np.power(c, self.power)

    def deriv(self, c):
        return self.power * np.power(c, self.power - 1.0)


@dataclass(eq=False)
class SeparableSpec:
    """Coefficient tables of a separable problem.

    Parameters
    ----------
    u0 : ndarray, shape (n,)
    u : ndarray, shape (n, d)
    v0 : ndarray, shape (l, n)
    v : ndarray, shape (l, n, d)
    g0 : ndarray, shape (m, n)
    slope : ndarray, shape (m, n, d)
        Nonnegative coefficients of ``phi_r(c_r)`` in ``g_i``.
    w : sequence of utility objects, length d
        Each has ``value``, ``deriv`` and ``deriv_inv``.
    phi : sequence of cost objects, length d, optional
        Identity when omitted, which makes every ``g_i`` affine in ``c``.
    """

    u0: np.ndarray
    u: np.ndarray
    v0: np.ndarray
    v: np.ndarray
    g0: np.ndarray
    slope: np.ndarray
    w: Sequence
    phi: Sequence | None = None
    bisect_tol: float = 1e-10
    bisect_max_iter: int = 200

    def __post_init__(self):
        self.u0 = np.asarray(self.u0, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        n, d = self.u.shape
        self.v0 = np.asarray(self.v0, dtype=float).reshape(-1, n)
        ell = self.v0.shape[0]
        self.v = np.asarray(self.v, dtype=float).reshape(ell, n, d)
        self.g0 = np.asarray(self.g0, dtype=float).reshape(-1, n)
        m = self.g0.shape[0]
        self.slope = np.asarray(self.slope, dtype=float).reshape(m, n, d)
        if self.u0.shape != (n,):
            raise ConfigError("u0 must have shape (n,)")
        if len(self.w) != d:
            raise ConfigError("need one utility per consumption coordinate")
        if np.any(self.slope < 0):
            raise ConfigError("pooled slopes must be nonnegative")
        if self.phi is not None and len(self.phi) != d:
            raise ConfigError("need one cost transform per coordinate")

    @property
    def linear_g(self) -> bool:
        return self.phi is None or all(isinstance(p, LinearCost) for p in self.phi)

    @property
    def shape(self):
        n, d = self.u.shape
        return n, d, self.g0.shape[0], self.v0.shape[0]

    def check_utilities(self, lo, hi, n_samples: int = 64, tol: float = 1e-10):
        """Spot-check monotonicity, concavity and the derivative inverse."""
        for r, w in enumerate(self.w):
            a = max(lo[r], 1e-6)
            b = hi[r] if math.isfinite(hi[r]) else a + 100.0
            c = np.linspace(a, b, n_samples)
            dw = w.deriv(c)
            if not np.all(dw > 0):
                raise ConfigError(f"w_{r} not strictly increasing")
            if not np.all(np.diff(dw) < 0):
                raise ConfigError(f"w_{r} not strictly concave")
            back = w.deriv_inv(dw)
            if not np.allclose(back, c, rtol=tol, atol=tol):
                raise ConfigError(f"deriv_inv of w_{r} does not invert its derivative")

    def check_problem(self, problem: LotteryProblem, n_points: int = 5, seed: int = 0):
        """Compare the tables with the problem callbacks at random points."""
        rng = np.random.default_rng(seed)
        n, d, m, ell = self.shape
        if (n, d, m, ell) != (problem.n_actions, problem.dim, problem.n_pooled,
                              problem.n_per_action):
            raise ConfigError("separable spec does not match problem dimensions")
        hi = np.where(np.isfinite(problem.c_upper), problem.c_upper, problem.c_lower + 10.0)
        for a in rng.choice(n, size=min(n, n_points), replace=False):
            c = problem.c_lower + rng.random(d) * (hi - problem.c_lower)
            f, g, h = self.values(int(a), c)
            ok = (np.isclose(f, problem.f(a, c)) and np.allclose(g, problem.g(a, c))
                  and np.allclose(h, problem.h(a, c)))
            if not ok:
                raise ConfigError(f"separable spec disagrees with callbacks at action {a}")

    def wvals(self, c):
        return np.stack([self.w[r].value(c[..., r]) for r in range(len(self.w))], axis=-1)

    def phivals(self, c):
        if self.phi is None:
            return np.asarray(c, dtype=float)
        return np.stack([self.phi[r].value(c[..., r]) for r in range(len(self.phi))], axis=-1)

    def values(self, a, c):
        wc = self.wvals(np.asarray(c, dtype=float))
        pc = self.phivals(np.asarray(c, dtype=float))
        f = self.u0[a] + self.u[a] @ wc
        g = self.g0[:, a] + self.slope[:, a, :] @ pc
        h = self.v0[:, a] + self.v[:, a, :] @ wc
        return f, g, h

    def coefficients(self, problem: LotteryProblem, mult: MultiplierState):
        """Per-action coefficients of ``w_r`` and ``phi_r`` in the Lagrangian.

        Returns
        -------
        A : ndarray, shape (n, d)
            ``u[a, r] - sum_j gamma~[j, a] v[j, a, r]``.
        B : ndarray, shape (n, d)
            ``sum_i lam~_i slope[i, a, r]``.
        const : ndarray, shape (n,)
            Terms that do not depend on ``c``.
        """
        lt = mult.lam * problem.pooled_scale
        gt = mult.gamma * problem.per_action_scale if self.v.shape[0] else mult.gamma
        A = self.u - np.einsum("ja,jar->ar", gt, self.v)
        B = np.einsum("i,iar->ar", lt, self.slope)
        const = self.u0 - lt @ self.g0 - np.einsum("ja,ja->a", gt, self.v0)
        return A, B, const


def golden_section_max(F, lo, hi, n_iter: int = 40):
    """Vectorized golden-section search for maxima of unimodal functions.

    Parameters
    ----------
    F : callable
        Maps an array of abscissae (one per problem) to values.
    lo, hi : ndarray
        Bracket ends, one per independent problem.
    n_iter : int
        Each iteration shrinks every bracket by the golden ratio.

    Returns
    -------
    x, fx : ndarray
        Midpoint of the final bracket and its value.
    """
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    x1 = hi - _GOLDEN * (hi - lo)
    x2 = lo + _GOLDEN * (hi - lo)
    f1, f2 = F(x1), F(x2)
    for _ in range(n_iter):
        right = f1 < f2
        lo = np.where(right, x1, lo)
        hi = np.where(right, hi, x2)
        keep_x = np.where(right, x2, x1)
        keep_f = np.where(right, f2, f1)
        nx = np.where(right, lo + _GOLDEN * (hi - lo), hi - _GOLDEN * (hi - lo))
        nf = F(nx)
        x1 = np.where(right, keep_x, nx)
        f1 = np.where(right, keep_f, nf)
        x2 = np.where(right, nx, keep_x)
        f2 = np.where(right, nf, keep_f)
    x = 0.5 * (lo + hi)
    return x, F(x)


@dataclass(eq=False)
class GridInnerSolver:
    """Exhaustive maximization over ``A x C_hat``.

    ``C_hat`` is the product of ``counts[r]`` equally spaced points on
    each box coordinate, endpoints included. Evaluation order is
    action-major and then lexicographic in ``c``, so the first maximum
    found is the lowest action index with the lexicographically smallest
    consumption.

    With a :class:`SeparableSpec` the product grid is never materialized:
    each coordinate is maximized on its own axis, which gives the same
    maximizer because the Lagrangian is a sum over coordinates.
    """

    counts: Sequence[int]
    separable: SeparableSpec | None = None
    max_table_entries: int = 50_000_000
    _axes: list = field(default=None, init=False, repr=False)
    _tables: tuple = field(default=None, init=False, repr=False)
    _problem_id: int = field(default=None, init=False, repr=False)

    def axes(self, problem: LotteryProblem):
        counts = list(self.counts)
        if len(counts) == 1 and problem.dim > 1:
            counts = counts * problem.dim
        if len(counts) != problem.dim or min(counts) < 1:
            raise ConfigError("grid counts must be positive, one per coordinate")
        if not np.all(np.isfinite(problem.c_upper)):
            raise ConfigError("grid search needs a bounded consumption box")
        ax = []
        for lo, hi, n in zip(problem.c_lower, problem.c_upper, counts):
            ax.append(np.array([lo]) if n == 1 else np.linspace(lo, hi, n))
        return ax

    @property
    def size(self):
        return int(np.prod(self.counts))

    def grid(self, problem: LotteryProblem) -> np.ndarray:
        """Materialized grid, shape ``(|C_hat|, d)``, lexicographic order."""
        ax = self.axes(problem)
        mesh = np.meshgrid(*ax, indexing="ij")
        return np.stack([m_.reshape(-1) for m_ in mesh], axis=-1)

    def _prepare(self, problem: LotteryProblem):
        if self._problem_id == id(problem):
            return
        self._axes = self.axes(problem)
        if self.separable is not None:
            W = [self.separable.w[r].value(x) for r, x in enumerate(self._axes)]
            P = [x if self.separable.phi is None else self.separable.phi[r].value(x)
                 for r, x in enumerate(self._axes)]
            self._tables = (W, P)
        else:
            n, G = problem.n_actions, int(np.prod([len(x) for x in self._axes]))
            m, ell = problem.n_pooled, problem.n_per_action
            if n * G * (1 + m + ell) > self.max_table_entries:
                raise ConfigError(f"grid tables too large ({n} x {G} x {1 + m + ell})")
            C = self.grid(problem)
            F = np.stack([problem.f(a, C) for a in range(n)])
            Gv = np.stack([problem.g(a, C).reshape(G, m) for a in range(n)]) * problem.pooled_scale
            Hv = np.stack([problem.h(a, C).reshape(G, ell) * problem.per_action_scale[:, a]
                           for a in range(n)])
            if not (np.all(np.isfinite(F)) and np.all(np.isfinite(Gv)) and np.all(np.isfinite(Hv))):
                raise ConfigError("problem callbacks are not finite on the whole grid")
            self._tables = (C, F, Gv, Hv)
        self._problem_id = id(problem)

    def lagrangian_table(self, problem: LotteryProblem, mult: MultiplierState) -> np.ndarray:
        """Lagrangian on ``A x C_hat``, shape ``(n, |C_hat|)`` (non-separable mode)."""
        self._prepare(problem)
        C, F, Gv, Hv = self._tables
        return F - Gv @ mult.lam - np.einsum("agj,ja->ag", Hv, mult.gamma)

    def argmax(self, problem: LotteryProblem, mult: MultiplierState) -> InnerResult:
        self._prepare(problem)
        if self.separable is not None:
            A, B, const = self.separable.coefficients(problem, mult)
            W, P = self._tables
            n, d = A.shape
            idx = np.empty((n, d), dtype=np.int64)
            val = const.copy()
            for r in range(d):
                obj = A[:, r, None] * W[r][None, :] - B[:, r, None] * P[r][None, :]
                i = obj.argmax(axis=1)
                idx[:, r] = i
                val += obj[np.arange(n), i]
            a = int(np.argmax(val))
            c = np.array([self._axes[r][idx[a, r]] for r in range(d)])
            return InnerResult(a, c, float(val[a]))
        L = self.lagrangian_table(problem, mult)
        flat = int(np.argmax(L))
        a, j = divmod(flat, L.shape[1])
        return InnerResult(a, self._tables[0][j].copy(), float(L[a, j]))


@dataclass(eq=False)
class FocInnerSolver:
    """First-order-condition maximizer for separable problems.

    For each action and coordinate the coefficient ``A`` of ``w_r`` and the
    marginal cost ``B`` are formed from the multipliers. If ``A <= 0`` the
    coordinate sits at its lower bound. Otherwise ``c_r`` solves
    ``A w_r'(c) = B phi_r'(c)`` and is clipped into the box. The best
    action is then selected by comparing Lagrangian values.
    """

    spec: SeparableSpec

    def consumption(self, problem: LotteryProblem, mult: MultiplierState):
        """Per-action maximizing consumption, shape (n, d), and coefficients."""
        A, B, const = self.spec.coefficients(problem, mult)
        lo = problem.c_lower[None, :]
        hi = problem.c_upper[None, :]
        pos = A > 0
        if np.any(pos & (B <= 0) & ~np.isfinite(hi)):
            raise DualUnboundedError(
                "positive utility coefficient with no consumption cost and open box")
        if self.spec.linear_g:
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(pos, B / np.where(pos, A, 1.0), 1.0)
                raw = np.empty_like(A)
                for r, w in enumerate(self.spec.w):
                    raw[:, r] = w.deriv_inv(ratio[:, r])
            raw = np.where(pos & (B <= 0), np.inf, raw)
            c = np.where(pos, np.clip(raw, lo, hi), np.broadcast_to(lo, A.shape))
        else:
            c = np.where(pos, self._bisect(A, B, lo, hi), np.broadcast_to(lo, A.shape))
        return c, A, B, const

    def _bisect(self, A, B, lo, hi):
        # residual A w'(c) - B phi'(c) is decreasing in c
        spec = self.spec
        n, d = A.shape
        out = np.empty((n, d))
        for r in range(d):
            w, p = spec.w[r], spec.phi[r]
            a_, b_ = A[:, r], B[:, r]
            left = np.full(n, lo[0, r])
            right = np.full(n, hi[0, r])

            def resid(x):
                with np.errstate(divide="ignore", invalid="ignore"):
                    return a_ * w.deriv(x) - b_ * p.deriv(x)

            r_lo = resid(np.maximum(left, 1e-300))
            r_hi = resid(right)
            x = np.where(r_hi >= 0, right, np.where(r_lo <= 0, left, np.nan))
            todo = np.isnan(x)
            L, R = left.copy(), right.copy()
            for _ in range(spec.bisect_max_iter):
                if not todo.any() or np.max((R - L)[todo]) <= spec.bisect_tol:
                    break
                mid = 0.5 * (L + R)
                s = resid(mid) > 0
                L = np.where(todo & s, mid, L)
                R = np.where(todo & ~s, mid, R)
            x = np.where(todo, 0.5 * (L + R), x)
            out[:, r] = x
        return out

    def argmax(self, problem: LotteryProblem, mult: MultiplierState) -> InnerResult:
        c, A, B, const = self.consumption(problem, mult)
        val = const + np.sum(A * self.spec.wvals(c) - B * self.spec.phivals(c), axis=1)
        a = int(np.argmax(val))
        return InnerResult(a, c[a].copy(), float(val[a]))


def grid_argmax(problem: LotteryProblem, mult: MultiplierState, grid: GridInnerSolver):
    """``(a_index, c, value)`` maximizing the Lagrangian on the grid."""
    return tuple(grid.argmax(problem, mult))


def foc_argmax(problem: LotteryProblem, mult: MultiplierState, spec: SeparableSpec):
    """``(a_index, c, value)`` from the first-order conditions."""
    return tuple(FocInnerSolver(spec).argmax(problem, mult))
