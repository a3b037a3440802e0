"""Utilitarian income taxation with privately known productivity and elasticity.

Type ``h`` has productivity ``w_h``, labor-supply elasticity ``eta_h`` and
utility ``log(c) - psi_h * (y / w_h)**p_h / p_h`` with
``p_h = 1 / eta_h + 1``. The planner chooses a (possibly random)
consumption/output profile for every type, subject to resource balance
and truth-telling. Because the planner's problem has no action choice it
maps to a lottery problem with a single action and all constraints
pooled; the consumption vector is the stacked profile
``(c_1, ..., c_H, y_1, ..., y_H)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq, minimize

from .core import (
    InnerResult,
    IterateLog,
    LotteryProblem,
    LotterySolution,
    MultiplierState,
    StepSchedule,
    cluster_points,
    construct_lottery,
    run_iteration_loop,
)
from .errors import ConfigError, DualUnboundedError, WelfareInfeasibleError
from .inner import golden_section_max

__all__ = [
    "TaxEconomy",
    "judd25",
    "ic_pairs",
    "tax_to_problem",
    "TaxInnerSolver",
    "per_type_argmax",
    "default_tax_schedule",
    "solve_tax",
    "TypeMarginal",
    "type_marginals",
    "first_best",
    "welfare_at_loss",
    "WelfareAccount",
    "welfare_account",
    "solve_deterministic_tax",
]

_CHUNK = 2048


@dataclass(frozen=True, eq=False)
class TaxEconomy:
    """Population of worker types.

    Parameters
    ----------
    w, eta, psi, omega : array_like, shape (H,)
        Productivity, elasticity, disutility weight and population weight.
        ``omega`` defaults to uniform and must sum to one.
    c_bounds : (float, float)
        Consumption box ``[eps, c_max]`` with ``eps > 0``. Should not bind
        at the optimum; tighter boxes shrink the subgradients.
    ell_max : float
        Labor bound; type ``h`` produces at most ``ell_max * w_h``.
    """

    w: np.ndarray
    eta: np.ndarray
    psi: np.ndarray | None = None
    omega: np.ndarray | None = None
    c_bounds: tuple = (0.5, 8.0)
    ell_max: float = 1.2

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.w, dtype=float))
        eta = np.atleast_1d(np.asarray(self.eta, dtype=float))
        H = len(w)
        psi = np.ones(H) if self.psi is None else np.atleast_1d(np.asarray(self.psi, dtype=float))
        om = np.full(H, 1.0 / H) if self.omega is None else np.atleast_1d(
            np.asarray(self.omega, dtype=float))
        if not (eta.shape == psi.shape == om.shape == (H,)) or H == 0:
            raise ConfigError("type parameters must be 1-D arrays of equal length")
        for name, arr in (("w", w), ("eta", eta), ("psi", psi), ("omega", om)):
            if not np.all(arr > 0):
                raise ConfigError(f"{name} must be positive")
        if abs(om.sum() - 1.0) > 1e-12:
            raise ConfigError("omega must sum to one")
        eps, cmax = map(float, self.c_bounds)
        if not (0 < eps < cmax):
            raise ConfigError("need 0 < eps < c_max")
        if not self.ell_max > 0:
            raise ConfigError("ell_max must be positive")
        for k, val in (("w", w), ("eta", eta), ("psi", psi), ("omega", om)):
            object.__setattr__(self, k, val)
        object.__setattr__(self, "c_bounds", (eps, cmax))

    @property
    def H(self) -> int:
        return len(self.w)

    @property
    def p(self) -> np.ndarray:
        return 1.0 / self.eta + 1.0

    @property
    def y_upper(self) -> np.ndarray:
        return self.ell_max * self.w

    def with_(self, **kw) -> "TaxEconomy":
        d = dict(w=self.w, eta=self.eta, psi=self.psi, omega=self.omega,
                 c_bounds=self.c_bounds, ell_max=self.ell_max)
        d.update(kw)
        return TaxEconomy(**d)

    def utility(self, c, y):
        """Own utility of every type, broadcasting over a leading axis."""
        return np.log(c) - self.psi * (np.asarray(y) / self.w) ** self.p / self.p

    def utility_matrix(self, c, y):
        """``U[..., h, k] = u_h(c_k, y_k)`` for profiles of shape ``(..., H)``."""
        c = np.asarray(c, dtype=float)
        y = np.asarray(y, dtype=float)
        ratio = y[..., None, :] / self.w[:, None]
        dis = self.psi[:, None] * ratio ** self.p[:, None] / self.p[:, None]
        return np.log(c)[..., None, :] - dis


def judd25(ell_max: float = 1.2, c_bounds=(0.5, 8.0)) -> TaxEconomy:
    """25 types: ``w`` in 1..5 crossed with ``eta`` in {1, 1/2, 1/3, 1/5, 1/8}.

    Types are ordered productivity-major.
    """
    w = np.repeat(np.arange(1.0, 6.0), 5)
    eta = np.tile([1.0, 1 / 2, 1 / 3, 1 / 5, 1 / 8], 5)
    return TaxEconomy(w=w, eta=eta, c_bounds=c_bounds, ell_max=ell_max)


def ic_pairs(econ: TaxEconomy, ic_mode: str = "full") -> np.ndarray:
    """Ordered ``(h, k)`` pairs: type ``h`` must not prefer type ``k``'s bundle.

    ``partial`` keeps only pairs with ``eta_h >= eta_k``. Rows are in
    row-major order over ``(h, k)``.
    """
    if ic_mode not in ("full", "partial"):
        raise ConfigError("ic_mode must be 'full' or 'partial'")
    H = econ.H
    h, k = np.meshgrid(np.arange(H), np.arange(H), indexing="ij")
    keep = h != k
    if ic_mode == "partial":
        keep &= econ.eta[:, None] >= econ.eta[None, :]
    return np.stack([h[keep], k[keep]], axis=1)


def tax_to_problem(econ: TaxEconomy, ic_mode: str = "full",
                   resource_scaler: float = 1.0) -> LotteryProblem:
    """Single-action lottery problem for the economy.

    Pooled constraint 0 is resource balance ``sum omega (c - y) <= 0``;
    the remaining rows are ``u_h(c_k, y_k) - u_h(c_h, y_h) <= 0`` for the
    pairs of :func:`ic_pairs`. ``resource_scaler`` weights row 0.
    """
    H = econ.H
    pairs = ic_pairs(econ, ic_mode)
    rows, cols = pairs[:, 0], pairs[:, 1]
    om = econ.omega

    def split(X):
        X = np.asarray(X, dtype=float)
        return X[..., :H], X[..., H:]

    def payoff(a, X):
        c, y = split(X)
        return econ.utility(c, y) @ om

    def pooled(a, X):
        c, y = split(X)
        lead = c.shape[:-1]
        out = np.empty(lead + (1 + len(pairs),))
        out[..., 0] = (c - y) @ om
        cf = c.reshape(-1, H)
        yf = y.reshape(-1, H)
        of = out.reshape(-1, 1 + len(pairs))
        for s in range(0, len(cf), _CHUNK):
            U = econ.utility_matrix(cf[s:s + _CHUNK], yf[s:s + _CHUNK])
            own = U[:, np.arange(H), np.arange(H)]
            of[s:s + _CHUNK, 1:] = U[:, rows, cols] - own[:, rows]
        return out

    eps, cmax = econ.c_bounds
    scal = np.ones(1 + len(pairs))
    scal[0] = resource_scaler
    return LotteryProblem(
        actions=[[0.0]],
        c_lower=np.concatenate([np.full(H, eps), np.zeros(H)]),
        c_upper=np.concatenate([np.full(H, cmax), econ.y_upper]),
        payoff=payoff, pooled=pooled, n_pooled=1 + len(pairs),
        pooled_scalers=scal, name=f"taxation-{ic_mode}")


@dataclass(eq=False)
class TaxInnerSolver:
    """Per-type decomposition of the taxation Lagrangian.

    With pooled multipliers ``gamma`` (resource) and ``lam[h, k]`` (IC),
    the Lagrangian splits into one problem per type in ``(c_h, y_h)``.
    Consumption enters as ``A_h log c - gamma omega_h c`` and has a closed
    form maximizer. Output enters as a sum of powers of ``y`` plus
    ``gamma omega_h y`` and is maximized by a grid scan followed by
    golden-section refinement around the best scan point.
    """

    econ: TaxEconomy
    ic_mode: str = "full"
    n_scan: int = 512
    n_golden: int = 25
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        econ = self.econ
        H = econ.H
        self.pairs = ic_pairs(econ, self.ic_mode)
        self.exps, kidx = np.unique(econ.p, return_inverse=True)
        self.onehot = np.zeros((H, len(self.exps)))
        self.onehot[np.arange(H), kidx] = 1.0
        self.kappa = econ.psi * econ.w ** (-econ.p) / econ.p
        self.ygrid = np.linspace(0.0, 1.0, self.n_scan)[None, :] * econ.y_upper[:, None]
        self.ypow = self.ygrid[:, None, :] ** self.exps[None, :, None]

    def multipliers(self, problem: LotteryProblem, mult: MultiplierState):
        """Resource multiplier and the ``(H, H)`` IC multiplier matrix (scaled)."""
        lt = mult.lam * problem.pooled_scale
        L = np.zeros((self.econ.H, self.econ.H))
        L[self.pairs[:, 0], self.pairs[:, 1]] = lt[1:]
        return float(lt[0]), L

    def solve_types(self, gamma: float, L: np.ndarray):
        """Per-type maximizers ``c, y`` and the Lagrangian value."""
        econ = self.econ
        H = econ.H
        om = econ.omega
        eps, cmax = econ.c_bounds
        alpha = om + L.sum(axis=1)
        A = alpha - L.sum(axis=0)
        pos = A > 0
        if gamma > 0:
            c = np.where(pos, np.clip(np.where(pos, A, 1.0) / (gamma * om), eps, cmax), eps)
        else:
            if np.any(pos) and not np.isfinite(cmax):
                raise DualUnboundedError("zero resource multiplier with unbounded consumption")
            c = np.where(pos, cmax, eps)
        coef = L.copy()
        coef[np.arange(H), np.arange(H)] = -alpha
        B = (coef * self.kappa[:, None]).T @ self.onehot
        lin = gamma * om
        phi = np.einsum("hk,hkn->hn", B, self.ypow) + lin[:, None] * self.ygrid
        i = phi.argmax(axis=1)
        rows = np.arange(H)
        y = self.ygrid[rows, i]
        fy = phi[rows, i]
        lo = self.ygrid[rows, np.maximum(i - 1, 0)]
        hi = self.ygrid[rows, np.minimum(i + 1, self.n_scan - 1)]

        def F(v):
            return (B * v[:, None] ** self.exps).sum(axis=1) + lin * v

        yr, fr = golden_section_max(F, lo, hi, self.n_golden)
        better = fr > fy
        y = np.where(better, yr, y)
        fy = np.where(better, fr, fy)
        value = float(np.sum(A * np.log(c) - gamma * om * c + fy))
        return c, y, value

    def argmax(self, problem: LotteryProblem, mult: MultiplierState) -> InnerResult:
        gamma, L = self.multipliers(problem, mult)
        c, y, value = self.solve_types(gamma, L)
        return InnerResult(0, np.concatenate([c, y]), value)


def per_type_argmax(econ: TaxEconomy, mult: MultiplierState, ic_mode: str = "full",
                    resource_scaler: float = 1.0):
    """Per-type maximizers and total Lagrangian value.

    Returns
    -------
    c, y : ndarray, shape (H,)
    value : float
    """
    solver = TaxInnerSolver(econ, ic_mode)
    problem = tax_to_problem(econ, ic_mode, resource_scaler)
    gamma, L = solver.multipliers(problem, mult)
    return solver.solve_types(gamma, L)


def default_tax_schedule() -> StepSchedule:
    """Step schedule tuned for the 25-type economy with resource weight 5."""
    return StepSchedule(scale=0.1, offset=1000.0, exponent=0.6)


def solve_tax(econ: TaxEconomy, schedule: StepSchedule | None = None, n_iters: int = 100_000,
              window=None, *, ic_mode: str = "full", resource_scaler: float = 5.0,
              resource_lam0: float = 0.5, cluster_tol: float = 1e-2, **loop_kw):
    """Run the iteration with the per-type inner solver.

    IC multipliers start at zero and the resource multiplier at
    ``resource_lam0`` (in unscaled units).

    Returns
    -------
    solution : LotterySolution
        Atoms carry full ``(c, y)`` profiles.
    log : IterateLog
    """
    schedule = schedule or default_tax_schedule()
    problem = tax_to_problem(econ, ic_mode, resource_scaler)
    lam = np.zeros(problem.n_pooled)
    lam[0] = resource_lam0 / resource_scaler
    init = MultiplierState(lam, np.zeros((0, 1)))
    log = run_iteration_loop(problem, init, schedule, n_iters, TaxInnerSolver(econ, ic_mode),
                             **loop_kw)
    return construct_lottery(log, window, cluster_tol), log


@dataclass
class TypeMarginal:
    """Distribution of one type's bundle under a lottery.

    ``clusters`` holds ``(y, c, probability)`` triples with mass-weighted
    mean ``y`` and ``c``, largest mass first.
    """

    index: int
    w: float
    eta: float
    mean_c: float
    clusters: list

    @property
    def top_mass(self) -> float:
        return self.clusters[0][2]

    def to_dict(self) -> dict:
        return {"type": self.index, "w": self.w, "eta": self.eta, "mean_c": self.mean_c,
                "y_lottery": [{"y": y, "c": c, "probability": p} for y, c, p in self.clusters]}


def type_marginals(solution: LotterySolution, econ: TaxEconomy, tol: float = 0.05,
                   on: str = "y") -> list:
    """Cluster each type's marginal under ``solution``.

    Parameters
    ----------
    tol : float
        Single-linkage distance (max-norm) below which bundles join.
    on : {"y", "cy"}
        Cluster on output alone or on the ``(c, y)`` pair.
    """
    H = econ.H
    P = solution.prob
    out = []
    for h in range(H):
        c = solution.consumption[:, h]
        y = solution.consumption[:, H + h]
        X = y if on == "y" else np.stack([c, y], axis=1)
        lab = cluster_points(X, tol)
        nl = lab.max() + 1
        mass = np.bincount(lab, weights=P, minlength=nl)
        ym = np.bincount(lab, weights=P * y, minlength=nl) / mass
        cm = np.bincount(lab, weights=P * c, minlength=nl) / mass
        order = np.argsort(-mass, kind="stable")
        cl = [(float(ym[i]), float(cm[i]), float(mass[i])) for i in order]
        out.append(TypeMarginal(h, float(econ.w[h]), float(econ.eta[h]), float(P @ c), cl))
    return out


def first_best(econ: TaxEconomy, m: float = 0.0):
    """Full-information optimum with ``m`` units of resources removed.

    Log utility equalizes consumption at ``1 / gamma``; output is
    ``w (gamma w / psi)**eta``. Output is not capped by ``ell_max``.

    Returns
    -------
    welfare : float
    c : float
    y : ndarray
    gamma : float
    """
    w, eta, psi, om = econ.w, econ.eta, econ.psi, econ.omega

    def excess(g):
        return om @ (w * (g * w / psi) ** eta) - 1.0 / g - m

    lo, hi = 1e-3, 1.0
    while excess(lo) > 0:
        lo /= 10.0
    while excess(hi) < 0:
        hi *= 10.0
    g = brentq(excess, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    c = 1.0 / g
    y = w * (g * w / psi) ** eta
    return float(om @ econ.utility(np.full(econ.H, c), y)), c, y, g


def welfare_at_loss(econ: TaxEconomy, m: float) -> float:
    """Full-information welfare when total resources fall by ``m``."""
    return first_best(econ, m)[0]


@dataclass
class WelfareAccount:
    """Welfare levels and their compensating resource losses.

    ``m_*`` is the resource reduction that brings full-information welfare
    down to the mechanism's welfare; ``wl_*`` divides it by total
    first-best output.
    """

    u_first_best: float
    u_deterministic: float
    u_lottery: float
    m_deterministic: float
    m_lottery: float
    wl_deterministic: float
    wl_lottery: float
    resources: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _compensating_loss(econ: TaxEconomy, u: float, u_fb: float, tol: float) -> float:
    if not np.isfinite(u):
        raise ConfigError("welfare value must be finite")
    if u > u_fb + 1e-12:
        raise WelfareInfeasibleError(f"welfare {u} exceeds the first-best value {u_fb}")
    if u >= u_fb:
        return 0.0
    hi = 1.0
    while welfare_at_loss(econ, hi) > u:
        hi *= 2.0
    return brentq(lambda m: welfare_at_loss(econ, m) - u, 0.0, hi, xtol=tol)


def welfare_account(econ: TaxEconomy, u_lottery: float, u_deterministic: float,
                    tol: float = 1e-10) -> WelfareAccount:
    """Compensating-variation accounting for two welfare levels."""
    u_fb, _, y_fb, _ = first_best(econ, 0.0)
    R = float(econ.omega @ y_fb)
    mD = _compensating_loss(econ, u_deterministic, u_fb, tol)
    mL = _compensating_loss(econ, u_lottery, u_fb, tol)
    return WelfareAccount(u_fb, float(u_deterministic), float(u_lottery), mD, mL,
                          mD / R, mL / R, R)


def solve_deterministic_tax(econ: TaxEconomy, ic_mode: str = "full", start=None):
    """Best deterministic allocation by local nonlinear programming.

    Started from the first-best allocation clipped to the box. The
    problem is non-convex, so this is a local optimum; it serves as the
    deterministic benchmark.

    Returns
    -------
    welfare : float
    c, y : ndarray
    max_violation : float
        Largest constraint violation at the returned point.
    """
    H = econ.H
    pairs = ic_pairs(econ, ic_mode)
    rows, cols = pairs[:, 0], pairs[:, 1]
    om = econ.omega
    eps, cmax = econ.c_bounds

    def obj(x):
        return -float(econ.utility(x[:H], x[H:]) @ om)

    def cons(x):
        U = econ.utility_matrix(x[:H], x[H:])
        own = np.diag(U)
        return np.concatenate([[om @ (x[H:] - x[:H])], own[rows] - U[rows, cols]])

    if start is None:
        _, c0, y0, _ = first_best(econ)
        start = np.concatenate([np.full(H, np.clip(c0, eps, cmax)), np.minimum(y0, econ.y_upper)])
    bounds = [(eps, cmax)] * H + [(0.0, float(u)) for u in econ.y_upper]
    res = minimize(obj, np.asarray(start, dtype=float), method="SLSQP", bounds=bounds,
                   constraints=[{"type": "ineq", "fun": cons}],
                   options={"maxiter": 1000, "ftol": 1e-12})
    x = np.clip(res.x, [b[0] for b in bounds], [b[1] for b in bounds])
    return -obj(x), x[:H], x[H:], float(max(0.0, -cons(x).min()))
