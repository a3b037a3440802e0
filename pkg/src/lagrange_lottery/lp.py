"""Discretized lottery linear programs and a dense simplex solver.

For the moral-hazard model the lottery is a mass function
``pi(c, q, a)`` over consumption grid points, outputs and actions. The LP
maximizes expected utility subject to resource balance, incentive
compatibility of each recommended action, consistency of output
frequencies with the technology and total mass one.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import ConfigError, SizeCapExceeded
from .moral_hazard import MoralHazardModel, build_prob_table

__all__ = [
    "LpInstance",
    "LpResult",
    "GapReport",
    "mh_lp_size",
    "build_mh_lp",
    "build_tax_lp",
    "simplex_solve",
    "solve_lp",
    "compare_oracle",
    "write_mps",
]

DEFAULT_SIZE_CAP = 2_000_000


@dataclass(eq=False)
class LpInstance:
    """``max c.x`` s.t. ``A_eq x = b_eq``, ``A_ub x <= b_ub``, ``x >= 0``.

    ``labels`` maps names to per-column arrays (e.g. ``action``,
    ``output``, ``c``) describing what each variable is the mass of.
    """

    c: np.ndarray
    A_eq: sparse.csr_matrix
    b_eq: np.ndarray
    A_ub: sparse.csr_matrix
    b_ub: np.ndarray
    labels: dict = field(default_factory=dict)
    name: str = "lp"

    def __post_init__(self):
        n = len(self.c)
        self.A_eq = sparse.csr_matrix(self.A_eq, shape=(len(self.b_eq), n))
        self.A_ub = sparse.csr_matrix(self.A_ub, shape=(len(self.b_ub), n))

    @property
    def n_vars(self) -> int:
        return len(self.c)

    @property
    def n_eq(self) -> int:
        return self.A_eq.shape[0]

    @property
    def n_ineq(self) -> int:
        return self.A_ub.shape[0]

    @property
    def nnz(self) -> int:
        return int(self.A_eq.nnz + self.A_ub.nnz)

    def size_report(self) -> dict:
        return {"vars": self.n_vars, "eq": self.n_eq, "ineq": self.n_ineq, "nnz": self.nnz}

    def residuals(self, x) -> float:
        """Largest equality or inequality violation at ``x``."""
        r = [0.0, float(max(0.0, -np.min(x))) if len(x) else 0.0]
        if self.n_eq:
            r.append(float(np.max(np.abs(self.A_eq @ x - self.b_eq))))
        if self.n_ineq:
            r.append(float(max(0.0, np.max(self.A_ub @ x - self.b_ub))))
        return max(r)


@dataclass
class LpResult:
    status: str
    value: float
    x: np.ndarray | None
    pivots: int = 0
    seconds: float = 0.0
    backend: str = "simplex"


def _c_grid(model: MoralHazardModel, step: float) -> np.ndarray:
    span = model.c_max - model.c_min
    k = span / step
    if step <= 0 or abs(k - round(k)) > 1e-9 * max(1.0, k):
        raise ConfigError(f"grid step {step} does not divide the consumption range")
    return np.linspace(model.c_min, model.c_max, int(round(k)) + 1)


def mh_lp_size(model: MoralHazardModel, c_grid_step: float = 0.01) -> dict:
    """Counts of variables, rows and nonzeros without building the LP."""
    nc = len(_c_grid(model, c_grid_step))
    nq = len(model.outputs)
    na = model.n_actions
    nv = nc * nq * na
    per_action = nc * nq
    nnz = (nv                                # resource
           + na * (na - 1) * per_action      # incentive rows
           + nq * na * per_action            # output frequency rows
           + nv)                             # normalization
    return {"vars": nv, "eq": nq * na + 1, "ineq": 1 + na * (na - 1), "nnz": nnz}


def build_mh_lp(model: MoralHazardModel, c_grid_step: float = 0.01, *,
                scaled: bool = False, size_cap: float = DEFAULT_SIZE_CAP) -> LpInstance:
    """Moral-hazard lottery LP on a consumption grid.

    Columns are ordered action-major, then output, then consumption.
    With ``scaled=True`` incentive rows carry the model's constraint
    weights; the feasible set is unchanged.

    Raises
    ------
    SizeCapExceeded
        If the nonzero count exceeds ``size_cap``.
    """
    size = mh_lp_size(model, c_grid_step)
    if size["nnz"] > size_cap:
        raise SizeCapExceeded(size)
    cg = _c_grid(model, c_grid_step)
    P = build_prob_table(model)
    q = np.asarray(model.outputs, dtype=float)
    acts = model.actions
    na, nq, nc = len(acts), len(q), len(cg)
    ea = model.effort_utility(acts)
    vc = model.v(cg)
    per = nq * nc
    col_a = np.repeat(np.arange(na), per)
    col_q = np.tile(np.repeat(np.arange(nq), nc), na)
    col_c = np.tile(cg, na * nq)

    obj = vc[np.tile(np.arange(nc), na * nq)] + ea[col_a]

    # inequality rows: resource, then (a, a_hat) for a_hat != a in row-major order
    ub_rows = [np.zeros(len(obj), dtype=np.int64)]
    ub_cols = [np.arange(len(obj))]
    ub_vals = [col_c - q[col_q]]
    row = 1
    vq = np.tile(vc, nq)
    qq = np.repeat(np.arange(nq), nc)
    for a in range(na):
        cols = a * per + np.arange(per)
        for ah in range(na):
            if ah == a:
                continue
            ratio = P[ah, qq] / P[a, qq]
            vals = ratio * (vq + ea[ah]) - (vq + ea[a])
            if scaled and model.ic_scaling != "none":
                dist = abs(acts[a] - acts[ah])
                vals = vals / (dist if model.ic_scaling == "inverse" else dist ** 2)
            ub_rows.append(np.full(per, row))
            ub_cols.append(cols)
            ub_vals.append(vals)
            row += 1
    A_ub = sparse.csr_matrix((np.concatenate(ub_vals),
                              (np.concatenate(ub_rows), np.concatenate(ub_cols))),
                             shape=(row, len(obj)))

    # equality rows: output frequencies per (a, q), then normalization
    eq_rows, eq_cols, eq_vals = [], [], []
    r = 0
    for a in range(na):
        cols = a * per + np.arange(per)
        for k in range(nq):
            vals = -P[a, k] * np.ones(per)
            vals[qq == k] += 1.0
            eq_rows.append(np.full(per, r))
            eq_cols.append(cols)
            eq_vals.append(vals)
            r += 1
    eq_rows.append(np.full(len(obj), r))
    eq_cols.append(np.arange(len(obj)))
    eq_vals.append(np.ones(len(obj)))
    A_eq = sparse.csr_matrix((np.concatenate(eq_vals),
                              (np.concatenate(eq_rows), np.concatenate(eq_cols))),
                             shape=(r + 1, len(obj)))
    b_eq = np.zeros(r + 1)
    b_eq[-1] = 1.0
    lp = LpInstance(obj, A_eq, b_eq, A_ub, np.zeros(row),
                    labels={"action": col_a, "output": col_q, "c": col_c},
                    name="moral-hazard")
    if (lp.n_vars, lp.n_eq, lp.n_ineq) != (size["vars"], size["eq"], size["ineq"]):
        raise AssertionError("LP size does not match the size formulas")
    return lp


def build_tax_lp(econ, c_grid, y_grid, ic_mode: str = "full", *,
                 size_cap: float = DEFAULT_SIZE_CAP) -> LpInstance:
    """Taxation lottery LP over per-type marginals on a ``(c, y)`` grid.

    Expected utility, resource use and every incentive constraint depend
    on the lottery only through each type's marginal, so the LP has one
    mass function per type with its own normalization row. Output grid
    points above a type's bound are dropped.
    """
    from .taxation import ic_pairs

    c_grid = np.asarray(c_grid, dtype=float)
    y_grid = np.asarray(y_grid, dtype=float)
    H = econ.H
    cols_h, cols_c, cols_y = [], [], []
    for h in range(H):
        ys = y_grid[y_grid <= econ.y_upper[h] + 1e-12]
        cc, yy = np.meshgrid(c_grid, ys, indexing="ij")
        cols_h.append(np.full(cc.size, h))
        cols_c.append(cc.reshape(-1))
        cols_y.append(yy.reshape(-1))
    col_h = np.concatenate(cols_h)
    col_c = np.concatenate(cols_c)
    col_y = np.concatenate(cols_y)
    nv = len(col_h)
    pairs = ic_pairs(econ, ic_mode)
    nnz = nv + 2 * len(pairs) * (nv // max(H, 1) + 1) + nv
    if nnz > size_cap:
        raise SizeCapExceeded({"vars": nv, "eq": H, "ineq": 1 + len(pairs), "nnz": nnz})

    def u(h, c, y):
        p = econ.p[h]
        return np.log(c) - econ.psi[h] * (y / econ.w[h]) ** p / p

    om = econ.omega
    obj = om[col_h] * u(col_h, col_c, col_y)
    rows, cols, vals = [np.zeros(nv, dtype=np.int64)], [np.arange(nv)], [om[col_h] * (col_c - col_y)]
    for r, (h, k) in enumerate(pairs, start=1):
        mk = np.flatnonzero(col_h == k)
        mh = np.flatnonzero(col_h == h)
        rows += [np.full(len(mk), r), np.full(len(mh), r)]
        cols += [mk, mh]
        vals += [u(h, col_c[mk], col_y[mk]), -u(h, col_c[mh], col_y[mh])]
    A_ub = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(1 + len(pairs), nv))
    A_eq = sparse.csr_matrix((np.ones(nv), (col_h, np.arange(nv))), shape=(H, nv))
    return LpInstance(obj, A_eq, np.ones(H), A_ub, np.zeros(1 + len(pairs)),
                      labels={"type": col_h, "c": col_c, "y": col_y}, name="taxation")


def _pivot(T, r, j):
    T[r] /= T[r, j]
    col = T[:, j].copy()
    col[r] = 0.0
    T -= np.outer(col, T[r])


def _bland(T, basis, ncols, tol, max_pivots, pivots):
    """Run Bland's rule on tableau ``T`` (last row = reduced costs | -z)."""
    m = T.shape[0] - 1
    while True:
        d = T[-1, :ncols]
        cand = np.flatnonzero(d > tol)
        if len(cand) == 0:
            return "optimal", pivots
        if pivots >= max_pivots:
            return "stalled", pivots
        j = int(cand[0])
        colj = T[:m, j]
        pos = np.flatnonzero(colj > tol)
        if len(pos) == 0:
            return "unbounded", pivots
        ratios = T[pos, -1] / colj[pos]
        best = ratios.min()
        ties = pos[ratios <= best + tol * max(1.0, abs(best))]
        r = int(ties[np.argmin(np.asarray(basis)[ties])])
        _pivot(T, r, j)
        basis[r] = j
        pivots += 1


def simplex_solve(lp: LpInstance, *, max_pivots: int = 1_000_000, tol: float = 1e-9) -> LpResult:
    """Two-phase dense tableau simplex with Bland's anti-cycling rule.

    Returns
    -------
    LpResult
        ``status`` is one of ``optimal``, ``infeasible``, ``unbounded`` or
        ``stalled``.
    """
    t0 = time.perf_counter()
    n = lp.n_vars
    Aub = lp.A_ub.toarray()
    Aeq = lp.A_eq.toarray()
    mu, me = Aub.shape[0], Aeq.shape[0]
    R = mu + me
    # columns: x (n), slacks (mu), artificials (R)
    A = np.zeros((R, n + mu))
    A[:mu, :n] = Aub
    A[:mu, n:] = np.eye(mu)
    A[mu:, :n] = Aeq
    b = np.concatenate([lp.b_ub, lp.b_eq]).astype(float)
    neg = b < 0
    A[neg] *= -1.0
    b[neg] *= -1.0
    nx = n + mu
    T = np.zeros((R + 1, nx + R + 1))
    T[:R, :nx] = A
    T[:R, nx:nx + R] = np.eye(R)
    T[:R, -1] = b
    # phase 1: maximize -sum(artificials); reduced costs c_j - c_B B^-1 A_j
    T[-1, :nx] = A.sum(axis=0)
    T[-1, -1] = b.sum()
    basis = list(range(nx, nx + R))
    status, piv = _bland(T, basis, nx + R, tol, max_pivots, 0)
    if status == "stalled":
        return LpResult("stalled", float("nan"), None, piv, time.perf_counter() - t0)
    if T[-1, -1] > 1e-7 * max(1.0, b.sum()):
        return LpResult("infeasible", float("nan"), None, piv, time.perf_counter() - t0)
    # drive zero-level artificials out of the basis; drop redundant rows
    keep = []
    for r in range(R):
        if basis[r] >= nx:
            nzc = np.flatnonzero(np.abs(T[r, :nx]) > tol)
            if len(nzc):
                _pivot(T, r, int(nzc[0]))
                basis[r] = int(nzc[0])
                keep.append(r)
        else:
            keep.append(r)
    T = np.vstack([T[keep][:, list(range(nx)) + [-1]], np.zeros(nx + 1)])
    basis = [basis[r] for r in keep]
    cost = np.concatenate([lp.c, np.zeros(mu)])
    cb = cost[basis]
    T[-1, :nx] = cost - cb @ T[:-1, :nx]
    T[-1, -1] = -cb @ T[:-1, -1]
    status, piv = _bland(T, basis, nx, tol, max_pivots, piv)
    if status != "optimal":
        return LpResult(status, float("nan"), None, piv, time.perf_counter() - t0)
    x = np.zeros(nx)
    x[basis] = T[:-1, -1]
    x = np.maximum(x[:n], 0.0)
    return LpResult("optimal", float(lp.c @ x), x, piv, time.perf_counter() - t0)


def solve_lp(lp: LpInstance, backend: str = "simplex", **kw) -> LpResult:
    """Solve with the in-repo simplex or with HiGHS for large instances."""
    if backend == "simplex":
        return simplex_solve(lp, **kw)
    if backend == "highs":
        from scipy.optimize import linprog

        t0 = time.perf_counter()
        res = linprog(-lp.c, A_ub=lp.A_ub if lp.n_ineq else None, b_ub=lp.b_ub if lp.n_ineq else None,
                      A_eq=lp.A_eq if lp.n_eq else None, b_eq=lp.b_eq if lp.n_eq else None,
                      bounds=(0, None), method="highs")
        status = {0: "optimal", 1: "stalled", 2: "infeasible", 3: "unbounded"}.get(res.status, "stalled")
        x = res.x if status == "optimal" else None
        val = float(lp.c @ x) if x is not None else float("nan")
        return LpResult(status, val, x, int(getattr(res, "nit", 0)), time.perf_counter() - t0,
                        backend="highs")
    raise ConfigError(f"unknown LP backend {backend!r}")


@dataclass
class GapReport:
    """Agreement between the Lagrangian run and the LP optimum."""

    lp_optimum: float
    dual_bound: float
    lottery_objective: float
    dual_gap: float
    primal_gap: float
    action_distance: float | None
    weak_duality_holds: bool
    lp_action_marginal: list | None = None
    lottery_action_marginal: list | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def compare_oracle(lp: LpInstance, lp_result: LpResult, dual_bound: float,
                   lottery=None, lottery_objective: float | None = None,
                   n_actions: int | None = None, tol: float = 1e-6) -> GapReport:
    """Gap report between an LP optimum and a Lagrangian run.

    ``action_distance`` is the total-variation distance between the two
    action marginals when the LP columns carry action labels.
    """
    if lp_result.status != "optimal":
        raise ConfigError(f"LP not solved to optimality: {lp_result.status}")
    obj = lottery.objective if lottery is not None else lottery_objective
    obj = float("nan") if obj is None else float(obj)
    dist = lpm = lom = None
    if lottery is not None and "action" in lp.labels:
        n = n_actions or int(lp.labels["action"].max()) + 1
        lpm = np.bincount(lp.labels["action"], weights=lp_result.x, minlength=n)
        lom = lottery.action_marginal(n)
        dist = 0.5 * float(np.abs(lpm - lom).sum())
        lpm, lom = lpm.tolist(), lom.tolist()
    return GapReport(lp_result.value, float(dual_bound), obj,
                     abs(lp_result.value - dual_bound), abs(lp_result.value - obj), dist,
                     bool(dual_bound >= lp_result.value - tol), lpm, lom)


def _fmt12(v: float) -> str:
    s = repr(float(v))
    if len(s) <= 12:
        return s
    for prec in range(11, 0, -1):
        s = f"{v:.{prec}g}"
        if len(s) <= 12:
            return s
    raise ValueError(f"cannot format {v} in 12 characters")


def write_mps(lp: LpInstance, path) -> None:
    """Write the instance in fixed-format MPS.

    MPS minimizes, so the objective row holds ``-c``. Row names are
    ``R`` plus seven digits and column names ``X`` plus seven digits.
    """
    if lp.n_vars > 9_999_999 or lp.n_eq + lp.n_ineq > 9_999_999:
        raise ConfigError("instance too large for 8-character MPS names")
    lines = [f"NAME          {lp.name[:8].upper()}", "ROWS", " N  OBJ"]
    names_ub = [f"R{i:07d}" for i in range(lp.n_ineq)]
    names_eq = [f"R{lp.n_ineq + i:07d}" for i in range(lp.n_eq)]
    lines += [f" L  {nm}" for nm in names_ub]
    lines += [f" E  {nm}" for nm in names_eq]
    lines.append("COLUMNS")
    Aub = lp.A_ub.tocsc()
    Aeq = lp.A_eq.tocsc()

    def entry(col, row, val):
        return f"    {col:<8}  {row:<8}  {_fmt12(val):>12}"

    for j in range(lp.n_vars):
        cn = f"X{j:07d}"
        if lp.c[j] != 0:
            lines.append(entry(cn, "OBJ", -lp.c[j]))
        for M, names in ((Aub, names_ub), (Aeq, names_eq)):
            s, e = M.indptr[j], M.indptr[j + 1]
            for i, v in zip(M.indices[s:e], M.data[s:e]):
                if v != 0:
                    lines.append(entry(cn, names[i], v))
    lines.append("RHS")
    for names, b in ((names_ub, lp.b_ub), (names_eq, lp.b_eq)):
        for nm, v in zip(names, b):
            if v != 0:
                lines.append(entry("RHS", nm, v))
    lines.append("ENDATA")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
