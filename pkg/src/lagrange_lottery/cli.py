"""Command line front end: ``solve``, ``benchmark``, ``compare`` and ``lp``.

Runs are described by a JSON document (see the shipped presets). Every
output file carries the SHA-256 hash of the resolved configuration.

Exit codes: 0 success, 2 configuration error, 3 solver failure,
4 LP size-cap refusal.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import importlib
import importlib.util
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .core import (
    LotterySolution,
    MultiplierState,
    StepSchedule,
    certify_eps,
    construct_lottery,
    run_iteration_loop,
    LotteryProblem,
)
from .errors import ConfigError, LotteryError, SizeCapExceeded
from .inner import FocInnerSolver, GridInnerSolver, SeparableSpec
from .lp import DEFAULT_SIZE_CAP, build_mh_lp, compare_oracle, mh_lp_size, solve_lp, write_mps
from .moral_hazard import MoralHazardModel, action_summary, to_problem
from .taxation import (
    TaxEconomy,
    TaxInnerSolver,
    judd25,
    solve_deterministic_tax,
    tax_to_problem,
    type_marginals,
    welfare_account,
)

log = logging.getLogger("lagrange_lottery")

MODELS = ("moral-hazard", "taxation", "custom")
_TOP_KEYS = {"model", "params", "schedule", "n_iters", "window", "cluster_tol", "inner",
             "grid_points", "init", "oracle", "output", "marginal_tol", "record_every"}
_LAMBDA_COLUMNS_MAX = 16


# ---------------------------------------------------------------- config

@dataclass
class RunConfig:
    """Validated run description."""

    model: str
    params: dict = field(default_factory=dict)
    schedule: dict | None = None
    n_iters: int | None = None
    window: tuple | None = None
    cluster_tol: float = 1e-2
    inner: str = "foc"
    grid_points: int = 201
    init: dict = field(default_factory=dict)
    oracle: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)
    marginal_tol: float = 0.05

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config: top level must be a JSON object")
        unknown = set(d) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"config: unknown field(s) {sorted(unknown)}")
        if d.get("model") not in MODELS:
            raise ConfigError(f"model: must be one of {list(MODELS)}, got {d.get('model')!r}")
        cfg = cls(model=d["model"], params=dict(d.get("params") or {}),
                  schedule=d.get("schedule"), n_iters=d.get("n_iters"),
                  window=tuple(d["window"]) if d.get("window") is not None else None,
                  cluster_tol=d.get("cluster_tol", 1e-2), inner=d.get("inner", "foc"),
                  grid_points=d.get("grid_points", 201), init=dict(d.get("init") or {}),
                  oracle=dict(d.get("oracle") or {}), output=dict(d.get("output") or {}),
                  marginal_tol=d.get("marginal_tol", 0.05))
        cfg.validate()
        return cfg

    def validate(self):
        if self.schedule is not None:
            if not isinstance(self.schedule, dict) or set(self.schedule) - {"scale", "offset", "exponent"}:
                raise ConfigError("schedule: expected an object with scale, offset, exponent")
            try:
                StepSchedule(**self.schedule)
            except (ConfigError, TypeError) as exc:
                raise ConfigError(f"schedule: {exc}") from None
        if self.n_iters is not None:
            if not isinstance(self.n_iters, int) or isinstance(self.n_iters, bool) or self.n_iters < 1:
                raise ConfigError(f"n_iters: must be a positive integer, got {self.n_iters!r}")
        if self.window is not None:
            if len(self.window) != 2 or not all(isinstance(v, int) for v in self.window):
                raise ConfigError("window: expected two integers [k_start, k_end]")
            ks, ke = self.window
            n = self.n_iters
            if ks < 1 or ke < ks or (n is not None and ke > n):
                raise ConfigError(f"window: {list(self.window)} not within [1, n_iters]")
        if not (isinstance(self.cluster_tol, (int, float)) and self.cluster_tol >= 0):
            raise ConfigError("cluster_tol: must be a nonnegative number")
        if self.inner not in ("foc", "grid"):
            raise ConfigError("inner: must be 'foc' or 'grid'")
        if not (isinstance(self.grid_points, int) and self.grid_points >= 1):
            raise ConfigError("grid_points: must be a positive integer")
        stride = self.output.get("stride", 1)
        if not (isinstance(stride, int) and stride >= 1):
            raise ConfigError("output.stride: must be a positive integer")
        backend = self.oracle.get("backend", "simplex")
        if backend not in ("simplex", "highs"):
            raise ConfigError("oracle.backend: must be 'simplex' or 'highs'")

    def to_dict(self) -> dict:
        return {
            "model": self.model, "params": self.params, "schedule": self.schedule,
            "n_iters": self.n_iters, "window": list(self.window) if self.window else None,
            "cluster_tol": self.cluster_tol, "inner": self.inner, "grid_points": self.grid_points,
            "init": self.init, "oracle": self.oracle, "output": self.output,
            "marginal_tol": self.marginal_tol,
        }

    @property
    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


def preset_names() -> list:
    return sorted(p.name[:-5] for p in resources.files("lagrange_lottery.presets").iterdir()
                  if p.name.endswith(".json"))


def load_preset(name: str) -> dict:
    path = resources.files("lagrange_lottery.presets") / f"{name}.json"
    if not path.is_file():
        raise ConfigError(f"--preset: unknown preset {name!r}; available: {preset_names()}")
    return json.loads(path.read_text())


def load_config(path=None, preset=None, iters=None, window=None) -> RunConfig:
    """Read a config file or preset and apply command-line overrides."""
    if path is None and preset is None:
        raise ConfigError("need --config or --preset")
    if path is not None:
        text = Path(path).read_text()
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    else:
        d = load_preset(preset)
    if iters is not None:
        d["n_iters"] = iters
        if window is None and d.get("window") is not None and d["window"][1] > iters:
            d["window"] = None
    if window is not None:
        d["window"] = list(window)
    return RunConfig.from_dict(d)


def parse_window(text: str):
    try:
        a, b = text.split(":")
        return int(a), int(b)
    except ValueError:
        raise ConfigError(f"--window: expected A:B, got {text!r}") from None


# ---------------------------------------------------------------- model setup

@dataclass
class Instance:
    """Problem, inner solver and defaults assembled from a config."""

    problem: LotteryProblem
    inner: object
    init: MultiplierState
    schedule: StepSchedule
    n_iters: int
    spec: SeparableSpec | None = None
    model: object = None


def _mh_model(params: dict) -> MoralHazardModel:
    try:
        p = dict(params)
        if "outputs" in p:
            p["outputs"] = tuple(p["outputs"])
        return MoralHazardModel(**p)
    except TypeError as exc:
        raise ConfigError(f"params: {exc}") from None


def _tax_economy(params: dict) -> TaxEconomy:
    p = dict(params)
    for k in ("ic_mode", "resource_scaler"):
        p.pop(k, None)
    kind = p.pop("economy", "judd25")
    cb = tuple(p.pop("c_bounds", (0.5, 8.0)))
    ell = p.pop("ell_max", 1.2)
    if kind == "judd25":
        if p:
            raise ConfigError(f"params: unexpected field(s) {sorted(p)} for judd25")
        return judd25(ell_max=ell, c_bounds=cb)
    if kind == "custom":
        try:
            return TaxEconomy(c_bounds=cb, ell_max=ell, **p)
        except TypeError as exc:
            raise ConfigError(f"params: {exc}") from None
    raise ConfigError(f"params.economy: unknown economy {kind!r}")


def _load_factory(ref: str):
    if ":" not in ref:
        raise ConfigError("params.factory: expected 'module:function' or 'file.py:function'")
    mod, fn = ref.rsplit(":", 1)
    if mod.endswith(".py"):
        spec = importlib.util.spec_from_file_location(Path(mod).stem, mod)
        if spec is None or not Path(mod).is_file():
            raise ConfigError(f"params.factory: cannot load {mod}")
        module = importlib.util.module_from_spec(spec)
        spec.loader.exec_module(module)
    else:
        try:
            module = importlib.import_module(mod)
        except ImportError as exc:
            raise ConfigError(f"params.factory: {exc}") from None
    if not hasattr(module, fn):
        raise ConfigError(f"params.factory: {mod} has no attribute {fn!r}")
    return getattr(module, fn)


def build_instance(cfg: RunConfig) -> Instance:
    sched = StepSchedule(**cfg.schedule) if cfg.schedule else None
    if cfg.model == "moral-hazard":
        model = _mh_model(cfg.params)
        problem, spec = to_problem(model)
        inner = FocInnerSolver(spec) if cfg.inner == "foc" else GridInnerSolver(
            [cfg.grid_points] * 2, separable=spec)
        init = MultiplierState.initial(problem, lam0=cfg.init.get("lam", 0.5),
                                       gamma0=cfg.init.get("gamma", 0.0))
        sched = sched or StepSchedule(1.0, 1.0 / model.delta_a ** 2, 0.8)
        n = cfg.n_iters or int(round(100.0 / model.delta_a))
        return Instance(problem, inner, init, sched, n, spec, model)
    if cfg.model == "taxation":
        econ = _tax_economy(cfg.params)
        mode = cfg.params.get("ic_mode", "full")
        rs = float(cfg.params.get("resource_scaler", 5.0))
        problem = tax_to_problem(econ, mode, rs)
        lam = np.zeros(problem.n_pooled)
        lam[0] = cfg.init.get("resource_lam", 0.5) / rs
        init = MultiplierState(lam, np.zeros((0, 1)))
        from .taxation import default_tax_schedule
        sched = sched or default_tax_schedule()
        return Instance(problem, TaxInnerSolver(econ, mode), init, sched,
                        cfg.n_iters or 100_000, None, econ)
    factory = _load_factory(cfg.params.get("factory", ""))
    built = factory(**cfg.params.get("kwargs", {}))
    problem, spec = (built if isinstance(built, tuple) else (built, None))
    if not isinstance(problem, LotteryProblem):
        raise ConfigError("params.factory: must return a LotteryProblem or (problem, spec)")
    if cfg.inner == "foc":
        if spec is None:
            raise ConfigError("inner: 'foc' needs the factory to return a SeparableSpec")
        inner = FocInnerSolver(spec)
    else:
        inner = GridInnerSolver([cfg.grid_points] * problem.dim, separable=spec)
    init = MultiplierState.initial(problem, lam0=cfg.init.get("lam", 0.5),
                                   gamma0=cfg.init.get("gamma", 0.0))
    return Instance(problem, inner, init, sched or StepSchedule(1.0, 10.0, 0.8),
                    cfg.n_iters or 1000, spec, None)


# ---------------------------------------------------------------- outputs

def _dump_json(path: Path, obj):
    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        raise TypeError(type(o))
    path.write_text(json.dumps(obj, indent=2, default=default, allow_nan=True) + "\n")


def write_trajectory(path: Path, logd, cfg_hash: str, stride: int = 1):
    """Trajectory table: k, action, consumption, step, V, violations, pooled multipliers."""
    problem = logd.problem
    acts = problem.actions
    idx = np.arange(0, logd.n_iters, stride)
    lam_cols = (logd.lambda_path is not None and problem.n_pooled <= _LAMBDA_COLUMNS_MAX)
    header = (["k", "a_index"] + [f"a_{i + 1}" for i in range(acts.shape[1])]
              + [f"c_{r + 1}" for r in range(problem.dim)]
              + ["mu", "V", "max_abs_g", "max_abs_h"]
              + ([f"lambda_{i + 1}" for i in range(problem.n_pooled)] if lam_cols else []))
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={cfg_hash}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for i in idx:
            row = [int(logd.k[i]), int(logd.action[i])] + [repr(float(v)) for v in acts[logd.action[i]]]
            row += [repr(float(v)) for v in logd.consumption[i]]
            row += [repr(float(logd.step[i])), repr(float(logd.dual_value[i])),
                    repr(float(logd.max_abs_g[i])), repr(float(logd.max_abs_h[i]))]
            if lam_cols:
                row += [repr(float(v)) for v in logd.lambda_path[i]]
            w.writerow(row)


def _bound_check(problem, logd):
    """Full-history certificate and the analytic feasibility bound per constraint."""
    full = construct_lottery(logd, (1, logd.n_iters), cluster_tol=0.0)
    rep = full.eps_report
    ok = None
    if rep.analytic_bound is not None:
        ok = bool(np.all(rep.expected_pooled <= rep.analytic_bound + 1e-10))
    return {
        "max_g_violation": rep.max_g_violation,
        "max_h_violation": rep.max_h_violation,
        "objective": rep.objective,
        "expected_pooled": rep.expected_pooled,
        "analytic_bound": rep.analytic_bound,
        "bound_holds": ok,
    }


def cmd_solve(cfg: RunConfig, out: Path) -> dict:
    """Run a configured solve and write trajectory, lottery and certificate files."""
    inst = build_instance(cfg)
    out.mkdir(parents=True, exist_ok=True)
    h = cfg.hash
    t0 = time.perf_counter()
    logd = run_iteration_loop(inst.problem, inst.init, inst.schedule, inst.n_iters, inst.inner)
    elapsed = time.perf_counter() - t0
    sol = construct_lottery(logd, cfg.window, cfg.cluster_tol)
    rep = sol.eps_report
    write_trajectory(out / "trajectory.csv", logd, h, cfg.output.get("stride", 1))

    lot = {"config_hash": h, "model": cfg.model, **sol.to_dict(inst.problem)}
    summary = {"iterations": inst.n_iters, "seconds": elapsed, "objective": sol.objective,
               "dual_upper_bound": rep.dual_upper_bound, "certified_eps": rep.certified_eps}
    if cfg.model == "moral-hazard":
        lot["action_summary"] = [
            {"action": a, "probability": p, "consumption": c.tolist()}
            for a, p, c in action_summary(sol, inst.model)]
        summary["top_actions"] = lot["action_summary"][:3]
    if cfg.model == "taxation":
        econ = inst.model
        marg = type_marginals(sol, econ, tol=cfg.marginal_tol)
        lot["type_marginals"] = [m.to_dict() for m in marg]
        uD, _, _, viol = solve_deterministic_tax(econ, cfg.params.get("ic_mode", "full"))
        acc = welfare_account(econ, sol.objective, uD)
        lot["welfare"] = acc.to_dict()
        lot["welfare"]["deterministic_max_violation"] = viol
        summary["welfare_loss_deterministic"] = acc.wl_deterministic
        summary["welfare_loss_lottery"] = acc.wl_lottery
        _print_marginals(marg)
    _dump_json(out / "lottery.json", lot)
    cert = {"config_hash": h, "window": list(sol.window), **rep.to_dict(),
            "full_history": _bound_check(inst.problem, logd),
            "running_bounds": {"M": logd.bound_M, "max_multiplier_sq_norm": logd.max_multiplier_sq_norm,
                               "initial_sq_norm": logd.initial_sq_norm, "step_sum": logd.step_sum}}
    _dump_json(out / "certificate.json", cert)
    if cfg.oracle.get("enabled"):
        summary["oracle"] = _run_oracle(cfg, inst, logd, sol, out)
    for k, v in summary.items():
        print(f"{k}: {v}")
    return summary


def _print_marginals(marg):
    print(f"{'w':>4} {'eta':>6} {'c':>7}  y lottery (value, prob)")
    for m in marg:
        cl = "  ".join(f"({y:.3f}, {100 * p:.2f}%)" for y, _, p in m.clusters if p >= 1e-3)
        print(f"{m.w:4.0f} {m.eta:6.3f} {m.mean_c:7.3f}  {cl}")


def _run_oracle(cfg: RunConfig, inst: Instance, logd, sol, out: Path) -> dict:
    if cfg.model != "moral-hazard":
        raise ConfigError("oracle: only available for the moral-hazard model")
    step = cfg.oracle.get("c_grid_step", 0.01)
    lp = build_mh_lp(inst.model, step, size_cap=cfg.oracle.get("size_cap", DEFAULT_SIZE_CAP))
    res = solve_lp(lp, cfg.oracle.get("backend", "simplex"))
    gap = compare_oracle(lp, res, logd.min_dual_value, sol, n_actions=inst.problem.n_actions)
    d = {"config_hash": cfg.hash, "lp_status": res.status, "lp_seconds": res.seconds,
         "lp_size": lp.size_report(), **gap.to_dict()}
    _dump_json(out / "gap.json", d)
    return {k: d[k] for k in ("lp_optimum", "dual_gap", "primal_gap", "action_distance")}


def cmd_compare(cfg: RunConfig, out: Path) -> dict:
    cfg.oracle = {**cfg.oracle, "enabled": True}
    return cmd_solve(cfg, out)


def cmd_benchmark(ladder, *, lp_solve: bool = False, size_cap: float = DEFAULT_SIZE_CAP,
                  repeats: int = 1, out: Path | None = None, base: MoralHazardModel | None = None):
    """Timing ladder over action-grid spacings with ``N = 100 / delta_a``.

    Returns a list of row dicts; also writes ``benchmark.csv`` when ``out``
    is given.
    """
    base = base or MoralHazardModel()
    rows = []
    for da in ladder:
        model = base.with_(delta_a=float(da))
        problem, spec = to_problem(model)
        n = int(round(100.0 / da))
        sched = StepSchedule(1.0, 1.0 / da ** 2, 0.8)
        best = math.inf
        for _ in range(max(1, repeats)):
            t0 = time.perf_counter()
            run_iteration_loop(problem, MultiplierState.initial(problem), sched, n,
                               FocInnerSolver(spec))
            best = min(best, time.perf_counter() - t0)
        size = mh_lp_size(model)
        row = {"delta_a": float(da), "n_actions": model.n_actions, "iterations": n,
               "seconds": best, "lp_vars": size["vars"], "lp_eq": size["eq"],
               "lp_ineq": size["ineq"], "lp_nnz": size["nnz"], "lp_seconds": ""}
        if lp_solve and size["nnz"] <= size_cap:
            lp = build_mh_lp(model, size_cap=size_cap)
            row["lp_seconds"] = solve_lp(lp, "highs").seconds
        rows.append(row)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        cols = ["delta_a", "n_actions", "iterations", "seconds", "lp_vars", "lp_eq", "lp_ineq",
                "lp_nnz", "lp_seconds"]
        with open(out / "benchmark.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            w.writerows(rows)
    return rows


def cmd_lp(cfg: RunConfig, out: Path, *, solve: bool = False, mps: bool = False) -> dict:
    if cfg.model != "moral-hazard":
        raise ConfigError("lp: only the moral-hazard model has an LP builder here")
    model = _mh_model(cfg.params)
    step = cfg.oracle.get("c_grid_step", 0.01)
    cap = cfg.oracle.get("size_cap", DEFAULT_SIZE_CAP)
    size = mh_lp_size(model, step)
    print(f"vars: {size['vars']}  equalities: {size['eq']}  inequalities: {size['ineq']}  "
          f"nonzeros: {size['nnz']}")
    res = {"config_hash": cfg.hash, "size": size}
    if solve or mps:
        lp = build_mh_lp(model, step, size_cap=cap)
        out.mkdir(parents=True, exist_ok=True)
        if mps:
            write_mps(lp, out / "lp.mps")
        if solve:
            r = solve_lp(lp, cfg.oracle.get("backend", "simplex"))
            am = np.bincount(lp.labels["action"], weights=r.x, minlength=model.n_actions)
            res.update(status=r.status, optimum=r.value, seconds=r.seconds,
                       action_marginal={f"{a:.6g}": p for a, p in zip(model.actions, am) if p > 1e-9})
            print(f"status: {r.status}  optimum: {r.value}")
        _dump_json(out / "lp.json", res)
    return res


# ---------------------------------------------------------------- entry point

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lagrange-lottery",
                                 description="Lottery solutions by Lagrangian iteration.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def common(p):
        p.add_argument("--config", type=Path)
        p.add_argument("--preset")
        p.add_argument("--out", type=Path, default=Path("out"))
        p.add_argument("--iters", type=int)
        p.add_argument("--window")

    common(sub.add_parser("solve", help="run the iteration and write artifacts"))
    common(sub.add_parser("compare", help="run the iteration and the LP oracle"))
    p = sub.add_parser("lp", help="build (and optionally solve or export) the LP")
    common(p)
    p.add_argument("--solve", action="store_true")
    p.add_argument("--mps", action="store_true")
    p = sub.add_parser("benchmark", help="timing ladder over action grids")
    p.add_argument("--ladder", default="0.2,0.1,0.05,0.025")
    p.add_argument("--lp-solve", action="store_true")
    p.add_argument("--size-cap", type=float, default=DEFAULT_SIZE_CAP)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--out", type=Path, default=Path("out"))
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.cmd == "benchmark":
            ladder = [float(x) for x in args.ladder.split(",") if x.strip()]
            if any(not (x > 0) for x in ladder):
                raise ConfigError("--ladder: spacings must be positive")
            rows = cmd_benchmark(ladder, lp_solve=args.lp_solve, size_cap=args.size_cap,
                                 repeats=args.repeats, out=args.out)
            for r in rows:
                print(", ".join(f"{k}={v}" for k, v in r.items()))
            return 0
        if args.iters is not None and args.iters < 1:
            raise ConfigError("--iters: must be at least 1")
        window = parse_window(args.window) if args.window else None
        cfg = load_config(args.config, args.preset, args.iters, window)
        if args.cmd == "solve":
            cmd_solve(cfg, args.out)
        elif args.cmd == "compare":
            cmd_compare(cfg, args.out)
        else:
            cmd_lp(cfg, args.out, solve=args.solve, mps=args.mps)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SizeCapExceeded as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return 4
    except LotteryError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
