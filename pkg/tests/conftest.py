import time

import numpy as np
import pytest
from hypothesis import settings

from lagrange_lottery.cli import build_instance, load_config
from lagrange_lottery.core import MultiplierState, StepSchedule, construct_lottery, run_iteration_loop
from lagrange_lottery.inner import GridInnerSolver
from lagrange_lottery.lp import build_mh_lp, simplex_solve
from lagrange_lottery.moral_hazard import MoralHazardModel, solve_example1, to_problem
from lagrange_lottery.taxation import judd25, solve_deterministic_tax, solve_tax

settings.register_profile("repo", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("repo")

_ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(_ACCEPTANCE, key=lambda t: t[0]):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")


@pytest.fixture(scope="session")
def acceptance():
    def record(n, ok, detail):
        _ACCEPTANCE.append((n, bool(ok), detail))
        print(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        return ok
    return record


@pytest.fixture(scope="session")
def example1():
    model = MoralHazardModel()
    t0 = time.perf_counter()
    sol, log = solve_example1(model, 4000, (3800, 4000))
    return model, sol, log, time.perf_counter() - t0


@pytest.fixture(scope="session")
def example1_fine():
    cfg = load_config(preset="example1_fine")
    inst = build_instance(cfg)
    log = run_iteration_loop(inst.problem, inst.init, inst.schedule, inst.n_iters, inst.inner)
    return inst, log, construct_lottery(log, cfg.window, cfg.cluster_tol)


@pytest.fixture(scope="session")
def tiny():
    """Five actions, 21 consumption points per state, grid solver on the LP grid."""
    t0 = time.perf_counter()
    model = MoralHazardModel(delta_a=0.475)
    problem, spec = to_problem(model)
    sched = StepSchedule(1.0, 1.0 / model.delta_a ** 2, 0.8)
    log = run_iteration_loop(problem, MultiplierState.initial(problem), sched, 20000,
                             GridInnerSolver([21, 21], separable=spec))
    sol = construct_lottery(log)
    lp = build_mh_lp(model, 0.1)
    res = simplex_solve(lp)
    return dict(model=model, problem=problem, spec=spec, log=log, sol=sol, lp=lp, lp_result=res,
                seconds=time.perf_counter() - t0)


@pytest.fixture(scope="session")
def judd_run():
    econ = judd25()
    t0 = time.perf_counter()
    sol, log = solve_tax(econ)
    return econ, sol, log, time.perf_counter() - t0


@pytest.fixture(scope="session")
def judd_deterministic():
    return solve_deterministic_tax(judd25())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
