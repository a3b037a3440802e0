import numpy as np
import pytest
from hypothesis import given, strategies as st

from lagrange_lottery.core import (
    IterateLog, LotteryProblem, LotterySolution, MultiplierState, StepSchedule, certify_eps,
    cluster_points, construct_lottery, dual_value, eval_lagrangian, run_iteration_loop,
    subgradient_step, violation_path,
)
from lagrange_lottery.errors import (
    ConfigError, EmptyWindowError, EvaluationError, InnerSolverError,
)
from lagrange_lottery.inner import FocInnerSolver, GridInnerSolver, PowerUtility, SeparableSpec


def two_action_problem():
    """f = a + c0 + 2 c1, g = c0 + c1 - 1, h = c0 - a; box [0, 1]^2."""
    return LotteryProblem.from_functions(
        [0.0, 1.0], [0.0, 0.0], [1.0, 1.0],
        f=lambda a, c: a[0] + c[0] + 2 * c[1],
        g=[lambda a, c: c[0] + c[1] - 1.0],
        h=[lambda a, c: c[0] - a[0]])


def sqrt_problem(c_max=10.0, scale=2.0):
    """One action, ``f = scale * sqrt(c)``, ``g = c - 1``; optimum ``lam = scale / 2``."""
    problem = LotteryProblem(
        actions=[0.0], c_lower=[0.0], c_upper=[c_max],
        payoff=lambda a, C: scale * np.sqrt(np.asarray(C)[..., 0]),
        pooled=lambda a, C: np.asarray(C) - 1.0, n_pooled=1)
    spec = SeparableSpec(u0=[0.0], u=[[scale]], v0=np.zeros((0, 1)), v=np.zeros((0, 1, 1)),
                         g0=[[-1.0]], slope=[[[1.0]]], w=[PowerUtility(0.5)])
    return problem, spec


# ---------------------------------------------------------------- evaluation

def test_eval_lagrangian_by_hand():
    p = two_action_problem()
    mult = MultiplierState(np.array([0.5]), np.array([[0.0, 2.0]]))
    # a = 1, c = (0.25, 0.5): f = 2.25, g = -0.25, h = -0.75
    assert eval_lagrangian(p, 1, [0.25, 0.5], mult) == pytest.approx(2.25 + 0.125 + 1.5)
    # gamma column of action 0 is zero, so h does not enter
    assert eval_lagrangian(p, 0, [1.0, 1.0], mult) == pytest.approx(3.0 - 0.5)


def test_eval_lagrangian_uses_scalers():
    base = two_action_problem()
    p = LotteryProblem(actions=base.actions, c_lower=base.c_lower, c_upper=base.c_upper,
                       payoff=base.payoff, pooled=base.pooled, per_action=base.per_action,
                       n_pooled=1, n_per_action=1, constraint_scalers=[[1.0, 4.0]],
                       pooled_scalers=[3.0])
    mult = MultiplierState(np.array([0.5]), np.array([[0.0, 2.0]]))
    assert eval_lagrangian(p, 1, [0.25, 0.5], mult) == pytest.approx(2.25 + 3 * 0.125 + 4 * 1.5)


def test_eval_lagrangian_rejects_bad_points():
    p = two_action_problem()
    m = MultiplierState.zeros(p)
    with pytest.raises(ValueError):
        eval_lagrangian(p, 0, [1.5, 0.0], m)
    with pytest.raises(IndexError):
        eval_lagrangian(p, 2, [0.0, 0.0], m)
    bad = LotteryProblem.from_functions([0.0], [0.0], [1.0], f=lambda a, c: np.log(c[0]))
    with np.errstate(divide="ignore"), pytest.raises(EvaluationError):
        eval_lagrangian(bad, 0, [0.0], MultiplierState.zeros(bad))


def test_dual_value_matches_closed_form():
    problem, spec = sqrt_problem(scale=1.0)
    for lam in (0.3, 0.5, 1.0, 2.0):
        mult = MultiplierState(np.array([lam]), np.zeros((0, 1)))
        v, (a, c) = dual_value(problem, mult, FocInnerSolver(spec))
        # max sqrt(c) - lam (c - 1) at c = 1 / (4 lam^2)
        assert c[0] == pytest.approx(1 / (4 * lam ** 2))
        assert v == pytest.approx(1 / (4 * lam) + lam)
        vg, _ = dual_value(problem, mult, GridInnerSolver([100001]))
        assert vg <= v + 1e-12 and v - vg < 1e-6


# ---------------------------------------------------------------- multiplier update

def test_subgradient_step_by_hand():
    p = two_action_problem()
    mult = MultiplierState(np.array([0.1]), np.array([[0.3, 0.2]]))
    new = subgradient_step(p, mult, 0.5, (1, np.array([0.0, 0.0])))
    # g = -1, h = -1 at a = 1
    assert new.lam[0] == 0.0
    assert new.gamma[0, 1] == 0.0
    assert new.gamma[0, 0] == 0.3
    new = subgradient_step(p, mult, 0.5, (0, np.array([1.0, 1.0])))
    assert new.lam[0] == pytest.approx(0.6)
    assert new.gamma[0, 0] == pytest.approx(0.8)
    assert new.gamma[0, 1] == 0.2
    # the input state is untouched
    assert mult.lam[0] == 0.1 and mult.gamma[0, 0] == 0.3


@given(st.floats(0, 5), st.floats(0, 5), st.floats(1e-4, 2), st.integers(0, 1),
       st.floats(0, 1), st.floats(0, 1))
def test_projection_keeps_multipliers_nonnegative(lam, gam, mu, a, c0, c1):
    p = two_action_problem()
    mult = MultiplierState(np.array([lam]), np.array([[gam, gam]]))
    new = subgradient_step(p, mult, mu, (a, np.array([c0, c1])))
    assert new.lam.min() >= 0 and new.gamma.min() >= 0
    assert new.gamma[0, 1 - a] == gam


def test_single_iteration_is_argmax_then_step():
    p = two_action_problem()
    grid = GridInnerSolver([11, 11])
    init = MultiplierState(np.array([0.5]), np.array([[0.2, 0.4]]))
    sched = StepSchedule(1.0, 4.0, 0.8)
    log = run_iteration_loop(p, init, sched, 1, grid)
    v, arg = dual_value(p, init, grid)
    expect = subgradient_step(p, init, sched(1), arg)
    assert log.dual_value[0] == pytest.approx(v)
    assert log.action[0] == arg[0]
    np.testing.assert_allclose(log.final.lam, expect.lam)
    np.testing.assert_allclose(log.final.gamma, expect.gamma)


def test_schedule_values_and_validation():
    s = StepSchedule(2.0, 3.0, 0.8)
    assert s(1) == pytest.approx(2.0 * 4.0 ** -0.8)
    np.testing.assert_allclose(s.steps(3), [2 * 4 ** -0.8, 2 * 5 ** -0.8, 2 * 6 ** -0.8])
    for bad in (0.5, 1.2, 0.0):
        with pytest.raises(ConfigError):
            StepSchedule(1.0, 0.0, bad)
    StepSchedule(1.0, 0.0, 1.0)


def test_toy_multiplier_tracks_scalar_recursion():
    problem, spec = sqrt_problem()
    sched = StepSchedule(1.0, 10.0, 0.8)
    log = run_iteration_loop(problem, MultiplierState.initial(problem), sched, 3000,
                             FocInnerSolver(spec))
    # independent recursion: c = min(1 / lam^2, 10), lam <- max(lam + mu (c - 1), 0)
    lam, path = 0.5, []
    for k in range(1, 3001):
        path.append(lam)
        c = min(1.0 / lam ** 2, 10.0) if lam > 0 else 10.0
        lam = max(lam + (k + 10.0) ** -0.8 * (c - 1.0), 0.0)
    np.testing.assert_allclose(log.lambda_path[:, 0], path, rtol=1e-10)
    assert log.final.lam[0] == pytest.approx(lam, rel=1e-10)
    assert abs(log.final.lam[0] - 1.0) < 0.05
    assert log.min_dual_value >= 2.0 - 1e-12  # optimal value 2 at c = 1


def test_runs_are_deterministic():
    problem, spec = sqrt_problem()
    sched = StepSchedule(1.0, 10.0, 0.8)
    a = run_iteration_loop(problem, MultiplierState.initial(problem), sched, 500, FocInnerSolver(spec))
    b = run_iteration_loop(problem, MultiplierState.initial(problem), sched, 500, FocInnerSolver(spec))
    np.testing.assert_array_equal(a.consumption, b.consumption)
    np.testing.assert_array_equal(a.dual_value, b.dual_value)


def test_loop_rejects_bad_input():
    problem, spec = sqrt_problem()
    with pytest.raises(ConfigError):
        run_iteration_loop(problem, MultiplierState.initial(problem), StepSchedule(), 0,
                           FocInnerSolver(spec))
    with pytest.raises(ConfigError):
        MultiplierState(np.array([-1.0]), np.zeros((0, 1))).check(problem)


def test_inner_failure_reports_iteration():
    problem = LotteryProblem(actions=[0.0], c_lower=[0.0], c_upper=[1.0],
                             payoff=lambda a, C: np.log(np.asarray(C)[..., 0]))
    with np.errstate(divide="ignore"), pytest.raises(InnerSolverError) as info:
        run_iteration_loop(problem, MultiplierState.zeros(problem), StepSchedule(), 3,
                           GridInnerSolver([5]))
    assert info.value.k == 1


# ---------------------------------------------------------------- lotteries

def hand_log(actions, consumption, steps):
    p = two_action_problem()
    n = len(actions)
    z = np.zeros(n)
    m0 = MultiplierState.zeros(p)
    return IterateLog(problem=p, schedule=StepSchedule(), k=np.arange(1, n + 1),
                      action=np.asarray(actions), consumption=np.asarray(consumption, dtype=float),
                      step=np.asarray(steps, dtype=float), dual_value=z, payoff=z,
                      max_abs_g=z, max_abs_h=z, initial=m0, final=m0,
                      weighted_pooled_sum=np.zeros(1))


def test_lottery_weights_are_step_weighted():
    log = hand_log([0, 1, 1, 0], [[0, 0], [1, 1], [1, 1], [0.001, 0]], [1.0, 1.0, 2.0, 0.0])
    sol = construct_lottery(log, (1, 4), cluster_tol=1e-2, certify=False)
    assert len(sol) == 2
    np.testing.assert_allclose(sol.prob, [0.75, 0.25])
    np.testing.assert_array_equal(sol.action, [1, 0])
    np.testing.assert_allclose(sol.consumption[0], [1, 1])
    # objective: 0.75 * (1 + 3) + 0.25 * 0
    assert sol.objective == pytest.approx(3.0)


def test_cluster_tolerance_zero_keeps_every_iterate():
    log = hand_log([0, 0, 0], [[0.5, 0.5]] * 3, [1.0, 1.0, 1.0])
    assert len(construct_lottery(log, (1, 3), cluster_tol=0.0, certify=False)) == 3
    assert len(construct_lottery(log, (1, 3), cluster_tol=1e-6, certify=False)) == 1
    # identical consumption under different actions never merges
    log = hand_log([0, 1], [[0.5, 0.5]] * 2, [1.0, 1.0])
    assert len(construct_lottery(log, (1, 2), cluster_tol=1.0, certify=False)) == 2


def test_default_window_is_last_five_percent():
    problem, spec = sqrt_problem()
    log = run_iteration_loop(problem, MultiplierState.initial(problem), StepSchedule(1, 10, 0.8),
                             200, FocInnerSolver(spec))
    assert construct_lottery(log).window == (191, 200)
    assert construct_lottery(log, (1, 200)).eps_report.full_history


@pytest.mark.parametrize("window", [(5, 3), (0, 10), (201, 210), (1, 201)])
def test_bad_windows(window):
    problem, spec = sqrt_problem()
    log = run_iteration_loop(problem, MultiplierState.initial(problem), StepSchedule(1, 10, 0.8),
                             200, FocInnerSolver(spec))
    with pytest.raises(EmptyWindowError):
        construct_lottery(log, window)


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=40),
       st.floats(0.0, 0.3))
def test_cluster_labels_are_single_linkage(points, tol):
    X = np.array(points)
    lab = cluster_points(X, tol)
    assert lab[0] == 0 and lab.max() < len(X)
    # union-find over all pairs closer than tol
    parent = list(range(len(X)))

    def root(i):
        while parent[i] != i:
            i = parent[i]
        return i

    for i in range(len(X)):
        for j in range(i):
            if np.max(np.abs(X[i] - X[j])) < tol:
                parent[root(i)] = root(j)
    roots = np.array([root(i) for i in range(len(X))])
    assert np.array_equal(lab[:, None] == lab[None, :], roots[:, None] == roots[None, :])
    _, first = np.unique(lab, return_index=True)
    assert np.all(np.diff(first) > 0)


def test_certificate_on_toy_run():
    problem, spec = sqrt_problem()
    log = run_iteration_loop(problem, MultiplierState.initial(problem), StepSchedule(1, 10, 0.8),
                             3000, FocInnerSolver(spec))
    rep = construct_lottery(log, (1, 3000), cluster_tol=0.0).eps_report
    # full history: the expected violation equals the analytic bound (lam never hits zero)
    assert rep.expected_pooled[0] == pytest.approx(rep.analytic_bound[0], abs=1e-12)
    sol = construct_lottery(log)
    rep = sol.eps_report
    assert rep.dual_upper_bound == log.min_dual_value
    # dual bound minus objective is nonnegative up to the violation term
    assert rep.duality_gap_bound >= -log.final.lam[0] * abs(rep.max_g_violation) - 1e-12
    assert rep.certified_eps < 1e-2


def test_violation_path_matches_multiplier_drift(example1):
    _, _, log, _ = example1
    ks, viol = violation_path(log, every=400)
    lam = np.append(log.lambda_path[:, 0], log.final.lam[0])
    assert lam.min() > 0
    expect = (lam[ks] - lam[0]) / np.cumsum(log.step)[ks - 1]
    np.testing.assert_allclose(viol, expect, rtol=1e-9, atol=1e-12)
    assert np.all(np.diff(np.abs(viol)) < 0)


def test_weak_duality_against_lp_lottery(tiny):
    """A feasible lottery rebuilt from the LP optimum lies below every dual value."""
    lp, x, model = tiny["lp"], tiny["lp_result"].x, tiny["model"]
    problem, spec = tiny["problem"], tiny["spec"]
    lab = lp.labels
    P = spec.u
    acts, cons, probs = [], [], []
    for a in range(problem.n_actions):
        sel = lab["action"] == a
        mass = x[sel].sum()
        if mass < 1e-12:
            continue
        # product coupling of the two output-state marginals
        m0 = sel & (lab["output"] == 0)
        m1 = sel & (lab["output"] == 1)
        c0, p0 = lab["c"][m0], x[m0]
        c1, p1 = lab["c"][m1], x[m1]
        w = np.outer(p0, p1) / (P[a, 0] * P[a, 1] * mass)
        cc0, cc1 = np.meshgrid(c0, c1, indexing="ij")
        keep = w.reshape(-1) > 0
        acts.append(np.full(keep.sum(), a))
        cons.append(np.stack([cc0.reshape(-1), cc1.reshape(-1)], 1)[keep])
        probs.append(w.reshape(-1)[keep])
    lot = LotterySolution(np.concatenate(acts), np.concatenate(cons), np.concatenate(probs), (1, 1))
    assert lot.prob.sum() == pytest.approx(1.0, abs=1e-9)
    rep = certify_eps(problem, lot, dual_upper_bound=0.0)
    assert rep.objective == pytest.approx(tiny["lp_result"].value, abs=1e-9)
    assert rep.max_g_violation <= 1e-9 and rep.max_h_violation <= 1e-9
    foc = FocInnerSolver(spec)
    rng = np.random.default_rng(3)
    for _ in range(30):
        mult = MultiplierState(rng.uniform(0, 2, 1),
                               rng.uniform(0, 0.5, (problem.n_per_action, problem.n_actions)))
        v, _ = dual_value(problem, mult, foc)
        assert v >= rep.objective - 1e-9
    assert tiny["log"].dual_value.min() >= rep.objective - 1e-9


def test_dual_function_is_convex_on_segments():
    problem, spec = sqrt_problem(scale=1.0)
    foc = FocInnerSolver(spec)
    lams = np.linspace(0.05, 3.0, 60)
    V = np.array([dual_value(problem, MultiplierState(np.array([l]), np.zeros((0, 1))), foc)[0]
                  for l in lams])
    assert np.all(V[:-2] + V[2:] - 2 * V[1:-1] >= -1e-12)


def test_solution_round_trip(example1):
    _, sol, _, _ = example1
    back = LotterySolution.from_dict(sol.to_dict())
    np.testing.assert_array_equal(back.action, sol.action)
    np.testing.assert_allclose(back.consumption, sol.consumption, rtol=0, atol=1e-12)
    np.testing.assert_allclose(back.prob, sol.prob, rtol=0, atol=1e-12)


# ---------------------------------------------------------------- linear toy

def linear_toy():
    """f = c on [0, 1], g = c - 0.5; optimum 0.5 with lam = 1."""
    return LotteryProblem(actions=[0.0], c_lower=[0.0], c_upper=[1.0],
                          payoff=lambda a, C: np.asarray(C, dtype=float)[..., 0],
                          pooled=lambda a, C: np.asarray(C, dtype=float) - 0.5, n_pooled=1)


def toy_state(lam):
    return MultiplierState(np.array([float(lam)]), np.zeros((0, 1)))


def test_linear_toy_lagrangian_is_flat_at_unit_price():
    p = linear_toy()
    for c in np.linspace(0, 1, 7):
        assert eval_lagrangian(p, 0, [c], toy_state(1.0)) == pytest.approx(0.5)
        assert eval_lagrangian(p, 0, [c], toy_state(0.0)) == c


@pytest.mark.parametrize("lam", [0.0, 0.3, 1.0, 1.7, 4.0])
def test_linear_toy_dual_is_piecewise_linear(lam):
    v, _ = dual_value(linear_toy(), toy_state(lam), GridInnerSolver([11]))
    assert v == pytest.approx(1 - 0.5 * lam if lam <= 1 else 0.5 * lam)
    assert v >= 0.5


def test_step_arithmetic_and_projection():
    p = linear_toy()
    # g = c - 1 = -1 at c = 0
    q = LotteryProblem(actions=[0.0], c_lower=[0.0], c_upper=[1.0], payoff=p.payoff,
                       pooled=lambda a, C: np.asarray(C, dtype=float) - 1.0, n_pooled=1)
    assert subgradient_step(q, toy_state(0.5), 0.1, (0, [0.0])).lam[0] == pytest.approx(0.4)
    assert subgradient_step(q, toy_state(0.05), 0.1, (0, [0.0])).lam[0] == 0.0


def test_linear_toy_multiplier_converges():
    p = linear_toy()
    log = run_iteration_loop(p, toy_state(0.0), StepSchedule(0.5, 0.0, 0.8), 2000,
                             GridInnerSolver([2]))
    # independent recursion: c = 1 while lam < 1, else 0 (first grid point wins ties)
    lam, path = 0.0, []
    for k in range(1, 2001):
        path.append(lam)
        c = 1.0 if lam < 1.0 else 0.0
        lam = max(lam + 0.5 * k ** -0.8 * (c - 0.5), 0.0)
    np.testing.assert_allclose(log.lambda_path[:, 0], path, rtol=0, atol=1e-12)
    assert abs(log.final.lam[0] - 1.0) <= 0.05
    assert log.min_dual_value >= 0.5
    for window in (None, (1, 2000), (1000, 2000), (1990, 2000)):
        sol = construct_lottery(log, window)
        rep = sol.eps_report
        assert rep.duality_gap_bound == pytest.approx(rep.dual_upper_bound - sol.objective)
        # the gap is nonnegative up to the first-order violation term
        assert rep.duality_gap_bound >= -max(rep.max_g_violation, 0.0) - 1e-12


def test_zero_multipliers_give_payoff_and_max():
    p = two_action_problem()
    z = MultiplierState.zeros(p)
    assert eval_lagrangian(p, 1, [0.2, 0.3], z) == pytest.approx(1.8)
    v, _ = dual_value(p, z, GridInnerSolver([5, 5]))
    assert v == pytest.approx(4.0)


def test_moral_hazard_lagrangian_by_substitution():
    from lagrange_lottery.moral_hazard import MoralHazardModel, build_prob_table, to_problem

    m = MoralHazardModel()
    problem, _ = to_problem(m)
    P = build_prob_table(m)
    mult = MultiplierState.initial(problem)
    q = np.array([0.5, 1.5])
    for a, c in ((0, [1.2, 1.2]), (41, [0.55, 1.4]), (76, [0.0, 2.0])):
        c = np.array(c)
        a_val = m.actions[a]
        expect = (P[a] @ (np.sqrt(c) + 0.8 * np.sqrt(2 - a_val))
                  - 0.5 * (P[a] @ (c - q)))
        assert eval_lagrangian(problem, a, c, mult) == pytest.approx(expect, abs=1e-12)


def test_degenerate_lottery_at_convex_optimum():
    from lagrange_lottery.moral_hazard import MoralHazardModel, to_problem

    m = MoralHazardModel(a_lo=1.0, a_hi=1.0)
    problem, spec = to_problem(m)
    # single action at a = 1: full insurance c = E q = 1 is optimal, with lam = 0.5
    lot = LotterySolution(np.array([0]), np.array([[1.0, 1.0]]), np.array([1.0]), (1, 1))
    v, _ = dual_value(problem, MultiplierState.initial(problem), FocInnerSolver(spec))
    rep = certify_eps(problem, lot, dual_upper_bound=v)
    assert rep.certified_eps <= 1e-12
