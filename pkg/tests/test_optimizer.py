import math

import numpy as np
import pytest
from scipy.optimize import brentq
from hypothesis import given, settings, strategies as st

from fbcp import dynamics as dyn
from fbcp.constraints import ConstraintSpec, constraint_margin
from fbcp.errors import Infeasible, InvalidInput
from fbcp.optimizer import (LowerStageProblem, identify_active_set, kkt_residual, make_plan, solve_lower_stage,
                            straight_line_init, verify_plan)

DT, T = 0.125, 20


def problem(model=dyn.KINEMATIC, centers=None, radii=None, x0=None, t=0, target=(5.0, 0.0), **kw):
    N = T - t
    if x0 is None:
        x0 = [0.0, 0.0, 0.0, 2.0] if model == dyn.KINEMATIC else [0.0, 0.0, 2.0, 0.0]
    if centers is None:
        centers = np.zeros((N, 0))
    centers = np.asarray(centers, dtype=float)
    if centers.ndim == 1:
        centers = np.tile(centers, (N, 1))
    if radii is None:
        radii = np.zeros(N)
    return LowerStageProblem(model, np.asarray(x0, float), t, T, DT, centers, np.broadcast_to(radii, (N,)),
                             np.asarray(target), **kw)


def lq_oracle(x0, target, tol, weights):
    """Minimum-effort double-integrator transfer onto the terminal disc (closed form up to a 1-D root)."""
    N = T
    k = np.arange(N)
    g = DT ** 2 / 2 + DT ** 2 * (N - 1 - k)  # d p_T / d a_k
    drift = np.asarray(x0[:2], float) + N * DT * np.asarray(x0[2:], float)
    gap = np.asarray(target, float) - drift
    if np.linalg.norm(gap) <= tol:
        return 0.0
    # per axis, min w sum a^2 s.t. g.a = d costs d^2 / s with s = sum(g^2) / w
    s = np.array([np.sum(g * g) / w for w in weights])
    # KKT: the residual gap_i - d_i = gap_i / (1 + mu s_i) has norm tol
    mu = brentq(lambda m: np.linalg.norm(gap / (1 + m * s)) - tol, 0.0, 1e12)
    d = gap - gap / (1 + mu * s)
    return float(np.sum(d * d / s))


@pytest.mark.parametrize("x0,weights", [([0, 0, 0, 0], [1.0, 1.0]), ([0, 1, 1, 0], [2.0, 0.5]),
                                        ([1, -1, 0.5, 0.5], [1.0, 3.0])])
def test_double_integrator_matches_lq_oracle(x0, weights):
    p = problem(dyn.DOUBLE_INTEGRATOR, x0=x0, cost_weights=np.array(weights))
    plan = solve_lower_stage(p)
    want = lq_oracle(x0, p.target, p.target_tol, weights)
    assert plan.feasible
    assert plan.cost == pytest.approx(want, rel=1e-4, abs=1e-9)


def test_scp_backend_matches_lq_oracle():
    p = problem(dyn.DOUBLE_INTEGRATOR, x0=[0, 0, 0, 0])
    plan = solve_lower_stage(p, backend="scp")
    # the terminal disc is replaced by an inscribed polygon, so allow that slack
    want = lq_oracle([0, 0, 0, 0], p.target, p.target_tol * math.cos(math.pi / 16), p.cost_weights)
    assert plan.feasible and plan.backend == "scp"
    assert plan.cost == pytest.approx(want, rel=1e-3)


def test_no_obstacle_straight_run_is_free():
    plan = solve_lower_stage(problem())
    assert plan.cost == pytest.approx(0.0, abs=1e-10)
    assert np.allclose(plan.positions[-1], [5.0, 0.0], atol=1e-9)


def test_blocking_instance_is_infeasible():
    # an obstacle sitting on the target with a region wider than the terminal tolerance
    p = problem(centers=[5.0, 0.0], radii=1.0)
    with pytest.raises(Infeasible):
        solve_lower_stage(p)
    with pytest.raises(Infeasible):
        solve_lower_stage(problem(centers=[2.5, 0.0], radii=np.r_[np.inf, np.zeros(T - 1)]))


@pytest.mark.parametrize("backend", ["slsqp", "scp"])
def test_obstacle_avoidance_is_certified(backend):
    p = problem(centers=[2.5, 0.05], radii=0.3)
    plan = solve_lower_stage(p, backend=backend)
    assert plan.feasible and verify_plan(p, plan)
    assert np.all(plan.clearances >= -1e-6)
    assert plan.cost > 0


def test_backends_agree_on_simple_avoidance():
    p = problem(dyn.DOUBLE_INTEGRATOR, centers=[2.5, 0.1], radii=0.2)
    a = solve_lower_stage(p, backend="slsqp")
    b = solve_lower_stage(p, backend="scp")
    assert b.cost == pytest.approx(a.cost, rel=0.05)


def test_warm_start_idempotence():
    p = problem(centers=[2.5, 0.05], radii=0.3)
    plan = solve_lower_stage(p)
    again = solve_lower_stage(p, warm_start=plan.controls)
    assert again.cost <= plan.cost + 1e-6
    assert again.cost == pytest.approx(plan.cost, rel=1e-5)


def test_solver_input_validation():
    p = problem()
    with pytest.raises(InvalidInput):
        solve_lower_stage(p, warm_start=np.zeros((3, 2)))
    with pytest.raises(InvalidInput):
        solve_lower_stage(p, backend="ipopt")
    with pytest.raises(InvalidInput):
        problem(radii=-np.ones(T))
    with pytest.raises(InvalidInput):
        LowerStageProblem(dyn.KINEMATIC, np.zeros(3), 0, T, DT, np.zeros((T, 0)), np.zeros(T), np.zeros(2))


def test_verify_plan_rejects_tampering():
    p = problem(centers=[2.5, 0.05], radii=0.3)
    plan = solve_lower_stage(p)
    assert verify_plan(p, plan)
    from dataclasses import replace
    moved = plan.states.copy()
    moved[3, 0] += 1e-3
    assert not verify_plan(p, replace(plan, states=moved))
    assert not verify_plan(p.with_radii(np.full(T, 2.0)), plan)


def test_active_set_examples():
    # a plan grazing the region at one step only
    p = problem()
    plan = solve_lower_stage(p)
    pos = plan.positions
    spec = p.constraint
    k = 7
    centers = np.tile([50.0, 50.0], (T, 1))
    centers[k] = pos[k] + np.array([0.0, spec.radius + 0.4])
    graze = problem(centers=centers, radii=np.full(T, 0.4))
    g_plan = make_plan(graze, plan.controls)
    part = identify_active_set(g_plan, graze)
    assert part.active == {k + 1}
    assert part.inactive == set(range(1, T + 1)) - {k + 1}
    # nothing nearby: empty active set
    far = problem(centers=[50.0, 50.0], radii=0.1)
    assert identify_active_set(make_plan(far, plan.controls), far).n_active == 0
    # an infeasible plan is rejected
    bad = problem(centers=centers, radii=np.full(T, 0.6))
    with pytest.raises(InvalidInput):
        identify_active_set(make_plan(bad, plan.controls), bad)


def test_straight_line_init_is_reasonable():
    p = problem(x0=[0.0, 0.0, 0.4, 1.0])
    U = straight_line_init(p)
    X = dyn.simulate(p.model, p.x_t, U, DT)
    assert np.linalg.norm(X[-1, :2] - p.target) < 0.5


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 0.6))
def test_lipschitz_soundness(seed, radius):
    """A feasible plan keeps clear of every obstacle realisation inside the region."""
    rng = np.random.default_rng(seed)
    M = 2
    centers = np.array([[2.5, rng.uniform(-0.6, 0.6)], [3.8, rng.uniform(-1.5, 1.5)]]).ravel()
    p = problem(centers=centers, radii=radius)
    try:
        plan = solve_lower_stage(p)
    except Infeasible:
        return
    spec = ConstraintSpec()
    for _ in range(20):
        e = rng.normal(size=(T, 2 * M))
        e *= (radius * rng.uniform(0, 1, (T, 1))) / np.linalg.norm(e, axis=1, keepdims=True)
        real = p.centers + e
        margin = constraint_margin(spec, plan.positions, real)
        assert np.all(np.asarray(margin) >= -1e-6)


def test_constraint_margin_examples():
    r1 = ConstraintSpec(0.4, 0.4, 0.2)
    assert constraint_margin(r1, [0, 0], [3, 4]) == pytest.approx(4.0)
    assert constraint_margin(r1, [1, 1], [1, 1]) == pytest.approx(-1.0)
    assert constraint_margin(ConstraintSpec(0.2, 0.2, 0.1), [0, 0], [2, 0, 0, 7]) == pytest.approx(1.5)


def test_lipschitz_bound_on_random_triples():
    rng = np.random.default_rng(17)
    spec = ConstraintSpec()
    x = rng.normal(size=(1000, 2))
    M = rng.integers(1, 5, 1000)
    for i in range(1000):
        Y = rng.normal(size=2 * M[i])
        Yh = Y + rng.normal(scale=rng.exponential(), size=Y.size)
        gap = abs(constraint_margin(spec, x[i], Y) - constraint_margin(spec, x[i], Yh))
        assert gap <= spec.lipschitz * np.linalg.norm(Y - Yh) + 1e-12


def test_infinite_activity_tolerance_marks_every_step():
    p = problem(centers=[50.0, 50.0], radii=0.1)
    plan = solve_lower_stage(p)
    part = identify_active_set(plan, p, tol_act=math.inf)
    assert part.active == set(range(1, T + 1)) and part.n_active == T and not part.inactive


def test_plan_states_follow_dynamics():
    for model in dyn.MODELS:
        p = problem(model, centers=[2.5, 0.05], radii=0.3)
        plan = solve_lower_stage(p)
        x = p.x_t
        for k in range(T):
            x = dyn.step(model, x, plan.controls[k], DT)
            assert np.max(np.abs(plan.states[k] - x)) <= 1e-8
        lo, hi = dyn.control_bounds(model)
        assert np.all(plan.controls >= lo - 1e-9) and np.all(plan.controls <= hi + 1e-9)


def test_warm_start_at_optimum_needs_few_iterations():
    p = problem(dyn.DOUBLE_INTEGRATOR, x0=[0, 0, 0, 0])
    plan = solve_lower_stage(p)
    again = solve_lower_stage(p, warm_start=plan.controls)
    assert again.iterations <= 2
    assert again.cost == pytest.approx(plan.cost, abs=1e-8)


def test_feasible_sets_shrink_with_risk(recwarn):
    """Smaller risks give larger radii, so the optimum cost cannot drop (up to local-solver artifacts)."""
    import warnings
    rng = np.random.default_rng(23)
    scores = np.sort(rng.exponential(0.15, size=(T, 200)), axis=1)
    from fbcp.conformal import radii_from_sorted
    artifacts = 0
    for i in range(50):
        centers = np.tile([2.5, rng.uniform(-0.8, 0.8), 3.5, rng.uniform(-1.5, 1.5)], (T, 1))
        a2 = rng.uniform(0.01, 0.05, T)
        a1 = a2 * rng.uniform(0.2, 1.0, T)
        costs = []
        for a in (a1, a2):
            try:
                costs.append(solve_lower_stage(problem(centers=centers, radii=radii_from_sorted(scores, a))).cost)
            except Infeasible:
                costs.append(math.inf)
        if not costs[0] >= costs[1] - 1e-5:
            artifacts += 1
            warnings.warn(f"instance {i}: J(a1)={costs[0]:.6f} < J(a2)={costs[1]:.6f}")
    # local optima may break the ordering on a few instances; a systematic failure would not be an artifact
    assert artifacts <= 5


@pytest.mark.parametrize("model", dyn.MODELS)
def test_returned_plans_are_stationary(model):
    rng = np.random.default_rng(31)
    for _ in range(5):
        centers = [2.5, rng.uniform(-0.5, 0.5), 3.8, rng.uniform(-1.5, 1.5)]
        p = problem(model, centers=centers, radii=rng.uniform(0.05, 0.4))
        try:
            plan = solve_lower_stage(p)
        except Infeasible:
            continue
        assert kkt_residual(p, plan.controls) <= 1e-5
    # a plan that is feasible but wasteful is far from stationary
    p = problem(dyn.DOUBLE_INTEGRATOR, x0=[0, 0, 2, 0])
    U = np.zeros((T, 2))
    U[:3, 1] = [0.5, -1.0, 0.5]  # no net effect on the final state
    assert make_plan(p, U).feasible and kkt_residual(p, U) > 1e-2
