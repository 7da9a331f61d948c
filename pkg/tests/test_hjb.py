import math

import numpy as np
import pytest
from scipy.special import erfcx

from queuecontrol.costs import (
    ParameterError,
    legendre_derivative,
    legendre_eval,
    make_custom_cost,
    make_exponential_cost,
    make_inverse_cost,
    make_reciprocal_cost,
)
from queuecontrol.hjb import (
    Classification,
    DcpParams,
    ShootingConfig,
    SolverError,
    check_solution,
    classify_sweep,
    comparison_violation,
    evaluate_policy,
    integrate_W,
    locate_r_star,
    shoot_r_star,
    solve_zero_control,
    sweep_is_ordered,
    trichotomy_ok,
)
from queuecontrol.experiments import verification_gap

from conftest import REFERENCE

# frozen from a converged run at h = 1e-4 (x_max = 20); see test_r_star_refinement for the h-dependence
R_STAR = 0.9779237917944761
Q0 = 2.021698956768116
U0 = 1.2533141357486672


# -- parameters -------------------------------------------------------------------


@pytest.mark.parametrize("field", ["sigma", "theta", "alpha", "p"])
@pytest.mark.parametrize("value", [0.0, -1.0, 1e-9, float("nan")])
def test_params_reject_degenerate(field, value):
    kw = dict(REFERENCE)
    kw[field] = value
    with pytest.raises(ParameterError):
        DcpParams(cost=make_exponential_cost(5.0), **kw)


def test_params_reject_inadmissible_cost():
    with pytest.raises(ParameterError):
        DcpParams(cost=make_inverse_cost(allow_inadmissible=True), **REFERENCE)


def test_shooting_config_validation(params):
    with pytest.raises(ParameterError):
        ShootingConfig(h=0.0)
    with pytest.raises(ParameterError):
        ShootingConfig(r_tolerance=-1.0)
    with pytest.raises(ParameterError):
        ShootingConfig(x_max=5.0).resolved_x_max(params)
    assert ShootingConfig().resolved_x_max(params) == 20.0


# -- single trajectories ----------------------------------------------------------


def test_r_zero_is_local_max_at_origin(params, shooting):
    o = integrate_W(params, shooting, 0.0)
    assert o.classification is Classification.LOCAL_MAX
    assert o.x_event == 0.0
    assert o.W[0] == -1.0


def test_small_r_is_local_max_below_zero(params, shooting):
    o = integrate_W(params, shooting, 1e-3)
    assert o.classification is Classification.LOCAL_MAX
    assert np.all(o.W < 0)
    assert o.Wp[-1] <= 0 < o.Wp[0]


@pytest.mark.parametrize("ext", [True, False])
def test_large_r_hits_zero(params, shooting, ext):
    o = integrate_W(params, shooting, 50.0, use_extension=ext)
    assert o.classification is Classification.HIT_ZERO
    assert 0 < o.x_event < 0.1
    assert o.crossing_slope > shooting.w_zero_tolerance
    assert o.W[-2] < 0 <= o.W[-1]


def test_trajectory_at_r_star_is_bounded_for_a_while(params, shooting):
    # a single forward march follows the bounded solution for several units
    o = integrate_W(params, shooting, R_STAR)
    assert o.x_event > 3.0


def test_integrate_rejects_negative_r(params, shooting):
    with pytest.raises(ParameterError):
        integrate_W(params, shooting, -1.0)


def test_integral_form_is_satisfied(params, shooting):
    # sigma^2/2 W' = F(W) + theta x W + alpha int W + alpha K_r on the samples
    r = 0.9
    o = integrate_W(params, shooting, r)
    aK = 0.5 * r - legendre_eval(params.cost, -1.0)
    rhs = (legendre_eval(params.cost, o.W) + params.theta * o.x * o.W + params.alpha * o.I + aK) / 0.5
    assert np.max(np.abs(rhs - o.Wp)) < 1e-12
    # trapezoid running integral
    trap = np.concatenate(([0.0], np.cumsum(0.5 * shooting.h * (o.W[1:] + o.W[:-1]))))
    assert np.max(np.abs(trap - o.I)) < 1e-12


# -- sweeps -----------------------------------------------------------------------


def test_sweep_singleton():
    p = DcpParams(cost=make_exponential_cost(5.0), **REFERENCE)
    (o,) = classify_sweep(p, ShootingConfig(), [0.0])
    assert o.classification is Classification.LOCAL_MAX


def test_sweep_requires_sorted(params, shooting):
    with pytest.raises(ParameterError):
        classify_sweep(params, shooting, [1.0, 0.5])
    with pytest.raises(ParameterError):
        classify_sweep(params, shooting, [])


@pytest.fixture(scope="module")
def sweep(params, shooting):
    r = np.concatenate((np.linspace(0, 2, 21), [R_STAR * 0.999, R_STAR * 1.001, 5.0, 20.0, 50.0]))
    return classify_sweep(params, shooting, np.sort(r))


def test_sweep_dichotomy(sweep):
    cls = [o.classification for o in sweep]
    assert Classification.LOCAL_MAX in cls and Classification.HIT_ZERO in cls
    assert sweep_is_ordered(sweep)
    for o in sweep:
        expected = Classification.LOCAL_MAX if o.r < R_STAR else Classification.HIT_ZERO
        assert o.classification is expected


def test_sweep_comparison_ordering(sweep):
    assert comparison_violation(sweep) <= 1e-9


def test_comparison_ordering_strict_for_local_max_pair(sweep):
    lm = [o for o in sweep if o.classification is Classification.LOCAL_MAX and o.r > 0]
    a, b = lm[0], lm[-1]
    m = min(len(a.W), len(b.W))
    assert np.all(a.Wp[:m] < b.Wp[:m])
    assert np.all(a.W[1:m] < b.W[1:m]) and a.W[0] == b.W[0]
    assert np.all(a.Y[:m] < b.Y[:m])


def test_sweep_crossings_not_tangential(sweep, shooting):
    for o in sweep:
        if o.classification is Classification.HIT_ZERO:
            assert o.crossing_slope > shooting.w_zero_tolerance
        assert trichotomy_ok(o)


def test_sweep_ordered_helper():
    class O:
        def __init__(self, c):
            self.classification = c
    LM, HZ = Classification.LOCAL_MAX, Classification.HIT_ZERO
    assert sweep_is_ordered([O(LM), O(LM), O(HZ)])
    assert not sweep_is_ordered([O(LM), O(HZ), O(LM)])


# -- r* and the value function -------------------------------------------------------


def test_r_star_matches_frozen_value(solution):
    assert solution.r_star == pytest.approx(R_STAR, abs=1e-12)
    lo, hi = solution.r_bracket
    assert lo <= solution.r_star <= hi and hi - lo < 1e-9


def test_r_star_refinement(params, shooting):
    lo_half, _ = locate_r_star(params, ShootingConfig(h=shooting.h / 2))
    assert abs(lo_half - R_STAR) < 10 * shooting.r_tolerance


def test_value_function_invariants(solution):
    Q, W = solution.Q, solution.Qp
    assert W[0] == -1.0
    assert np.all(W >= -1.0) and np.all(W < 0)
    assert np.all(Q > 0) and np.all(np.diff(Q) < 0)
    assert (Q[2:] - 2 * Q[1:-1] + Q[:-2]).min() >= -1e-8
    assert solution.max_residual <= 1e-6
    assert np.all(np.diff(W) > 0)  # W' > 0 along the bounded solution


def test_value_at_origin_is_K(solution, params):
    K = (0.5 * solution.r_star - legendre_eval(params.cost, -1.0)) / params.alpha
    assert solution.Q[0] == pytest.approx(K, abs=1e-14)
    assert solution.K_r_star == pytest.approx(K, abs=1e-14)
    assert solution.Q[0] == pytest.approx(Q0, abs=1e-10)


def test_continuation_offsets_are_negligible(solution):
    assert solution.offset_total < 1e-9
    assert solution.stages[-1].x_end == pytest.approx(solution.x_max)


def test_hjb_residual_recomputed(solution, params):
    h = solution.h
    x, Q, W = solution.x, solution.Q, solution.Qp
    Qpp = (Q[2:] - 2 * Q[1:-1] + Q[:-2]) / h ** 2
    r = 0.5 * Qpp - legendre_eval(params.cost, W[1:-1]) - 0.5 * x[1:-1] * W[1:-1] - 0.5 * Q[1:-1]
    assert np.max(np.abs(r)) <= 1e-6


def test_verification_inequality(solution):
    assert verification_gap(solution, (0.0, 0.25, 1.0, 4.0)) >= -1e-6


def test_policy_values(solution, params):
    assert evaluate_policy(solution, 0.0) == pytest.approx(-0.2 * math.log(0.2), abs=1e-12)
    xs = np.linspace(0, 25, 2001)
    u = evaluate_policy(solution, xs)
    assert np.all(u >= 0) and np.all(np.diff(u) >= 0)
    assert evaluate_policy(solution, 30.0) == evaluate_policy(solution, solution.x_max)
    with pytest.raises(ParameterError):
        evaluate_policy(solution, -1.0)


def test_policy_zero_where_slope_below_cprime0():
    # with a shallow cost (C'(0) = -0.5) and p = 1, Q'(0) = -1 <= C'(0) forces u*(0) = 0
    p = DcpParams(cost=make_exponential_cost(0.5), **REFERENCE)
    sol = shoot_r_star(p)
    assert sol.Qp[0] <= p.cost.slope_at_zero
    assert evaluate_policy(sol, 0.0) == 0.0
    mask = sol.Qp <= p.cost.slope_at_zero
    assert np.all(sol.ustar[mask] == 0.0)


def test_check_solution_names_violation(solution):
    import copy
    bad = copy.copy(solution)
    bad.Qp = solution.Qp.copy()
    bad.Qp[0] = -0.9
    with pytest.raises(SolverError, match="boundary slope"):
        check_solution(bad)


def test_to_records(solution):
    rec = solution.to_records()
    assert set(rec) == {"x", "W", "Q", "Qp", "ustar"}
    assert all(len(v) == len(solution.x) for v in rec.values())


# -- other costs and the zero-control equation -----------------------------------------


def test_reciprocal_cost_solves():
    p = DcpParams(cost=make_reciprocal_cost(), **REFERENCE)
    sol = shoot_r_star(p)
    assert sol.max_residual <= 1e-6 and sol.Qp[0] == -1.0


def test_custom_cost_agrees_with_builtin():
    beta = 5.0
    custom = make_custom_cost(lambda u: math.exp(-beta * u), lambda u: -beta * math.exp(-beta * u),
                              lambda u: beta * beta * math.exp(-beta * u))
    p = DcpParams(cost=custom, **REFERENCE)
    lo, hi = locate_r_star(p, ShootingConfig(h=4e-4))
    ref = DcpParams(cost=make_exponential_cost(beta), **REFERENCE)
    lo_ref, _ = locate_r_star(ref, ShootingConfig(h=4e-4))
    assert lo == pytest.approx(lo_ref, abs=1e-9)


def test_zero_control_solution(zero_solution):
    U = zero_solution.Q
    assert zero_solution.Qp[0] == -1.0
    assert np.all(zero_solution.Qp < 0) and np.all(U > 0) and np.all(np.diff(U) < 0)
    assert zero_solution.max_residual <= 1e-6
    assert U[0] == pytest.approx(U0, abs=1e-9)
    assert np.all(zero_solution.ustar == 0)


def test_zero_control_closed_form(params, zero_solution):
    # with theta = alpha, U(x) = exp(a x^2) int_x^inf exp(-a s^2) ds, a = theta / sigma^2,
    # solves sigma^2/2 U'' - theta x U' - alpha U = 0 with U'(0) = -1
    a = params.theta / params.sigma ** 2
    x = zero_solution.x
    exact = 0.5 * math.sqrt(math.pi / a) * erfcx(math.sqrt(a) * x)
    assert U0 == pytest.approx(math.sqrt(math.pi / (4 * a)), abs=1e-8)
    assert np.max(np.abs(zero_solution.Q - exact)) < 1e-8


def test_zero_control_dominates_value(solution, zero_solution, params):
    # J(x, 0) = C(0)/alpha + p U(x) >= Q(x)
    J0 = params.cost.cost_at_zero / params.alpha + params.p * zero_solution.Q
    assert np.all(J0 >= solution.Q)
