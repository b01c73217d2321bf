import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latticebsde import bsde
from latticebsde.drivers import (
    CompensatedDriver,
    Driver,
    EntropicDriver,
    EntropicSpec,
    LinearDriver,
    WorstCaseDriver,
    zero_driver,
)
from latticebsde.errors import (
    DepthMismatch,
    DriverEvaluationFailed,
    NotConcave,
    PreconditionUnverifiable,
    SlopeOutsideTheta,
)
from latticebsde.lattice import basis_from_vectors
from latticebsde.scenario import Measure, PredictableField, ScenarioTree, martingale_measure

from helpers import entropic_value, leaf_probabilities, random_basis, random_kernel


def _setup(rng, d=2, N=3):
    tree = ScenarioTree(random_basis(rng, d), N)
    kernels = [random_kernel(rng, tree.size(n - 1), d + 1) for n in range(1, N + 1)]
    return tree, kernels


def test_binomial_linear_example():
    t = ScenarioTree(basis_from_vectors([[1.0]]), 1)
    sol = bsde.solve(t, LinearDriver(t, [0.5]), [-1.0, 1.0])
    # (1 - A)/2 * (-1) + (1 + A)/2 * 1 = A
    assert sol.value == pytest.approx(0.5, abs=1e-15)
    np.testing.assert_allclose(sol.Z[1], [[1.0]])


def test_zero_driver_gives_q_expectation(rng):
    tree, _ = _setup(rng)
    Y = rng.standard_normal(tree.n_leaves)
    sol = bsde.solve(tree, zero_driver(tree), Y)
    assert sol.value == pytest.approx(Y.mean(), abs=1e-13)
    assert sol.residual() < 1e-12


def test_entropic_matches_path_enumeration(rng):
    tree, kernels = _setup(rng)
    Y = rng.standard_normal(tree.n_leaves)
    drv = EntropicDriver(EntropicSpec(Measure(tree, kernels), 1.7))
    sol = bsde.solve(tree, drv, Y)
    assert sol.value == pytest.approx(entropic_value(Y, kernels, 3, 3, 1.7), abs=1e-12)
    assert sol.residual(drv) < 1e-12


def test_conditional_formulas(rng):
    tree, kernels = _setup(rng)
    drv = EntropicDriver(EntropicSpec(Measure(tree, kernels), 0.8))
    sol = bsde.solve(tree, drv, rng.standard_normal(tree.n_leaves))
    chk = bsde.conditional_formulas(tree, sol)
    assert chk.max_residual < 1e-12
    assert set(chk.ybar) == {1, 2, 3}


def test_linear_by_measure_change(rng):
    tree, kernels = _setup(rng)
    v = tree.basis.vectors
    slope = PredictableField(tree, [k @ v.T for k in kernels])
    intercept = PredictableField(tree, [rng.standard_normal(tree.size(n - 1)) for n in range(1, 4)])
    Y = rng.standard_normal(tree.n_leaves)
    direct = bsde.solve(tree, LinearDriver(tree, slope, intercept), Y)
    changed = bsde.solve_linear(tree, slope, intercept, Y)
    for n in range(4):
        np.testing.assert_allclose(changed.Y[n], direct.Y[n], atol=1e-12)
    for n in range(1, 4):
        np.testing.assert_allclose(changed.Z[n], direct.Z[n], atol=1e-12)
    # time-0 value by path enumeration
    w = leaf_probabilities(kernels, 3, 3)
    assert changed.value == pytest.approx(w @ (Y + intercept.lifted_sum()), abs=1e-12)


def test_linear_slope_outside_theta(rng):
    tree, _ = _setup(rng)
    with pytest.raises(SlopeOutsideTheta):
        bsde.solve_linear(tree, 5 * tree.basis.vectors[:, 0], 0.0, np.zeros(tree.n_leaves))


def test_translation(rng):
    tree, kernels = _setup(rng)
    drv = EntropicDriver(EntropicSpec(Measure(tree, kernels), 1.1))
    B = PredictableField(tree, [rng.standard_normal(tree.size(n - 1)) for n in range(1, 4)])
    Y = rng.standard_normal(tree.n_leaves)
    assert bsde.translation_gap(tree, drv, B, Y) < 1e-12
    sol = bsde.translate(tree, drv, B, Y)
    assert sol.residual() < 1e-12


def test_compensated_route(rng):
    tree, kernels = _setup(rng)
    P = Measure(tree, kernels)
    drv = EntropicDriver(EntropicSpec(P, 2.0))
    Y = rng.standard_normal(tree.n_leaves)
    a = bsde.solve(tree, drv, Y)
    b = bsde.solve_compensated(tree, CompensatedDriver(drv, P), Y, P)
    for n in range(4):
        np.testing.assert_allclose(b.Y[n], a.Y[n], atol=1e-12)


def test_terminal_shape_checked(rng):
    tree, _ = _setup(rng)
    with pytest.raises(DepthMismatch):
        bsde.solve(tree, zero_driver(tree), np.zeros(5))


def test_driver_failures_wrapped(rng):
    tree, _ = _setup(rng)

    class Broken(Driver):
        def value(self, n, z, nodes=None):
            raise ZeroDivisionError("boom")

    class NaNs(Driver):
        def value(self, n, z, nodes=None):
            return np.full(len(z), np.nan)

    for drv in (Broken(tree), NaNs(tree)):
        with pytest.raises(DriverEvaluationFailed):
            bsde.solve(tree, drv, np.zeros(tree.n_leaves))


def test_compare_holds_and_preconditions(rng):
    tree, kernels = _setup(rng)
    P = Measure(tree, kernels)
    ent = EntropicDriver(EntropicSpec(P, 1.0))
    worst = WorstCaseDriver(tree)
    Y1 = rng.standard_normal(tree.n_leaves)
    Y2 = Y1 - rng.random(tree.n_leaves)
    rep = bsde.compare(tree, ent, worst, Y1, Y2, rng=rng)
    assert rep.holds and rep.min_margin >= -1e-10
    with pytest.raises(PreconditionUnverifiable):
        bsde.compare(tree, ent, worst, Y2, Y1)
    with pytest.raises(PreconditionUnverifiable):
        bsde.compare(tree, worst, ent, Y1, Y2, rng=rng)


def test_robust_entropic_certificate(rng):
    tree, kernels = _setup(rng)
    drv = EntropicDriver(EntropicSpec(Measure(tree, kernels), 1.3, 0.9))
    res = bsde.robust_representation(tree, drv, rng.standard_normal(tree.n_leaves), rng=rng)
    assert res.gap < 1e-9
    assert res.alternatives_margin > 0
    assert res.certified


def test_robust_worst_case(rng):
    tree, _ = _setup(rng)
    Y = rng.standard_normal(tree.n_leaves)
    res = bsde.robust_representation(tree, WorstCaseDriver(tree), Y, rng=rng)
    # over all of Theta the value is the worst path
    assert res.value == pytest.approx(Y.min(), abs=1e-12)
    assert res.penalty == 0.0
    assert res.gap < 1e-12


def test_robust_needs_concavity(rng):
    tree, _ = _setup(rng)

    class Flat(Driver):
        is_concave = False

    with pytest.raises(NotConcave):
        bsde.robust_representation(tree, Flat(tree), np.zeros(tree.n_leaves))


def test_penalty_skips_null_branches():
    t = ScenarioTree(basis_from_vectors([[1.0]]), 2)
    m = Measure(t, [np.array([[0.0, 1.0]]), np.array([[0.5, 0.5], [1.0, 0.0]])])
    pen = PredictableField(t, [np.array([1.0]), np.array([np.inf, 2.0])])
    assert bsde.penalty(m, pen)[0] == 3.0


def test_solution_csv_round_trip(tmp_path, rng):
    tree, kernels = _setup(rng)
    drv = EntropicDriver(EntropicSpec(Measure(tree, kernels), 1.0))
    sol = bsde.solve(tree, drv, rng.standard_normal(tree.n_leaves))
    bsde.write_solution_csv(sol, tmp_path / "s.csv")
    back = bsde.read_solution_csv(tree, tmp_path / "s.csv", drv)
    for n in range(4):
        np.testing.assert_array_equal(back.Y[n], sol.Y[n])
    assert back.residual() < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 2), st.integers(1, 4), st.floats(-50, 50), st.integers(0, 10_000))
def test_cash_additivity(d, N, c, seed):
    rng = np.random.default_rng(seed)
    tree = ScenarioTree(random_basis(rng, d), N)
    P = Measure(tree, [random_kernel(rng, tree.size(n - 1), d + 1) for n in range(1, N + 1)])
    drv = EntropicDriver(EntropicSpec(P, rng.uniform(0.1, 3)))
    Y = rng.standard_normal(tree.n_leaves)
    assert bsde.solve(tree, drv, Y + c).value == pytest.approx(bsde.solve(tree, drv, Y).value + c, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 2), st.integers(1, 4), st.integers(0, 10_000))
def test_monotone_and_concave(d, N, seed):
    rng = np.random.default_rng(seed)
    tree = ScenarioTree(random_basis(rng, d), N)
    P = Measure(tree, [random_kernel(rng, tree.size(n - 1), d + 1) for n in range(1, N + 1)])
    drv = EntropicDriver(EntropicSpec(P, rng.uniform(0.1, 3)))
    Y1, Y2 = rng.standard_normal((2, tree.n_leaves))
    e = lambda Y: bsde.solve(tree, drv, Y).value
    assert e(np.maximum(Y1, Y2)) >= max(e(Y1), e(Y2)) - 1e-12
    lam = rng.random()
    assert e(lam * Y1 + (1 - lam) * Y2) >= lam * e(Y1) + (1 - lam) * e(Y2) - 1e-12
    assert e(np.zeros(tree.n_leaves)) == pytest.approx(0.0, abs=1e-13)


def test_q_expectation_is_martingale_measure(rng):
    tree, _ = _setup(rng, d=1, N=4)
    Y = rng.standard_normal(tree.n_leaves)
    assert bsde.g_expectation(tree, zero_driver(tree), Y)[0] == pytest.approx(
        martingale_measure(tree).expectation(Y), abs=1e-14)
    np.testing.assert_array_equal(bsde.g_expectation(tree, zero_driver(tree), Y, 4), Y)
