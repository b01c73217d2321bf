import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latticebsde.drivers import (
    INFINITY,
    CompensatedDriver,
    Driver,
    EntropicDriver,
    EntropicSpec,
    FrozenDriver,
    LinearDriver,
    ShiftedDriver,
    SupConvolutionDriver,
    WorstCaseDriver,
    aggregation_constant,
    check_balance,
    check_expectation,
    check_gradient,
    entropic_sup_convolution,
    extract_driver,
    geometric_mixture,
    legendre_b,
    legendre_numeric,
    numeric_argmax,
    zero_driver,
)
from latticebsde.errors import BeliefNotInterior, InconsistentExpectation, NoArgmax, NotConcave
from latticebsde.lattice import basis_from_vectors, theta_min
from latticebsde.scenario import Measure, PredictableField, ScenarioTree, conditional_expectation

from helpers import random_basis, random_kernel


def _entropic(rng, tree, gamma=None, shift=1.0):
    P = Measure(tree, [random_kernel(rng, tree.size(n - 1), tree.branching) for n in range(1, tree.horizon + 1)])
    G = gamma if gamma is not None else [rng.uniform(0.5, 3.0, tree.size(n - 1)) for n in range(1, tree.horizon + 1)]
    if not isinstance(G, (int, float)):
        G = PredictableField(tree, G)
    return EntropicDriver(EntropicSpec(P, G, shift))


@pytest.fixture
def tree2(rng):
    return ScenarioTree(random_basis(rng, 2), 2)


def test_entropic_value_by_hand():
    t = ScenarioTree(basis_from_vectors([[1.0]]), 1)
    drv = EntropicDriver(EntropicSpec.build(t, [0.25, 0.75], 2.0, 1.5))
    z = 0.3
    # v = (-1, 1): -(1/2) log(0.25 e^{0.6} + 0.75 e^{-0.6}) - (1/2) log 1.5
    expected = -0.5 * np.log(0.25 * np.exp(0.6) + 0.75 * np.exp(-0.6)) - 0.5 * np.log(1.5)
    assert drv.value(1, [[z]])[0] == pytest.approx(expected, rel=1e-14)


def test_entropic_argmax_closed_form():
    t = ScenarioTree(basis_from_vectors([[1.0]]), 1)
    drv = EntropicDriver(EntropicSpec.build(t, [0.25, 0.75], 1.0))
    # (1/G) (vv^T)^{-1} v log P = (log 0.75 - log 0.25) / 2
    assert drv.argmax(1)[0, 0] == pytest.approx(np.log(3) / 2, rel=1e-14)
    np.testing.assert_allclose(drv.gradient(1, drv.argmax(1)), 0.0, atol=1e-14)


def test_entropic_rejects_boundary_belief():
    t = ScenarioTree(basis_from_vectors([[1.0]]), 1)
    with pytest.raises(BeliefNotInterior):
        EntropicSpec.build(t, [0.0, 1.0], 1.0)


def test_entropic_gradient_and_balance(rng, tree2):
    drv = _entropic(rng, tree2)
    assert check_gradient(drv, rng=rng) < 1e-7
    rep = check_balance(drv, rng=rng)
    assert rep.balanced and rep.worst_margin >= -1e-9


def test_entropic_argmax_dominates(rng, tree2):
    drv = _entropic(rng, tree2)
    for n in (1, 2):
        zstar = drv.argmax(n)
        top = drv.value(n, zstar)
        for _ in range(20):
            z = zstar + rng.standard_normal(zstar.shape)
            assert np.all(drv.value(n, z) <= top + 1e-12)


def test_entropic_conjugate_matches_numeric(rng, tree2):
    drv = _entropic(rng, tree2, shift=1.3)
    v = tree2.basis.vectors
    for _ in range(5):
        theta = v @ rng.dirichlet(np.ones(3) * 2)
        closed = legendre_b(drv, 1, 0, theta, method="closed")
        numeric = legendre_b(drv, 1, 0, theta, method="numeric")
        assert closed == pytest.approx(numeric, abs=1e-6)
    assert legendre_b(drv, 1, 0, 10 * v[:, 1]) == INFINITY


def test_linear_driver_flags_and_conjugate(tree2):
    v = tree2.basis.vectors
    inside = LinearDriver(tree2, v @ np.array([0.2, 0.3, 0.5]), 0.7)
    assert inside.is_balanced and not inside.has_argmax
    with pytest.raises(NoArgmax):
        inside.argmax(1)
    outside = LinearDriver(tree2, 3 * v[:, 1])
    assert not outside.is_balanced
    assert check_balance(outside, samples=30).violations > 0
    A = inside.slope[1][0]
    assert inside.conjugate(1, A[None])[0] == pytest.approx(0.7)
    assert inside.conjugate(1, (A + 0.1)[None])[0] == INFINITY
    zero = zero_driver(tree2)
    assert zero.has_argmax and np.all(zero.argmax(2) == 0)


def test_worst_case_full_theta(rng, tree2):
    drv = WorstCaseDriver(tree2)
    z = rng.standard_normal((3, 2))
    np.testing.assert_allclose(drv.value(2, z), theta_min(tree2.basis, z)[0])
    assert np.all(drv.conjugate(1, tree2.basis.vectors[:, 0]) == 0.0)
    assert check_balance(drv, rng=rng).balanced


def test_worst_case_finite_set(rng):
    t = ScenarioTree(basis_from_vectors([[1.0]]), 2)
    drv = WorstCaseDriver(t, [[0.3, 0.7], [0.6, 0.4]])
    # thetas 0.4 and -0.2
    np.testing.assert_allclose(drv.value(1, [[1.0]]), [-0.2])
    np.testing.assert_allclose(drv.value(1, [[-1.0]]), [-0.4])
    np.testing.assert_array_equal(drv.selection(1, [[1.0]]), [1])
    assert drv.conjugate(1, [[0.1]])[0] == 0.0
    assert drv.conjugate(1, [[0.5]])[0] == INFINITY
    np.testing.assert_array_equal(drv.argmax(1), [[0.0]])
    one_sided = WorstCaseDriver(t, [[0.3, 0.7], [0.2, 0.8]])
    with pytest.raises(NoArgmax):
        one_sided.argmax(1)


def test_frozen_and_shifted(rng, tree2):
    base = _entropic(rng, tree2)
    sh = ShiftedDriver(base, [0.5, -1.0])
    z = rng.standard_normal((3, 2))
    np.testing.assert_allclose(sh.value(2, z), base.value(2, z) - 1.0)
    assert FrozenDriver(tree2, 2.0).value(1, [[5.0, 5.0]])[0] == 2.0


def test_legendre_requires_concave(tree2):
    class Convex(Driver):
        def value(self, n, z, nodes=None):
            return np.sum(np.asarray(z) ** 2, axis=1)

    with pytest.raises(NotConcave):
        legendre_b(Convex(tree2), 1, 0, [0.0, 0.0])


def test_numeric_argmax_matches_closed_form(rng, tree2):
    drv = _entropic(rng, tree2)
    z, unique = numeric_argmax(drv, 2, rng=rng)
    assert unique
    np.testing.assert_allclose(z, drv.argmax(2), atol=1e-6)


def test_numeric_argmax_flags_flat_maximum():
    t = ScenarioTree(basis_from_vectors([[1.0]]), 1)

    class Plateau(Driver):
        is_smooth = False
        is_concave = True

        def value(self, n, z, nodes=None):
            z = np.asarray(z, dtype=float)[:, 0]
            return -np.maximum(np.abs(z) - 1.0, 0.0)

    _, unique = numeric_argmax(Plateau(t), 1, rng=3)
    assert not unique


def test_geometric_mixture_two_agents():
    p_tilde, C, gamma = geometric_mixture([[0.5, 0.5], [0.25, 0.75]], [2.0, 2.0])
    c = np.sqrt(1 / 8) + np.sqrt(3 / 8)
    assert gamma == 1.0
    assert C == pytest.approx(c, rel=1e-14)
    np.testing.assert_allclose(p_tilde, [np.sqrt(1 / 8) / c, np.sqrt(3 / 8) / c], rtol=1e-14)


def test_geometric_mixture_identical_beliefs():
    _, C, _ = geometric_mixture([[0.2, 0.3, 0.5]] * 3, [1.0, 2.0, 5.0])
    assert C == pytest.approx(1.0, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 5), st.integers(2, 4), st.integers(0, 10_000))
def test_mixture_constant_at_most_one(m, b, seed):
    rng = np.random.default_rng(seed)
    beliefs = rng.dirichlet(np.ones(b), m)
    gammas = rng.uniform(0.1, 10.0, m)
    assert geometric_mixture(beliefs, gammas)[1] <= 1 + 1e-12


def test_sup_convolution_closed_vs_numeric(rng, tree2):
    d1, d2 = _entropic(rng, tree2, 1.0), _entropic(rng, tree2, 2.5)
    closed = EntropicDriver(entropic_sup_convolution([d1.spec, d2.spec]))
    numeric = SupConvolutionDriver([d1, d2])
    assert numeric.is_balanced and numeric.has_argmax
    for n in (1, 2):
        z = rng.standard_normal((tree2.size(n - 1), 2))
        np.testing.assert_allclose(numeric.value(n, z), closed.value(n, z), atol=1e-6)
        np.testing.assert_allclose(numeric.argmax(n), closed.argmax(n), atol=1e-10)
    C = aggregation_constant([d1.spec, d2.spec])
    assert np.all(C[1] <= 1 + 1e-12)


def test_sup_convolution_rejects_non_concave(tree2):
    class Convex(Driver):
        is_concave = False

    with pytest.raises(NotConcave):
        SupConvolutionDriver([zero_driver(tree2), Convex(tree2)])


def _entropic_blackbox(tree, P, gamma):
    def expectation(Y, n):
        Y = np.asarray(Y, dtype=float)
        m = Y.min()
        return m - np.log(conditional_expectation(tree, P, np.exp(-gamma * (Y - m)), n, tree.horizon)) / gamma
    return expectation


def test_extraction_recovers_entropic(rng, tree2):
    P = Measure(tree2, [random_kernel(rng, tree2.size(n - 1), 3) for n in (1, 2)])
    drv = extract_driver(_entropic_blackbox(tree2, P, 1.5), tree2, rng=rng)
    truth = EntropicDriver(EntropicSpec(P, 1.5))
    for n in (1, 2):
        z = rng.standard_normal((tree2.size(n - 1), 2))
        np.testing.assert_allclose(drv.value(n, z), truth.value(n, z), atol=1e-12)
        # repeated nodes take several rounds
        nodes = np.zeros(4, dtype=int)
        zz = rng.standard_normal((4, 2))
        np.testing.assert_allclose(drv.value(n, zz, nodes), truth.value(n, zz, nodes), atol=1e-12)


def test_check_expectation_rejects_scaling(tree2):
    q = Measure.uniform(tree2)

    def doubled(Y, n):
        return 2 * conditional_expectation(tree2, q, Y, n, tree2.horizon)

    with pytest.raises(InconsistentExpectation):
        check_expectation(tree2, doubled, rng=0)


def test_compensated_driver(rng, tree2):
    base = _entropic(rng, tree2)
    P = Measure(tree2, [random_kernel(rng, tree2.size(n - 1), 3) for n in (1, 2)])
    comp = CompensatedDriver(base, P)
    z = rng.standard_normal((3, 2))
    drift = P[2] @ tree2.basis.vectors.T
    np.testing.assert_allclose(comp.value(2, z), base.value(2, z) - np.sum(z * drift, axis=1))


def test_legendre_numeric_returns_maximiser(rng, tree2):
    drv = _entropic(rng, tree2)
    theta = tree2.basis.vectors @ np.array([0.5, 0.3, 0.2])
    f, z = legendre_numeric(drv, 1, 0, theta)
    np.testing.assert_allclose(drv.gradient(1, z[None], np.array([0]))[0], theta, atol=1e-6)
