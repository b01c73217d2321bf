import numpy as np
import pytest

from latticebsde.drivers import Driver, EntropicDriver, EntropicSpec, LinearDriver, WorstCaseDriver
from latticebsde.errors import NoArgmax, ValidationError
from latticebsde.lattice import basis_from_vectors, kl_divergence
from latticebsde.portfolio import (
    driver_argmax,
    hedge,
    merton_term,
    optimal_invest,
    replication_residual,
    utility_of,
    variance_swap_basis,
    variance_swap_market,
    wealth,
)
from latticebsde.scenario import Measure, PredictableField, ScenarioTree

from helpers import leaf_positions, random_basis, random_kernel


@pytest.fixture
def binomial():
    return ScenarioTree(basis_from_vectors([[1.0]]), 3)


def test_binomial_entropic_investment(binomial):
    gamma = 2.0
    spec = EntropicSpec.build(binomial, [0.25, 0.75], gamma)
    res = optimal_invest(binomial, EntropicDriver(spec), certify=50, rng=0)
    np.testing.assert_allclose(res.z_dagger[2], np.log(3) / (2 * gamma), rtol=1e-14)
    # three steps of KL(Q || P)/gamma with KL = 0.5 log(4/3)
    assert res.value == pytest.approx(3 * 0.5 * np.log(4 / 3) / gamma, abs=1e-13)
    assert res.certified and res.certificate_margin > 0
    assert res.y_star[0][0] == pytest.approx(res.value, abs=1e-13)


def test_time_varying_beliefs_value(binomial):
    P = [[0.3, 0.7], [0.6, 0.4], [0.5, 0.5]]
    G = [0.5, 1.0, 4.0]
    spec = EntropicSpec.build(binomial, P, G)
    res = optimal_invest(binomial, EntropicDriver(spec), certify=0)
    expected = sum(kl_divergence([0.5, 0.5], p) / g for p, g in zip(P, G))
    assert res.value == pytest.approx(expected, abs=1e-13)
    assert res.certificate_margin is None and res.certified


def test_hedge_replicates(rng):
    tree = ScenarioTree(random_basis(rng, 2), 3)
    H = rng.standard_normal(tree.n_leaves)
    price, z = hedge(tree, H)
    assert price == pytest.approx(H.mean(), abs=1e-13)
    np.testing.assert_allclose(price + wealth(tree, z), H, atol=1e-12)
    assert replication_residual(tree, H) < 1e-12


def test_optimal_with_endowment_beats_random(rng):
    tree = ScenarioTree(random_basis(rng, 2), 2)
    P = Measure(tree, [random_kernel(rng, tree.size(n - 1), 3) for n in (1, 2)])
    drv = EntropicDriver(EntropicSpec(P, 1.5))
    H = rng.standard_normal(tree.n_leaves)
    res = optimal_invest(tree, drv, H, w=0.7, certify=100, rng=rng)
    assert res.certificate_margin >= -1e-9
    # Y* is the g-expectation of the optimal position, conditional at every time
    assert res.y_star[0][0] + 0.7 == pytest.approx(res.value, abs=1e-12)
    assert utility_of(tree, drv, H, res.pi_star, 0.7) == pytest.approx(res.value)


def test_worst_case_invests_nothing_extra(rng):
    tree = ScenarioTree(random_basis(rng, 1), 3)
    H = rng.standard_normal(tree.n_leaves)
    res = optimal_invest(tree, WorstCaseDriver(tree), H, certify=30, rng=rng)
    for n in (1, 2, 3):
        np.testing.assert_allclose(res.pi_star[n], -res.z_hedge[n], atol=1e-14)
    assert res.value == pytest.approx(H.mean(), abs=1e-12)


def test_argmax_required(binomial):
    drv = LinearDriver(binomial, [0.2])
    with pytest.raises(NoArgmax):
        driver_argmax(drv)


def test_non_unique_argmax_warns(binomial):
    class Plateau(Driver):
        is_smooth = False
        is_concave = True

        def value(self, n, z, nodes=None):
            return -np.maximum(np.abs(np.asarray(z, dtype=float)[:, 0]) - 1.0, 0.0)

    with pytest.warns(RuntimeWarning):
        res = optimal_invest(binomial, Plateau(binomial), certify=0, numeric=True, rng=1)
    assert not res.unique


def test_merton_term_binomial(binomial):
    spec = EntropicSpec.build(binomial, [0.25, 0.75], 1.0)
    m = merton_term(spec)
    np.testing.assert_allclose(m.exact[1], [[np.log(3) / 2]], rtol=1e-14)
    # v P = 0.5 and v v^T = 2
    np.testing.assert_allclose(m.approximate[1], [[0.25]], rtol=1e-14)
    assert m.gap == pytest.approx(np.log(3) / 2 - 0.25, rel=1e-13)


def test_merton_term_small_tilts(binomial):
    gaps = []
    for eps in (1e-2, 1e-3):
        spec = EntropicSpec.build(binomial, [0.5 - eps, 0.5 + eps], 1.0)
        gaps.append(merton_term(spec).gap)
    # exact ~ 2 eps, approximate ~ eps/2: the gap is first order
    assert gaps[0] / gaps[1] == pytest.approx(10.0, rel=1e-3)


def test_variance_swap_identity():
    tree, worst = variance_swap_market(0.5, 6)
    assert worst == 0.0
    np.testing.assert_allclose(tree.basis.vectors[:, 0], [0.0, -1.0])
    # independent enumeration of the second coordinate
    pos = leaf_positions(tree.basis, 6)
    words_nonzero = np.array([sum(1 for j in w if j) for w in np.ndindex(*(3,) * 6)])
    np.testing.assert_array_equal(pos[:, 1], 0.5 * (3 * words_nonzero - 12))


def test_variance_swap_zero_c():
    with pytest.raises(ValidationError):
        variance_swap_basis(0.0)


def test_random_strategy_field_shapes(binomial, rng):
    z = PredictableField.constant(binomial, [1.0])
    assert wealth(binomial, z, 2.0, upto=1).tolist() == [1.0, 3.0]
