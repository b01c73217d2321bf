"""Monetary utility maximisation over self-financing strategies.

The market is complete: every terminal payoff is ``E_Q[H] + sum Z^H_n . Delta X_n``.
Given a maximiser ``Z^dag_n`` of each ``g_n``, the optimal strategy is
``pi* = Z^dag - Z^H - Z^g`` where ``Z^g`` hedges ``sum_i g_i(Z^dag_i)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import bsde
from .drivers import Driver, EntropicSpec, numeric_argmax, zero_driver
from .errors import NoArgmax, ValidationError
from .lattice import basis_from_vectors
from .scenario import AdaptedField, PredictableField, ScenarioTree, martingale_measure

CERTIFY_TOL = 1e-9


def hedge(tree: ScenarioTree, H) -> tuple[float, PredictableField]:
    """Price ``E_Q[H]`` and the replicating strategy ``Z^H``."""
    q = martingale_measure(tree)
    sol = bsde.solve(tree, zero_driver(tree), H)
    price = q.expectation(np.asarray(H, dtype=float))
    return price, sol.Z


def wealth(tree: ScenarioTree, strategy: PredictableField, w: float = 0.0, upto: int | None = None) -> np.ndarray:
    """``W_n(w, pi) = w + sum_{k<=n} pi_k . Delta X_k`` at depth ``upto`` (default ``N``)."""
    return w + strategy.pathwise_integral(upto)


def replication_residual(tree: ScenarioTree, H) -> float:
    """Largest ``|E_Q[H] + W_N(0, Z^H) - H|`` over paths."""
    price, z = hedge(tree, H)
    return float(np.abs(price + wealth(tree, z) - np.asarray(H, dtype=float)).max())


@dataclass
class InvestmentResult:
    pi_star: PredictableField
    z_dagger: PredictableField
    z_hedge: PredictableField
    z_g: PredictableField
    value: float
    y_star: AdaptedField
    unique: bool = True
    certificate_margin: float | None = None
    certificate_samples: int = 0

    @property
    def certified(self) -> bool:
        return self.certificate_margin is None or self.certificate_margin >= -CERTIFY_TOL


def driver_argmax(driver: Driver, numeric: bool = False, rng=None):
    """``Z^dag`` for every time, closed form when the driver has one.

    Returns ``(field, unique)``. ``numeric=True`` allows the numeric search
    for drivers without a closed form.
    """
    tree = driver.tree
    out, unique = [], True
    for n in range(1, tree.horizon + 1):
        if driver.has_argmax:
            out.append(driver.argmax(n))
        elif numeric:
            z, u = numeric_argmax(driver, n, rng=rng)
            unique &= u
            out.append(z)
        else:
            raise NoArgmax(f"{type(driver).__name__} exposes no maximiser; pass numeric=True to search")
    return PredictableField(tree, out), unique


def random_strategy(tree: ScenarioTree, rng, scale: float = 1.0) -> PredictableField:
    return PredictableField(tree, [scale * rng.standard_normal((tree.size(n - 1), tree.dim))
                                   for n in range(1, tree.horizon + 1)])


def utility_of(tree: ScenarioTree, driver: Driver, H, strategy: PredictableField, w: float = 0.0) -> float:
    """``E^g_0(H + W_N(w, pi))``."""
    return bsde.solve(tree, driver, np.asarray(H, dtype=float) + wealth(tree, strategy, w)).value


def optimal_invest(tree: ScenarioTree, driver: Driver, H=None, w: float = 0.0, certify: int = 200,
                   numeric: bool = False, rng=None) -> InvestmentResult:
    """Optimal strategy, value and ``Y*`` for the endowment ``H``.

    ``certify`` random strategies (standard normal, scaled by cycling
    factors) are checked not to beat the returned value by more than
    ``1e-9``; ``certify=0`` skips the check.
    """
    H = np.zeros(tree.n_leaves) if H is None else np.asarray(H, dtype=float)
    rng = np.random.default_rng(rng)
    z_dag, unique = driver_argmax(driver, numeric=numeric, rng=rng)
    if not unique:
        warnings.warn("driver maximiser is not unique; returning the lowest-norm one", RuntimeWarning,
                      stacklevel=2)
    g_dag = PredictableField(tree, [driver.value(n, z_dag[n]) for n in range(1, tree.horizon + 1)])
    _, z_hedge = hedge(tree, H)
    zero = zero_driver(tree)
    g_sol = bsde.solve(tree, zero, g_dag.lifted_sum())
    z_g = g_sol.Z
    pi = PredictableField(tree, [z_dag[n] - z_hedge[n] - z_g[n] for n in range(1, tree.horizon + 1)])

    # Y*_n = E_Q[H | F_n] + sum_{i>n} E_Q[g_i(Z^dag_i) | F_n]
    h_sol = bsde.solve(tree, zero, H)
    y_star = []
    done = np.zeros(1)
    for n in range(tree.horizon + 1):
        if n > 0:
            done = tree.lift(done, n - 1, n) + tree.lift(g_dag[n], n - 1, n)
        y_star.append(h_sol.Y[n] + g_sol.Y[n] - done)
    y_star = AdaptedField(tree, y_star)

    value = utility_of(tree, driver, H, pi, w)
    margin = None
    if certify:
        scales = (0.1, 1.0, 10.0)
        best = -np.inf
        for k in range(certify):
            alt = random_strategy(tree, rng, scales[k % 3])
            best = max(best, utility_of(tree, driver, H, alt, w))
        margin = value - best
    return InvestmentResult(pi, z_dag, z_hedge, z_g, value, y_star, unique, margin, certify)


@dataclass
class MertonTerm:
    exact: PredictableField
    approximate: PredictableField
    gap: float


def merton_term(spec: EntropicSpec, tree: ScenarioTree | None = None) -> MertonTerm:
    """``Z^dag_n = (1/G)(vv^T)^{-1} v log P_n`` next to ``(1/G)(vv^T)^{-1} v P_n``.

    The second is the usual mean-over-variance approximation; ``gap`` is the
    largest componentwise difference.
    """
    tree = spec.tree if tree is None else tree
    basis = tree.basis
    exact, approx = [], []
    for n in range(1, tree.horizon + 1):
        G = spec.risk_aversion[n][:, None]
        P = spec.belief[n]
        exact.append(np.log(P) @ basis.projector.T / G)
        approx.append(P @ basis.vectors.T @ basis.gram_inv.T / G)
    exact, approx = PredictableField(tree, exact), PredictableField(tree, approx)
    gap = max(float(np.abs(exact[n] - approx[n]).max()) for n in range(1, tree.horizon + 1))
    return MertonTerm(exact, approx, gap)


def variance_swap_basis(c: float):
    """Basis with ``v_1 = (1, c)``, ``v_2 = (-1, c)`` so that ``v_0 = (0, -2c)``."""
    if c == 0:
        raise ValidationError("c must be nonzero")
    return basis_from_vectors([[1.0, c], [-1.0, c]])


def variance_swap_market(c: float, horizon: int):
    """Tree for the two-asset variance swap market and the worst deviation from the identity.

    The second coordinate must equal ``c (3 sum_k |Delta X_{k,1}|^2 - 2n)`` on
    every path; the comparison is made on the integer counts, so it is exact.
    """
    tree = ScenarioTree(variance_swap_basis(c), horizon)
    worst = 0.0
    for n in range(1, horizon + 1):
        words = tree.words(n)
        # |Delta X_{k,1}|^2 is 0 for letter 0 and 1 otherwise
        moves = np.sum(words != 0, axis=1)
        expected = c * (3 * moves - 2 * n)
        worst = max(worst, float(np.abs(tree.positions(n)[:, 1] - expected).max()))
    return tree, worst
