"""Backward solver for ``Delta Y_n = -g_n(Z_n) + Z_n . Delta X_n`` on the path tree.

The solver is a single backward sweep. At a depth ``n-1`` node the child
values ``y_0..y_d`` are split as ``a 1 + v^T z``; then ``Z_n = z`` and
``Y_{n-1} = a + g_n(z)``. Everything else in this module is built on that
sweep, or checks it against an independent route.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .drivers import INFINITY, Driver, ShiftedDriver, legendre_b
from .errors import (
    DepthMismatch,
    DriverEvaluationFailed,
    LatticeBSDEError,
    NotConcave,
    PenaltyDiverged,
    PreconditionUnverifiable,
    SlopeOutsideTheta,
)
from .lattice import CONTAINMENT_TOL, affine_decompose
from .scenario import (
    AdaptedField,
    Measure,
    PredictableField,
    ScenarioTree,
    as_predictable,
    conditional_expectation,
    martingale_measure,
)

RESIDUAL_TOL = 1e-10
CERTIFICATE_TOL = 1e-6


@dataclass
class Solution:
    """Pair ``(Y, Z)``; ``g_values[n]`` keeps ``g_n(Z_n)`` as evaluated during the sweep."""

    tree: ScenarioTree
    Y: AdaptedField
    Z: PredictableField
    g_values: PredictableField

    @property
    def value(self) -> float:
        return float(self.Y[0][0])

    def residual(self, driver: Driver | None = None) -> float:
        """Largest ``|Delta Y_n + g_n(Z_n) - Z_n . Delta X_n|`` over all nodes.

        With ``driver`` given, ``g_n(Z_n)`` is re-evaluated rather than read
        from ``g_values``.
        """
        tree = self.tree
        worst = 0.0
        for n in range(1, tree.horizon + 1):
            g = self.g_values[n] if driver is None else driver.value(n, self.Z[n])
            prev = tree.lift(self.Y[n - 1], n - 1, n)
            zdx = np.einsum("ij,ij->i", tree.lift(self.Z[n], n - 1, n), tree.increments(n))
            r = self.Y[n] - prev + tree.lift(g, n - 1, n) - zdx
            worst = max(worst, float(np.abs(r).max()))
        return worst


def _terminal(tree: ScenarioTree, terminal) -> np.ndarray:
    if isinstance(terminal, AdaptedField):
        terminal = terminal.terminal
    terminal = np.asarray(terminal, dtype=float)
    if terminal.shape != (tree.n_leaves,):
        raise DepthMismatch(f"terminal must have {tree.n_leaves} leaf values, got shape {terminal.shape}")
    return terminal


def _eval(driver: Driver, n: int, z: np.ndarray) -> np.ndarray:
    try:
        g = np.asarray(driver.value(n, z), dtype=float)
    except LatticeBSDEError:
        raise
    except Exception as exc:  # user-supplied drivers may raise anything
        raise DriverEvaluationFailed(f"driver failed at time {n}: {exc}") from exc
    if g.shape != (z.shape[0],) or not np.all(np.isfinite(g)):
        raise DriverEvaluationFailed(f"driver returned non-finite or misshapen values at time {n}")
    return g


def solve(tree: ScenarioTree, driver: Driver, terminal) -> Solution:
    """Solve the backward equation with ``Y_N = terminal``."""
    Y_N = _terminal(tree, terminal)
    b = tree.branching
    Y = [None] * (tree.horizon + 1)
    Z = [None] * tree.horizon
    G = [None] * tree.horizon
    Y[-1] = Y_N
    for n in range(tree.horizon, 0, -1):
        a, z = affine_decompose(tree.basis, Y[n].reshape(-1, b))
        g = _eval(driver, n, z)
        Z[n - 1], G[n - 1] = z, g
        Y[n - 1] = a + g
    return Solution(tree, AdaptedField(tree, Y), PredictableField(tree, Z), PredictableField(tree, G))


def g_expectation(tree: ScenarioTree, driver: Driver, terminal, n: int = 0) -> np.ndarray:
    """``E^g_n(terminal)`` as a depth-``n`` slice."""
    if n == tree.horizon:
        return _terminal(tree, terminal).copy()
    return solve(tree, driver, terminal).Y[n]


@dataclass
class FormulaCheck:
    """Conditional formulas re-derived from a solution.

    ``ybar[n]`` has one row per depth ``n-1`` node holding the child values.
    """

    ybar: dict = field(default_factory=dict)
    value_residual: float = 0.0
    z_residual: float = 0.0
    z_alt_residual: float = 0.0

    @property
    def max_residual(self) -> float:
        return max(self.value_residual, self.z_residual, self.z_alt_residual)


def conditional_formulas(tree: ScenarioTree, solution: Solution, n: int | None = None) -> FormulaCheck:
    """Check ``Y_{n-1} = E_Q[Y_n | F_{n-1}] + g_n(Z_n)`` and both ``Z_n`` formulas.

    The second ``Z`` formula is ``(d+1) (v v^T)^{-1} E_Q[Y_n Delta X_n | F_{n-1}]``,
    computed with a conditional expectation under ``Q`` instead of the
    projector.
    """
    q = martingale_measure(tree)
    basis = tree.basis
    out = FormulaCheck()
    times = range(1, tree.horizon + 1) if n is None else [n]
    for k in times:
        ybar = solution.Y[k].reshape(-1, tree.branching)
        out.ybar[k] = ybar
        eq = conditional_expectation(tree, q, solution.Y[k], k - 1, k)
        out.value_residual = max(out.value_residual,
                                 float(np.abs(solution.Y[k - 1] - eq - solution.g_values[k]).max()))
        z = ybar @ basis.projector.T
        out.z_residual = max(out.z_residual, float(np.abs(z - solution.Z[k]).max()))
        cross = conditional_expectation(tree, q, solution.Y[k][:, None] * tree.increments(k), k - 1, k)
        z_alt = tree.branching * cross @ basis.gram_inv.T
        out.z_alt_residual = max(out.z_alt_residual, float(np.abs(z_alt - solution.Z[k]).max()))
    return out


def solve_linear(tree: ScenarioTree, slope, intercept, terminal) -> Solution:
    """Linear driver ``A_n . z + B_n`` solved as an expectation under a changed measure.

    The kernel ``P_n`` solves ``v P_n = A_n``; then
    ``Y_n = E_P[Y_N + sum_{i>n} B_i | F_n]``. ``Z`` comes from the
    conditional covariance formula, not from the backward sweep.
    """
    Y_N = _terminal(tree, terminal)
    A = as_predictable(tree, slope, rank=1)
    B = as_predictable(tree, intercept)
    basis = tree.basis
    kernels = []
    for n in range(1, tree.horizon + 1):
        p = basis.kernel_for(A[n])
        if np.any(p < -CONTAINMENT_TOL):
            raise SlopeOutsideTheta(f"slope at time {n} lies outside Theta")
        kernels.append(np.clip(p, 0.0, None) / np.clip(p, 0.0, None).sum(axis=1, keepdims=True))
    measure = Measure(tree, PredictableField(tree, kernels))
    # remaining intercepts sum_{i>n} B_i, built backward on the tree
    Ys = [None] * (tree.horizon + 1)
    Ys[-1] = Y_N
    for n in range(tree.horizon, 0, -1):
        Ys[n - 1] = conditional_expectation(tree, measure, Ys[n], n - 1, n) + B[n]
    q = martingale_measure(tree)
    Z = []
    for n in range(1, tree.horizon + 1):
        cross = conditional_expectation(tree, q, Ys[n][:, None] * tree.increments(n), n - 1, n)
        Z.append(tree.branching * cross @ basis.gram_inv.T)
    Z = PredictableField(tree, Z)
    g = PredictableField(tree, [np.einsum("ij,ij->i", A[n], Z[n]) + B[n] for n in range(1, tree.horizon + 1)])
    return Solution(tree, AdaptedField(tree, Ys), Z, g)


def translate(tree: ScenarioTree, driver: Driver, shift, terminal) -> Solution:
    """Solution for ``h_n = g_n + B_n`` obtained from one solve with ``g``.

    Uses ``E^h_l(Y) = E^g_l(Y + sum_{i>l} B_i)``. Solving once with the
    terminal ``Y + sum_i B_i`` and subtracting ``sum_{i<=l} B_i`` (known at
    time ``l``) gives every ``l`` at once; ``Z`` is unchanged.
    """
    Y_N = _terminal(tree, terminal)
    B = as_predictable(tree, shift)
    base = solve(tree, driver, Y_N + B.lifted_sum())
    Y = []
    done = np.zeros(1)
    for n in range(tree.horizon + 1):
        if n > 0:
            done = tree.lift(done, n - 1, n) + tree.lift(B[n], n - 1, n)
        Y.append(base.Y[n] - done)
    g = PredictableField(tree, [base.g_values[n] + B[n] for n in range(1, tree.horizon + 1)])
    return Solution(tree, AdaptedField(tree, Y), base.Z, g)


def translation_gap(tree: ScenarioTree, driver: Driver, shift, terminal) -> float:
    """Distance between :func:`translate` and a direct solve with the shifted driver."""
    via = translate(tree, driver, shift, terminal)
    direct = solve(tree, ShiftedDriver(driver, shift), terminal)
    return max(float(np.abs(via.Y[n] - direct.Y[n]).max()) for n in range(tree.horizon + 1))


def solve_compensated(tree: ScenarioTree, driver: Driver, terminal, measure: Measure) -> Solution:
    """Solve against compensated increments ``Delta X_n - E[Delta X_n | F_{n-1}]``.

    ``driver`` is the compensated driver. Each node solves the square system
    ``c + z . (v_j - m) = y_j`` directly, which is a different linear route
    from the affine decomposition used by :func:`solve`.
    """
    Y_N = _terminal(tree, terminal)
    v = tree.basis.vectors
    b = tree.branching
    Ys = [None] * (tree.horizon + 1)
    Ys[-1] = Y_N
    Z, G = [None] * tree.horizon, [None] * tree.horizon
    for n in range(tree.horizon, 0, -1):
        m = measure[n] @ v.T
        incr = v.T[None, :, :] - m[:, None, :]
        system = np.concatenate([np.ones((len(m), b, 1)), incr], axis=2)
        sol = np.linalg.solve(system, Ys[n].reshape(-1, b)[..., None])[..., 0]
        c, z = sol[:, 0], sol[:, 1:]
        g = _eval(driver, n, z)
        Ys[n - 1] = c + g
        Z[n - 1], G[n - 1] = z, g
    return Solution(tree, AdaptedField(tree, Ys), PredictableField(tree, Z), PredictableField(tree, G))


# --- comparison --------------------------------------------------------------

@dataclass
class ComparisonReport:
    min_margin: float
    margins: list
    violations: int

    @property
    def holds(self) -> bool:
        return self.violations == 0


def compare(tree: ScenarioTree, driver1: Driver, driver2: Driver, terminal1, terminal2,
            samples: int = 200, rng=None, tol: float = RESIDUAL_TOL) -> ComparisonReport:
    """Check ``E^(1)_n(Y1) >= E^(2)_n(Y2)`` at every node under the comparison hypotheses.

    The hypotheses are verified as far as finitely many evaluations allow:
    the terminals exactly, driver dominance on random ``z`` at every node,
    and balance through the drivers' flags.
    """
    Y1, Y2 = _terminal(tree, terminal1), _terminal(tree, terminal2)
    if np.any(Y1 < Y2):
        raise PreconditionUnverifiable("terminal1 must dominate terminal2 pointwise")
    if not (driver1.is_balanced or driver2.is_balanced):
        raise PreconditionUnverifiable("at least one driver must be balanced")
    rng = np.random.default_rng(rng)
    for n in range(1, tree.horizon + 1):
        k = tree.size(n - 1)
        nodes = np.repeat(np.arange(k), samples)
        scale = np.tile(np.resize([0.1, 1.0, 10.0], samples), k)[:, None]
        z = rng.standard_normal((k * samples, tree.dim)) * scale
        gap = driver1.value(n, z, nodes) - driver2.value(n, z, nodes)
        if np.any(gap < -tol):
            raise PreconditionUnverifiable(f"driver1 < driver2 at sampled z, time {n}")
    s1, s2 = solve(tree, driver1, Y1), solve(tree, driver2, Y2)
    margins = [s1.Y[n] - s2.Y[n] for n in range(tree.horizon + 1)]
    lows = [float(m.min()) for m in margins]
    return ComparisonReport(min(lows), margins, sum(int(np.sum(m < -tol)) for m in margins))


# --- robust representation ---------------------------------------------------

def penalty_field(driver: Driver, measure: Measure) -> PredictableField:
    """``b_n(v P_n)`` at every node, for the kernels of ``measure``."""
    tree = measure.tree
    v = tree.basis.vectors
    out = []
    for n in range(1, tree.horizon + 1):
        theta = measure[n] @ v.T
        try:
            vals = np.asarray(driver.conjugate(n, theta), dtype=float)
        except NotImplementedError:
            vals = np.array([legendre_b(driver, n, i, theta[i], method="numeric") for i in range(len(theta))])
        out.append(vals)
    return PredictableField(tree, out)


def penalty(measure: Measure, penalties: PredictableField, n: int = 0) -> np.ndarray:
    """``E_P[sum_{i>n} b_i | F_n]`` under ``measure``; zero-probability branches are skipped."""
    tree = measure.tree
    b = tree.branching
    acc = np.zeros(tree.size(tree.horizon))
    for k in range(tree.horizon, n, -1):
        kern = measure[k]
        child = acc.reshape(-1, b)
        with np.errstate(invalid="ignore"):
            contrib = np.where(kern > 0, kern * child, 0.0).sum(axis=1)
        acc = contrib + penalties[k]
    return acc


@dataclass
class RobustResult:
    value: float
    measure: Measure
    penalty: float
    expectation: float
    gap: float
    alternatives_margin: float
    alternatives_checked: int

    @property
    def certified(self) -> bool:
        return self.gap <= CERTIFICATE_TOL and self.alternatives_margin >= -CERTIFICATE_TOL


def robust_representation(tree: ScenarioTree, driver: Driver, terminal, alternatives: int = 20,
                          rng=None) -> RobustResult:
    """Minimising measure and penalty in ``E^g_0(Y) = min_P {E_P[Y] + c_0(P)}``.

    The minimiser has kernels solving ``v P_n = grad g_n(Z_n)``. The
    certificate gap compares ``E^g_0(Y)`` with ``E_P[Y] + c_0(P)`` where
    the penalty uses the conjugate computed independently; ``alternatives``
    random measures are checked to sit above the value.
    """
    if not driver.is_concave:
        raise NotConcave("robust representation needs a concave driver")
    Y_N = _terminal(tree, terminal)
    sol = solve(tree, driver, Y_N)
    basis = tree.basis
    kernels = []
    for n in range(1, tree.horizon + 1):
        p = basis.kernel_for(driver.gradient(n, sol.Z[n]))
        if np.any(p < -CONTAINMENT_TOL):
            raise PenaltyDiverged(f"gradient outside Theta at time {n}")
        p = np.clip(p, 0.0, None)
        kernels.append(p / p.sum(axis=1, keepdims=True))
    measure = Measure(tree, PredictableField(tree, kernels))
    pen_field = penalty_field(driver, measure)
    for n in range(1, tree.horizon + 1):
        if np.any(pen_field[n] == INFINITY):
            raise PenaltyDiverged(f"conjugate is infinite at the constructed kernel, time {n}")
    pen = float(penalty(measure, pen_field)[0])
    expect = measure.expectation(Y_N)
    value = sol.value
    gap = abs(value - expect - pen)

    rng = np.random.default_rng(rng)
    worst = np.inf
    for _ in range(alternatives):
        alt = Measure(tree, PredictableField(tree, [rng.dirichlet(np.ones(tree.branching), tree.size(n - 1))
                                                    for n in range(1, tree.horizon + 1)]))
        c = float(penalty(alt, penalty_field(driver, alt))[0])
        worst = min(worst, alt.expectation(Y_N) + c - value)
    return RobustResult(value, measure, pen, expect, gap, worst, alternatives)


# --- CSV ---------------------------------------------------------------------

def write_solution_csv(solution: Solution, path) -> None:
    """Rows ``n, word, Y, Z0..Z{d-1}`` where ``Z`` is ``Z_{n+1}`` at the node (blank at depth ``N``)."""
    tree = solution.tree
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "word", "Y"] + [f"Z{i}" for i in range(tree.dim)])
        for n in range(tree.horizon + 1):
            for i in range(tree.size(n)):
                word = ".".join(str(j) for j in tree.word(n, i))
                z = [format(float(x), ".17g") for x in solution.Z[n + 1][i]] if n < tree.horizon else [""] * tree.dim
                w.writerow([n, word, format(float(solution.Y[n][i]), ".17g")] + z)


def read_solution_csv(tree: ScenarioTree, path, driver: Driver) -> Solution:
    """Inverse of :func:`write_solution_csv`; ``g_n(Z_n)`` is re-evaluated with ``driver``."""
    Y = [np.full(tree.size(n), np.nan) for n in range(tree.horizon + 1)]
    Z = [np.full((tree.size(n - 1), tree.dim), np.nan) for n in range(1, tree.horizon + 1)]
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    for row in rows:
        n = int(row[0])
        i = tree.index(tuple(int(c) for c in row[1].split(".")) if row[1] else ())
        Y[n][i] = float(row[2])
        if n < tree.horizon:
            Z[n][i] = [float(x) for x in row[3:]]
    if any(np.isnan(y).any() for y in Y) or any(np.isnan(z).any() for z in Z):
        raise DepthMismatch(f"{path} does not cover every node")
    Zf = PredictableField(tree, Z)
    g = PredictableField(tree, [_eval(driver, n, Zf[n]) for n in range(1, tree.horizon + 1)])
    return Solution(tree, AdaptedField(tree, Y), Zf, g)
