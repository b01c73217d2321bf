"""Market equilibrium: clearing checks, equilibrium beliefs and aggregation of agents.

A market of agents with drivers ``g^(i)`` and endowments ``H^(i)`` facing
total supply ``H_n`` is in equilibrium when each agent trades optimally and
the optimal strategies add up to the supply at every node.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from scipy.special import logsumexp, softmax

from . import bsde
from .drivers import (
    Driver,
    EntropicDriver,
    EntropicSpec,
    entropic_sup_convolution,
    sup_convolution,
)
from .errors import NoRoot, ValidationError
from .feynman_kac import LatticeFunction, node_keys
from .lattice import Basis
from .portfolio import InvestmentResult, optimal_invest
from .scenario import Measure, PredictableField, ScenarioTree, as_predictable, density, martingale_measure

EQUILIBRIUM_TOL = 1e-8
DETECTION_TOL = 1e-4
TINY = float(np.finfo(float).tiny)


@dataclass
class Agent:
    driver: Driver
    endowment: np.ndarray | None = None

    def payoff(self, tree: ScenarioTree) -> np.ndarray:
        if self.endowment is None:
            return np.zeros(tree.n_leaves)
        return np.asarray(self.endowment, dtype=float)


@dataclass
class EquilibriumReport:
    results: list
    net_demand: PredictableField
    residual: float
    tol: float = EQUILIBRIUM_TOL

    @property
    def in_equilibrium(self) -> bool:
        return self.residual < self.tol

    @property
    def strategies(self) -> list:
        return [r.pi_star for r in self.results]


def aggregate_endowment(tree: ScenarioTree, agents, supply=None) -> np.ndarray:
    """``sum_i H^(i) + sum_n H_n . Delta X_n``."""
    total = sum(a.payoff(tree) for a in agents)
    if supply is not None:
        total = total + as_predictable(tree, supply, rank=1).pathwise_integral()
    return total


def normalize_supply(tree: ScenarioTree, agents, supply=None):
    """Move all endowments and the supply into the first agent's endowment.

    Returns ``(agents, zero_supply)``. The equilibrium status does not change.
    """
    agents = list(agents)
    H = aggregate_endowment(tree, agents, supply)
    out = [Agent(agents[0].driver, H)] + [Agent(a.driver, None) for a in agents[1:]]
    return out, PredictableField.constant(tree, np.zeros(tree.dim))


def check_equilibrium(tree: ScenarioTree, agents, supply=None, tol: float = EQUILIBRIUM_TOL,
                      certify: int = 0, numeric: bool = False, rng=None) -> EquilibriumReport:
    """Solve every agent's investment problem and measure the clearing residual."""
    rng = np.random.default_rng(rng)
    results: list[InvestmentResult] = [
        optimal_invest(tree, a.driver, a.payoff(tree), certify=certify, numeric=numeric, rng=rng)
        for a in agents
    ]
    S = None if supply is None else as_predictable(tree, supply, rank=1)
    net, worst = [], 0.0
    for n in range(1, tree.horizon + 1):
        total = sum(r.pi_star[n] for r in results)
        if S is not None:
            total = total - S[n]
        net.append(total)
        worst = max(worst, float(np.abs(total).max()))
    return EquilibriumReport(results, PredictableField(tree, net), worst, tol)


# --- single agent ------------------------------------------------------------

def single_agent_equilibrium_belief(tree: ScenarioTree, risk_aversion, H=None, shift=1.0) -> EntropicSpec:
    """Entropic belief putting a single agent with endowment ``H`` in equilibrium.

    Backward recurrence: ``E^g_n(H)`` only depends on the drivers after
    ``n``, so with the child values ``Ybar_n`` of ``E^g_n(H)`` known the
    kernel is ``P_n = softmax(G_n Ybar_n)`` and ``E^g_{n-1}(H)`` follows.
    """
    G = as_predictable(tree, risk_aversion)
    B = as_predictable(tree, shift)
    Y = np.zeros(tree.n_leaves) if H is None else np.asarray(H, dtype=float)
    kernels = [None] * tree.horizon
    proj = tree.basis.projector
    v = tree.basis.vectors
    for n in range(tree.horizon, 0, -1):
        ybar = Y.reshape(-1, tree.branching)
        g = G[n][:, None]
        p = softmax(g * ybar, axis=1)
        kernels[n - 1] = p
        z = ybar @ proj.T
        gz = -(logsumexp(-g * (z @ v), b=p, axis=1) + np.log(B[n])) / G[n]
        Y = ybar.mean(axis=1) + gz
    # softmax kernels are positive by construction but may be tiny on steep
    # endowments; only an exact zero (underflow) is rejected
    return EntropicSpec(Measure(tree, PredictableField(tree, kernels)), G, B, interior_eps=TINY)


def radon_nikodym_gap(spec: EntropicSpec, H=None) -> float:
    """Largest relative gap between ``dQ/dP`` and ``exp(-sum G_n dE_n) prod B_n`` over paths."""
    tree = spec.tree
    H = np.zeros(tree.n_leaves) if H is None else np.asarray(H, dtype=float)
    sol = bsde.solve(tree, EntropicDriver(spec), H)
    lhs = density(martingale_measure(tree), spec.belief).terminal
    log_rhs = np.zeros(tree.n_leaves)
    for n in range(1, tree.horizon + 1):
        step = tree.lift(sol.Y[n], n) - tree.lift(sol.Y[n - 1], n - 1)
        log_rhs += -tree.lift(spec.risk_aversion[n], n - 1) * step + tree.lift(np.log(spec.shift[n]), n - 1)
    rhs = np.exp(log_rhs)
    return float(np.max(np.abs(lhs - rhs) / np.maximum(1.0, np.abs(lhs))))


def exponential_density_gap(spec: EntropicSpec, gamma: float, H=None) -> float:
    """Gap between ``dQ/dP`` and ``exp(-gamma H) / E_P[exp(-gamma H)]`` (constant ``gamma``, ``B = 1``)."""
    tree = spec.tree
    H = np.zeros(tree.n_leaves) if H is None else np.asarray(H, dtype=float)
    lhs = density(martingale_measure(tree), spec.belief).terminal
    w = np.exp(-gamma * H)
    rhs = w / spec.belief.expectation(w)
    return float(np.max(np.abs(lhs - rhs) / np.maximum(1.0, np.abs(lhs))))


def markov_equilibrium_belief(basis: Basis, horizon: int, risk_aversion, h):
    """Lattice version of the recurrence for ``H = h(X_N)`` and ``G_n = gamma_n(X_{n-1})``.

    Solves ``v log p_n(x) = gamma_n(x) v Nu_n(x)`` point by point, i.e.
    ``p_n(x) = softmax(gamma_n(x) (u_n(x + v_j))_j)``. Returns
    ``(beliefs, u)`` with ``beliefs[n]`` aligned with ``u[n-1].keys``.
    """
    beliefs = {}
    last = LatticeFunction(basis, horizon)
    last.values = np.asarray(h(last.points), dtype=float).reshape(len(last))
    u = [None] * (horizon + 1)
    u[horizon] = last
    for n in range(horizon, 0, -1):
        here = LatticeFunction(basis, n - 1)
        ybar = u[n].values[u[n].child_indices()]
        gam = risk_aversion(n, here.points) if callable(risk_aversion) else np.full(len(here), float(risk_aversion))
        gam = np.asarray(gam, dtype=float)[:, None]
        p = softmax(gam * ybar, axis=1)
        beliefs[n] = p
        z = ybar @ basis.projector.T
        g = -logsumexp(-gam * (z @ basis.vectors), b=p, axis=1) / gam[:, 0]
        here.values = ybar.mean(axis=1) + g
        u[n - 1] = here
    return beliefs, u


def markov_belief_on_tree(beliefs: dict, u: list, tree: ScenarioTree) -> Measure:
    """Read lattice kernels off at every tree node."""
    kernels = []
    for n in range(1, tree.horizon + 1):
        fn = u[n - 1]
        idx = np.array([fn.index[tuple(k)] for k in node_keys(tree, n - 1)], dtype=np.int64)
        kernels.append(beliefs[n][idx])
    return Measure(tree, PredictableField(tree, kernels))


# --- general families --------------------------------------------------------

class BeliefFamily(Protocol):
    """Drivers ``f_n(z, p)`` indexed by a kernel ``p``.

    ``root(n, nodes, z)`` returns kernels with ``grad_z f_n(z, p) = 0``.
    """

    def value(self, n, nodes, z, p) -> np.ndarray: ...

    def gradient(self, n, nodes, z, p) -> np.ndarray: ...

    def root(self, n, nodes, z) -> np.ndarray: ...


class EntropicFamily:
    """``f_n(z, p) = -(1/G_n) log sum_j exp(-G_n z.v_j) p_j - (1/G_n) log B_n``."""

    unique_roots = True

    def __init__(self, tree: ScenarioTree, risk_aversion, shift=1.0):
        self.tree = tree
        self.G = as_predictable(tree, risk_aversion)
        self.B = as_predictable(tree, shift)
        self.v = tree.basis.vectors

    def value(self, n, nodes, z, p):
        g = self.G[n][nodes][:, None]
        return -(logsumexp(-g * (z @ self.v), b=p, axis=1) + np.log(self.B[n][nodes])) / g[:, 0]

    def gradient(self, n, nodes, z, p):
        g = self.G[n][nodes][:, None]
        return softmax(-g * (z @ self.v) + np.log(p), axis=1) @ self.v.T

    def root(self, n, nodes, z):
        return softmax(self.G[n][nodes][:, None] * (z @ self.v), axis=1)

    def argmax(self, n, nodes, p):
        return np.log(p) @ self.tree.basis.projector.T / self.G[n][nodes][:, None]


class FamilyDriver(Driver):
    """``g_n(z) = f_n(z, P_n)`` for a fixed kernel field."""

    is_concave = True
    is_balanced = True
    has_gradient = True

    def __init__(self, family, kernels: PredictableField):
        super().__init__(family.tree)
        self.family = family
        self.kernels = kernels
        self.has_argmax = hasattr(family, "argmax")

    def value(self, n, z, nodes=None):
        nodes = self._nodes(n, nodes)
        return self.family.value(n, nodes, np.asarray(z, dtype=float).reshape(len(nodes), -1), self.kernels[n][nodes])

    def gradient(self, n, z, nodes=None):
        nodes = self._nodes(n, nodes)
        return self.family.gradient(n, nodes, np.asarray(z, dtype=float).reshape(len(nodes), -1),
                                    self.kernels[n][nodes])

    def argmax(self, n, nodes=None):
        nodes = self._nodes(n, nodes)
        return self.family.argmax(n, nodes, self.kernels[n][nodes])


@dataclass
class GeneralEquilibrium:
    belief: Measure
    driver: FamilyDriver
    root_residual: float
    unique: bool = True
    notes: list = field(default_factory=list)


def general_single_agent_equilibrium(tree: ScenarioTree, family, H=None, tol: float = 1e-8) -> GeneralEquilibrium:
    """Equilibrium kernels for ``g_n(z) = f_n(z, P_n)`` by the backward construction.

    At each time ``Z^dag_n = (vv^T)^{-1} v Ybar_n`` is fixed by the later
    drivers; the family's root solver supplies ``P_n`` with
    ``grad f_n(Z^dag_n, P_n) = 0``. Raises :class:`NoRoot` when the returned
    kernel is not a root (gradient norm above ``tol``) or not a kernel.
    """
    Y = np.zeros(tree.n_leaves) if H is None else np.asarray(H, dtype=float)
    kernels = [None] * tree.horizon
    worst = 0.0
    for n in range(tree.horizon, 0, -1):
        ybar = Y.reshape(-1, tree.branching)
        z = ybar @ tree.basis.projector.T
        nodes = np.arange(len(z))
        try:
            p = np.asarray(family.root(n, nodes, z), dtype=float)
        except Exception as exc:
            raise NoRoot(f"root solver failed at time {n}: {exc}") from exc
        if p.shape != ybar.shape or np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1) > 1e-10):
            raise NoRoot(f"root solver returned something other than kernels at time {n}")
        res = float(np.abs(family.gradient(n, nodes, z, p)).max())
        if res > tol:
            raise NoRoot(f"gradient at the returned kernel is {res:.3g} at time {n}")
        worst = max(worst, res)
        kernels[n - 1] = p
        Y = ybar.mean(axis=1) + family.value(n, nodes, z, p)
    field_ = PredictableField(tree, kernels)
    unique = bool(getattr(family, "unique_roots", False))
    notes = [] if unique else ["root solver does not guarantee unique roots; equilibrium belief may not be unique"]
    return GeneralEquilibrium(Measure(tree, field_), FamilyDriver(family, field_), worst, unique, notes)


# --- several agents ----------------------------------------------------------

@dataclass
class RepresentativeReport:
    argmax_gap: float
    strategy_gap: float
    agents_in_equilibrium: bool
    representative_in_equilibrium: bool
    agents_residual: float
    representative_residual: float

    @property
    def consistent(self) -> bool:
        return self.agents_in_equilibrium == self.representative_in_equilibrium


def representative_driver(drivers) -> Driver:
    """Sup-convolution of the drivers, in closed form when all are entropic."""
    drivers = list(drivers)
    if len(drivers) == 1:
        return drivers[0]
    if all(isinstance(d, EntropicDriver) for d in drivers):
        return EntropicDriver(entropic_sup_convolution([d.spec for d in drivers]))
    return sup_convolution(drivers)


def representative_agent(tree: ScenarioTree, agents, supply=None, tol: float = EQUILIBRIUM_TOL):
    """Representative agent and a report comparing it with the individual agents."""
    agents = list(agents)
    rep = Agent(representative_driver([a.driver for a in agents]), aggregate_endowment(tree, agents, supply))
    many = check_equilibrium(tree, agents, supply, tol)
    one = check_equilibrium(tree, [rep], None, tol)
    zsum = [sum(r.z_dagger[n] for r in many.results) for n in range(1, tree.horizon + 1)]
    # the individual strategies are net of each agent's own hedge; compare against
    # the representative strategy net of the supply
    S = None if supply is None else as_predictable(tree, supply, rank=1)
    arg_gap = max(float(np.abs(one.results[0].z_dagger[n] - zsum[n - 1]).max())
                  for n in range(1, tree.horizon + 1))
    strat_gap = 0.0
    for n in range(1, tree.horizon + 1):
        total = sum(r.pi_star[n] for r in many.results)
        rep_pi = one.results[0].pi_star[n]
        if S is not None:
            rep_pi = rep_pi + S[n]
        strat_gap = max(strat_gap, float(np.abs(total - rep_pi).max()))
    report = RepresentativeReport(arg_gap, strat_gap, many.in_equilibrium, one.in_equilibrium,
                                  many.residual, one.residual)
    return rep, report


def betting_counterparty(belief, gamma1: float, gamma2: float):
    """Kernel ``P2 ∝ P1^(-gamma2/gamma1)`` that makes the aggregate belief uniform."""
    if gamma1 <= 0 or gamma2 <= 0:
        raise ValidationError("risk aversions must be positive")
    if isinstance(belief, Measure):
        tree = belief.tree
        return Measure(tree, PredictableField(tree, [betting_counterparty(belief[n], gamma1, gamma2)
                                                     for n in range(1, tree.horizon + 1)]))
    p = np.asarray(belief, dtype=float)
    if np.any(p <= 0):
        raise ValidationError("belief must be strictly positive")
    return softmax(-(gamma2 / gamma1) * np.log(p), axis=-1)


def common_belief_agents(tree: ScenarioTree, risk_aversions, H=None):
    """Entropic agents sharing the belief that clears the market for endowment ``H``.

    The belief is the single-agent equilibrium belief of the representative
    risk aversion ``1 / sum(1/G_i)``; agent 1 holds ``H``.
    """
    gams = [as_predictable(tree, g) for g in risk_aversions]
    G = PredictableField(tree, [1.0 / sum(1.0 / g[n] for g in gams) for n in range(1, tree.horizon + 1)])
    spec = single_agent_equilibrium_belief(tree, G, H)
    agents = [Agent(EntropicDriver(EntropicSpec(spec.belief, g)), None) for g in gams]
    agents[0].endowment = H
    return agents
