"""Markovian recursion on the recombining lattice.

When the terminal value is ``h(X_N)`` and the driver is ``f_n(X_{n-1}, z)``,
the solution is ``Y_n = u_n(X_n)`` for functions on the lattice computed
backward from ``u_N = h``. A point reachable at time ``n`` is identified
with its letter counts ``(n_0, ..., n_d)``, ``sum n_j = n``; there are
``C(n+d, d)`` of them, against ``(d+1)^n`` tree nodes.

A time ``n-1`` point is never reachable at time ``n`` (the counts would
differ by a multiple of ``1``, which changes their sum by a multiple of
``d+1``), so ``u_n(x)`` itself is not available when stepping back from
``x``. The recursion uses the form in which it cancels:
``u_{n-1}(x) = mean_j u_n(x+v_j) + f_n(x, (vv^T)^{-1} v (u_n(x+v_j))_j)``,
which equals ``u_n + Lu_n + f_n(x, (vv^T)^{-1} v Nu_n)`` because ``v 1 = 0``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from math import comb

import numpy as np
from scipy.special import logsumexp, softmax

from .drivers import Driver
from .errors import UnreachablePoint, ValidationError
from .lattice import Basis
from .scenario import ScenarioTree


def lattice_keys(d: int, n: int) -> list:
    """All count vectors of length ``d+1`` summing to ``n``, in a fixed order."""
    keys = []
    for combo in itertools.combinations_with_replacement(range(d + 1), n):
        counts = [0] * (d + 1)
        for j in combo:
            counts[j] += 1
        keys.append(tuple(counts))
    return keys


class LatticeFunction:
    """Values ``u_n(x)`` on the points reachable at time ``n``."""

    def __init__(self, basis: Basis, time: int, values=None):
        self.basis = basis
        self.time = time
        self.keys = lattice_keys(basis.dim, time)
        self.index = {k: i for i, k in enumerate(self.keys)}
        counts = np.array(self.keys, dtype=float).reshape(len(self.keys), basis.branching)
        # coordinates computed once per key
        self.points = counts @ basis.vectors.T
        self.values = np.zeros(len(self.keys)) if values is None else np.asarray(values, dtype=float)
        if self.values.shape != (len(self.keys),):
            raise ValidationError(f"expected {len(self.keys)} values at time {time}")

    def __len__(self):
        return len(self.keys)

    def __call__(self, key) -> float:
        try:
            return float(self.values[self.index[tuple(key)]])
        except KeyError:
            raise UnreachablePoint(f"{tuple(key)} is not reachable at time {self.time}") from None

    def child_indices(self) -> np.ndarray:
        """For each time ``n-1`` key, indices of its ``d+1`` children in this function."""
        prev = lattice_keys(self.basis.dim, self.time - 1)
        b = self.basis.branching
        out = np.empty((len(prev), b), dtype=np.int64)
        for i, key in enumerate(prev):
            for j in range(b):
                child = list(key)
                child[j] += 1
                out[i, j] = self.index[tuple(child)]
        return out


def discrete_generators(u, x, center: float | None = None):
    """``(Lu(x), Nu(x))`` with ``Nu_j = u(x + v_j) - u(x)`` and ``Lu = mean_j Nu_j``.

    Two call styles:

    * ``u`` a callable on coordinates and ``x = (basis, point)``;
    * ``u`` a :class:`LatticeFunction` and ``x`` a count vector one step
      short of ``u.time``. The centre value ``u(x)`` must then come from
      ``center``, since ``x`` is not reachable at ``u.time``.
    """
    if isinstance(u, LatticeFunction):
        key = tuple(x)
        if len(key) != u.basis.branching:
            raise UnreachablePoint(f"count vector {key} has the wrong length")
        ahead = []
        for j in range(u.basis.branching):
            child = list(key)
            child[j] += 1
            ahead.append(u(child))
        ahead = np.array(ahead)
        if center is None:
            center = u(key)  # raises UnreachablePoint unless the sums line up
    else:
        basis, point = x
        point = np.asarray(point, dtype=float)
        ahead = np.array([float(u(point + basis.vectors[:, j])) for j in range(basis.branching)])
        if center is None:
            center = float(u(point))
    nu = ahead - center
    return float(nu.mean()), nu


@dataclass
class MarkovSolution:
    """``u[n]`` for ``n = 0..N`` and ``z[n]`` (rows follow ``u[n-1].keys``) for ``n = 1..N``."""

    basis: Basis
    u: list
    z: dict = field(default_factory=dict)
    evaluated_points: int = 0

    @property
    def horizon(self) -> int:
        return len(self.u) - 1

    @property
    def value(self) -> float:
        return float(self.u[0].values[0])


def max_points(d: int, horizon: int) -> int:
    """``sum_{n=0}^N C(n+d, d)``."""
    return sum(comb(n + d, d) for n in range(horizon + 1))


def markov_solve(basis: Basis, horizon: int, h, f=None) -> MarkovSolution:
    """Backward recursion for ``u_n`` on reachable lattice points.

    ``h(points)`` maps an ``(K, d)`` array of coordinates to ``K`` values.
    ``f(n, points, z)`` maps coordinates of time ``n-1`` points and the
    matching ``(K, d)`` array of ``z`` to ``K`` driver values; ``None`` is
    the zero driver.
    """
    horizon = int(horizon)
    if horizon < 1:
        raise ValidationError("horizon must be at least 1")
    last = LatticeFunction(basis, horizon)
    last.values = np.asarray(h(last.points), dtype=float).reshape(len(last))
    u = [None] * (horizon + 1)
    u[horizon] = last
    out = MarkovSolution(basis, u, evaluated_points=len(last))
    for n in range(horizon, 0, -1):
        ahead = u[n]
        here = LatticeFunction(basis, n - 1)
        ybar = ahead.values[ahead.child_indices()]
        a = ybar.mean(axis=1)
        z = ybar @ basis.projector.T
        g = np.zeros(len(here)) if f is None else np.asarray(f(n, here.points, z), dtype=float).reshape(len(here))
        here.values = a + g
        u[n - 1] = here
        out.z[n] = z
        out.evaluated_points += len(here)
    return out


# --- bridging to the path tree -----------------------------------------------

def node_keys(tree: ScenarioTree, n: int) -> np.ndarray:
    """Letter counts of every depth-``n`` node, shape ``(size(n), d+1)``."""
    words = tree.words(n)
    counts = np.zeros((tree.size(n), tree.branching), dtype=np.int64)
    for j in range(tree.branching):
        counts[:, j] = np.sum(words == j, axis=1)
    return counts


def on_tree(solution: MarkovSolution, tree: ScenarioTree, n: int) -> np.ndarray:
    """``u_n`` read off at every depth-``n`` node of ``tree``."""
    fn = solution.u[n]
    idx = np.array([fn.index[tuple(k)] for k in node_keys(tree, n)], dtype=np.int64)
    return fn.values[idx]


def z_on_tree(solution: MarkovSolution, tree: ScenarioTree, n: int) -> np.ndarray:
    """``Z_n`` at every depth ``n-1`` node."""
    fn = solution.u[n - 1]
    idx = np.array([fn.index[tuple(k)] for k in node_keys(tree, n - 1)], dtype=np.int64)
    return solution.z[n][idx]


def tree_gap(solution: MarkovSolution, tree_solution) -> float:
    """Largest difference in ``Y`` and ``Z`` between a lattice and a tree solution."""
    tree = tree_solution.tree
    worst = 0.0
    for n in range(tree.horizon + 1):
        worst = max(worst, float(np.abs(on_tree(solution, tree, n) - tree_solution.Y[n]).max()))
        if n >= 1:
            worst = max(worst, float(np.abs(z_on_tree(solution, tree, n) - tree_solution.Z[n]).max()))
    return worst


class MarkovDriver(Driver):
    """Tree driver ``g_n(z) = f(n, X_{n-1}, z)`` from a lattice driver."""

    def __init__(self, tree: ScenarioTree, f, concave: bool = False, balanced: bool = False):
        super().__init__(tree)
        self.f = f
        self.is_concave = concave
        self.is_balanced = balanced
        self.has_gradient = hasattr(f, "gradient")
        self.has_argmax = hasattr(f, "argmax")

    def value(self, n, z, nodes=None):
        nodes = self._nodes(n, nodes)
        z = np.asarray(z, dtype=float).reshape(len(nodes), -1)
        return np.asarray(self.f(n, self.tree.positions(n - 1)[nodes], z), dtype=float)

    def gradient(self, n, z, nodes=None):
        nodes = self._nodes(n, nodes)
        z = np.asarray(z, dtype=float).reshape(len(nodes), -1)
        return self.f.gradient(n, self.tree.positions(n - 1)[nodes], z)

    def argmax(self, n, nodes=None):
        nodes = self._nodes(n, nodes)
        return self.f.argmax(n, self.tree.positions(n - 1)[nodes])


def markov_driver(tree: ScenarioTree, f, **flags) -> MarkovDriver:
    return MarkovDriver(tree, f, **flags)


# --- built-ins ---------------------------------------------------------------

def linear_payoff(weights, offset: float = 0.0):
    """``h(x) = w . x + c``."""
    w = np.asarray(weights, dtype=float)
    return lambda x: np.asarray(x, dtype=float) @ w + offset


def call_payoff(weights, strike: float):
    """``h(x) = max(w . x - k, 0)``."""
    w = np.asarray(weights, dtype=float)
    return lambda x: np.maximum(np.asarray(x, dtype=float) @ w - strike, 0.0)


def indicator_payoff(weights, level: float):
    """``h(x) = 1{w . x >= level}``."""
    w = np.asarray(weights, dtype=float)
    return lambda x: (np.asarray(x, dtype=float) @ w >= level).astype(float)


class EntropicMarkov:
    """``f_n(x, z) = -(1/G) log sum_j exp(-G z.v_j) p_j - (1/G) log B`` with Markov parameters.

    ``risk_aversion(n, x)`` returns ``G`` per point and ``belief(n, x)`` one
    kernel row per point; constants are accepted for either.
    """

    def __init__(self, basis: Basis, risk_aversion, belief=None, shift=1.0):
        self.basis = basis
        self._gamma = risk_aversion
        if belief is None:
            belief = np.full(basis.branching, 1.0 / basis.branching)
        self._belief = belief
        self._shift = shift

    @staticmethod
    def _at(param, n, x, tail=()):
        if callable(param):
            return np.asarray(param(n, x), dtype=float)
        return np.broadcast_to(np.asarray(param, dtype=float), (len(x),) + tail)

    def params(self, n, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        G = self._at(self._gamma, n, x)
        P = self._at(self._belief, n, x, (self.basis.branching,))
        B = self._at(self._shift, n, x)
        if np.any(G <= 0) or np.any(P <= 0) or np.any(B <= 0):
            raise ValidationError("entropic parameters must be positive")
        return G, P, B

    def __call__(self, n, x, z):
        G, P, B = self.params(n, x)
        s = -G[:, None] * (np.asarray(z, dtype=float) @ self.basis.vectors)
        return -(logsumexp(s, b=P, axis=1) + np.log(B)) / G

    def gradient(self, n, x, z):
        G, P, _ = self.params(n, x)
        s = -G[:, None] * (np.asarray(z, dtype=float) @ self.basis.vectors)
        return softmax(s + np.log(P), axis=1) @ self.basis.vectors.T

    def argmax(self, n, x):
        G, P, _ = self.params(n, x)
        return (np.log(P) @ self.basis.projector.T) / G[:, None]


def entropic_markov_driver(basis: Basis, risk_aversion, belief=None, shift=1.0) -> EntropicMarkov:
    return EntropicMarkov(basis, risk_aversion, belief, shift)
