"""Drivers ``g_n(z)`` of the backward equation.

A driver is evaluated slice-wise: ``value(n, z, nodes)`` takes one row of
``z`` per depth ``n-1`` node listed in ``nodes`` (all nodes when omitted)
and returns one value per row. Node indices may repeat, which lets the
sampling checks evaluate many ``z`` at the same node in one call.

Capability flags tell callers what else is available: a gradient (or a
supergradient for piecewise-linear drivers), a closed-form maximiser, a
closed-form concave conjugate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import logsumexp, softmax

from .errors import (
    BeliefNotInterior,
    EmptySet,
    InconsistentExpectation,
    NoArgmax,
    NotConcave,
    OptimizerFailed,
    ValidationError,
)
from .lattice import CONTAINMENT_TOL, INTERIOR_EPS, kl_divergence, theta_min
from .scenario import Measure, PredictableField, ScenarioTree, as_predictable

INFINITY = math.inf
"""Value of a concave conjugate that diverges. Returned explicitly, never computed."""

BALANCE_TOL = 1e-9
ARGMAX_ZERO_TOL = 1e-14


class Driver:
    """Base class; subclasses override :meth:`value` and whichever extras they support."""

    is_concave = False
    is_balanced = False
    is_smooth = True
    has_gradient = False
    has_argmax = False

    def __init__(self, tree: ScenarioTree):
        self.tree = tree

    def _nodes(self, n, nodes):
        if nodes is None:
            return np.arange(self.tree.size(n - 1))
        return np.asarray(nodes, dtype=np.int64)

    def value(self, n: int, z, nodes=None) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, n: int, z, nodes=None) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no gradient")

    def argmax(self, n: int, nodes=None) -> np.ndarray:
        raise NoArgmax(f"{type(self).__name__} has no closed-form maximiser")

    def conjugate(self, n: int, theta, nodes=None) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no closed-form conjugate")

    def evaluate(self, n: int, node: int, z) -> float:
        """Scalar convenience wrapper around :meth:`value`."""
        z = np.asarray(z, dtype=float).reshape(1, -1)
        return float(self.value(n, z, np.array([node]))[0])


# --- entropic ----------------------------------------------------------------

@dataclass
class EntropicSpec:
    """Parameters of a locally entropic driver.

    ``belief`` holds the one-step kernels, ``risk_aversion`` the positive
    scalar field ``G`` and ``shift`` the positive scalar field ``B``.
    """

    belief: Measure
    risk_aversion: PredictableField
    shift: PredictableField | None = None
    interior_eps: float = field(default=INTERIOR_EPS, repr=False)

    def __post_init__(self):
        tree = self.belief.tree
        self.risk_aversion = as_predictable(tree, self.risk_aversion)
        self.shift = as_predictable(tree, 1.0 if self.shift is None else self.shift)
        if not self.belief.is_interior(self.interior_eps):
            raise BeliefNotInterior("entropic belief must have strictly positive kernels")
        for n in range(1, tree.horizon + 1):
            if np.any(self.risk_aversion[n] <= 0):
                raise ValidationError("risk aversion must be positive")
            if np.any(self.shift[n] <= 0):
                raise ValidationError("shift B must be positive")

    @property
    def tree(self) -> ScenarioTree:
        return self.belief.tree

    @classmethod
    def build(cls, tree: ScenarioTree, belief, risk_aversion, shift=1.0) -> "EntropicSpec":
        """Spec from constants or per-time sequences (see :func:`as_predictable`)."""
        if not isinstance(belief, Measure):
            belief = Measure(tree, as_predictable(tree, belief, rank=1))
        return cls(belief, as_predictable(tree, risk_aversion), as_predictable(tree, shift))


class EntropicDriver(Driver):
    """``g_n(z) = -(1/G) log sum_j exp(-G z.v_j) P_j - (1/G) log B``."""

    is_concave = True
    is_balanced = True
    has_gradient = True
    has_argmax = True

    def __init__(self, spec: EntropicSpec):
        super().__init__(spec.tree)
        self.spec = spec
        self._v = spec.tree.basis.vectors

    def _params(self, n, nodes):
        nodes = self._nodes(n, nodes)
        s = self.spec
        return s.risk_aversion[n][nodes], s.belief[n][nodes], s.shift[n][nodes]

    def _exponents(self, n, z, nodes):
        G, P, B = self._params(n, nodes)
        z = np.asarray(z, dtype=float).reshape(len(G), -1)
        return -G[:, None] * (z @ self._v), G, P, B

    def value(self, n, z, nodes=None):
        s, G, P, B = self._exponents(n, z, nodes)
        return -(logsumexp(s, b=P, axis=1) + np.log(B)) / G

    def tilted_kernel(self, n, z, nodes=None) -> np.ndarray:
        """Weights proportional to ``exp(-G z.v_j) P_j``; their image under ``v`` is the gradient."""
        s, _, P, _ = self._exponents(n, z, nodes)
        return softmax(s + np.log(P), axis=1)

    def gradient(self, n, z, nodes=None):
        return self.tilted_kernel(n, z, nodes) @ self._v.T

    def argmax(self, n, nodes=None):
        G, P, _ = self._params(n, nodes)
        return (np.log(P) @ self.spec.tree.basis.projector.T) / G[:, None]

    def conjugate(self, n, theta, nodes=None):
        G, P, B = self._params(n, nodes)
        theta = np.broadcast_to(np.asarray(theta, dtype=float), (len(G), self.tree.dim))
        p = self.tree.basis.kernel_for(theta)
        inside = np.all(p >= -CONTAINMENT_TOL, axis=1)
        kl = kl_divergence(np.clip(p, 0.0, None), P)
        return np.where(inside, (kl - np.log(B)) / G, INFINITY)


def entropic_driver(spec: EntropicSpec) -> EntropicDriver:
    return EntropicDriver(spec)


# --- linear, frozen, shifted -------------------------------------------------

class LinearDriver(Driver):
    """``g_n(z) = A_n . z + B_n``; balanced exactly when every slope lies in ``Theta``."""

    is_concave = True
    has_gradient = True

    def __init__(self, tree: ScenarioTree, slope=None, intercept=0.0):
        super().__init__(tree)
        self.slope = as_predictable(tree, np.zeros(tree.dim) if slope is None else slope, rank=1)
        self.intercept = as_predictable(tree, intercept)
        basis = tree.basis
        self.is_balanced = all(
            bool(np.all(basis.contains(self.slope[n]))) for n in range(1, tree.horizon + 1)
        )
        self.has_argmax = all(
            bool(np.all(self.slope[n] == 0)) for n in range(1, tree.horizon + 1)
        )

    def value(self, n, z, nodes=None):
        nodes = self._nodes(n, nodes)
        z = np.asarray(z, dtype=float).reshape(len(nodes), -1)
        return np.einsum("ij,ij->i", self.slope[n][nodes], z) + self.intercept[n][nodes]

    def gradient(self, n, z, nodes=None):
        return self.slope[n][self._nodes(n, nodes)].copy()

    def argmax(self, n, nodes=None):
        A = self.slope[n][self._nodes(n, nodes)]
        if np.any(np.abs(A) > ARGMAX_ZERO_TOL):
            raise NoArgmax("a linear driver with nonzero slope is unbounded above")
        return np.zeros_like(A)

    def conjugate(self, n, theta, nodes=None):
        nodes = self._nodes(n, nodes)
        A = self.slope[n][nodes]
        theta = np.broadcast_to(np.asarray(theta, dtype=float), A.shape)
        hit = np.all(np.abs(theta - A) <= CONTAINMENT_TOL, axis=1)
        return np.where(hit, self.intercept[n][nodes], INFINITY)


def linear_driver(tree: ScenarioTree, slope=None, intercept=0.0) -> LinearDriver:
    return LinearDriver(tree, slope, intercept)


def zero_driver(tree: ScenarioTree) -> LinearDriver:
    return LinearDriver(tree)


class FrozenDriver(Driver):
    """A driver that ignores ``z`` and returns a fixed predictable value."""

    is_concave = True
    is_balanced = True
    has_gradient = True

    def __init__(self, tree: ScenarioTree, values):
        super().__init__(tree)
        self.values = as_predictable(tree, values)

    def value(self, n, z, nodes=None):
        return self.values[n][self._nodes(n, nodes)].copy()

    def gradient(self, n, z, nodes=None):
        return np.zeros((len(self._nodes(n, nodes)), self.tree.dim))


class ShiftedDriver(Driver):
    """``h_n(z) = g_n(z) + B_n``."""

    def __init__(self, base: Driver, shift):
        super().__init__(base.tree)
        self.base = base
        self.shift = as_predictable(base.tree, shift)
        for flag in ("is_concave", "is_balanced", "is_smooth", "has_gradient", "has_argmax"):
            setattr(self, flag, getattr(base, flag))

    def value(self, n, z, nodes=None):
        return self.base.value(n, z, nodes) + self.shift[n][self._nodes(n, nodes)]

    def gradient(self, n, z, nodes=None):
        return self.base.gradient(n, z, nodes)

    def argmax(self, n, nodes=None):
        return self.base.argmax(n, nodes)

    def conjugate(self, n, theta, nodes=None):
        return self.base.conjugate(n, theta, nodes) + self.shift[n][self._nodes(n, nodes)]


# --- worst case --------------------------------------------------------------

def _in_hull(points: np.ndarray, theta: np.ndarray, tol: float = 1e-9) -> bool:
    """Whether ``theta`` is a convex combination of the rows of ``points``."""
    m = points.shape[0]
    A = np.vstack([points.T, np.ones((1, m))])
    b = np.append(theta, 1.0)
    _, resid = optimize.nnls(A, b)
    return resid <= tol * max(1.0, float(np.abs(b).max()))


class WorstCaseDriver(Driver):
    """``g_n(z) = min over theta in Theta_n of z . theta``.

    ``Theta_n`` is either all of ``Theta`` (only its vertices matter) or the
    finite set ``{v P^(1)_n, ..., v P^(m)_n}`` of images of given kernels.
    The gradient returned is the supergradient at the minimising element.
    """

    is_concave = True
    is_balanced = True
    is_smooth = False
    has_gradient = True
    has_argmax = True

    def __init__(self, tree: ScenarioTree, kernels=None):
        super().__init__(tree)
        v = tree.basis.vectors
        if kernels is None:
            self.kernels = None
            self._thetas = None
        else:
            kernels = [k if isinstance(k, Measure) else Measure(tree, as_predictable(tree, k, rank=1))
                       for k in kernels]
            if not kernels:
                raise EmptySet("worst-case driver needs at least one kernel")
            self.kernels = kernels
            # per time: (nodes, m, d)
            self._thetas = [np.stack([k[n] @ v.T for k in kernels], axis=1)
                            for n in range(1, tree.horizon + 1)]

    @property
    def full(self) -> bool:
        return self.kernels is None

    def thetas(self, n, nodes=None) -> np.ndarray:
        """Elements of ``Theta_n`` at each node, shape ``(k, m, d)``."""
        nodes = self._nodes(n, nodes)
        if self._thetas is None:
            vt = self.tree.basis.vectors.T
            return np.broadcast_to(vt, (len(nodes),) + vt.shape)
        return self._thetas[n - 1][nodes]

    def selection(self, n, z, nodes=None) -> np.ndarray:
        """Index of the minimising element of ``Theta_n`` (lowest index on ties)."""
        th = self.thetas(n, nodes)
        z = np.asarray(z, dtype=float).reshape(th.shape[0], -1)
        return np.argmin(np.einsum("kmd,kd->km", th, z), axis=1)

    def value(self, n, z, nodes=None):
        th = self.thetas(n, nodes)
        z = np.asarray(z, dtype=float).reshape(th.shape[0], -1)
        if self.full:
            return theta_min(self.tree.basis, z)[0]
        return np.einsum("kmd,kd->km", th, z).min(axis=1)

    def gradient(self, n, z, nodes=None):
        th = self.thetas(n, nodes)
        idx = self.selection(n, z, nodes)
        return th[np.arange(th.shape[0]), idx].copy()

    def argmax(self, n, nodes=None):
        th = self.thetas(n, nodes)
        if not self.full:
            for k in range(th.shape[0]):
                if not _in_hull(th[k], np.zeros(self.tree.dim)):
                    raise NoArgmax("0 is outside the hull of Theta_n: the driver is unbounded above")
        return np.zeros((th.shape[0], self.tree.dim))

    def conjugate(self, n, theta, nodes=None):
        th = self.thetas(n, nodes)
        theta = np.broadcast_to(np.asarray(theta, dtype=float), (th.shape[0], self.tree.dim))
        if self.full:
            inside = self.tree.basis.contains(theta)
            return np.where(inside, 0.0, INFINITY)
        return np.array([0.0 if _in_hull(th[k], theta[k]) else INFINITY for k in range(th.shape[0])])


def worstcase_driver(tree: ScenarioTree, kernels=None) -> WorstCaseDriver:
    return WorstCaseDriver(tree, kernels)


# --- numeric optimisation helpers -------------------------------------------

MAX_ITER = 500
GRAD_TOL = 1e-8


def _grid_maximize(objective, center, half_width, levels=40):
    """Coarse-to-fine grid search for a concave objective over a box.

    ``objective`` maps an ``(K, dim)`` array to ``K`` values.
    """
    center = np.asarray(center, dtype=float)
    dim = center.size
    pts_per_dim, shrink = (11, 0.3) if dim <= 3 else (5, 0.5)
    axis = np.linspace(-1.0, 1.0, pts_per_dim)
    offsets = np.stack(np.meshgrid(*([axis] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
    best_x, best_f = center, float(objective(center[None])[0])
    h = half_width
    for _ in range(levels):
        cand = best_x + h * offsets
        vals = objective(cand)
        i = int(np.argmax(vals))
        if vals[i] > best_f:
            best_x, best_f = cand[i], float(vals[i])
        h *= shrink
    return best_x, best_f


def _maximize(fun, grad, starts, smooth=True, box=None):
    """Maximise ``fun`` over ``R^k`` from several starts; returns ``(x, value, converged)``.

    Smooth objectives use BFGS with the supplied gradient; others use a grid
    search over ``box = (center, half_width)``.
    """
    if not smooth:
        center, half_width = box
        x, f = _grid_maximize(lambda X: np.array([fun(x) for x in X]), center, half_width)
        return x, f, True
    best = None
    for x0 in starts:
        res = optimize.minimize(
            lambda x: -fun(x),
            np.asarray(x0, dtype=float),
            jac=(lambda x: -grad(x)) if grad is not None else None,
            method="BFGS",
            options={"maxiter": MAX_ITER, "gtol": GRAD_TOL},
        )
        g = grad(res.x) if grad is not None else None
        gnorm = float(np.linalg.norm(g)) if g is not None else (0.0 if res.success else np.inf)
        cand = (res.x, -float(res.fun), gnorm)
        if best is None or cand[1] > best[1]:
            best = cand
    x, f, gnorm = best
    return x, f, gnorm <= 1e-6


# --- Legendre transform ------------------------------------------------------

def legendre_b(driver: Driver, n: int, node: int, theta, method: str = "auto") -> float:
    """Concave conjugate ``b_n(theta) = sup_z g_n(z) - z . theta`` at one node.

    Off ``Theta`` a balanced driver has ``b = +inf``; the sentinel
    :data:`INFINITY` is returned without optimising. ``method`` selects the
    closed form (``"closed"``), numeric maximisation (``"numeric"``), or the
    closed form when the driver has one (``"auto"``).
    """
    if not driver.is_concave:
        raise NotConcave(f"{type(driver).__name__} is not flagged concave")
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if driver.is_balanced and not driver.tree.basis.contains(theta):
        return INFINITY
    nodes = np.array([node])
    if method in ("auto", "closed"):
        try:
            return float(driver.conjugate(n, theta[None], nodes)[0])
        except NotImplementedError:
            if method == "closed":
                raise
    return legendre_numeric(driver, n, node, theta)[0]


def legendre_numeric(driver: Driver, n: int, node: int, theta):
    """Numeric ``b_n(theta)`` and the maximising ``z``."""
    theta = np.asarray(theta, dtype=float).reshape(-1)
    nodes = np.array([node])

    def fun(z):
        return float(driver.value(n, z[None], nodes)[0] - z @ theta)

    grad = None
    if driver.has_gradient and driver.is_smooth:
        def grad(z):
            return driver.gradient(n, z[None], nodes)[0] - theta

    starts = [np.zeros(driver.tree.dim)]
    if driver.has_argmax:
        try:
            starts.append(driver.argmax(n, nodes)[0])
        except NoArgmax:
            pass
    z, f, _ = _maximize(fun, grad, starts, smooth=driver.is_smooth,
                        box=(np.zeros(driver.tree.dim), 10.0))
    return f, z


def numeric_argmax(driver: Driver, n: int, nodes=None, starts: int = 4, rng=None, warn_tol=1e-6):
    """Maximise each ``g_n(., node)`` numerically.

    Returns ``(z, unique)``: when restarts land on maximisers farther apart
    than ``warn_tol`` the lowest-norm one is kept and ``unique`` is False.
    """
    rng = np.random.default_rng(rng)
    nodes = driver._nodes(n, nodes)
    d = driver.tree.dim
    out = np.empty((len(nodes), d))
    unique = True
    for k, node in enumerate(nodes):
        idx = np.array([node])

        def fun(z):
            return float(driver.value(n, z[None], idx)[0])

        grad = (lambda z: driver.gradient(n, z[None], idx)[0]) if driver.has_gradient else None
        found = []
        for s in [np.zeros(d)] + [rng.standard_normal(d) for _ in range(starts - 1)]:
            z, f, ok = _maximize(fun, grad, [s], smooth=driver.is_smooth, box=(s, 10.0))
            found.append((z, f))
        fbest = max(f for _, f in found)
        if not np.isfinite(fbest):
            raise NoArgmax("driver is unbounded above")
        tops = [z for z, f in found if f >= fbest - 1e-9 * max(1.0, abs(fbest))]
        if any(np.linalg.norm(a - b) > warn_tol for a in tops for b in tops):
            unique = False
        out[k] = min(tops, key=np.linalg.norm)
    return out, unique


# --- sup-convolution ---------------------------------------------------------

class SupConvolutionDriver(Driver):
    """``g = g^(1) [] ... [] g^(m)``, ``(f [] h)(z) = sup_x f(x) + h(z - x)``, solved numerically.

    The optimisation runs over the allocations ``x_1..x_{m-1}``; the last
    driver receives ``z - sum x_i``. Its maximiser is the sum of the
    children's maximisers, which is exact given they exist.
    """

    is_concave = True

    def __init__(self, children):
        children = list(children)
        if not children:
            raise EmptySet("sup-convolution of no drivers")
        for c in children:
            if not c.is_concave:
                raise NotConcave(f"{type(c).__name__} is not flagged concave")
        super().__init__(children[0].tree)
        self.children = children
        self.is_balanced = all(c.is_balanced for c in children)
        self.is_smooth = all(c.is_smooth for c in children)
        self.has_gradient = all(c.has_gradient for c in children)
        self.has_argmax = all(c.has_argmax for c in children)

    def allocate(self, n, node, z):
        """Optimal allocation ``(x_1, ..., x_m)`` of ``z`` and the attained value."""
        m, d = len(self.children), self.tree.dim
        z = np.asarray(z, dtype=float).reshape(d)
        idx = np.array([node])
        if m == 1:
            return z[None].copy(), float(self.children[0].value(n, z[None], idx)[0])
        kids = self.children

        def split(x):
            xs = x.reshape(m - 1, d)
            return np.vstack([xs, z - xs.sum(axis=0)])

        def fun(x):
            xs = split(x)
            return float(sum(c.value(n, xs[i][None], idx)[0] for i, c in enumerate(kids)))

        grad = None
        if self.has_gradient and self.is_smooth:
            def grad(x):
                xs = split(x)
                last = kids[-1].gradient(n, xs[-1][None], idx)[0]
                return np.concatenate([kids[i].gradient(n, xs[i][None], idx)[0] - last
                                       for i in range(m - 1)])

        starts = [np.tile(z / m, m - 1)]
        if self.has_argmax:
            zd = np.vstack([c.argmax(n, idx)[0] for c in kids])
            starts.append((zd + (z - zd.sum(axis=0)) / m)[:-1].reshape(-1))
        half = 10.0 * float(np.linalg.norm(z)) + 10.0
        x, f, ok = _maximize(fun, grad, starts, smooth=self.is_smooth, box=(starts[-1], half))
        if not np.isfinite(f):
            raise OptimizerFailed("sup-convolution objective is not finite")
        if not ok:
            raise OptimizerFailed(f"sup-convolution did not converge at time {n}, node {node}")
        return split(x), f

    def value(self, n, z, nodes=None):
        nodes = self._nodes(n, nodes)
        z = np.asarray(z, dtype=float).reshape(len(nodes), -1)
        return np.array([self.allocate(n, node, zi)[1] for node, zi in zip(nodes, z)])

    def gradient(self, n, z, nodes=None):
        nodes = self._nodes(n, nodes)
        z = np.asarray(z, dtype=float).reshape(len(nodes), -1)
        out = np.empty_like(z)
        for k, (node, zi) in enumerate(zip(nodes, z)):
            xs, _ = self.allocate(n, node, zi)
            out[k] = self.children[-1].gradient(n, xs[-1][None], np.array([node]))[0]
        return out

    def argmax(self, n, nodes=None):
        return sum(c.argmax(n, nodes) for c in self.children)

    def conjugate(self, n, theta, nodes=None):
        return sum(c.conjugate(n, theta, nodes) for c in self.children)


def sup_convolution(drivers) -> Driver:
    drivers = list(drivers)
    if len(drivers) == 1:
        return drivers[0]
    return SupConvolutionDriver(drivers)


def geometric_mixture(beliefs, gammas):
    """Aggregate kernels ``p_i`` with risk aversions ``gamma_i``.

    Returns ``(p_tilde, C, gamma)`` where ``gamma = 1 / sum(1/gamma_i)``,
    ``C = sum_j prod_i p_ij^(gamma/gamma_i)`` and ``p_tilde`` is the
    normalised product. Leading axis indexes agents; the last axis of
    ``beliefs`` indexes outcomes.
    """
    beliefs = np.asarray(beliefs, dtype=float)
    gammas = np.asarray(gammas, dtype=float)
    gamma = 1.0 / np.sum(1.0 / gammas, axis=0)
    expo = (gamma / gammas)[..., None]
    log_prod = np.sum(expo * np.log(beliefs), axis=0)
    log_c = logsumexp(log_prod, axis=-1)
    return np.exp(log_prod - log_c[..., None]), np.exp(log_c), gamma


def entropic_sup_convolution(specs) -> EntropicSpec:
    """Closed-form sup-convolution of entropic drivers, as another entropic spec.

    Risk aversions aggregate harmonically, beliefs geometrically, and the
    normaliser ``C`` together with the individual shifts goes into ``B``.
    """
    specs = list(specs)
    if not specs:
        raise EmptySet("no entropic specs to aggregate")
    tree = specs[0].tree
    beliefs, gammas, shifts = [], [], []
    for n in range(1, tree.horizon + 1):
        P = np.stack([s.belief[n] for s in specs])
        G = np.stack([s.risk_aversion[n] for s in specs])
        p_tilde, C, gamma = geometric_mixture(P, G)
        log_b = np.log(C) + gamma * np.sum(np.log(np.stack([s.shift[n] for s in specs])) / G, axis=0)
        beliefs.append(p_tilde)
        gammas.append(gamma)
        shifts.append(np.exp(log_b))
    return EntropicSpec(
        Measure(tree, PredictableField(tree, beliefs)),
        PredictableField(tree, gammas),
        PredictableField(tree, shifts),
    )


def aggregation_constant(specs) -> PredictableField:
    """The normaliser ``C_n`` of the geometric belief mixture (at most 1)."""
    specs = list(specs)
    tree = specs[0].tree
    out = []
    for n in range(1, tree.horizon + 1):
        P = np.stack([s.belief[n] for s in specs])
        G = np.stack([s.risk_aversion[n] for s in specs])
        out.append(geometric_mixture(P, G)[1])
    return PredictableField(tree, out)


# --- checks ------------------------------------------------------------------

@dataclass
class BalanceReport:
    worst_margin: float
    violations: int
    checked: int
    gradient_checked: int = 0
    gradient_outside: int = 0
    worst_gradient_weight: float = 0.0

    @property
    def balanced(self) -> bool:
        return self.violations == 0 and self.gradient_outside == 0


def check_balance(driver: Driver, samples: int = 200, scales=(0.1, 1.0, 10.0), rng=None,
                  tol: float = BALANCE_TOL) -> BalanceReport:
    """Sample the balance inequality at every node and time.

    For each pair the margin ``g(z2) - g(z1) - min_Theta theta.(z2 - z1)``
    must be at least ``-tol``. With a gradient, also checks that the
    gradient lies in ``Theta`` by solving for its simplex weights.
    """
    rng = np.random.default_rng(rng)
    tree = driver.tree
    basis = tree.basis
    d = tree.dim
    worst, bad, total = np.inf, 0, 0
    gchecked, gout, gworst = 0, 0, np.inf
    scale_cycle = np.resize(np.asarray(scales, dtype=float), samples)
    for n in range(1, tree.horizon + 1):
        k = tree.size(n - 1)
        nodes = np.repeat(np.arange(k), samples)
        sc = np.tile(scale_cycle, k)[:, None]
        z1 = rng.standard_normal((k * samples, d)) * sc
        z2 = rng.standard_normal((k * samples, d)) * sc
        margin = driver.value(n, z2, nodes) - driver.value(n, z1, nodes) - theta_min(basis, z2 - z1)[0]
        worst = min(worst, float(margin.min()))
        bad += int(np.sum(margin < -tol))
        total += margin.size
        if driver.has_gradient:
            p = basis.kernel_for(driver.gradient(n, z1, nodes))
            low = p.min(axis=1)
            gworst = min(gworst, float(low.min()))
            gout += int(np.sum(low < -CONTAINMENT_TOL))
            gchecked += low.size
    return BalanceReport(worst, bad, total, gchecked, gout, gworst if gchecked else 0.0)


def check_gradient(driver: Driver, samples: int = 100, h: float = 1e-5, rng=None) -> float:
    """Largest ``|fd - grad|_inf / max(1, |grad|_inf)`` over random ``(n, node, z)``."""
    rng = np.random.default_rng(rng)
    tree = driver.tree
    d = tree.dim
    worst = 0.0
    for _ in range(samples):
        n = int(rng.integers(1, tree.horizon + 1))
        node = np.array([rng.integers(tree.size(n - 1))])
        z = rng.standard_normal(d)
        g = driver.gradient(n, z[None], node)[0]
        fd = np.empty(d)
        for i in range(d):
            e = np.zeros(d)
            e[i] = h
            fd[i] = (driver.value(n, (z + e)[None], node)[0] - driver.value(n, (z - e)[None], node)[0]) / (2 * h)
        worst = max(worst, float(np.abs(fd - g).max() / max(1.0, np.abs(g).max())))
    return worst


# --- extraction from a nonlinear expectation ---------------------------------

class ExtractedDriver(Driver):
    """``g_n(z) = E_{n-1}(z . Delta X_n)`` for a black-box conditional expectation.

    ``expectation(terminal, n)`` maps a leaf vector to its depth-``n``
    slice. One call evaluates ``g_n`` at every node at once: the payoff uses
    each node's own ``z`` on its subtree, which is legitimate because the
    expectation is local.
    """

    def __init__(self, tree: ScenarioTree, expectation, concave=False, balanced=False):
        super().__init__(tree)
        self.expectation = expectation
        self.is_concave = concave
        self.is_balanced = balanced

    def _batch(self, n, z_full):
        tree = self.tree
        anc = tree.ancestors(tree.horizon, n - 1)
        letters = (np.arange(tree.n_leaves) // tree.branching ** (tree.horizon - n)) % tree.branching
        payoff = np.einsum("ij,ji->i", z_full[anc], tree.basis.vectors[:, letters])
        return np.asarray(self.expectation(payoff, n - 1), dtype=float)

    def value(self, n, z, nodes=None):
        nodes = self._nodes(n, nodes)
        z = np.asarray(z, dtype=float).reshape(len(nodes), -1)
        out = np.empty(len(nodes))
        # each round covers distinct nodes so that every node gets exactly one z
        seen: dict[int, int] = {}
        rounds = np.empty(len(nodes), dtype=np.int64)
        for i, node in enumerate(nodes):
            rounds[i] = seen.get(int(node), 0)
            seen[int(node)] = rounds[i] + 1
        for r in range(int(rounds.max(initial=-1)) + 1):
            sel = np.flatnonzero(rounds == r)
            z_full = np.zeros((self.tree.size(n - 1), self.tree.dim))
            z_full[nodes[sel]] = z[sel]
            out[sel] = self._batch(n, z_full)[nodes[sel]]
        return out


def check_expectation(tree: ScenarioTree, expectation, trials: int = 5, tol: float = 1e-9, rng=None) -> float:
    """Spot-check tower, locality and translation invariance; returns the worst gap.

    Raises :class:`InconsistentExpectation` when any gap exceeds ``tol``.
    """
    rng = np.random.default_rng(rng)
    N = tree.horizon
    worst = 0.0
    for _ in range(trials):
        Y = rng.standard_normal(tree.n_leaves)
        n = int(rng.integers(0, N))
        m = int(rng.integers(n, N + 1))
        direct = np.asarray(expectation(Y, n))
        nested = np.asarray(expectation(tree.lift(expectation(Y, m), m), n))
        worst = max(worst, float(np.abs(direct - nested).max()))
        mask = rng.random(tree.size(n)) < 0.5
        local = np.asarray(expectation(Y * tree.lift(mask.astype(float), n), n))
        worst = max(worst, float(np.abs(local - direct * mask).max()))
        eta = rng.standard_normal(tree.size(n))
        shifted = np.asarray(expectation(Y + tree.lift(eta, n), n))
        worst = max(worst, float(np.abs(shifted - direct - eta).max()))
    if worst > tol:
        raise InconsistentExpectation(f"expectation fails consistency spot checks by {worst:.3g}")
    return worst


def extract_driver(expectation, tree: ScenarioTree, check: bool = True, rng=None, **flags) -> ExtractedDriver:
    """Driver of a translation-invariant, filtration-consistent expectation."""
    if check:
        check_expectation(tree, expectation, rng=rng)
    return ExtractedDriver(tree, expectation, **flags)


class CompensatedDriver(Driver):
    """``g_n(z) - z . E[Delta X_n | F_{n-1}]`` for a given measure.

    Pairs with the compensated increments ``Delta X_n - E[Delta X_n | F_{n-1}]``;
    see :func:`latticebsde.bsde.solve_compensated`.
    """

    def __init__(self, base: Driver, measure: Measure):
        super().__init__(base.tree)
        self.base = base
        self.measure = measure
        v = base.tree.basis.vectors
        self.drift = PredictableField(base.tree, [measure[n] @ v.T for n in range(1, base.tree.horizon + 1)])
        self.has_gradient = base.has_gradient
        self.is_smooth = base.is_smooth

    def value(self, n, z, nodes=None):
        nodes = self._nodes(n, nodes)
        z = np.asarray(z, dtype=float).reshape(len(nodes), -1)
        return self.base.value(n, z, nodes) - np.einsum("ij,ij->i", z, self.drift[n][nodes])

    def gradient(self, n, z, nodes=None):
        return self.base.gradient(n, z, nodes) - self.drift[n][self._nodes(n, nodes)]
