"""The path tree, adapted and predictable fields, and measures on it.

A node at depth ``n`` is a word ``(j_1, ..., j_n)`` over ``{0, ..., d}``.
It is stored at index ``sum_k j_k (d+1)^(n-k)``, so the children of node
``i`` occupy the contiguous block ``i*(d+1) ... i*(d+1)+d`` one level down
and a depth slice reshaped to ``(-1, d+1)`` groups siblings row by row.

The sample space is the leaf set. A measure is given by its one-step
kernels; path weights are products of kernel entries along the word.
"""

from __future__ import annotations

import csv
from typing import Sequence

import numpy as np

from .errors import DepthMismatch, NonEquivalent, TreeTooLarge, ValidationError
from .lattice import INTERIOR_EPS, SIMPLEX_TOL, Basis, is_simplex

DEFAULT_CAP = 10**6


class ScenarioTree:
    """Full ``(d+1)``-ary tree of depth ``horizon``."""

    def __init__(self, basis: Basis, horizon: int, cap: int = DEFAULT_CAP):
        horizon = int(horizon)
        if horizon < 1:
            raise ValidationError("horizon must be at least 1")
        b = basis.branching
        if b**horizon > cap:
            raise TreeTooLarge(f"{b}^{horizon} = {b**horizon} paths exceeds cap {cap}")
        self.basis = basis
        self.horizon = horizon
        self.cap = cap
        self._positions = None

    def __repr__(self):
        return f"ScenarioTree(d={self.dim}, horizon={self.horizon})"

    @property
    def dim(self) -> int:
        return self.basis.dim

    @property
    def branching(self) -> int:
        return self.basis.branching

    @property
    def n_leaves(self) -> int:
        return self.branching**self.horizon

    def size(self, n: int) -> int:
        """Number of nodes at depth ``n``."""
        self._check_depth(n)
        return self.branching**n

    def _check_depth(self, n):
        if not 0 <= n <= self.horizon:
            raise DepthMismatch(f"depth {n} outside 0..{self.horizon}")

    def letters(self, n: int) -> np.ndarray:
        """Last letter ``j_n`` of every depth-``n`` node (``n >= 1``)."""
        self._check_depth(n)
        if n == 0:
            raise DepthMismatch("the root has no last letter")
        return np.arange(self.size(n)) % self.branching

    def words(self, n: int) -> np.ndarray:
        """All depth-``n`` words as an integer array of shape ``(size(n), n)``."""
        self._check_depth(n)
        idx = np.arange(self.size(n))
        out = np.empty((idx.size, n), dtype=np.int64)
        for k in range(n - 1, -1, -1):
            out[:, k] = idx % self.branching
            idx = idx // self.branching
        return out

    def index(self, word: Sequence[int]) -> int:
        i = 0
        for j in word:
            if not 0 <= j < self.branching:
                raise ValidationError(f"letter {j} outside 0..{self.dim}")
            i = i * self.branching + int(j)
        return i

    def word(self, n: int, index: int) -> tuple:
        out = []
        for _ in range(n):
            index, j = divmod(index, self.branching)
            out.append(j)
        return tuple(reversed(out))

    def increments(self, n: int) -> np.ndarray:
        """``Delta X_n`` at every depth-``n`` node, shape ``(size(n), d)``."""
        return self.basis.vectors.T[self.letters(n)]

    def positions(self, n: int) -> np.ndarray:
        """``X_n`` at every depth-``n`` node, shape ``(size(n), d)``."""
        self._check_depth(n)
        if self._positions is None:
            pos = [np.zeros((1, self.dim))]
            vt = self.basis.vectors.T
            for _ in range(self.horizon):
                prev = pos[-1]
                nxt = (prev[:, None, :] + vt[None, :, :]).reshape(-1, self.dim)
                pos.append(nxt)
            for p in pos:
                p.setflags(write=False)
            self._positions = pos
        return self._positions[n]

    def lift(self, values, n: int, to: int | None = None) -> np.ndarray:
        """Repeat a depth-``n`` slice down to depth ``to`` (default: leaves)."""
        to = self.horizon if to is None else to
        self._check_depth(n)
        self._check_depth(to)
        values = np.asarray(values, dtype=float)
        if values.shape[0] != self.size(n):
            raise DepthMismatch(f"slice of length {values.shape[0]} is not a depth-{n} slice")
        if to < n:
            raise DepthMismatch("can only lift to a deeper level")
        return np.repeat(values, self.branching ** (to - n), axis=0)

    def ancestors(self, n: int, m: int) -> np.ndarray:
        """Index of the depth-``m`` ancestor of every depth-``n`` node."""
        self._check_depth(n)
        self._check_depth(m)
        return np.arange(self.size(n)) // self.branching ** (n - m)

    def depth_of(self, values) -> int:
        length = np.asarray(values).shape[0]
        size = 1
        for n in range(self.horizon + 1):
            if size == length:
                return n
            size *= self.branching
        raise DepthMismatch(f"no depth has {length} nodes")


def build_tree(basis: Basis, horizon: int, cap: int = DEFAULT_CAP) -> ScenarioTree:
    return ScenarioTree(basis, horizon, cap)


class AdaptedField:
    """Values at every node of depths ``0..N``; ``field[n]`` is the depth-``n`` slice."""

    def __init__(self, tree: ScenarioTree, slices):
        slices = [np.asarray(s, dtype=float) for s in slices]
        if len(slices) != tree.horizon + 1:
            raise DepthMismatch(f"need {tree.horizon + 1} slices, got {len(slices)}")
        for n, s in enumerate(slices):
            if s.shape[0] != tree.size(n):
                raise DepthMismatch(f"slice {n} has {s.shape[0]} entries, expected {tree.size(n)}")
        self.tree = tree
        self.slices = slices

    def __getitem__(self, n: int) -> np.ndarray:
        return self.slices[n]

    def __len__(self):
        return len(self.slices)

    @property
    def terminal(self) -> np.ndarray:
        return self.slices[-1]

    @classmethod
    def constant(cls, tree: ScenarioTree, value) -> "AdaptedField":
        value = np.asarray(value, dtype=float)
        return cls(tree, [np.broadcast_to(value, (tree.size(n),) + value.shape).copy()
                          for n in range(tree.horizon + 1)])


class PredictableField:
    """Values indexed by time ``n = 1..N`` and living on depth ``n-1`` nodes.

    ``field[n]`` has ``(d+1)^(n-1)`` rows; trailing dimensions hold vector
    values (a ``d``-vector strategy, a ``(d+1)``-kernel, ...).
    """

    def __init__(self, tree: ScenarioTree, slices):
        slices = [np.asarray(s, dtype=float) for s in slices]
        if len(slices) != tree.horizon:
            raise DepthMismatch(f"need {tree.horizon} slices, got {len(slices)}")
        for n, s in enumerate(slices, start=1):
            if s.shape[0] != tree.size(n - 1):
                raise DepthMismatch(
                    f"time-{n} slice has {s.shape[0]} entries, expected {tree.size(n - 1)}"
                )
        self.tree = tree
        self.slices = slices

    def __getitem__(self, n: int) -> np.ndarray:
        if not 1 <= n <= len(self.slices):
            raise DepthMismatch(f"time {n} outside 1..{len(self.slices)}")
        return self.slices[n - 1]

    def __len__(self):
        return len(self.slices)

    @property
    def deterministic(self) -> bool:
        """True when every time slice is constant across nodes."""
        return all(np.all(s == s[:1]) for s in self.slices)

    @classmethod
    def constant(cls, tree: ScenarioTree, value) -> "PredictableField":
        value = np.asarray(value, dtype=float)
        return cls(tree, [np.broadcast_to(value, (tree.size(n - 1),) + value.shape).copy()
                          for n in range(1, tree.horizon + 1)])

    @classmethod
    def per_time(cls, tree: ScenarioTree, values) -> "PredictableField":
        """Deterministic field from one value per time ``1..N``."""
        values = [np.asarray(v, dtype=float) for v in values]
        if len(values) != tree.horizon:
            raise DepthMismatch(f"need {tree.horizon} per-time values, got {len(values)}")
        return cls(tree, [np.broadcast_to(v, (tree.size(n - 1),) + v.shape).copy()
                          for n, v in enumerate(values, start=1)])

    @classmethod
    def from_function(cls, tree: ScenarioTree, fn) -> "PredictableField":
        """Field with ``field[n] = fn(n, X_{n-1})`` evaluated on all depth ``n-1`` nodes."""
        return cls(tree, [fn(n, tree.positions(n - 1)) for n in range(1, tree.horizon + 1)])

    def lifted_sum(self) -> np.ndarray:
        """``sum_n field[n]`` as a leaf vector (scalar fields only)."""
        total = np.zeros(self.tree.n_leaves)
        for n in range(1, self.tree.horizon + 1):
            total += self.tree.lift(self[n], n - 1)
        return total

    def pathwise_integral(self, upto: int | None = None) -> np.ndarray:
        """``sum_{k<=upto} field[k] . Delta X_k`` at depth ``upto`` (default ``N``)."""
        tree = self.tree
        upto = tree.horizon if upto is None else upto
        total = np.zeros(tree.size(upto))
        for k in range(1, upto + 1):
            dx = tree.increments(k)
            step = np.einsum("ij,ij->i", tree.lift(self[k], k - 1, k), dx)
            total += tree.lift(step, k, upto)
        return total


def as_predictable(tree: ScenarioTree, value, rank: int = 0) -> PredictableField:
    """Coerce ``value`` into a predictable field whose entries have ``rank`` dims.

    Accepts a :class:`PredictableField`, one constant entry, or a sequence
    of ``N`` entries (one per time).
    """
    if isinstance(value, PredictableField):
        return value
    arr = np.asarray(value, dtype=float)
    if arr.ndim == rank:
        return PredictableField.constant(tree, arr)
    if arr.ndim == rank + 1:
        return PredictableField.per_time(tree, arr)
    raise ValidationError(f"cannot read a rank-{rank} predictable field from shape {arr.shape}")


class Measure:
    """Probability on the leaves, described by its one-step kernels."""

    def __init__(self, tree: ScenarioTree, kernel, interior_eps: float | None = None):
        if not isinstance(kernel, PredictableField):
            kernel = PredictableField(tree, kernel)
        for n in range(1, tree.horizon + 1):
            k = kernel[n]
            if k.ndim != 2 or k.shape[1] != tree.branching:
                raise ValidationError(f"time-{n} kernel must have {tree.branching} columns")
            if not is_simplex(k, SIMPLEX_TOL):
                raise ValidationError(f"time-{n} kernel has rows outside the simplex")
            if interior_eps is not None and np.any(k < interior_eps):
                raise ValidationError(f"time-{n} kernel is not strictly interior")
        self.tree = tree
        self.kernel = kernel

    def __getitem__(self, n: int) -> np.ndarray:
        return self.kernel[n]

    @classmethod
    def constant(cls, tree: ScenarioTree, p) -> "Measure":
        """Measure with the same kernel ``p`` at every node (iid increments)."""
        return cls(tree, PredictableField.constant(tree, p))

    @classmethod
    def uniform(cls, tree: ScenarioTree) -> "Measure":
        return cls.constant(tree, np.full(tree.branching, 1.0 / tree.branching))

    def is_interior(self, eps: float = INTERIOR_EPS) -> bool:
        return all(np.all(self.kernel[n] >= eps) for n in range(1, self.tree.horizon + 1))

    def path_weights(self, upto: int | None = None) -> np.ndarray:
        """Probability of every depth-``upto`` node (default: leaves)."""
        upto = self.tree.horizon if upto is None else upto
        w = np.ones(1)
        for n in range(1, upto + 1):
            w = (w[:, None] * self.kernel[n]).reshape(-1)
        return w

    def expectation(self, terminal) -> float:
        terminal = np.asarray(terminal, dtype=float)
        return float(self.path_weights() @ terminal)


def martingale_measure(tree: ScenarioTree) -> Measure:
    """The unique measure making ``X`` a martingale: uniform one-step kernels."""
    return Measure.uniform(tree)


def density(measure: Measure, reference: Measure) -> AdaptedField:
    """Density process ``L_n`` of ``measure`` with respect to ``reference``.

    ``L_n`` multiplies the kernel ratios along the first ``n`` letters of
    the word; it is a martingale under ``reference`` with ``L_0 = 1``.
    """
    tree = measure.tree
    slices = [np.ones(1)]
    for n in range(1, tree.horizon + 1):
        num, den = measure[n], reference[n]
        bad = (den <= 0) & (num > 0)
        if np.any(bad):
            raise NonEquivalent(f"reference kernel vanishes where the measure does not at time {n}")
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(den > 0, num / den, 0.0)
        slices.append((slices[-1][:, None] * ratio).reshape(-1))
    return AdaptedField(tree, slices)


def conditional_expectation(tree: ScenarioTree, measure: Measure, field, n: int, m: int | None = None):
    """``E[field | F_n]`` as a depth-``n`` slice.

    ``field`` is a depth-``m`` slice (depth inferred from its length when
    ``m`` is omitted) or an :class:`AdaptedField`, in which case its
    terminal slice is used. Trailing dimensions are averaged componentwise.
    """
    if isinstance(field, AdaptedField):
        values, m = field.terminal, tree.horizon
    else:
        values = np.asarray(field, dtype=float)
        m = tree.depth_of(values) if m is None else m
    if values.shape[0] != tree.size(m):
        raise DepthMismatch(f"slice of length {values.shape[0]} is not at depth {m}")
    if n > m:
        raise DepthMismatch(f"cannot condition a depth-{m} variable on F_{n} with n > m")
    b = tree.branching
    extra = values.shape[1:]
    for k in range(m, n, -1):
        kern = measure[k].reshape((-1, b) + (1,) * len(extra))
        values = (values.reshape((-1, b) + extra) * kern).sum(axis=1)
    return values


# --- CSV import / export -----------------------------------------------------

def _word_str(word) -> str:
    return ".".join(str(j) for j in word)


def _parse_word(s: str) -> tuple:
    return tuple(int(c) for c in s.split(".")) if s else ()


def _fmt(x) -> str:
    return format(float(x), ".17g")


def write_adapted_csv(field: AdaptedField, path) -> None:
    """Rows ``n, word, value...`` for every node of every depth."""
    tree = field.tree
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        width = int(np.prod(field[0].shape[1:], dtype=int))
        w.writerow(["n", "word"] + (["value"] if width == 1 else [f"value{i}" for i in range(width)]))
        for n in range(tree.horizon + 1):
            vals = field[n].reshape(tree.size(n), -1)
            for i in range(tree.size(n)):
                w.writerow([n, _word_str(tree.word(n, i))] + [_fmt(x) for x in vals[i]])


def read_adapted_csv(tree: ScenarioTree, path) -> AdaptedField:
    slices = [None] * (tree.horizon + 1)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    for row in rows:
        n = int(row[0])
        if slices[n] is None:
            slices[n] = np.full((tree.size(n), len(row) - 2), np.nan)
        slices[n][tree.index(_parse_word(row[1]))] = [float(x) for x in row[2:]]
    if any(s is None or np.isnan(s).any() for s in slices):
        raise DepthMismatch(f"{path} does not cover every node")
    return AdaptedField(tree, [s[:, 0] if s.shape[1] == 1 else s for s in slices])


def write_predictable_csv(field: PredictableField, path, label: str = "value") -> None:
    """Rows ``n, word, value...`` where ``word`` is the depth ``n-1`` parent."""
    tree = field.tree
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        width = int(np.prod(field[1].shape[1:], dtype=int))
        w.writerow(["n", "word"] + ([label] if width == 1 else [f"{label}{i}" for i in range(width)]))
        for n in range(1, tree.horizon + 1):
            vals = field[n].reshape(tree.size(n - 1), -1)
            for i in range(tree.size(n - 1)):
                w.writerow([n, _word_str(tree.word(n - 1, i))] + [_fmt(x) for x in vals[i]])


def read_predictable_csv(tree: ScenarioTree, path) -> PredictableField:
    slices = [None] * tree.horizon
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    for row in rows:
        n = int(row[0])
        if slices[n - 1] is None:
            slices[n - 1] = np.full((tree.size(n - 1), len(row) - 2), np.nan)
        slices[n - 1][tree.index(_parse_word(row[1]))] = [float(x) for x in row[2:]]
    if any(s is None or np.isnan(s).any() for s in slices):
        raise DepthMismatch(f"{path} does not cover every node")
    return PredictableField(tree, [s[:, 0] if s.shape[1] == 1 else s for s in slices])


def write_measure_csv(measure: Measure, path) -> None:
    write_predictable_csv(measure.kernel, path, label="p")


def read_measure_csv(tree: ScenarioTree, path) -> Measure:
    return Measure(tree, read_predictable_csv(tree, path))
