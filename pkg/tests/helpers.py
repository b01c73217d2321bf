"""Independent oracles for the test suite.

Everything here enumerates words explicitly with itertools instead of going
through the tree indexing or the backward solver, so agreement with the
package is a genuine second route.
"""

import itertools

import numpy as np

from latticebsde import basis_from_vectors


def random_basis(rng, d, max_cond=50.0):
    """Random basis with a reasonably conditioned Gram matrix."""
    while True:
        vec = rng.standard_normal((d, d))
        if np.linalg.cond(vec) < max_cond:
            return basis_from_vectors(vec)


def random_kernel(rng, size, b, floor=0.05):
    p = rng.dirichlet(np.ones(b), size) + floor
    return p / p.sum(axis=-1, keepdims=True)


def all_words(b, n):
    return list(itertools.product(range(b), repeat=n))


def word_index(word, b):
    i = 0
    for j in word:
        i = i * b + j
    return i


def leaf_probabilities(kernels, b, horizon):
    """Path probabilities from per-time kernel arrays ``kernels[n-1][node]``."""
    out = np.zeros(b**horizon)
    for word in all_words(b, horizon):
        prob = 1.0
        for k in range(horizon):
            prob *= kernels[k][word_index(word[:k], b)][word[k]]
        out[word_index(word, b)] = prob
    return out


def leaf_positions(basis, horizon):
    v = basis.vectors
    out = np.zeros((basis.branching**horizon, basis.dim))
    for word in all_words(basis.branching, horizon):
        out[word_index(word, basis.branching)] = sum(v[:, j] for j in word)
    return out


def entropic_value(Y, kernels, b, horizon, gamma):
    """``-(1/gamma) log E_P[exp(-gamma Y)]`` by path enumeration."""
    w = leaf_probabilities(kernels, b, horizon)
    m = np.max(-gamma * Y)
    return -(m + np.log(np.sum(w * np.exp(-gamma * Y - m)))) / gamma


def predictable_selection_min(Y, kernel_sets, horizon):
    """Minimum of ``E_P[Y]`` over every per-node choice of kernel (d = 1).

    ``kernel_sets[k]`` is a list of length-2 kernels available at time
    ``k+1``. Each selection is one digit per non-terminal node; all of
    them are enumerated.
    """
    b = 2
    nodes = sum(b**k for k in range(horizon))
    m = len(kernel_sets[0])
    sel = np.array(list(itertools.product(range(m), repeat=nodes)))  # (S, nodes)
    offsets = np.cumsum([0] + [b**k for k in range(horizon)])
    best = np.inf
    chunk = 4096
    for start in range(0, len(sel), chunk):
        s = sel[start:start + chunk]
        w = np.ones((len(s), 1))
        for k in range(horizon):
            ks = np.array(kernel_sets[k])  # (m, 2)
            choice = s[:, offsets[k]:offsets[k + 1]]  # (S, b**k)
            step = ks[choice]  # (S, b**k, 2)
            w = (w[:, :, None] * step).reshape(len(s), -1)
        best = min(best, float((w @ Y).min()))
    return best


def deterministic_selection_min(Y, kernel_sets, horizon):
    """Minimum over the ``m**N`` time-only selections."""
    best = np.inf
    for choice in itertools.product(range(len(kernel_sets[0])), repeat=horizon):
        kernels = [[kernel_sets[k][choice[k]]] * (2**k) for k in range(horizon)]
        best = min(best, float(leaf_probabilities(kernels, 2, horizon) @ Y))
    return best
