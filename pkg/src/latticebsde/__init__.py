"""Backward stochastic difference equations on lattices.

Submodules: :mod:`lattice` (increment basis), :mod:`scenario` (path tree,
fields, measures), :mod:`drivers`, :mod:`bsde` (solver and its
properties), :mod:`feynman_kac` (recombining-lattice recursion),
:mod:`portfolio` (optimal investment), :mod:`equilibrium` and :mod:`cli`.
"""

from .bsde import Solution, g_expectation, robust_representation, solve, solve_linear, translate
from .drivers import (
    EntropicDriver,
    EntropicSpec,
    LinearDriver,
    WorstCaseDriver,
    check_balance,
    entropic_sup_convolution,
    extract_driver,
    legendre_b,
    sup_convolution,
    zero_driver,
)
from .lattice import Basis, affine_decompose, basis_from_covariance, basis_from_vectors, theta_min
from .scenario import AdaptedField, Measure, PredictableField, ScenarioTree, build_tree, martingale_measure

__version__ = "0.1.0"
