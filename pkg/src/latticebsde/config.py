"""JSON run configuration: parsing and construction of trees, drivers and payoffs.

Schema (keys marked * are required)::

    {
      "basis"*:     {"vectors": [[...], ...]} or {"covariance": [[...], ...]},
      "horizon"*:   int,
      "cap":        int (tree size limit, default 1e6),
      "reference":  kernel [p_0, ..., p_d] (default uniform),
      "driver":     driver spec (default {"kind": "zero"}),
      "payoff":     payoff spec (default {"kind": "constant", "value": 0}),
      "markov":     bool, solve on the recombining lattice when possible,
      "agents":     [{"driver": spec, "endowment": payoff spec}, ...],
      "supply":     d-vector or list of N d-vectors,
      "robust":     {"alternatives": int},
      "invest":     {"certify": int, "wealth": float, "numeric_argmax": bool},
      "tolerances": {"equilibrium": float, "certificate": float}
    }

Driver specs by ``kind``:

* ``zero``
* ``linear``: ``slope`` (d-vector or N of them), ``intercept`` (scalar or N)
* ``entropic``: ``risk_aversion``, ``belief`` (kernel, N kernels, or
  ``"reference"``), ``shift``
* ``worstcase``: optional ``kernels`` (list of kernels); all of Theta when absent
* ``supconv``: ``children`` (list of driver specs)

Payoff specs by ``kind``: ``constant`` (``value``), ``linear`` (``weights``,
``offset``), ``call`` (``weights``, ``strike``), ``indicator`` (``weights``,
``level``), ``variance_swap`` (``notional``; pays ``notional * X_{N,2}``),
``table`` (``values``, one per leaf in tree order).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import feynman_kac as fk
from .drivers import (
    Driver,
    EntropicDriver,
    EntropicSpec,
    LinearDriver,
    WorstCaseDriver,
    sup_convolution,
    zero_driver,
)
from .errors import ConfigInvalid, LatticeBSDEError
from .lattice import Basis, basis_from_dict
from .scenario import DEFAULT_CAP, Measure, ScenarioTree, as_predictable

DRIVER_KINDS = ("zero", "linear", "entropic", "worstcase", "supconv")
PAYOFF_KINDS = ("constant", "linear", "call", "indicator", "variance_swap", "table")


def _require(obj, key, path):
    if not isinstance(obj, dict):
        raise ConfigInvalid(path, "expected an object")
    if key not in obj:
        raise ConfigInvalid(f"{path}.{key}", "required field is missing")
    return obj[key]


def _number(x, path, positive=False):
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise ConfigInvalid(path, f"expected a number, got {type(x).__name__}")
    if positive and x <= 0:
        raise ConfigInvalid(path, "must be positive")
    return float(x)


def _array(x, path, ndim=None):
    try:
        arr = np.asarray(x, dtype=float)
    except (TypeError, ValueError):
        raise ConfigInvalid(path, "expected a numeric array") from None
    if ndim is not None and arr.ndim not in ndim:
        raise ConfigInvalid(path, f"expected an array of rank {' or '.join(map(str, ndim))}")
    return arr


@dataclass
class RunConfig:
    raw: dict
    basis: Basis
    tree: ScenarioTree
    reference: Measure
    driver_spec: dict
    payoff_spec: dict
    markov: bool = False
    options: dict = field(default_factory=dict)

    def driver(self, spec=None, path="config.driver") -> Driver:
        return build_driver(self, self.driver_spec if spec is None else spec, path)

    def payoff(self, spec=None, path="config.payoff") -> np.ndarray:
        return build_payoff(self.tree, self.payoff_spec if spec is None else spec, path)


def load(path) -> RunConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigInvalid("config", f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigInvalid("config", f"not valid JSON ({exc.msg} at line {exc.lineno})") from exc
    return parse(raw)


def parse(raw) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigInvalid("config", "top level must be an object")
    bspec = _require(raw, "basis", "config")
    if not isinstance(bspec, dict) or not ({"vectors", "covariance"} & set(bspec)):
        raise ConfigInvalid("config.basis", "needs 'vectors' or 'covariance'")
    try:
        basis = basis_from_dict(bspec)
    except LatticeBSDEError as exc:
        raise ConfigInvalid("config.basis", str(exc)) from exc
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid("config.basis", f"malformed: {exc}") from exc
    horizon = _require(raw, "horizon", "config")
    if isinstance(horizon, bool) or not isinstance(horizon, int) or horizon < 1:
        raise ConfigInvalid("config.horizon", "must be a positive integer")
    cap = raw.get("cap", DEFAULT_CAP)
    tree = ScenarioTree(basis, horizon, int(cap))  # TreeTooLarge propagates (exit 2)
    if "reference" in raw:
        ref = _array(raw["reference"], "config.reference", ndim=(1, 2))
        try:
            reference = Measure(tree, as_predictable(tree, ref, rank=1), interior_eps=1e-12)
        except LatticeBSDEError as exc:
            raise ConfigInvalid("config.reference", str(exc)) from exc
    else:
        reference = Measure.uniform(tree)
    driver_spec = raw.get("driver", {"kind": "zero"})
    payoff_spec = raw.get("payoff", {"kind": "constant", "value": 0.0})
    options = {k: raw.get(k, {}) for k in ("robust", "invest", "tolerances")}
    for k, v in options.items():
        if not isinstance(v, dict):
            raise ConfigInvalid(f"config.{k}", "expected an object")
    cfg = RunConfig(raw, basis, tree, reference, driver_spec, payoff_spec, bool(raw.get("markov", False)), options)
    # build once so that errors surface with their path before any work is done
    cfg.driver()
    cfg.payoff()
    for i, agent in enumerate(raw.get("agents", []) or []):
        cfg.driver(_require(agent, "driver", f"config.agents[{i}]"), f"config.agents[{i}].driver")
        if "endowment" in agent:
            cfg.payoff(agent["endowment"], f"config.agents[{i}].endowment")
    if "supply" in raw:
        supply_field(cfg)
    return cfg


def supply_field(cfg: RunConfig):
    if "supply" not in cfg.raw:
        return None
    arr = _array(cfg.raw["supply"], "config.supply", ndim=(1, 2))
    try:
        return as_predictable(cfg.tree, arr, rank=1)
    except LatticeBSDEError as exc:
        raise ConfigInvalid("config.supply", str(exc)) from exc


def _kernel_field(cfg, value, path):
    if isinstance(value, str):
        if value == "reference":
            return cfg.reference
        if value == "uniform":
            return Measure.uniform(cfg.tree)
        raise ConfigInvalid(path, f"unknown belief {value!r}")
    arr = _array(value, path, ndim=(1, 2))
    if arr.shape[-1] != cfg.tree.branching:
        raise ConfigInvalid(path, f"kernels need {cfg.tree.branching} entries")
    try:
        return Measure(cfg.tree, as_predictable(cfg.tree, arr, rank=1))
    except LatticeBSDEError as exc:
        raise ConfigInvalid(path, str(exc)) from exc


def build_driver(cfg: RunConfig, spec, path="config.driver") -> Driver:
    tree = cfg.tree
    kind = _require(spec, "kind", path)
    if kind not in DRIVER_KINDS:
        raise ConfigInvalid(f"{path}.kind", f"unknown driver kind {kind!r}; expected one of {', '.join(DRIVER_KINDS)}")
    try:
        if kind == "zero":
            return zero_driver(tree)
        if kind == "linear":
            slope = _array(spec.get("slope", np.zeros(tree.dim)), f"{path}.slope", ndim=(1, 2))
            if slope.shape[-1] != tree.dim:
                raise ConfigInvalid(f"{path}.slope", f"slope must have {tree.dim} components")
            intercept = _array(spec.get("intercept", 0.0), f"{path}.intercept", ndim=(0, 1))
            return LinearDriver(tree, slope, intercept)
        if kind == "entropic":
            G = _array(_require(spec, "risk_aversion", path), f"{path}.risk_aversion", ndim=(0, 1))
            belief = _kernel_field(cfg, spec.get("belief", "reference"), f"{path}.belief")
            B = _array(spec.get("shift", 1.0), f"{path}.shift", ndim=(0, 1))
            return EntropicDriver(EntropicSpec(belief, as_predictable(tree, G), as_predictable(tree, B)))
        if kind == "worstcase":
            if "kernels" not in spec:
                return WorstCaseDriver(tree)
            ks = spec["kernels"]
            if not isinstance(ks, list):
                raise ConfigInvalid(f"{path}.kernels", "expected a list of kernels")
            return WorstCaseDriver(tree, [_kernel_field(cfg, k, f"{path}.kernels[{i}]") for i, k in enumerate(ks)])
        children = _require(spec, "children", path)
        if not isinstance(children, list) or not children:
            raise ConfigInvalid(f"{path}.children", "expected a non-empty list")
        return sup_convolution([build_driver(cfg, c, f"{path}.children[{i}]") for i, c in enumerate(children)])
    except ConfigInvalid:
        raise
    except LatticeBSDEError as exc:
        raise ConfigInvalid(path, str(exc)) from exc


def _weights(spec, path, d):
    w = _array(_require(spec, "weights", path), f"{path}.weights", ndim=(1,))
    if w.shape != (d,):
        raise ConfigInvalid(f"{path}.weights", f"expected {d} weights")
    return w


def payoff_function(spec, path, d):
    """Payoff as a function of terminal coordinates, or ``None`` for ``table``."""
    kind = _require(spec, "kind", path)
    if kind not in PAYOFF_KINDS:
        raise ConfigInvalid(f"{path}.kind", f"unknown payoff kind {kind!r}; expected one of {', '.join(PAYOFF_KINDS)}")
    if kind == "constant":
        c = _number(spec.get("value", 0.0), f"{path}.value")
        return lambda x: np.full(len(x), c)
    if kind == "linear":
        return fk.linear_payoff(_weights(spec, path, d), _number(spec.get("offset", 0.0), f"{path}.offset"))
    if kind == "call":
        return fk.call_payoff(_weights(spec, path, d), _number(_require(spec, "strike", path), f"{path}.strike"))
    if kind == "indicator":
        return fk.indicator_payoff(_weights(spec, path, d), _number(_require(spec, "level", path), f"{path}.level"))
    if kind == "variance_swap":
        if d < 2:
            raise ConfigInvalid(path, "the variance swap leg needs d >= 2")
        notional = _number(spec.get("notional", 1.0), f"{path}.notional")
        return lambda x: notional * np.asarray(x)[:, 1]
    return None


def build_payoff(tree: ScenarioTree, spec, path="config.payoff") -> np.ndarray:
    fn = payoff_function(spec, path, tree.dim)
    if fn is not None:
        return np.asarray(fn(tree.positions(tree.horizon)), dtype=float)
    values = _array(_require(spec, "values", path), f"{path}.values", ndim=(1,))
    if values.shape != (tree.n_leaves,):
        raise ConfigInvalid(f"{path}.values", f"expected {tree.n_leaves} leaf values, got {values.size}")
    return values


def markov_parts(cfg: RunConfig):
    """``(h, f)`` for the lattice solver, or ``None`` when the run is not Markov."""
    spec, pspec = cfg.driver_spec, cfg.payoff_spec
    h = payoff_function(pspec, "config.payoff", cfg.basis.dim)
    if h is None:
        return None
    kind = spec.get("kind")
    if kind == "zero":
        return h, None
    if kind == "linear":
        slope = np.asarray(spec.get("slope", np.zeros(cfg.basis.dim)), dtype=float)
        icpt = np.asarray(spec.get("intercept", 0.0), dtype=float)
        if slope.ndim != 1 or icpt.ndim != 0:
            return None
        return h, lambda n, x, z: z @ slope + float(icpt)
    if kind == "entropic":
        G, B = np.asarray(spec["risk_aversion"], float), np.asarray(spec.get("shift", 1.0), float)
        belief = spec.get("belief", "reference")
        if G.ndim or B.ndim:
            return None
        if isinstance(belief, str):
            if belief == "uniform" or "reference" not in cfg.raw:
                belief = np.full(cfg.basis.branching, 1.0 / cfg.basis.branching)
            else:
                belief = np.asarray(cfg.raw["reference"], float)
        belief = np.asarray(belief, float)
        if belief.ndim != 1:
            return None
        return h, fk.EntropicMarkov(cfg.basis, float(G), belief, float(B))
    return None
