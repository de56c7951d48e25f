"""Drift fields, rate-matrix fields and the model bundle that ties them together.

Fields are vectorised: ``DriftField.frame_all(X)`` returns the frame
components of b(x, i) for every state, shape (..., N, d), and
``RateMatrixField.matrix(X)`` returns generators of shape (..., N, N).

Builtin families can be built from short textual specs such as
``"twostate{a: 1, beta: 0.5}"`` (YAML flow mapping inside the braces) or
from mappings ``{"family": "twostate", "a": 1}``.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np
import yaml

from .errors import ConfigError, ContractViolation
from .geometry import Euclidean, Manifold, Sphere2, TangentVector, Torus2, manifold_from_id


class DriftField:
    """b(x, i) given by an ambient-vector function ``func(X) -> (..., N, amb)``."""

    def __init__(self, manifold: Manifold, n_states: int, func: Callable, name="drift",
                 x_independent=False, params=None):
        self.manifold = manifold
        self.n_states = int(n_states)
        self.func = func
        self.name = name
        self.x_independent = bool(x_independent)
        self.params = dict(params or {})

    def __repr__(self):
        return f"DriftField({self.name}, N={self.n_states}, {self.manifold.name})"

    def ambient_all(self, X):
        X = np.asarray(X, dtype=float)
        V = np.asarray(self.func(X), dtype=float)
        V = np.broadcast_to(V, X.shape[:-1] + (self.n_states, self.manifold.amb_dim))
        return self.manifold.tangent_project(X[..., None, :], V)

    def frame_all(self, X):
        X = np.asarray(X, dtype=float)
        return self.manifold.to_frame(X[..., None, :], self.ambient_all(X))

    def __call__(self, x, i: int) -> TangentVector:
        if not 0 <= i < self.n_states:
            raise ContractViolation(f"switch state {i} out of range")
        return TangentVector(x, self.frame_all(x.coords)[i])

    def max_norm(self, X):
        return float(np.max(np.linalg.norm(self.frame_all(X), axis=-1)))


class RateMatrixField:
    """x -> (q_ij(x)) given by ``func(X) -> (..., N, N)``."""

    def __init__(self, n_states: int, func: Callable, name="rates", x_independent=False,
                 params=None, rate_bound=None):
        self.n_states = int(n_states)
        self.rate_bound = rate_bound
        self.func = func
        self.name = name
        self.x_independent = bool(x_independent)
        self.params = dict(params or {})

    def __repr__(self):
        return f"RateMatrixField({self.name}, N={self.n_states})"

    def matrix(self, X):
        X = np.asarray(X, dtype=float)
        Q = np.asarray(self.func(X), dtype=float)
        return np.broadcast_to(Q, X.shape[:-1] + (self.n_states, self.n_states))

    def __call__(self, x):
        return self.matrix(x.coords)

    def max_rate(self, X=None):
        """Largest total exit rate, sampled at X (or anywhere if constant)."""
        if X is None:
            if not self.x_independent:
                raise ContractViolation("sample points needed for a spatial rate field")
            X = np.zeros((1, 3))
        Q = self.matrix(X)
        return float(np.max(-np.diagonal(Q, axis1=-2, axis2=-1)))


@dataclass
class Model:
    manifold: Manifold
    drift: DriftField
    rates: RateMatrixField
    label: str = ""
    spec: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if self.drift.n_states != self.rates.n_states:
            raise ContractViolation("drift and rate field disagree on the number of states")
        if self.drift.manifold != self.manifold:
            raise ContractViolation("drift lives on a different manifold")

    @property
    def n_states(self):
        return self.rates.n_states

    @property
    def x_independent(self):
        """True when neither rates nor frame drift components depend on x."""
        return self.rates.x_independent and self.drift.x_independent and self.manifold.flat

    @property
    def dim(self):
        return self.manifold.dim

    def max_rate(self, X=None):
        """Bound on the total exit rate (global when the family provides one)."""
        if self.rates.rate_bound is not None:
            return float(self.rates.rate_bound)
        if self.rates.x_independent:
            return self.rates.max_rate(np.zeros((1, self.manifold.amb_dim)))
        if X is None:
            raise ContractViolation("sample points needed for a spatial rate field")
        return self.rates.max_rate(X)

    def __repr__(self):
        return f"Model({self.label or 'custom'}, {self.manifold.name}, N={self.n_states})"


# --------------------------------------------------------------------------
# builtin families
# --------------------------------------------------------------------------


def _smooth_profile(m: Manifold):
    """A bounded smooth scalar s(x) in [-1, 1] used by spatial rate families."""
    if isinstance(m, Euclidean):
        return lambda X: np.tanh(X[..., 0])
    if isinstance(m, Sphere2):
        return lambda X: X[..., 2]
    return lambda X: np.sin(X[..., 0])


def _axis_vector(m: Manifold, axis):
    if axis is None:
        axis = [0.0, 0.0, 1.0] if isinstance(m, Sphere2) else [1.0] + [0.0] * (m.amb_dim - 1)
    a = np.asarray(axis, dtype=float).reshape(-1)
    if a.shape[0] != m.amb_dim:
        raise ConfigError(f"axis must have {m.amb_dim} components")
    return a / np.linalg.norm(a)


def drift_family(m: Manifold, name: str, n_states: int, **p) -> DriftField:
    name = name.lower()
    N = int(n_states)
    if name == "zero":
        return DriftField(m, N, lambda X: np.zeros(X.shape[:-1] + (N, m.amb_dim)), "zero",
                          x_independent=True)
    if name == "constant":
        vecs = np.asarray(p.get("vectors", p.get("value", [0.0] * m.amb_dim)), dtype=float)
        if vecs.ndim == 1:
            vecs = np.tile(vecs, (N, 1))
        if vecs.shape != (N, m.amb_dim):
            raise ConfigError(f"constant drift needs {N} vectors of length {m.amb_dim}")
        return DriftField(m, N, lambda X: np.broadcast_to(vecs, X.shape[:-1] + vecs.shape),
                          "constant", x_independent=m.flat, params={"vectors": vecs.tolist()})
    if name == "pm":
        beta = float(p.get("beta", 1.0))
        a = _axis_vector(m, p.get("axis"))
        if N != 2:
            raise ConfigError("pm drift needs two states")
        vecs = np.stack([beta * a, -beta * a])
        return DriftField(m, N, lambda X: np.broadcast_to(vecs, X.shape[:-1] + vecs.shape),
                          "pm", x_independent=m.flat, params={"beta": beta})
    if name == "ou":
        if not isinstance(m, Euclidean):
            raise ConfigError("ou drift is only defined on Euclidean space")
        kappa = float(p.get("kappa", 1.0))
        centers = np.asarray(p.get("centers", np.zeros((N, m.dim))), dtype=float).reshape(N, m.dim)
        return DriftField(m, N, lambda X: -kappa * (X[..., None, :] - centers), "ou",
                          params={"kappa": kappa, "centers": centers.tolist()})
    if name == "rotation":
        if not isinstance(m, Sphere2):
            raise ConfigError("rotation drift is only defined on the sphere")
        omega = np.asarray(p.get("omega", [1.0] * N), dtype=float).reshape(-1)
        if omega.size == 1:
            omega = np.repeat(omega, N)
        a = _axis_vector(m, p.get("axis"))
        return DriftField(m, N, lambda X: omega[:, None] * np.cross(a, X)[..., None, :],
                          "rotation", params={"omega": omega.tolist()})
    raise ConfigError(f"unknown drift family '{name}'")


def rate_family(m: Manifold, name: str, **p) -> RateMatrixField:
    name = name.lower()
    if name in ("single", "none"):
        return RateMatrixField(1, lambda X: np.zeros(X.shape[:-1] + (1, 1)), "single",
                               x_independent=True)
    if name == "twostate":
        a12 = float(p.get("a12", p.get("a", 1.0)))
        a21 = float(p.get("a21", p.get("a", 1.0)))
        Q = np.array([[-a12, a12], [a21, -a21]])
        return RateMatrixField(2, lambda X: Q, "twostate", x_independent=True,
                               params={"a12": a12, "a21": a21})
    if name == "cycle3":
        r = float(p.get("rate", 1.0))
        Q = r * np.array([[-1.0, 1.0, 0.0], [0.0, -1.0, 1.0], [1.0, 0.0, -1.0]])
        return RateMatrixField(3, lambda X: Q, "cycle3", x_independent=True, params={"rate": r})
    if name == "twostate_spatial":
        a0 = float(p.get("a0", 1.0))
        a1 = float(p.get("a1", 0.5))
        if a0 <= abs(a1):
            raise ConfigError("twostate_spatial needs a0 > |a1| to keep rates positive")
        s = _smooth_profile(m)

        def q(X):
            r12 = a0 + a1 * s(X)
            r21 = a0 - a1 * s(X)
            return np.stack([np.stack([-r12, r12], -1), np.stack([r21, -r21], -1)], -2)

        return RateMatrixField(2, q, "twostate_spatial", params={"a0": a0, "a1": a1},
                               rate_bound=a0 + abs(a1))
    if name == "matrix":
        Q = np.asarray(p["q"], dtype=float)
        return RateMatrixField(Q.shape[0], lambda X: Q, "matrix", x_independent=True,
                               params={"q": Q.tolist()})
    raise ConfigError(f"unknown rate family '{name}'")


def parse_family(spec) -> tuple[str, dict]:
    """'name{k: v, ...}' or {'family': name, ...} -> (name, params)."""
    if isinstance(spec, dict):
        params = dict(spec)
        name = params.pop("family", None) or params.pop("name", None)
        if name is None:
            raise ConfigError("family mapping needs a 'family' key")
        return str(name), params
    if not isinstance(spec, str):
        raise ConfigError(f"cannot parse family spec {spec!r}")
    spec = spec.strip()
    if "{" not in spec:
        return spec, {}
    name, _, rest = spec.partition("{")
    try:
        params = yaml.safe_load("{" + rest) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"bad parameter block in '{spec}': {exc}") from None
    if not isinstance(params, dict):
        raise ConfigError(f"bad parameter block in '{spec}'")
    return name.strip(), params


PRESETS = {
    # name -> (rate family, drift family, number of states)
    "brownian": ("single", "zero", 1),
    "single": ("single", "constant", 1),
    "twostate": ("twostate", "pm", 2),
    "twostate_spatial": ("twostate_spatial", "pm", 2),
    "cycle3": ("cycle3", "constant", 3),
}


def build_model(manifold="euclidean:1", family=None, drift=None, rates=None, **params) -> Model:
    """Assemble a Model from a preset family and/or explicit drift/rate specs.

    Parameters of the preset go to both factories; each factory ignores
    the ones it does not use.
    """
    m = manifold if isinstance(manifold, Manifold) else manifold_from_id(str(manifold))
    if family is not None:
        fname, fparams = parse_family(family)
        fparams = {**fparams, **params}
        if fname not in PRESETS:
            raise ConfigError(f"unknown model family '{fname}'")
        rname, dname, N = PRESETS[fname]
        rfield = rate_family(m, rname, **fparams)
        dfield = drift_family(m, dname, rfield.n_states, **fparams)
        label = fname
        spec = {"manifold": m.name, "family": fname, **fparams}
    else:
        rname, rparams = parse_family(rates or "single")
        rfield = rate_family(m, rname, **rparams)
        dname, dparams = parse_family(drift or "zero")
        dfield = drift_family(m, dname, rfield.n_states, **dparams)
        label = f"{rname}/{dname}"
        spec = {"manifold": m.name, "rates": {"family": rname, **rparams},
                "drift": {"family": dname, **dparams}}
    return Model(m, dfield, rfield, label=label, spec=spec)


def brownian(manifold="euclidean:1") -> Model:
    return build_model(manifold, family="brownian")


def symmetric_twostate(a=1.0, beta=1.0, manifold="euclidean:1") -> Model:
    return build_model(manifold, family="twostate", a=a, beta=beta)
