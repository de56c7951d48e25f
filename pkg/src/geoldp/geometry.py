"""Closed-form differential geometry for a small catalogue of manifolds.

Three spaces are supported: Euclidean space R^d (d <= 3), the unit sphere
S^2 embedded in R^3 and the flat torus T^2 = R^2 / (2 pi Z)^2.  Every
primitive (exp, log, distance, parallel transport, charts) has an analytic
formula; finite differences only appear in the Laplace-Beltrami operator and
in differentials of user-supplied scalar fields.

Internally everything works on plain numpy arrays of *coordinates*:

* Euclidean: points and tangent vectors are vectors of R^d.
* Sphere: points are unit vectors of R^3, tangent vectors are ambient
  vectors orthogonal to the base point.
* Torus: points are angle pairs reduced to [0, 2 pi), tangent vectors are
  plain pairs (the metric is flat).

Array methods broadcast over leading axes.  The small value types
``ManifoldPoint``, ``TangentVector`` and ``CotangentVector`` wrap single
points for the public, point-level API.  Tangent and cotangent components
are always expressed in the deterministic orthonormal frame returned by
``Manifold.frame`` so that the metric is the identity on components.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ChartDomain, ContractViolation, CutLocus

FD_STEP = 1e-4
CUT_GUARD = 1e-9
TWO_PI = 2.0 * np.pi


def _norm(v):
    return np.sqrt(np.sum(v * v, axis=-1))


def _wrap_angle(a):
    """Reduce angle differences to [-pi, pi)."""
    return (a + np.pi) % TWO_PI - np.pi


# --------------------------------------------------------------------------
# manifolds
# --------------------------------------------------------------------------


class Manifold:
    """Base class.  Subclasses implement the closed-form primitives."""

    kind: str = ""
    dim: int = 0
    amb_dim: int = 0
    injectivity_radius: float = np.inf
    flat: bool = True
    #: normal-chart radius used when patching charts along curves
    chart_radius: float = np.inf

    @property
    def name(self) -> str:
        raise NotImplementedError

    def __repr__(self):
        return f"<Manifold {self.name}>"

    def __eq__(self, other):
        return isinstance(other, Manifold) and self.name == other.name

    def __hash__(self):
        return hash(self.name)

    # -- points and frames ------------------------------------------------
    def project(self, x):
        return np.asarray(x, dtype=float)

    def check_point(self, x, tol=1e-12):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.amb_dim:
            raise ContractViolation(
                f"{self.name}: expected {self.amb_dim} coordinates, got {x.shape[-1]}")
        return x

    def frame(self, x):
        """Orthonormal tangent frame at x as ambient columns, shape (..., amb, dim)."""
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.eye(self.amb_dim), x.shape[:-1] + (self.amb_dim, self.dim))

    def to_frame(self, x, v):
        E = self.frame(x)
        return np.matmul(np.swapaxes(E, -1, -2), np.asarray(v, dtype=float)[..., None])[..., 0]

    def from_frame(self, x, c):
        return np.matmul(self.frame(x), np.asarray(c, dtype=float)[..., None])[..., 0]

    def tangent_project(self, x, v):
        return np.asarray(v, dtype=float)

    # -- metric geometry --------------------------------------------------
    def exp(self, x, v):
        raise NotImplementedError

    def log(self, x, y, check=True):
        raise NotImplementedError

    def dist(self, x, y):
        raise NotImplementedError

    def transport(self, x, y, v, check=True):
        """Parallel transport of the ambient tangent vector v from x to y."""
        if check:
            self._check_cut(self.dist(x, y))
        return np.asarray(v, dtype=float) + 0.0 * np.asarray(y, dtype=float)

    def _check_cut(self, d):
        if np.any(np.asarray(d) >= self.injectivity_radius - CUT_GUARD):
            raise CutLocus(
                f"{self.name}: distance {np.max(d):.6g} reaches the injectivity "
                f"radius {self.injectivity_radius:.6g}")

    # -- charts -----------------------------------------------------------
    def normal_chart(self, center) -> "Chart":
        raise NotImplementedError

    def chart(self, chart_id: str, center=None) -> "Chart":
        if chart_id == "normal":
            if center is None:
                raise ContractViolation("normal chart needs a center")
            return self.normal_chart(center)
        raise ContractViolation(f"{self.name}: unknown chart '{chart_id}'")

    def random_points(self, rng, size, scale=1.0):
        raise NotImplementedError


class Euclidean(Manifold):
    kind = "euclidean"
    injectivity_radius = np.inf
    flat = True

    def __init__(self, d: int):
        if d not in (1, 2, 3):
            raise ContractViolation(f"Euclidean dimension must be 1, 2 or 3, got {d}")
        self.dim = self.amb_dim = int(d)

    @property
    def name(self):
        return f"euclidean:{self.dim}"

    def exp(self, x, v):
        return np.asarray(x, dtype=float) + np.asarray(v, dtype=float)

    def log(self, x, y, check=True):
        return np.asarray(y, dtype=float) - np.asarray(x, dtype=float)

    def dist(self, x, y):
        return _norm(np.asarray(y, dtype=float) - np.asarray(x, dtype=float))

    def normal_chart(self, center=None):
        return IdentityChart(self)

    def chart(self, chart_id, center=None):
        if chart_id in ("identity", "normal"):
            return IdentityChart(self)
        return super().chart(chart_id, center)

    def random_points(self, rng, size, scale=1.0):
        return rng.uniform(-scale, scale, size=(size, self.dim))


class Torus2(Manifold):
    """Flat torus R^2 / (2 pi Z)^2 in angle coordinates."""

    kind = "torus"
    dim = 2
    amb_dim = 2
    injectivity_radius = np.pi
    flat = True

    @property
    def name(self):
        return "torus2"

    def project(self, x):
        return np.mod(np.asarray(x, dtype=float), TWO_PI)

    def check_point(self, x, tol=1e-12):
        x = super().check_point(x)
        if np.any((x < 0.0) | (x >= TWO_PI)):
            raise ContractViolation("torus coordinates must be reduced to [0, 2pi)")
        return x

    def exp(self, x, v):
        return self.project(np.asarray(x, dtype=float) + np.asarray(v, dtype=float))

    def log(self, x, y, check=True):
        v = _wrap_angle(np.asarray(y, dtype=float) - np.asarray(x, dtype=float))
        if check:
            self._check_cut(_norm(v))
        return v

    def dist(self, x, y):
        return _norm(_wrap_angle(np.asarray(y, dtype=float) - np.asarray(x, dtype=float)))

    def normal_chart(self, center):
        return TorusChart(self, center)

    def chart(self, chart_id, center=None):
        if chart_id in ("angle", "normal"):
            return TorusChart(self, np.zeros(2) if center is None else center)
        return super().chart(chart_id, center)

    def random_points(self, rng, size, scale=1.0):
        return rng.uniform(0.0, TWO_PI, size=(size, 2))


class Sphere2(Manifold):
    """Unit sphere in R^3."""

    kind = "sphere"
    dim = 2
    amb_dim = 3
    injectivity_radius = np.pi
    flat = False
    chart_radius = 0.5 * np.pi

    @property
    def name(self):
        return "sphere2"

    def project(self, x):
        x = np.asarray(x, dtype=float)
        return x / _norm(x)[..., None]

    def check_point(self, x, tol=1e-12):
        x = super().check_point(x)
        if np.any(np.abs(_norm(x) - 1.0) > tol):
            raise ContractViolation("sphere points must have unit norm")
        return x

    def frame(self, x):
        x = np.asarray(x, dtype=float)
        # Gram-Schmidt of e1 against x, falling back to e2 near the e1 axis
        use_e2 = np.abs(x[..., 0]) > 0.9
        a = np.zeros_like(x)
        a[..., 0] = np.where(use_e2, 0.0, 1.0)
        a[..., 1] = np.where(use_e2, 1.0, 0.0)
        e1 = a - np.sum(a * x, axis=-1)[..., None] * x
        e1 = e1 / _norm(e1)[..., None]
        e2 = np.cross(x, e1)
        return np.stack([e1, e2], axis=-1)

    def tangent_project(self, x, v):
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        return v - np.sum(v * x, axis=-1)[..., None] * x

    def exp(self, x, v):
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        nv = _norm(v)[..., None]
        small = nv < 1e-8
        safe = np.where(small, 1.0, nv)
        sinc = np.where(small, 1.0 - nv ** 2 / 6.0, np.sin(safe) / safe)
        y = np.cos(nv) * x + sinc * v
        return y / _norm(y)[..., None]

    def log(self, x, y, check=True):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        c = np.clip(np.sum(x * y, axis=-1), -1.0, 1.0)
        u = y - c[..., None] * x
        s = _norm(u)
        theta = np.arctan2(s, c)
        if check:
            self._check_cut(theta)
        factor = np.where(s > 1e-300, theta / np.where(s > 1e-300, s, 1.0), 1.0)
        return factor[..., None] * u

    def dist(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        c = np.sum(x * y, axis=-1)
        s = _norm(np.cross(x, y))
        return np.arctan2(s, c)

    def transport(self, x, y, v, check=True):
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        w = self.log(x, y, check=check)
        theta = _norm(w)[..., None]
        small = theta < 1e-15
        u = w / np.where(small, 1.0, theta)
        a = np.sum(u * v, axis=-1)[..., None]
        moved = v + a * ((np.cos(theta) - 1.0) * u - np.sin(theta) * x)
        return np.where(small, v, moved)

    def normal_chart(self, center):
        return SphereNormalChart(self, center)

    def chart(self, chart_id, center=None):
        if chart_id == "stereo_north":
            return StereographicChart(self, pole=+1)
        if chart_id == "stereo_south":
            return StereographicChart(self, pole=-1)
        return super().chart(chart_id, center)

    def random_points(self, rng, size, scale=1.0):
        return self.project(rng.normal(size=(size, 3)))


def manifold_from_id(spec: str) -> Manifold:
    """Parse "euclidean:<d>", "sphere2" or "torus2"."""
    spec = spec.strip().lower()
    if spec.startswith("euclidean"):
        _, _, d = spec.partition(":")
        return Euclidean(int(d or 1))
    if spec in ("sphere2", "s2", "sphere"):
        return Sphere2()
    if spec in ("torus2", "t2", "torus"):
        return Torus2()
    raise ContractViolation(f"unknown manifold id '{spec}'")


# --------------------------------------------------------------------------
# charts
# --------------------------------------------------------------------------


class Chart:
    """A coordinate chart phi: U -> R^d with inverse psi.

    ``jacobian(y)`` is the ambient differential of psi at y, shape
    (..., amb, d).  ``radius`` bounds the chart coordinates used before a
    curve integrator re-centres.
    """

    manifold: Manifold
    chart_id: str = ""
    radius: float = np.inf

    def to_coords(self, x, check=True):
        raise NotImplementedError

    def to_point(self, y):
        raise NotImplementedError

    def jacobian(self, y):
        raise NotImplementedError

    def contains(self, x):
        return np.ones(np.shape(x)[:-1], dtype=bool)

    # frame <-> chart component maps --------------------------------------
    def frame_matrix(self, y):
        """B = E(psi(y))^T Dpsi(y): chart components -> frame components."""
        x = self.to_point(y)
        E = self.manifold.frame(x)
        return np.matmul(np.swapaxes(E, -1, -2), self.jacobian(y))

    def metric(self, y):
        J = self.jacobian(y)
        return np.matmul(np.swapaxes(J, -1, -2), J)


class IdentityChart(Chart):
    chart_id = "identity"

    def __init__(self, manifold):
        self.manifold = manifold

    def to_coords(self, x, check=True):
        return np.asarray(x, dtype=float)

    def to_point(self, y):
        return np.asarray(y, dtype=float)

    def jacobian(self, y):
        y = np.asarray(y, dtype=float)
        d = self.manifold.dim
        return np.broadcast_to(np.eye(d), y.shape[:-1] + (d, d))


class TorusChart(Chart):
    """Angle chart centred at ``center``; coordinates are unwrapped offsets."""

    chart_id = "angle"

    def __init__(self, manifold, center):
        self.manifold = manifold
        self.center = manifold.project(center)

    def to_coords(self, x, check=True):
        y = _wrap_angle(np.asarray(x, dtype=float) - self.center)
        if check and np.any(np.abs(y) >= np.pi - CUT_GUARD):
            raise ChartDomain("point on the boundary of the torus angle chart")
        return y

    def to_point(self, y):
        return self.manifold.project(self.center + np.asarray(y, dtype=float))

    def jacobian(self, y):
        y = np.asarray(y, dtype=float)
        return np.broadcast_to(np.eye(2), y.shape[:-1] + (2, 2))

    def contains(self, x):
        y = _wrap_angle(np.asarray(x, dtype=float) - self.center)
        return np.all(np.abs(y) < np.pi - CUT_GUARD, axis=-1)


class StereographicChart(Chart):
    """Stereographic projection from the north (pole=+1) or south pole."""

    def __init__(self, manifold, pole=+1, margin=1e-6):
        self.manifold = manifold
        self.pole = 1.0 if pole > 0 else -1.0
        self.chart_id = "stereo_north" if pole > 0 else "stereo_south"
        self.margin = margin

    def contains(self, x):
        x = np.asarray(x, dtype=float)
        return 1.0 - self.pole * x[..., 2] > self.margin

    def to_coords(self, x, check=True):
        x = np.asarray(x, dtype=float)
        if check and not np.all(self.contains(x)):
            raise ChartDomain(f"point at the projection pole of {self.chart_id}")
        return x[..., :2] / (1.0 - self.pole * x[..., 2])[..., None]

    def to_point(self, y):
        y = np.asarray(y, dtype=float)
        r2 = np.sum(y * y, axis=-1)[..., None]
        s = 1.0 + r2
        return np.concatenate([2.0 * y / s, self.pole * (r2 - 1.0) / s], axis=-1)

    def jacobian(self, y):
        y = np.asarray(y, dtype=float)
        r2 = np.sum(y * y, axis=-1)[..., None, None]
        s = 1.0 + r2
        top = 2.0 * np.eye(2) / s - 4.0 * y[..., :, None] * y[..., None, :] / s ** 2
        bottom = self.pole * 4.0 * y[..., None, :] / s ** 2
        return np.concatenate([top, bottom], axis=-2)


class SphereNormalChart(Chart):
    """Riemannian normal coordinates y = E_c^T log_c(x) around ``center``.

    ``center`` may carry leading batch axes; every method then broadcasts a
    separate chart per centre.
    """

    chart_id = "normal"

    def __init__(self, manifold, center):
        self.manifold = manifold
        self.center = manifold.project(center)
        self.E = manifold.frame(self.center)
        self.radius = manifold.chart_radius

    def contains(self, x):
        return self.manifold.dist(self.center, x) < np.pi - CUT_GUARD

    def to_coords(self, x, check=True):
        v = self.manifold.log(self.center, x, check=check)
        return np.matmul(np.swapaxes(self.E, -1, -2), v[..., None])[..., 0]

    def to_point(self, y):
        w = np.matmul(self.E, np.asarray(y, dtype=float)[..., None])[..., 0]
        return self.manifold.exp(self.center, w)

    def jacobian(self, y):
        y = np.asarray(y, dtype=float)
        w = np.matmul(self.E, y[..., None])[..., 0]
        th = _norm(y)[..., None, None]
        small = th < 1e-4
        ths = np.where(small, 1.0, th)
        sinc = np.where(small, 1.0 - th ** 2 / 6.0, np.sin(ths) / ths)
        # S'(theta)/theta with S = sin(theta)/theta
        dsinc = np.where(small, -1.0 / 3.0 + th ** 2 / 30.0,
                         (ths * np.cos(ths) - np.sin(ths)) / ths ** 3)
        c = np.broadcast_to(self.center, w.shape)
        E = np.broadcast_to(self.E, w.shape + (2,))
        return (-sinc * c[..., :, None] * y[..., None, :]
                + sinc * E
                + dsinc * w[..., :, None] * y[..., None, :])


# --------------------------------------------------------------------------
# point-level value types
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ManifoldPoint:
    manifold: Manifold
    coords: np.ndarray

    def __post_init__(self):
        c = self.manifold.project(np.array(self.coords, dtype=float).reshape(-1))
        c = self.manifold.check_point(c)
        c.setflags(write=False)
        object.__setattr__(self, "coords", c)

    def same_as(self, other, tol=1e-12):
        return self.manifold == other.manifold and self.manifold.dist(self.coords, other.coords) <= tol

    def __repr__(self):
        return f"ManifoldPoint({self.manifold.name}, {np.array2string(self.coords, precision=6)})"


def _check_base(a: ManifoldPoint, b: ManifoldPoint):
    if a.manifold != b.manifold or np.any(np.abs(a.coords - b.coords) > 1e-12):
        raise ContractViolation("tangent data is based at a different point")


@dataclass(frozen=True, eq=False)
class TangentVector:
    """Tangent vector with components in the orthonormal frame at ``base``."""

    base: ManifoldPoint
    components: np.ndarray

    def __post_init__(self):
        c = np.array(self.components, dtype=float).reshape(-1)
        if c.shape[0] != self.base.manifold.dim:
            raise ContractViolation("wrong number of tangent components")
        c.setflags(write=False)
        object.__setattr__(self, "components", c)

    @classmethod
    def from_ambient(cls, base: ManifoldPoint, v):
        m = base.manifold
        return cls(base, m.to_frame(base.coords, m.tangent_project(base.coords, v)))

    @property
    def ambient(self):
        return self.base.manifold.from_frame(self.base.coords, self.components)

    @property
    def norm(self):
        return float(np.linalg.norm(self.components))

    def __repr__(self):
        return f"TangentVector(at {self.base.coords}, {self.components})"


@dataclass(frozen=True, eq=False)
class CotangentVector:
    """Covector with components in the dual (co)frame at ``base``."""

    base: ManifoldPoint
    components: np.ndarray

    def __post_init__(self):
        c = np.array(self.components, dtype=float).reshape(-1)
        if c.shape[0] != self.base.manifold.dim:
            raise ContractViolation("wrong number of cotangent components")
        c.setflags(write=False)
        object.__setattr__(self, "components", c)

    def pair(self, v: TangentVector) -> float:
        _check_base(self.base, v.base)
        return float(self.components @ v.components)

    def raised(self) -> TangentVector:
        return TangentVector(self.base, self.components)

    @property
    def norm(self):
        return float(np.linalg.norm(self.components))


def point(manifold: Manifold | str, coords) -> ManifoldPoint:
    if isinstance(manifold, str):
        manifold = manifold_from_id(manifold)
    return ManifoldPoint(manifold, coords)


# --------------------------------------------------------------------------
# point-level operations
# --------------------------------------------------------------------------


def exp_map(x: ManifoldPoint, v: TangentVector) -> ManifoldPoint:
    _check_base(x, v.base)
    return ManifoldPoint(x.manifold, x.manifold.exp(x.coords, v.ambient))


def log_map(x: ManifoldPoint, y: ManifoldPoint) -> TangentVector:
    if x.manifold != y.manifold:
        raise ContractViolation("points live on different manifolds")
    v = x.manifold.log(x.coords, y.coords, check=True)
    return TangentVector.from_ambient(x, v)


def distance(x: ManifoldPoint, y: ManifoldPoint) -> float:
    if x.manifold != y.manifold:
        raise ContractViolation("points live on different manifolds")
    return float(x.manifold.dist(x.coords, y.coords))


def parallel_transport(x: ManifoldPoint, y: ManifoldPoint, v: TangentVector) -> TangentVector:
    _check_base(x, v.base)
    w = x.manifold.transport(x.coords, y.coords, v.ambient, check=True)
    return TangentVector.from_ambient(y, w)


def transport_covector(x: ManifoldPoint, y: ManifoldPoint, p: CotangentVector) -> CotangentVector:
    """Transport a covector by transporting its metric dual."""
    moved = parallel_transport(x, y, p.raised())
    return CotangentVector(y, moved.components)


def grad_half_dist_sq(x: ManifoldPoint, y: ManifoldPoint) -> CotangentVector:
    """Differential at x of z -> d(z, y)^2 / 2, i.e. -log_x(y) lowered."""
    v = log_map(x, y)
    return CotangentVector(x, -v.components)


def chart_transform(x: ManifoldPoint, v_or_p, chart: Chart | str):
    """Chart components of a tangent vector (pushforward) or covector (pullback inverse)."""
    if isinstance(chart, str):
        chart = x.manifold.chart(chart, center=x.coords)
    _check_base(x, v_or_p.base)
    if not np.all(chart.contains(x.coords)):
        raise ChartDomain(f"point outside the domain of chart '{chart.chart_id}'")
    y = chart.to_coords(x.coords)
    B = chart.frame_matrix(y)
    if isinstance(v_or_p, TangentVector):
        return np.linalg.solve(B, v_or_p.components)
    if isinstance(v_or_p, CotangentVector):
        return B.T @ v_or_p.components
    raise ContractViolation("expected a TangentVector or CotangentVector")


def from_chart(x: ManifoldPoint, comps, chart: Chart | str, covector=False):
    """Inverse of ``chart_transform``."""
    if isinstance(chart, str):
        chart = x.manifold.chart(chart, center=x.coords)
    y = chart.to_coords(x.coords)
    B = chart.frame_matrix(y)
    comps = np.asarray(comps, dtype=float)
    if covector:
        return CotangentVector(x, np.linalg.solve(B.T, comps))
    return TangentVector(x, B @ comps)


# --------------------------------------------------------------------------
# scalar fields
# --------------------------------------------------------------------------


class ScalarField:
    """A real function on a manifold.

    ``func`` maps coordinate arrays (..., amb) to values (...).  ``grad``,
    if given, returns the ambient (Euclidean) gradient of an extension of
    ``func``; it is projected onto the tangent space.  Without it,
    differentials use central differences along geodesics in the frame
    directions with step ``FD_STEP``.
    """

    def __init__(self, manifold: Manifold, func: Callable, grad: Optional[Callable] = None,
                 name: str = ""):
        self.manifold = manifold
        self.func = func
        self.grad = grad
        self.name = name

    def __repr__(self):
        return f"ScalarField({self.name or self.func!r} on {self.manifold.name})"

    def values(self, X):
        return np.asarray(self.func(np.asarray(X, dtype=float)), dtype=float)

    def __call__(self, x):
        if isinstance(x, ManifoldPoint):
            return float(self.values(x.coords))
        return self.values(x)

    def differential_array(self, X, fd=False):
        """Frame components of df at each point of X, shape (..., d)."""
        m = self.manifold
        X = np.asarray(X, dtype=float)
        if self.grad is not None and not fd:
            g = np.asarray(self.grad(X), dtype=float)
            return m.to_frame(X, m.tangent_project(X, g))
        return fd_differential(m, self.values, X)

    def differential(self, x: ManifoldPoint, fd=False) -> CotangentVector:
        return CotangentVector(x, self.differential_array(x.coords, fd=fd))


def fd_differential(m: Manifold, f, X, h=FD_STEP):
    """Central differences of f along the frame geodesics at X."""
    X = np.asarray(X, dtype=float)
    E = m.frame(X)
    out = np.empty(X.shape[:-1] + (m.dim,))
    for k in range(m.dim):
        e = E[..., k]
        out[..., k] = (f(m.exp(X, h * e)) - f(m.exp(X, -h * e))) / (2.0 * h)
    return out


def constant_field(m: Manifold, c: float) -> ScalarField:
    return ScalarField(m, lambda X: np.full(np.shape(X)[:-1], float(c)),
                       lambda X: np.zeros_like(X), name=f"const({c})")


def laplace_beltrami(f: ScalarField | Callable, x: ManifoldPoint, chart: Chart | str | None = None,
                     h: float = FD_STEP) -> float:
    """Chart formula (1/sqrt G) d_i (sqrt G g^ij d_j f) by nested central differences.

    The default chart is the normal chart centred at x.
    """
    m = x.manifold
    func = f.values if isinstance(f, ScalarField) else f
    if chart is None:
        chart = m.normal_chart(x.coords)
    elif isinstance(chart, str):
        chart = m.chart(chart, center=x.coords)
    if not np.all(chart.contains(x.coords)):
        raise ChartDomain("point outside the chart used for the Laplacian")
    y0 = chart.to_coords(x.coords)
    d = m.dim
    I = np.eye(d)

    def F(y):
        return func(chart.to_point(y))

    def flux(y):
        grad = np.array([(F(y + h * I[j]) - F(y - h * I[j])) / (2 * h) for j in range(d)])
        g = chart.metric(y)
        sqrtG = np.sqrt(np.linalg.det(g))
        return sqrtG * np.linalg.solve(g, grad)

    div = 0.0
    for i in range(d):
        div += (flux(y0 + h * I[i])[i] - flux(y0 - h * I[i])[i]) / (2 * h)
    return float(div / np.sqrt(np.linalg.det(chart.metric(y0))))


# --------------------------------------------------------------------------
# containment and cut-off functions
# --------------------------------------------------------------------------


def _distance_proxy(m: Manifold, x0):
    """Smooth proxy f for the distance to x0 and its ambient gradient."""
    x0 = np.asarray(x0, dtype=float)
    if isinstance(m, Euclidean):
        def f(X):
            r2 = np.sum((X - x0) ** 2, axis=-1)
            return np.sqrt(1.0 + r2) - 1.0

        def df(X):
            r2 = np.sum((X - x0) ** 2, axis=-1)
            return (X - x0) / np.sqrt(1.0 + r2)[..., None]
    elif isinstance(m, Sphere2):
        def f(X):
            return 1.0 - np.sum(X * x0, axis=-1)

        def df(X):
            return -np.broadcast_to(x0, np.shape(X)).copy()
    elif isinstance(m, Torus2):
        def f(X):
            return np.sum(1.0 - np.cos(X - x0), axis=-1)

        def df(X):
            return np.sin(X - x0)
    else:  # pragma: no cover
        raise ContractViolation(f"no distance proxy for {m.name}")
    return f, df


def containment_field(m: Manifold, x0) -> ScalarField:
    """Upsilon(x) = log(1 + f(x)^2) / 2 for the smooth distance proxy f."""
    f, df = _distance_proxy(m, x0)

    def ups(X):
        return 0.5 * np.log1p(f(X) ** 2)

    def dups(X):
        fx = f(X)[..., None]
        return fx / (1.0 + fx ** 2) * df(X)

    return ScalarField(m, ups, dups, name="containment")


def distance_proxy_field(m: Manifold, x0) -> ScalarField:
    f, df = _distance_proxy(m, x0)
    return ScalarField(m, f, df, name="distance_proxy")


def containment(x0: ManifoldPoint, x: ManifoldPoint):
    """Value and differential of the containment function centred at x0."""
    field = containment_field(x0.manifold, x0.coords)
    return field(x), field.differential(x)


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u ** 3 * (10.0 + u * (-15.0 + 6.0 * u))


def _smoothstep_integral(u):
    """Integral of the quintic smoothstep from 0 to u (u clipped to [0, 1])."""
    u = np.clip(u, 0.0, 1.0)
    return u ** 4 * (2.5 + u * (-3.0 + u))


def theta_cutoff(R, r):
    """Smooth non-decreasing theta_R: identity below R/2, constant above 3R/4.

    theta_R' = 1 - s((r - R/2) / (R/4)) with the quintic smoothstep s, so
    0 <= theta_R' <= 1 and theta_R is C^3; the plateau value is 5R/8.
    """
    r = np.asarray(r, dtype=float)
    w = 0.25 * R
    u = (r - 0.5 * R) / w
    blended = 0.5 * R + w * (np.clip(u, 0.0, 1.0) - _smoothstep_integral(u))
    return np.where(r <= 0.5 * R, r, blended)


def theta_cutoff_prime(R, r):
    r = np.asarray(r, dtype=float)
    u = (r - 0.5 * R) / (0.25 * R)
    return np.where(r <= 0.5 * R, 1.0, 1.0 - _smoothstep(u))


def smooth_dist_cutoff(R: float, x: ManifoldPoint, y: ManifoldPoint) -> float:
    if R <= 0:
        raise ContractViolation("cut-off radius must be positive")
    half_d2 = 0.5 * distance(x, y) ** 2
    return float(theta_cutoff(R, half_d2))


def smooth_dist_cutoff_array(m: Manifold, R, X, Y):
    return theta_cutoff(R, 0.5 * m.dist(X, Y) ** 2)
