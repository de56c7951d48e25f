"""Action integrals, optimal curves and the variational resolvent/semigroup.

The resolvent is the discounted control problem

    R(lam) h (x) = sup_gamma  int_0^inf lam^-1 e^{-t/lam} [ h(gamma(t)) - int_0^t L(gamma, gamma') ] dt
                 = sup_gamma  int_0^inf e^{-t/lam} [ h(gamma(t)) / lam - L(gamma, gamma') ] dt,

truncated at T_cut = lam log(1e4).  Curves are piecewise linear in a chart
with K uniform segments; the functional is evaluated exactly for h
interpolated linearly between knots and L constant on each segment.  The
maximisation over knot positions uses a damped Newton iteration whose
(negated) Hessian is block tridiagonal.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.interpolate import CubicSpline, RectBivariateSpline
from scipy.optimize import minimize

from .curves import Curve, chart_rk4
from .errors import ChartDomain, ContractViolation, CutLocus, NumericalFailure
from .geometry import (Chart, Euclidean, IdentityChart, Manifold, ManifoldPoint, ScalarField,
                       Sphere2, Torus2, containment_field, smooth_dist_cutoff_array)
from .hamiltonian import (grad_p_array, hamiltonian_and_grad_array, hamiltonian_array,
                          hess_p_array, legendre_array)
from .switching import averaged_drift_array

TAIL_MASS = 1e-4


# --------------------------------------------------------------------------
# action
# --------------------------------------------------------------------------


@dataclass
class ActionValue:
    total: float
    per_segment: np.ndarray
    initial: float = 0.0

    @property
    def running(self):
        return float(np.sum(self.per_segment))


def curve_velocities(curve: Curve):
    """Midpoints and frame components there of the log-map velocities."""
    m = curve.manifold
    X0 = curve.points[:-1]
    X1 = curve.points[1:]
    dt = np.diff(curve.times)
    try:
        W = m.log(X0, X1, check=True)
    except CutLocus as exc:
        raise CutLocus(f"consecutive curve points too far apart: {exc}") from None
    mid = m.exp(X0, 0.5 * W)
    # the geodesic velocity at the midpoint is the transported log vector
    Vmid = m.transport(X0, mid, W / dt[:, None], check=False)
    return mid, m.to_frame(mid, Vmid), dt


def dirac_initial_cost(x0: ManifoldPoint, tol=1e-12):
    def I0(x: ManifoldPoint):
        return 0.0 if x0.manifold.dist(x0.coords, x.coords) <= tol else math.inf

    return I0


def action(curve: Curve, model, I0=None) -> ActionValue:
    """I0(gamma(0)) + midpoint-rule integral of L along the curve.

    ``I0`` defaults to the rate function of a deterministic start at the
    curve's first point (identically 0 here).
    """
    if len(curve) < 2:
        start = 0.0 if I0 is None else float(I0(curve.start))
        return ActionValue(start, np.zeros(0), start)
    mid, V, dt = curve_velocities(curve)
    L, _, _ = legendre_array(model, mid, V)
    seg = np.maximum(L, 0.0) * dt
    start = 0.0 if I0 is None else float(I0(curve.start))
    return ActionValue(start + float(seg.sum()), seg, start)


# --------------------------------------------------------------------------
# optimal curves and growth diagnostics
# --------------------------------------------------------------------------


def optimal_curve(x0: ManifoldPoint, f: ScalarField, T: float, steps: int, model) -> Curve:
    """Solve x' = grad_p H(x, df(x)) from x0 by chart-patched RK4."""
    if T <= 0 or steps < 1:
        raise ContractViolation("need T > 0 and at least one step")

    def field(X):
        return grad_p_array(model, X, f.differential_array(X))

    pts = chart_rk4(model.manifold, x0.coords, T, steps, field)
    if not np.all(np.isfinite(pts)):
        raise NumericalFailure("optimal curve left the finite range", stage="optimal_curve")
    return Curve(model.manifold, np.linspace(0.0, T, steps + 1), pts)


def young_residual(curve: Curve, f: ScalarField, model) -> float:
    """int H(x, df) + int L(x, x') - (f(end) - f(start)) along the curve."""
    mid, V, dt = curve_velocities(curve)
    P = f.differential_array(mid)
    H = hamiltonian_array(model, mid, P)
    L, _, _ = legendre_array(model, mid, V)
    return float(np.sum((H + L) * dt) - (f(curve.end) - f(curve.start)))


def cumulative_lagrangian(curve: Curve, model) -> np.ndarray:
    """int_0^{t_k} L along the curve at every knot."""
    a = action(curve, model)
    return np.concatenate([[0.0], np.cumsum(a.per_segment)])


def ball_sample(m: Manifold, x0, R, count=400, seed=0):
    """Deterministic sample of the closed geodesic ball B(x0, R)."""
    rng = np.random.default_rng(seed)
    x0 = np.asarray(x0, dtype=float)
    d = m.dim
    dirs = rng.normal(size=(count, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = R * rng.random(count) ** (1.0 / d)
    radii[:2 * d] = R
    V = m.from_frame(np.broadcast_to(x0, (count, x0.size)), radii[:, None] * dirs)
    return np.concatenate([x0[None], m.exp(np.broadcast_to(x0, V.shape[:-1] + x0.shape), V)])


@dataclass
class GrowthConstants:
    cost_rate: float      # sup of df . grad_p H - H over the ball
    distance_rate: float  # sup of d(z, x0) |grad_p H| over the ball
    radius: float

    @property
    def escape_time(self):
        """Lower bound on the exit time from the ball: R^2 / (8 C)."""
        C = max(self.distance_rate, 1e-300)
        return self.radius ** 2 / (8.0 * C)


def growth_constants(model, f: ScalarField, x0: ManifoldPoint, R: float, count=400):
    """Constants C for int_0^t L <= C t and d^2(x(t), x0) / 2 <= C t.

    Along x' = grad_p H(x, df) the running cost equals df . x' - H(x, df),
    and d/dt d^2/2 <= d |x'|, so both suprema over B(x0, R) bound the rates
    as long as the curve stays in the ball.
    """
    m = model.manifold
    if R >= m.injectivity_radius:
        R = m.injectivity_radius - 1e-6
    Z = ball_sample(m, x0.coords, R, count)
    P = f.differential_array(Z)
    H, G = hamiltonian_and_grad_array(model, Z, P)
    cost = np.sum(P * G, axis=-1) - H
    dist = m.dist(Z, x0.coords) * np.linalg.norm(G, axis=-1)
    return GrowthConstants(float(max(cost.max(), 0.0)), float(max(dist.max(), 0.0)), float(R))


def growth_violations(curve: Curve, model, consts: GrowthConstants, slack=1e-9):
    """Count knots violating the two linear growth bounds."""
    m = model.manifold
    t = curve.times
    cum = cumulative_lagrangian(curve, model)
    half_d2 = 0.5 * m.dist(curve.points, curve.points[0]) ** 2
    # the quadrature of L carries an O(dt^2) error; allow it in the slack
    tol = slack + 1e-6 * t
    bad_cost = cum > consts.cost_rate * t + tol
    bad_dist = half_d2 > consts.distance_rate * t + tol
    return int(np.sum(bad_cost)), int(np.sum(bad_dist))


def containment_excess(curve: Curve, model, x0: ManifoldPoint, C1: float, sample=None):
    """sup_t Ups(x(t)) - [Ups(x(0)) + C1 + T sup_z H(z, dUps(z))] (<= 0 expected).

    ``C1`` bounds the action of the curve; the sup over z is measured on
    ``sample`` (default: a ball covering the curve).
    """
    m = model.manifold
    ups = containment_field(m, x0.coords)
    if sample is None:
        R = min(1.5 * float(np.max(m.dist(curve.points, x0.coords))) + 0.5,
                m.injectivity_radius - 1e-6)
        sample = ball_sample(m, x0.coords, R)
    Hsup = float(np.max(hamiltonian_array(model, sample, ups.differential_array(sample))))
    vals = ups.values(curve.points)
    return float(vals.max() - (vals[0] + C1 + curve.T * max(Hsup, 0.0)))


# --------------------------------------------------------------------------
# Hopf-Lax
# --------------------------------------------------------------------------


def hopf_lax(h: ScalarField, t: float, x0: ManifoldPoint, y_grid, refine=True) -> float:
    """max_y h(y) - d^2(x0, y) / (2t) over the grid, polished locally."""
    if t <= 0:
        raise ContractViolation("t must be positive")
    m = x0.manifold
    Y = np.asarray([y.coords if isinstance(y, ManifoldPoint) else y for y in y_grid], dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    Y = np.concatenate([Y, x0.coords[None]])
    vals = h.values(Y) - m.dist(x0.coords, Y) ** 2 / (2.0 * t)
    k = int(np.argmax(vals))
    best = float(vals[k])
    if not refine:
        return best
    chart = m.normal_chart(x0.coords)
    if isinstance(m, Euclidean):
        chart = IdentityChart(m)
    try:
        y_start = chart.to_coords(Y[k])
    except (ChartDomain, CutLocus):
        return best

    def neg(y):
        try:
            P = chart.to_point(y)
            return -(float(h.values(P)) - float(m.dist(x0.coords, P)) ** 2 / (2.0 * t))
        except Exception:
            return np.inf

    res = minimize(neg, y_start, method="Nelder-Mead",
                   options={"xatol": 1e-10, "fatol": 1e-13, "maxiter": 4000})
    return max(best, float(-res.fun))


# --------------------------------------------------------------------------
# functions on charts
# --------------------------------------------------------------------------


class ChartFunction:
    """h expressed in chart coordinates: value, gradient and Hessian."""

    def __call__(self, Y):
        raise NotImplementedError

    def derivatives(self, Y):
        raise NotImplementedError


class PulledBack(ChartFunction):
    """h o psi for a ScalarField h, derivatives by central differences."""

    def __init__(self, h: ScalarField, chart: Chart, step=1e-4):
        self.h = h
        self.chart = chart
        self.step = step

    def __call__(self, Y):
        return self.h.values(self.chart.to_point(Y))

    def derivatives(self, Y):
        Y = np.asarray(Y, dtype=float)
        d = Y.shape[-1]
        e = self.step
        f0 = self(Y)
        G = np.empty(Y.shape)
        Hm = np.empty(Y.shape + (d,))
        I = np.eye(d)
        fp = [self(Y + e * I[i]) for i in range(d)]
        fm = [self(Y - e * I[i]) for i in range(d)]
        for i in range(d):
            G[..., i] = (fp[i] - fm[i]) / (2 * e)
            Hm[..., i, i] = (fp[i] - 2 * f0 + fm[i]) / e ** 2
        for i in range(d):
            for j in range(i + 1, d):
                fpp = self(Y + e * (I[i] + I[j]))
                fmm = self(Y - e * (I[i] + I[j]))
                val = (fpp - fp[i] - fp[j] + 2 * f0 - fm[i] - fm[j] + fmm) / (2 * e ** 2)
                Hm[..., i, j] = Hm[..., j, i] = val
        return f0, G, Hm


@dataclass
class GridFunction(ChartFunction):
    """Values on a tensor grid in a chart, interpolated by cubic splines.

    Outside the grid box the function is extended by its value at the
    nearest box point (coordinates are clamped), which keeps it bounded.
    """

    chart: Chart
    axes: list
    values: np.ndarray
    _spline: object = dc_field(default=None, repr=False)

    def __post_init__(self):
        self.axes = [np.asarray(a, dtype=float) for a in self.axes]
        self.values = np.asarray(self.values, dtype=float)
        if len(self.axes) == 1:
            self._spline = CubicSpline(self.axes[0], self.values, bc_type="not-a-knot",
                                       extrapolate=True)
        elif len(self.axes) == 2:
            self._spline = RectBivariateSpline(self.axes[0], self.axes[1], self.values, kx=3, ky=3)
        else:
            raise ContractViolation("grid functions support one or two chart dimensions")

    @property
    def dim(self):
        return len(self.axes)

    def coords(self):
        """Chart coordinates of the grid nodes, shape (*grid, d)."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack(mesh, axis=-1)

    def points(self):
        return self.chart.to_point(self.coords())

    def with_values(self, values):
        return GridFunction(self.chart, self.axes, values)

    def _clamp(self, Y):
        Y = np.asarray(Y, dtype=float)
        lo = np.array([a[0] for a in self.axes])
        hi = np.array([a[-1] for a in self.axes])
        Yc = np.clip(Y, lo, hi)
        return Yc, (Y > lo) & (Y < hi)

    def __call__(self, Y):
        Y, _ = self._clamp(Y)
        if self.dim == 1:
            return self._spline(Y[..., 0])
        return self._spline.ev(Y[..., 0], Y[..., 1])

    def derivatives(self, Y):
        Y, inside = self._clamp(Y)
        if self.dim == 1:
            y = Y[..., 0]
            f = self._spline(y)
            G = self._spline(y, 1)[..., None] * inside
            Hm = (self._spline(y, 2) * inside[..., 0])[..., None, None]
            return f, G, Hm
        s = self._spline
        a, b = Y[..., 0], Y[..., 1]
        ia, ib = inside[..., 0], inside[..., 1]
        f = s.ev(a, b)
        G = np.stack([s.ev(a, b, dx=1) * ia, s.ev(a, b, dy=1) * ib], -1)
        hxy = s.ev(a, b, dx=1, dy=1) * ia * ib
        Hm = np.stack([np.stack([s.ev(a, b, dx=2) * ia, hxy], -1),
                       np.stack([hxy, s.ev(a, b, dy=2) * ib], -1)], -2)
        return f, G, Hm

    def interior_mask(self, margin=1):
        shape = self.values.shape
        mask = np.zeros(shape, dtype=bool)
        sl = tuple(slice(margin, n - margin) for n in shape)
        mask[sl] = True
        return mask


def working_grid(manifold: Manifold, center, half_width: float, points: int,
                 values=None) -> GridFunction:
    """Uniform tensor grid around ``center`` in a chart suited to the manifold.

    Euclidean: identity coordinates; torus: angle offsets; sphere: normal
    coordinates at the centre (half_width must stay below pi).
    """
    center = manifold.project(np.asarray(center, dtype=float))
    if isinstance(manifold, Euclidean):
        chart = IdentityChart(manifold)
        axes = [np.linspace(c - half_width, c + half_width, points) for c in center]
    else:
        if half_width >= np.pi:
            raise ChartDomain("working grid must stay inside the injectivity radius")
        chart = manifold.normal_chart(center)
        axes = [np.linspace(-half_width, half_width, points)] * manifold.dim
    if len(axes) > 2:
        raise ContractViolation("working grids support at most two dimensions")
    shape = tuple(len(a) for a in axes)
    return GridFunction(chart, axes, np.zeros(shape) if values is None else values)


def grid_from_field(f: ScalarField, template: GridFunction) -> GridFunction:
    return template.with_values(f.values(template.points()))


# --------------------------------------------------------------------------
# the resolvent control problem
# --------------------------------------------------------------------------


@dataclass
class ResolventConfig:
    lam: float
    horizon_cut: float | None = None
    curve_grid: int = 64
    restarts: int = 3
    max_iter: int = 60
    tol: float = 1e-12
    seed: int = 0

    def __post_init__(self):
        if not self.lam > 0:
            raise ContractViolation("lambda must be positive")
        floor = self.lam * math.log(1.0 / TAIL_MASS)
        if self.horizon_cut is None:
            self.horizon_cut = floor
        if self.horizon_cut < floor * (1 - 1e-12):
            raise ContractViolation("horizon_cut must be at least lambda * ln(1e4)")
        if self.curve_grid < 2 or self.restarts < 1:
            raise ContractViolation("need curve_grid >= 2 and restarts >= 1")

    def knot_weights(self):
        """(h weights c_0..c_K, segment masses omega_0..omega_{K-1}, dt)."""
        K = self.curve_grid
        lam = self.lam
        dt = self.horizon_cut / K
        t = np.arange(K + 1) * dt
        E = np.exp(-t / lam)
        omega = E[:-1] - E[1:]
        r = dt / lam
        frac_end = (1.0 - (1.0 + r) * math.exp(-r)) / (r * (1.0 - math.exp(-r)))
        e_end = omega * frac_end
        e_start = omega - e_end
        c = np.zeros(K + 1)
        c[:-1] += e_start
        c[1:] += e_end
        c[-1] += E[-1]
        return c, omega, dt


@dataclass
class ResolventResult:
    value: float
    curve: Curve | None
    diagnostics: dict


def _block_tridiag_solve(D, U, g):
    """Solve the symmetric block-tridiagonal system (D diagonal, U super-diagonal)."""
    K = D.shape[-3]
    C = np.empty_like(D)
    z = np.empty_like(g)
    C[..., 0, :, :] = D[..., 0, :, :]
    z[..., 0, :] = g[..., 0, :]
    for k in range(1, K):
        Ut = np.swapaxes(U[..., k - 1, :, :], -1, -2)
        W = Ut @ np.linalg.inv(C[..., k - 1, :, :])
        C[..., k, :, :] = D[..., k, :, :] - W @ U[..., k - 1, :, :]
        z[..., k, :] = g[..., k, :] - np.einsum("...ij,...j->...i", W, z[..., k - 1, :])
    x = np.empty_like(g)
    x[..., K - 1, :] = np.linalg.solve(C[..., K - 1, :, :], z[..., K - 1, :, None])[..., 0]
    for k in range(K - 2, -1, -1):
        rhs = z[..., k, :] - np.einsum("...ij,...j->...i", U[..., k, :, :], x[..., k + 1, :])
        x[..., k, :] = np.linalg.solve(C[..., k, :, :], rhs[..., None])[..., 0]
    return x


class _RunningCost:
    """l(y, v) = L(psi(y), B(y) v) in chart coordinates with derivatives."""

    def __init__(self, model, chart: Chart):
        self.model = model
        self.chart = chart
        self.flat = isinstance(chart, IdentityChart) or (model.manifold.flat and not isinstance(
            model.manifold, Sphere2))
        self.const = self.flat and model.x_independent
        self.P_cache = None

    def _eval(self, Y, V, P0=None):
        B = self.chart.frame_matrix(Y)
        X = self.chart.to_point(Y)
        Vf = np.matmul(B, V[..., None])[..., 0]
        L, P, _ = legendre_array(self.model, X, Vf, P0=P0)
        return L, P, B, X

    def value(self, Y, V):
        return self._eval(Y, V, P0=self.P_cache if self.P_cache is not None and
                          self.P_cache.shape == V.shape else None)[0]

    def full(self, Y, V, eps=1e-6):
        P0 = self.P_cache if self.P_cache is not None and self.P_cache.shape == V.shape else None
        L, P, B, X = self._eval(Y, V, P0=P0)
        self.P_cache = P
        dV = np.matmul(np.swapaxes(B, -1, -2), P[..., None])[..., 0]
        if self.model.n_states == 1:
            HL = np.broadcast_to(np.eye(V.shape[-1]), V.shape + (V.shape[-1],))
        else:
            HL = np.linalg.inv(hess_p_array(self.model, X, P))
        G = np.matmul(np.swapaxes(B, -1, -2), np.matmul(HL, B))
        if self.const:
            dY = np.zeros_like(Y)
        else:
            d = Y.shape[-1]
            dY = np.empty_like(Y)
            for i in range(d):
                e = np.zeros(d)
                e[i] = eps
                Lp = self._eval(Y + e, V, P0=P)[0]
                Lm = self._eval(Y - e, V, P0=P)[0]
                dY[..., i] = (Lp - Lm) / (2 * eps)
        return L, dV, dY, G


def _objective(Y, hfun, cost: _RunningCost, c, omega, lam, dt):
    """J for knot arrays Y (..., K+1, d)."""
    V = (Y[..., 1:, :] - Y[..., :-1, :]) / dt
    mid = 0.5 * (Y[..., 1:, :] + Y[..., :-1, :])
    hv = hfun(Y)
    L = cost.value(mid, V)
    return np.sum(c * hv, axis=-1) - lam * np.sum(omega * L, axis=-1)


def _initial_paths(model, chart, Y0, hfun, cfg, dt):
    """Starting knot arrays for every restart, shape (B, R, K+1, d)."""
    K = cfg.curve_grid
    Bn, d = Y0.shape
    R = cfg.restarts
    out = np.empty((Bn, R, K + 1, d))

    def chart_velocity(Y, Vf):
        Bm = chart.frame_matrix(Y)
        return np.linalg.solve(Bm, Vf[..., None])[..., 0]

    # restart 0: the zero-cost averaged flow (explicit Euler in the chart)
    y = Y0.copy()
    out[:, 0, 0] = y
    for k in range(K):
        X = chart.to_point(y)
        y = y + dt * chart_velocity(y, averaged_drift_array(model.drift, model.rates, X))
        out[:, 0, k + 1] = y
    if R == 1:
        return out
    # restart 1: constant velocity grad_p H(x, dh(x)) suggested by h
    X0 = chart.to_point(Y0)
    _, G, _ = hfun.derivatives(Y0)
    Bm = chart.frame_matrix(Y0)
    Pf = np.linalg.solve(np.swapaxes(Bm, -1, -2), G[..., None])[..., 0]
    v1 = chart_velocity(Y0, grad_p_array(model, X0, Pf))
    t = np.arange(K + 1) * dt
    out[:, 1] = Y0[:, None, :] + t[None, :, None] * v1[:, None, :]
    rng = np.random.default_rng(cfg.seed)
    scale = 1.0 + np.linalg.norm(v1, axis=-1)
    for r in range(2, R):
        v = out[:, 0, 1] - Y0
        v = v / dt + scale[:, None] * rng.normal(size=(Bn, d))
        out[:, r] = Y0[:, None, :] + t[None, :, None] * v[:, None, :]
    return out


def solve_resolvent(model, chart: Chart, Y0, hfun: ChartFunction, cfg: ResolventConfig):
    """Maximise the discretised resolvent functional from each start in Y0.

    Returns (values (B,), best knot arrays (B, K+1, d), diagnostics).
    """
    Y0 = np.atleast_2d(np.asarray(Y0, dtype=float))
    c, omega, dt = cfg.knot_weights()
    lam = cfg.lam
    K = cfg.curve_grid
    Bn, d = Y0.shape
    R = cfg.restarts
    Y = _initial_paths(model, chart, Y0, hfun, cfg, dt).reshape(Bn * R, K + 1, d)
    cost = _RunningCost(model, chart)
    J = _objective(Y, hfun, cost, c, omega, lam, dt)
    active = np.ones(Bn * R, dtype=bool)
    iters = 0
    for iters in range(1, cfg.max_iter + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        Ya = Y[idx]
        cost.P_cache = None
        V = (Ya[:, 1:] - Ya[:, :-1]) / dt
        mid = 0.5 * (Ya[:, 1:] + Ya[:, :-1])
        _, dV, dY, G = cost.full(mid, V)
        _, hG, hH = hfun.derivatives(Ya)
        w = (lam * omega)[None, :, None]
        # gradient with respect to knots 1..K
        grad = c[None, :, None] * hG
        seg = -w * (-dV / dt + 0.5 * dY)       # contribution to the left knot
        seg_r = -w * (dV / dt + 0.5 * dY)      # contribution to the right knot
        grad[:, :-1] += seg
        grad[:, 1:] += seg_r
        g = grad[:, 1:]
        # negated Hessian: segment blocks plus the concave part of h
        Wg = (lam * omega)[None, :, None, None] * G / dt ** 2
        Dg = np.zeros((idx.size, K, d, d))
        Dg += Wg                                  # segment j -> knot j+1 (index j)
        Dg[:, :-1] += Wg[:, 1:]                   # segment j -> knot j (index j-1)
        ev, evec = np.linalg.eigh(hH[:, 1:])
        negpart = np.einsum("...ij,...j,...kj->...ik", evec, np.maximum(-ev, 0.0), evec)
        Dg += c[None, 1:, None, None] * negpart
        ridge = 1e-12 * np.trace(Dg, axis1=-2, axis2=-1)[..., None, None] * np.eye(d)
        Dg += ridge
        Ug = -Wg[:, 1:]
        step = _block_tridiag_solve(Dg, Ug, g)
        decrement = np.einsum("bkd,bkd->b", g, step)
        conv = decrement <= cfg.tol * (1.0 + np.abs(J[idx]))
        alpha = np.ones(idx.size)
        pending = ~conv
        Ynew = Ya.copy()
        Jnew = J[idx].copy()
        for _ in range(20):
            if not pending.any():
                break
            p = np.flatnonzero(pending)
            trial = Ya[p].copy()
            trial[:, 1:] += alpha[p, None, None] * step[p]
            cost.P_cache = None
            Jt = _objective(trial, hfun, cost, c, omega, lam, dt)
            ok = Jt >= J[idx[p]] + 1e-4 * alpha[p] * decrement[p]
            okp = p[ok]
            Ynew[okp] = trial[ok]
            Jnew[okp] = Jt[ok]
            pending[okp] = False
            alpha[p[~ok]] *= 0.5
        # stalled line searches, or steps that no longer move J, mean no ascent
        # is left at working precision (kinks of clamped grid data end here)
        stalled = pending | (Jnew - J[idx] <= cfg.tol * (1.0 + np.abs(J[idx])))
        Y[idx] = Ynew
        J[idx] = Jnew
        active[idx[conv | stalled]] = False
    J = J.reshape(Bn, R)
    best = np.argmax(J, axis=1)
    values = J[np.arange(Bn), best]
    paths = Y.reshape(Bn, R, K + 1, d)[np.arange(Bn), best]
    diag = {"iterations": iters, "unconverged": int(active.sum()), "restart_values": J,
            "knot_dt": dt, "segments": K}
    return values, paths, diag


def _point_chart(m: Manifold, x):
    if isinstance(m, Euclidean):
        return IdentityChart(m)
    return m.normal_chart(x)


def resolvent(cfg: ResolventConfig, h: ScalarField, x: ManifoldPoint, model) -> ResolventResult:
    """Lower bound for R(lam) h (x) from the discretised control problem."""
    chart = _point_chart(model.manifold, x.coords)
    y0 = chart.to_coords(x.coords)
    vals, paths, diag = solve_resolvent(model, chart, y0[None], PulledBack(h, chart), cfg)
    K = cfg.curve_grid
    times = np.linspace(0.0, cfg.horizon_cut, K + 1)
    curve = Curve(model.manifold, times, chart.to_point(paths[0]))
    diag["restart_values"] = diag["restart_values"][0].tolist()
    return ResolventResult(float(vals[0]), curve, diag)


def resolvent_on_grid(cfg: ResolventConfig, h: ChartFunction | ScalarField,
                      grid: GridFunction, model) -> GridFunction:
    """R(lam) h at every node of ``grid`` (values returned as a new GridFunction)."""
    hfun = h if isinstance(h, ChartFunction) else PulledBack(h, grid.chart)
    Yg = grid.coords()
    shape = Yg.shape[:-1]
    vals, _, _ = solve_resolvent(model, grid.chart, Yg.reshape(-1, Yg.shape[-1]), hfun, cfg)
    return grid.with_values(vals.reshape(shape))


def semigroup(t: float, f: ScalarField, x: ManifoldPoint, m: int, model, grid: GridFunction = None,
              half_width=None, points=None, curve_grid=32, restarts=1, max_iter=20,
              return_grid=False):
    """R(t/m)^m f (x) computed on a working grid with spline interpolation.

    ``max_iter`` caps the Newton iterations per resolvent step; only nodes on
    the rim of the grid, where the clamped extension has a kink, use more.
    """
    if m < 1 or t <= 0:
        raise ContractViolation("need t > 0 and m >= 1")
    man = model.manifold
    if grid is None:
        if man.dim == 1:
            grid = working_grid(man, x.coords, half_width or 3.0, points or 121)
        else:
            grid = working_grid(man, x.coords, half_width or 1.2, points or 25)
    cfg = ResolventConfig(lam=t / m, curve_grid=curve_grid, restarts=restarts, max_iter=max_iter)
    g = grid_from_field(f, grid)
    for _ in range(m):
        g = resolvent_on_grid(cfg, g, g, model)
    value = float(g(grid.chart.to_coords(x.coords)[None])[0])
    return (value, g) if return_grid else value


# --------------------------------------------------------------------------
# viscosity residual and comparison diagnostics
# --------------------------------------------------------------------------


def grid_differential(fg: GridFunction):
    """Frame components of df at the grid nodes by central differences."""
    vals = fg.values
    grads = np.gradient(vals, *fg.axes, edge_order=2)
    if fg.dim == 1:
        grads = [grads]
    G = np.stack(grads, axis=-1)  # chart components
    Y = fg.coords()
    B = fg.chart.frame_matrix(Y)
    # covector components transform with B^{-T}
    return np.linalg.solve(np.swapaxes(B, -1, -2), G[..., None])[..., 0]


def viscosity_residual(f_grid: GridFunction, lam: float, h: ScalarField, model, margin=2):
    """max over interior nodes of |f - lam H(x, df) - h|, with the argmax point."""
    X = f_grid.points()
    P = grid_differential(f_grid)
    H = hamiltonian_array(model, X, P)
    res = np.abs(f_grid.values - lam * H - h.values(X))
    mask = f_grid.interior_mask(margin)
    masked = np.where(mask, res, -np.inf)
    k = np.unravel_index(int(np.argmax(masked)), res.shape)
    return float(masked[k]), ManifoldPoint(model.manifold, X[k])


@dataclass
class ComparisonRecord:
    m_values: list
    maximizers: list
    penalties: list
    phi_max: list
    gap: float
    sup_u_minus_v: float
    sup_h1_minus_h2: float


def comparison_gap(u, v, h1, h2, points, delta: float, m_list, x0=None, R=None, manifold=None):
    """Grid maximisation of the doubled-variables penalisation.

    Phi(x, y) = u(x)/(1-delta) - v(y)/(1+delta) - m Psi(x, y)
                - delta Ups(x)/(1-delta) - delta Ups(y)/(1+delta),
    with Psi the smoothly cut-off half squared distance and Ups the
    containment function around x0.  u, v, h1, h2 are value arrays on
    ``points`` (ambient coordinates, shape (P, amb)).
    """
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    m = manifold
    if m is None:
        raise ContractViolation("manifold required")
    if not 0 < delta < 1:
        raise ContractViolation("delta must lie in (0, 1)")
    u, v, h1, h2 = (np.asarray(a, dtype=float).reshape(-1) for a in (u, v, h1, h2))
    x0 = X[len(X) // 2] if x0 is None else np.asarray(x0, dtype=float)
    if R is None:
        R = 1.0 if not np.isfinite(m.injectivity_radius) else 0.5 * m.injectivity_radius ** 2
    ups = containment_field(m, x0).values(X)
    Psi = smooth_dist_cutoff_array(m, R, X[:, None, :], X[None, :, :])
    base = (u / (1 - delta) - delta * ups / (1 - delta))[:, None] - \
        (v / (1 + delta) + delta * ups / (1 + delta))[None, :]
    maxim, pens, phis = [], [], []
    for mm in m_list:
        Phi = base - mm * Psi
        i, j = np.unravel_index(int(np.argmax(Phi)), Phi.shape)
        maxim.append((X[i].copy(), X[j].copy()))
        pens.append(float(mm * Psi[i, j]))
        phis.append(float(Phi[i, j]))
    sup_uv = float(np.max(u - v))
    sup_h = float(np.max(h1 - h2))
    return ComparisonRecord(list(m_list), maxim, pens, phis, sup_uv - sup_h, sup_uv, sup_h)
