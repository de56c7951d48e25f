"""Monte Carlo experiments and the quantities they are compared against.

Rare-event probabilities are plain Monte Carlo frequencies with Wilson
score intervals.  Decay rates come from an ordinary least-squares fit of
-log p_n against n, so a constant prefactor ends up in the intercept.
Reference rates are minimal actions over curves whose endpoint lies in the
event; outside the Brownian closed form they are found by shooting
Hamiltonian trajectories from the start point.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.stats import norm

from ..dynamics import SimConfig, simulate_averaged, simulate_batch, limit_generator, \
    prelimit_generator
from ..errors import ChartDomain, ContractViolation, CutLocus, InsufficientData, NumericalFailure
from ..geometry import Euclidean, IdentityChart, ManifoldPoint, ScalarField
from ..hamiltonian import eigen_array, hamiltonian_and_grad_array, legendre_array
from ..models import Model
from ..variational import (ResolventConfig, grid_from_field, resolvent_on_grid,
                           viscosity_residual, working_grid)
from .config import EventSpec, ExperimentConfig

WILSON_Z = float(norm.ppf(0.975))


# --------------------------------------------------------------------------
# records
# --------------------------------------------------------------------------


@dataclass
class ResultRecord:
    inputs_hash: str
    kind: str
    columns: list
    rows: list
    fit: dict | None = None
    theory: float | None = None
    runtime: dict = dc_field(default_factory=dict)
    extra: dict = dc_field(default_factory=dict)

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=float)


@dataclass
class RateFit:
    slope: float
    stderr: float
    intercept: float
    n_used: int
    theory: float | None = None

    @property
    def ratio(self):
        if self.theory is None or self.theory == 0:
            return math.nan
        return self.slope / self.theory

    def as_dict(self):
        return {"slope": self.slope, "stderr": self.stderr, "intercept": self.intercept,
                "n_used": self.n_used, "theory": self.theory, "ratio": self.ratio}


def wilson_interval(hits: int, samples: int, z: float = WILSON_Z):
    """Wilson score interval for a binomial proportion."""
    if samples < 1:
        raise ContractViolation("need at least one sample")
    p = hits / samples
    z2 = z * z
    denom = 1.0 + z2 / samples
    centre = (p + z2 / (2 * samples)) / denom
    half = z * math.sqrt(p * (1 - p) / samples + z2 / (4 * samples * samples)) / denom
    lo, hi = max(0.0, centre - half), min(1.0, centre + half)
    # guard against rounding at the extremes so the interval always holds p
    return min(lo, p), max(hi, p)


def derived_seed(seed: int, index: int) -> int:
    """Independent 63-bit seed for sub-experiment ``index``."""
    state = np.random.SeedSequence([int(seed), int(index)]).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


# --------------------------------------------------------------------------
# events
# --------------------------------------------------------------------------


def averaged_endpoint(model: Model, x0, T: float, steps: int = 400):
    x0 = ManifoldPoint(model.manifold, model.manifold.project(np.asarray(x0, dtype=float)))
    return simulate_averaged(x0, T, T / steps, model).points[-1]


def event_center(event: EventSpec, model: Model, x0):
    if isinstance(event.center, str):
        if event.center != "averaged":
            raise ContractViolation(f"unknown event centre '{event.center}'")
        return averaged_endpoint(model, x0, event.T)
    return model.manifold.check_point(model.manifold.project(np.asarray(event.center, float)))


def _rare_event_row(model, n, event, center, x0, samples, seed):
    cfg = SimConfig(model, n, event.T, x0, seed=seed)
    X, _, _ = simulate_batch(cfg, samples)
    d = model.manifold.dist(X, center)
    hits = int(np.count_nonzero(event.contains(d)))
    lo, hi = wilson_interval(hits, samples)
    p = hits / samples
    return {"n": n, "samples": samples, "hits": hits, "p_hat": p, "lo": lo, "hi": hi,
            "neg_log_p_over_n": (-math.log(p) / n) if hits else math.nan,
            "upper_only": hits == 0, "steps": cfg.steps}


def estimate_rare_event(cfg: ExperimentConfig, theory=True) -> ResultRecord:
    """Per-n event frequencies of X_n(T) with Wilson intervals and a rate fit.

    A zero count is kept as an upper-bound-only row (p_hat = 0, hi > 0) and
    skipped by the fit.
    """
    model = cfg.model
    center = event_center(cfg.event, model, cfg.x0)
    rows, times = [], []
    for k, n in enumerate(cfg.n_list):
        t0 = time.perf_counter()
        rows.append(_rare_event_row(model, n, cfg.event, center, cfg.x0, cfg.samples,
                                    derived_seed(cfg.seed, k)))
        times.append(time.perf_counter() - t0)
    rate = None
    if theory:
        rate = theoretical_rate(cfg.event, model, cfg.x0, center=center)
    try:
        fit = extract_rate(rows, rate).as_dict()
    except InsufficientData as exc:
        fit = {"error": str(exc)}
    cols = ["n", "samples", "hits", "p_hat", "lo", "hi", "neg_log_p_over_n"]
    return ResultRecord(cfg.inputs_hash(), "rare_event", cols, rows, fit, rate,
                        {"seconds_per_n": times, "total_seconds": sum(times)},
                        {"center": center.tolist()})


def extract_rate(records, theory=None) -> RateFit:
    """OLS slope of -log p_hat against n over rows with at least one hit.

    ``records`` is a ResultRecord, a list of row mappings with keys n and
    p_hat, or a pair of arrays (n, p).
    """
    if isinstance(records, ResultRecord):
        records = records.rows
    if isinstance(records, tuple) and len(records) == 2:
        n = np.asarray(records[0], dtype=float)
        p = np.asarray(records[1], dtype=float)
    else:
        n = np.array([r["n"] for r in records], dtype=float)
        p = np.array([r["p_hat"] for r in records], dtype=float)
    use = (p > 0) & np.isfinite(p)
    if use.sum() < 3:
        raise InsufficientData(f"rate fit needs 3 usable n values, got {int(use.sum())}")
    n, y = n[use], -np.log(p[use])
    A = np.stack([np.ones_like(n), n], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    dof = len(n) - 2
    s2 = float(resid @ resid) / dof
    cov = s2 * np.linalg.inv(A.T @ A)
    return RateFit(float(coef[1]), float(math.sqrt(max(cov[1, 1], 0.0))), float(coef[0]),
                   int(len(n)), None if theory is None else float(theory))


# --------------------------------------------------------------------------
# reference rates
# --------------------------------------------------------------------------


def _is_brownian(model: Model):
    return model.n_states == 1 and model.drift.name == "zero"


def _chart_for(model, x0):
    m = model.manifold
    return IdentityChart(m) if isinstance(m, Euclidean) else m.normal_chart(x0)


def _chart_hamiltonian(model, chart, Y, Eta):
    """H(psi(y), B^-T eta) and its eta-gradient B^-1 grad_p H."""
    B = chart.frame_matrix(Y)
    X = chart.to_point(Y)
    P = np.linalg.solve(np.swapaxes(B, -1, -2), Eta[..., None])[..., 0]
    H, G = hamiltonian_and_grad_array(model, X, P)
    return H, np.linalg.solve(B, G[..., None])[..., 0]


def _chart_hamiltonian_dy(model, chart, Y, Eta, eps=1e-6):
    d = Y.shape[-1]
    out = np.empty_like(Y)
    for i in range(d):
        e = np.zeros(d)
        e[i] = eps
        hp = _chart_hamiltonian(model, chart, Y + e, Eta)[0]
        hm = _chart_hamiltonian(model, chart, Y - e, Eta)[0]
        out[..., i] = (hp - hm) / (2 * eps)
    return out


def shoot(model, x0, Eta0, T: float, steps: int = 100, chart=None):
    """Integrate Hamilton's equations in a chart from x0 with chart momenta Eta0.

    Returns (chart paths (steps+1, B, d), actions (B,), chart).  The action
    int (eta . y' - H) dt is integrated alongside the trajectory.  Rows that
    leave the chart become NaN.
    """
    m = model.manifold
    x0 = m.project(np.asarray(x0, dtype=float))
    chart = chart or _chart_for(model, x0)
    Eta = np.atleast_2d(np.asarray(Eta0, dtype=float)).copy()
    Y = np.broadcast_to(chart.to_coords(x0), Eta.shape).copy()
    const = model.x_independent
    # sphere normal coordinates degenerate at radius pi; retire trajectories early
    limit = 0.9 * np.pi if model.manifold.kind == "sphere" else np.inf

    def rhs(Y, Eta):
        out = [np.full_like(Y, np.nan), np.full_like(Y, np.nan), np.full(Y.shape[0], np.nan)]
        live = np.all(np.isfinite(Y), axis=-1) & (np.linalg.norm(Y, axis=-1) < limit)
        if live.any():
            Yl, El = Y[live], Eta[live]
            H, dEta = _chart_hamiltonian(model, chart, Yl, El)
            dY = np.zeros_like(Yl) if const else _chart_hamiltonian_dy(model, chart, Yl, El)
            out[0][live], out[1][live] = dEta, -dY
            out[2][live] = np.sum(El * dEta, axis=-1) - H
        return out

    h = T / steps
    path = np.empty((steps + 1,) + Y.shape)
    path[0] = Y
    A = np.zeros(Y.shape[0])
    for k in range(steps):
        k1 = rhs(Y, Eta)
        k2 = rhs(Y + 0.5 * h * k1[0], Eta + 0.5 * h * k1[1])
        k3 = rhs(Y + 0.5 * h * k2[0], Eta + 0.5 * h * k2[1])
        k4 = rhs(Y + h * k3[0], Eta + h * k3[1])
        Y = Y + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        Eta = Eta + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        A = A + h / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        path[k + 1] = Y
    return path, A, chart


def _endpoint_gap(model, chart, center, event, path_end):
    X = chart.to_point(path_end)
    g = model.manifold.dist(X, center) - event.radius
    return g if event.sense == "outside" else -g


def _directions(d, count):
    if d == 1:
        return np.array([[1.0], [-1.0]])
    if d == 2:
        a = np.linspace(0.0, 2 * np.pi, count, endpoint=False)
        return np.stack([np.cos(a), np.sin(a)], axis=1)
    from ..hamiltonian import unit_directions
    return unit_directions(d, count)


def _boundary_actions(model, x0, center, event, dirs, steps, s_max=64.0, iters=14):
    """Minimal-momentum extremal reaching the event boundary along each direction.

    All magnitudes of a geometric scan are shot in one batch; the first
    sign change of the boundary gap is then refined by Illinois false
    position, again batched over directions.
    """
    B, d = dirs.shape
    chart = _chart_for(model, x0)
    s_grid = np.geomspace(1e-2, s_max, 24)
    S = len(s_grid)
    eta = (s_grid[:, None, None] * dirs[None]).reshape(S * B, d)
    try:
        path, _, _ = shoot(model, x0, eta, event.T, steps, chart)
        g = _endpoint_gap(model, chart, center, event, path[-1]).reshape(S, B)
    except (ChartDomain, CutLocus):
        # fall back to one magnitude at a time so that bad shots stay local
        g = np.full((S, B), np.nan)
        for k, s in enumerate(s_grid):
            try:
                pk, _, _ = shoot(model, x0, s * dirs, event.T, steps, chart)
                g[k] = _endpoint_gap(model, chart, center, event, pk[-1])
            except (ChartDomain, CutLocus):
                break
    # the zero-momentum extremal is the averaged flow, which ends outside the event
    g0 = np.full(B, -event.radius) if event.sense == "outside" else None
    a = np.zeros(B)
    ga = g0 if g0 is not None else np.full(B, np.nan)
    b = np.full(B, np.nan)
    gb = np.full(B, np.nan)
    found = np.zeros(B, dtype=bool)
    prev_s, prev_g = np.zeros(B), ga.copy()
    for k in range(S):
        cross = ~found & (g[k] >= 0) & ~np.isnan(g[k])
        a[cross], ga[cross] = prev_s[cross], prev_g[cross]
        b[cross], gb[cross] = s_grid[k], g[k][cross]
        found |= cross
        ok = ~np.isnan(g[k])
        prev_s = np.where(ok, s_grid[k], prev_s)
        prev_g = np.where(ok, g[k], prev_g)
    actions = np.full(B, np.inf)
    if not found.any():
        return actions, np.full(B, np.nan)
    idx = np.flatnonzero(found)
    a, b, ga, gb = a[idx], b[idx], ga[idx], gb[idx]
    # a NaN left-end gap happens for inside events with no sample below the first scan point
    ga = np.where(np.isnan(ga), -event.radius, ga)
    D = dirs[idx]
    side = np.zeros(len(idx))
    for _ in range(iters):
        c = np.where(gb - ga != 0, b - gb * (b - a) / (gb - ga), 0.5 * (a + b))
        c = np.clip(c, a + 1e-3 * (b - a), b - 1e-3 * (b - a))
        pc, _, _ = shoot(model, x0, c[:, None] * D, event.T, steps, chart)
        gc = _endpoint_gap(model, chart, center, event, pc[-1])
        lost = np.isnan(gc)
        gc = np.where(lost, gb, gc)
        up = (gc >= 0) | lost
        # Illinois: halve the stale endpoint's gap when the same side repeats
        b = np.where(up, c, b)
        ga = np.where(up & (side > 0), 0.5 * ga, ga)
        gb = np.where(up, gc, np.where(side < 0, 0.5 * gb, gb))
        a = np.where(up, a, c)
        ga = np.where(up, ga, gc)
        side = np.where(up, 1.0, -1.0)
        if np.all(np.abs(gc) < 1e-10):
            break
    # interpolate the magnitude that lands exactly on the boundary
    s_hit = np.where(gb - ga != 0, b - gb * (b - a) / (gb - ga), b)
    _, A, _ = shoot(model, x0, s_hit[:, None] * D, event.T, steps, chart)
    mags = np.full(B, np.nan)
    actions[idx] = A
    mags[idx] = s_hit
    return actions, mags


def theoretical_rate(event: EventSpec, model: Model, x0, center=None, steps=60, n_dirs=24):
    """inf of the action over curves from x0 whose time-T endpoint lies in the event.

    Brownian motion (one state, zero drift) uses the closed form
    dist_to_boundary^2 / (2T).  When the averaged endpoint already lies in
    the event the rate is 0.  Otherwise extremals of the Hamiltonian flow are
    shot from x0 in a direction scan; along each direction the momentum
    magnitude is found by false position so the endpoint lands on the event boundary.
    Models whose Hamiltonian does not depend on x on a flat manifold have
    straight extremals, so the boundary is scanned directly.
    """
    m = model.manifold
    x0 = m.project(np.asarray(x0, dtype=float))
    if center is None:
        center = event_center(event, model, x0)
    T = float(event.T)
    if _is_brownian(model):
        d0 = float(m.dist(x0, center))
        if event.sense == "outside":
            if event.radius >= m.injectivity_radius + d0:
                return math.inf
            gap = max(event.radius - d0, 0.0)
        else:
            gap = max(d0 - event.radius, 0.0)
        return gap ** 2 / (2.0 * T)
    xbar = averaged_endpoint(model, x0, T)
    if bool(event.contains(m.dist(xbar, center))):
        return 0.0
    dirs = _directions(m.dim, n_dirs)
    if model.x_independent:
        # extremals are straight lines: minimise T L((y - x0) / T) over the boundary
        def scan(D):
            Y = m.exp(np.broadcast_to(center, (len(D), m.amb_dim)),
                      event.radius * m.from_frame(center, D))
            V = m.to_frame(x0, m.log(np.broadcast_to(x0, Y.shape), Y)) / T
            L, _, _ = legendre_array(model, np.broadcast_to(x0, Y.shape), V)
            return T * L
    else:
        def scan(D):
            return _boundary_actions(model, x0, center, event, D, steps)[0]
    actions = scan(dirs)
    if m.dim == 2 and np.isfinite(actions).any():
        # refine the angle around the best coarse direction
        for width in (2 * np.pi / n_dirs, 2 * np.pi / n_dirs / 8):
            k = int(np.argmin(actions))
            a0 = math.atan2(dirs[k, 1], dirs[k, 0])
            a = a0 + np.linspace(-width, width, 17)
            dirs = np.concatenate([dirs, np.stack([np.cos(a), np.sin(a)], axis=1)])
            actions = np.concatenate([actions, scan(dirs[-17:])])
    best = float(np.min(actions))
    if not np.isfinite(best):
        raise NumericalFailure("no extremal reached the event boundary", stage="theoretical_rate",
                               radius=event.radius, T=T)
    return best


def endpoint_rate(model: Model, x0, y, T: float, steps=100, tol=1e-10):
    """Minimal action from x0 to y in time T by Newton shooting on the momentum."""
    m = model.manifold
    x0 = m.project(np.asarray(x0, dtype=float))
    chart = _chart_for(model, x0)
    target = chart.to_coords(m.project(np.asarray(y, dtype=float)))
    y0 = chart.to_coords(x0)
    d = m.dim
    eta = (target - y0) / T
    for _ in range(60):
        eps = 1e-6
        probes = np.vstack([eta, eta + eps * np.eye(d), eta - eps * np.eye(d)])
        path, A, _ = shoot(model, x0, probes, T, steps, chart)
        end = path[-1]
        r = end[0] - target
        if np.linalg.norm(r) < tol:
            return float(A[0])
        J = ((end[1:1 + d] - end[1 + d:]) / (2 * eps)).T
        step = np.linalg.solve(J, -r)
        eta = eta + step
    raise NumericalFailure("endpoint shooting did not converge", stage="endpoint_rate",
                           residual=float(np.linalg.norm(r)))


def rate_curve(model: Model, x0, T: float, endpoints, steps=100):
    """Minimal action to each endpoint (the finite-horizon rate function of X_n(T))."""
    return np.array([endpoint_rate(model, x0, y, T, steps) for y in endpoints])


# --------------------------------------------------------------------------
# averaging and operator convergence
# --------------------------------------------------------------------------


def sup_deviation(model: Model, x0, n, T, samples, seed):
    """sup_{t <= T} d(X_n(t), Xbar(t)) for ``samples`` paths (step-grid sup)."""
    cfg = SimConfig(model, n, T, x0, seed=seed)
    ref = simulate_averaged(ManifoldPoint(model.manifold, cfg.x0), T, cfg.dt, model).points
    _, _, dev = simulate_batch(cfg, samples, reference=ref)
    return dev, cfg


def averaging_study(cfg: ExperimentConfig) -> ResultRecord:
    """Median and 90th percentile of the sup deviation from the averaged flow per n."""
    rows, times = [], []
    for k, n in enumerate(cfg.n_list):
        t0 = time.perf_counter()
        dev, sim = sup_deviation(cfg.model, cfg.x0, n, cfg.event.T, cfg.samples,
                                 derived_seed(cfg.seed, k))
        rows.append({"n": n, "samples": cfg.samples, "median": float(np.median(dev)),
                     "p90": float(np.quantile(dev, 0.9)), "mean": float(dev.mean()),
                     "steps": sim.steps})
        times.append(time.perf_counter() - t0)
    return ResultRecord(cfg.inputs_hash(), "averaging", ["n", "samples", "median", "p90", "mean"],
                        rows, runtime={"seconds_per_n": times, "total_seconds": sum(times)})


def eigenvector_phi(model: Model, f: ScalarField):
    """phi(x, i) = log r_i(x, df(x)) with r the principal right eigenvector."""

    def phi(X, i):
        X = np.asarray(X, dtype=float)
        _, r, _, _ = eigen_array(model, X, f.differential_array(X))
        return np.log(np.asarray(r)[..., i])

    return phi


def operator_convergence(model: Model, f: ScalarField, phi, points, n_list):
    """max over (points, states) of |H_n f_n - H_{f,phi}| for each n, and the log-log slope."""
    errs = []
    pts = [ManifoldPoint(model.manifold, p) for p in np.atleast_2d(points)]
    limits = {(k, i): limit_generator(f, phi, x, i, model)
              for k, x in enumerate(pts) for i in range(model.n_states)}
    for n in n_list:
        e = 0.0
        for k, x in enumerate(pts):
            for i in range(model.n_states):
                e = max(e, abs(prelimit_generator(f, phi, n, x, i, model) - limits[(k, i)]))
        errs.append(e)
    errs = np.array(errs)
    slope = float(np.polyfit(np.log(np.asarray(n_list, float)), np.log(errs), 1)[0])
    return errs, slope


def operator_convergence_study(cfg: ExperimentConfig) -> ResultRecord:
    """Operator convergence for a random smooth f and phi drawn from the config seed."""
    model = cfg.model
    rng = np.random.default_rng(cfg.seed)
    f, phi = random_test_functions(model, rng)
    pts = sample_points(model, cfg.x0, int(cfg.options.get("points", 8)), rng)
    t0 = time.perf_counter()
    errs, slope = operator_convergence(model, f, phi, pts, cfg.n_list)
    rows = [{"n": n, "error": float(e)} for n, e in zip(cfg.n_list, errs)]
    return ResultRecord(cfg.inputs_hash(), "operator_convergence", ["n", "error"], rows,
                        fit={"loglog_slope": slope},
                        runtime={"total_seconds": time.perf_counter() - t0})


def random_test_functions(model: Model, rng):
    """Smooth f (a few ambient Fourier modes) and phi(x, i) of the same kind."""
    m = model.manifold
    k1 = rng.normal(size=(3, m.amb_dim))
    c1 = rng.normal(size=3) * 0.5
    k2 = rng.normal(size=(model.n_states, m.amb_dim))
    c2 = rng.normal(size=model.n_states) * 0.5

    def fvals(X):
        return np.sum(c1 * np.sin(np.asarray(X) @ k1.T + 0.3), axis=-1)

    def phi(X, i):
        return c2[i] * np.cos(np.asarray(X) @ k2[i] + 0.1 * i)

    return ScalarField(m, fvals, name="random_f"), phi


def sample_points(model: Model, x0, count, rng):
    m = model.manifold
    V = m.from_frame(np.broadcast_to(x0, (count, m.amb_dim)), rng.normal(size=(count, m.dim)))
    return m.exp(np.broadcast_to(np.asarray(x0, float), V.shape), 0.8 * V)


# --------------------------------------------------------------------------
# resolvent checks
# --------------------------------------------------------------------------


@dataclass
class ResolventCheck:
    pseudo_resolvent_gap: float
    residual: float
    h_norm: float
    constant_error: float
    lam: float
    alpha: float
    beta: float

    def as_dict(self):
        return dict(self.__dict__)


def resolvent_check(model: Model, h: ScalarField, x0, alpha=0.5, beta=1.0, half_width=2.0,
                    points=41, curve_grid=64, restarts=3, margin=None, constant=1.7):
    """Three consistency checks of the discretised resolvent on a working grid.

    * pseudo-resolvent: R(beta) h against R(alpha)(R(beta) h - alpha (R(beta) h - h) / beta),
      compared on the inner half of the grid relative to sup |h|;
    * viscosity residual of u = R(beta) h for u - beta H(x, du) = h;
    * R(beta) applied to a constant returns it.
    """
    grid = working_grid(model.manifold, x0, half_width, points)
    cfg_b = ResolventConfig(lam=beta, curve_grid=curve_grid, restarts=restarts)
    cfg_a = ResolventConfig(lam=alpha, curve_grid=curve_grid, restarts=restarts)
    hg = grid_from_field(h, grid)
    u = resolvent_on_grid(cfg_b, h, grid, model)
    g = u.with_values(u.values - alpha * (u.values - hg.values) / beta)
    w = resolvent_on_grid(cfg_a, g, grid, model)
    if margin is None:
        margin = points // 4
    inner = grid.interior_mask(margin)
    h_norm = float(np.max(np.abs(hg.values)))
    gap = float(np.max(np.abs(u.values - w.values)[inner])) / h_norm
    res, _ = viscosity_residual(u, beta, h, model, margin=margin)
    const = ScalarField(model.manifold, lambda X: np.full(np.shape(X)[:-1], constant))
    one = resolvent_on_grid(cfg_b, const, working_grid(model.manifold, x0, half_width, 5), model)
    cerr = float(np.max(np.abs(one.values - constant)))
    return ResolventCheck(gap, res / h_norm, h_norm, cerr, beta, alpha, beta)


def resolvent_check_study(cfg: ExperimentConfig) -> ResultRecord:
    opts = cfg.options
    freq = float(opts.get("h_frequency", 1.0))
    h = ScalarField(cfg.model.manifold, lambda X: np.cos(freq * np.asarray(X)[..., 0]), name="cos")
    t0 = time.perf_counter()
    chk = resolvent_check(cfg.model, h, cfg.x0, alpha=float(opts.get("alpha", 0.5)),
                          beta=float(opts.get("beta", 1.0)),
                          half_width=float(opts.get("half_width", 2.0)),
                          points=int(opts.get("points", 41)))
    rows = [{"check": k, "value": v} for k, v in chk.as_dict().items()]
    return ResultRecord(cfg.inputs_hash(), "resolvent_check", ["check", "value"], rows,
                        runtime={"total_seconds": time.perf_counter() - t0})


def rate_curve_study(cfg: ExperimentConfig) -> ResultRecord:
    """Finite-horizon rate of the endpoint along a geodesic ray from the averaged endpoint."""
    model = cfg.model
    m = model.manifold
    T = cfg.event.T
    center = event_center(cfg.event, model, cfg.x0)
    direction = np.asarray(cfg.options.get("direction", [1.0] + [0.0] * (m.dim - 1)), float)
    direction = direction / np.linalg.norm(direction)
    radii = np.linspace(0.0, cfg.event.radius, int(cfg.options.get("points", 11)))
    V = m.from_frame(center, direction)
    ends = m.exp(np.broadcast_to(center, (len(radii), m.amb_dim)), radii[:, None] * V)
    t0 = time.perf_counter()
    vals = rate_curve(model, cfg.x0, T, ends)
    rows = [{"r": float(r), "rate": float(v)} for r, v in zip(radii, vals)]
    return ResultRecord(cfg.inputs_hash(), "rate_curve", ["r", "rate"], rows,
                        runtime={"total_seconds": time.perf_counter() - t0})


def run_experiment(cfg: ExperimentConfig) -> ResultRecord:
    kinds = {"rare_event": estimate_rare_event, "averaging": averaging_study,
             "operator_convergence": operator_convergence_study,
             "resolvent_check": resolvent_check_study, "rate_curve": rate_curve_study}
    return kinds[cfg.kind](cfg)
