"""Principal-eigenvalue Hamiltonian, its momentum gradient and the Lagrangian.

For a model with drift b and generator Q(x), the tilted generator is

    Q_{x,p} = diag(b(x, i) . p + |p|^2 / 2) + Q(x),

and H(x, p) is its Perron-Frobenius eigenvalue.  The Lagrangian is the
convex conjugate L(x, v) = sup_p {p . v - H(x, p)}.

Covectors and vectors are handled through their components in the
orthonormal frame of ``geometry``, so the metric pairing is the Euclidean
dot product of components.  The ``*_array`` functions are vectorised over
leading axes of X and P; the point-level functions wrap them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .errors import ContractViolation, NumericalFailure
from .geometry import CotangentVector, ManifoldPoint, TangentVector
from .switching import donsker_varadhan, validate_generator

EIG_TOL = 1e-12
MAX_SQUARINGS = 64
HESS_STEP = 1e-5


@dataclass(frozen=True)
class TiltedGenerator:
    matrix: np.ndarray
    x: ManifoldPoint
    p: CotangentVector


@dataclass(frozen=True)
class EigenResult:
    eigenvalue: float
    right: np.ndarray
    left: np.ndarray
    iterations: int
    converged: bool = True


@dataclass(frozen=True)
class LagrangianResult:
    value: float
    argmax_p: CotangentVector
    converged: bool = True
    iterations: int = 0


def _check_based(x, p):
    if p.base.manifold != x.manifold or np.any(np.abs(p.base.coords - x.coords) > 1e-12):
        raise ContractViolation("covector is not based at x")


# --------------------------------------------------------------------------
# tilted generator and Perron-Frobenius solver
# --------------------------------------------------------------------------


def tilt_values(model, X, P):
    """B_{x,p}(i) = b(x, i) . p + |p|^2 / 2 for every state, shape (..., N)."""
    X = np.asarray(X, dtype=float)
    P = np.asarray(P, dtype=float)
    Bf = model.drift.frame_all(X)
    return np.einsum("...ik,...k->...i", Bf, P) + 0.5 * np.sum(P * P, axis=-1)[..., None]


def tilt_value(model, x: ManifoldPoint, p: CotangentVector, i: int) -> float:
    _check_based(x, p)
    if not 0 <= i < model.n_states:
        raise ContractViolation(f"switch state {i} out of range")
    return float(tilt_values(model, x.coords, p.components)[i])


def tilted_matrix(model, X, P, Q=None):
    B = tilt_values(model, X, P)
    if Q is None:
        Q = model.rates.matrix(X)
    A = np.array(np.broadcast_to(Q, B.shape + (B.shape[-1],)), dtype=float)
    idx = np.arange(B.shape[-1])
    A[..., idx, idx] += B
    return A


def tilted_generator(model, x: ManifoldPoint, p: CotangentVector) -> TiltedGenerator:
    _check_based(x, p)
    return TiltedGenerator(tilted_matrix(model, x.coords, p.components), x, p)


def perron_frobenius(A, tol=EIG_TOL, max_squarings=MAX_SQUARINGS):
    """Principal eigenvalue and left/right vectors of Metzler matrices A (..., N, N).

    Works with the shifted matrix S = A + cI, c = 1 + max_i |A_ii|, which is
    entrywise nonnegative with a positive diagonal.  Power iteration is run
    on S^(2^k) through repeated squaring (no cancellation can occur for
    nonnegative matrices), and the eigenvalue is bracketed by the
    Collatz-Wielandt quotients min_i (S r)_i / r_i <= rho <= max_i (S r)_i / r_i,
    with the same bracket required of the left vector.

    Returns (eigenvalue, right, left, squarings); vectors are normalised to
    sum to one.
    """
    A = np.asarray(A, dtype=float)
    N = A.shape[-1]
    if N == 1:
        lam = A[..., 0, 0].copy()
        one = np.ones(A.shape[:-1])
        return lam, one, one, 0
    diag = np.diagonal(A, axis1=-2, axis2=-1)
    c = 1.0 + np.max(np.abs(diag), axis=-1)
    S = A + c[..., None, None] * np.eye(N)
    M = S / np.max(S, axis=(-2, -1), keepdims=True)
    for k in range(max_squarings + 1):
        r = M.sum(axis=-1)
        r = r / r.sum(axis=-1, keepdims=True)
        left = M.sum(axis=-2)
        left = left / left.sum(axis=-1, keepdims=True)
        q = np.einsum("...ij,...j->...i", S, r) / r
        ql = np.einsum("...j,...ji->...i", left, S) / left
        lo = q.min(axis=-1)
        hi = q.max(axis=-1)
        lam_s = 0.5 * (lo + hi)
        # both vectors must settle: r can be exact (p = 0) long before the left one
        width = np.maximum(hi - lo, ql.max(axis=-1) - ql.min(axis=-1))
        if np.all(width <= tol * np.maximum(1.0, np.abs(lam_s))):
            return lam_s - c, r, left, k
        M = np.matmul(M, M)
        M = M / np.max(M, axis=(-2, -1), keepdims=True)
    gap = float(np.max(width))
    raise NumericalFailure("principal eigenvalue did not separate", stage="hamiltonian",
                           bracket_width=gap, squarings=max_squarings)


def eigen_array(model, X, P, Q=None):
    return perron_frobenius(tilted_matrix(model, X, P, Q=Q))


def hamiltonian_array(model, X, P, Q=None):
    """H(x, p) for arrays X (..., amb) and P (..., d)."""
    if model.n_states == 1:
        return tilt_values(model, X, P)[..., 0]
    return eigen_array(model, X, P, Q=Q)[0]


def hamiltonian_and_grad_array(model, X, P, Q=None):
    """H and the Hellmann-Feynman gradient sum_i w_i (b_i + p), w = l * r / <l, r>."""
    X = np.asarray(X, dtype=float)
    P = np.asarray(P, dtype=float)
    Bf = model.drift.frame_all(X)
    if model.n_states == 1:
        b = Bf[..., 0, :]
        H = np.sum(b * P, axis=-1) + 0.5 * np.sum(P * P, axis=-1)
        return H, b + P
    lam, r, l, _ = perron_frobenius(tilted_matrix(model, X, P, Q=Q))
    w = l * r
    w = w / w.sum(axis=-1, keepdims=True)
    grad = np.einsum("...i,...ik->...k", w, Bf) + P
    return lam, grad


def grad_p_array(model, X, P, Q=None):
    return hamiltonian_and_grad_array(model, X, P, Q=Q)[1]


def hess_p_array(model, X, P, Q=None, h=HESS_STEP):
    """Central-difference Hessian in p of H (from the analytic gradient)."""
    X = np.asarray(X, dtype=float)
    P = np.asarray(P, dtype=float)
    d = P.shape[-1]
    if model.n_states == 1:
        return np.broadcast_to(np.eye(d), P.shape + (d,)).copy()
    cols = []
    for k in range(d):
        e = np.zeros(d)
        e[k] = h
        gp = grad_p_array(model, X, P + e, Q=Q)
        gm = grad_p_array(model, X, P - e, Q=Q)
        cols.append((gp - gm) / (2 * h))
    Hs = np.stack(cols, axis=-1)
    return 0.5 * (Hs + np.swapaxes(Hs, -1, -2))


def hamiltonian(model, x: ManifoldPoint, p: CotangentVector, validate=True) -> EigenResult:
    """Principal eigenvalue of the tilted generator at (x, p)."""
    _check_based(x, p)
    Q = model.rates.matrix(x.coords)
    if validate:
        validate_generator(Q)
    A = tilted_matrix(model, x.coords, p.components, Q=Q)
    lam, r, l, k = perron_frobenius(A)
    return EigenResult(float(lam), np.atleast_1d(r) / np.max(r), np.atleast_1d(l) / np.max(l), k)


def grad_p_hamiltonian(model, x: ManifoldPoint, p: CotangentVector) -> TangentVector:
    _check_based(x, p)
    return TangentVector(x, grad_p_array(model, x.coords, p.components))


def hamiltonian_variational(model, x: ManifoldPoint, p: CotangentVector, tol=1e-12) -> float:
    """sup over probability vectors pi of sum_i pi_i B_i - I(x, pi).

    The objective is concave in pi; its gradient is B + (Q g)/g at the
    Donsker-Varadhan minimiser g (envelope theorem).  SLSQP on the simplex
    for N > 2, bounded scalar search for N = 2.
    """
    _check_based(x, p)
    Q = model.rates.matrix(x.coords)
    validate_generator(Q)
    B = tilt_values(model, x.coords, p.components)
    N = len(B)
    if N == 1:
        return float(B[0])

    def value(pi):
        return float(pi @ B - donsker_varadhan(Q, pi))

    if N == 2:
        from scipy.optimize import minimize_scalar

        res = minimize_scalar(lambda s: -value(np.array([s, 1.0 - s])), bounds=(0.0, 1.0),
                              method="bounded", options={"xatol": 1e-12})
        best = -res.fun
        for s in (0.0, 1.0):
            best = max(best, value(np.array([s, 1.0 - s])))
        return float(best)

    def neg(pi):
        pi = np.clip(pi, 0.0, None)
        pi = pi / pi.sum()
        val, g = donsker_varadhan(Q, pi, return_g=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(g > 0, (Q @ np.where(g > 0, g, 0.0)) / np.where(g > 0, g, 1.0), 0.0)
        return -(pi @ B - val), -(B + ratio)

    start = np.full(N, 1.0 / N)
    res = minimize(neg, start, jac=True, method="SLSQP", bounds=[(0.0, 1.0)] * N,
                   constraints=[{"type": "eq", "fun": lambda z: z.sum() - 1.0,
                                 "jac": lambda z: np.ones_like(z)}],
                   options={"ftol": tol, "maxiter": 500})
    if not res.success:
        raise NumericalFailure(f"simplex maximisation failed: {res.message}",
                               stage="hamiltonian_variational")
    return float(-res.fun)


# --------------------------------------------------------------------------
# Legendre transform
# --------------------------------------------------------------------------


def momentum_bound(model, X, V):
    """Radius 2 (|v| + max_i |b(x, i)|) containing the maximiser p*.

    H(x, p) >= |p|^2 / 2 - max_i |b_i| |p| (the PF eigenvalue dominates the
    smallest diagonal entry), so p.v - H < 0 once |p| exceeds the bound.
    """
    bmax = np.max(np.linalg.norm(model.drift.frame_all(X), axis=-1), axis=-1)
    return 2.0 * (np.linalg.norm(V, axis=-1) + bmax) + 1.0


def legendre_array(model, X, V, P0=None, tol=1e-10, max_iter=100, Q=None):
    """L(x, v) = sup_p {p.v - H(x, p)} by damped Newton from p = v.

    Returns (L, p*, iterations).  Arrays broadcast over leading axes.
    """
    X = np.asarray(X, dtype=float)
    V = np.asarray(V, dtype=float)
    shape = np.broadcast_shapes(X.shape[:-1], V.shape[:-1])
    X = np.broadcast_to(X, shape + X.shape[-1:])
    V = np.broadcast_to(V, shape + V.shape[-1:])
    if model.n_states == 1:
        b = model.drift.frame_all(X)[..., 0, :]
        P = V - b
        return 0.5 * np.sum(P * P, axis=-1), P, 0
    if Q is None:
        Q = model.rates.matrix(X)
    P = np.array(V if P0 is None else np.broadcast_to(P0, V.shape), dtype=float)
    bound = momentum_bound(model, X, V)
    H, g = hamiltonian_and_grad_array(model, X, P, Q=Q)
    obj = np.sum(P * V, axis=-1) - H
    scale = np.maximum(1.0, np.linalg.norm(V, axis=-1))
    for it in range(max_iter):
        resid = V - g
        rnorm = np.linalg.norm(resid, axis=-1)
        active = rnorm > tol * scale
        if not np.any(active):
            return obj, P, it
        # Hess_p H >= I holds exactly; flooring the spectrum there keeps the
        # Newton step well defined when differencing loses digits at large |p|
        ev, U = np.linalg.eigh(hess_p_array(model, X, P, Q=Q))
        ev = np.maximum(np.nan_to_num(ev, nan=1.0), 1.0)
        step = np.matmul(U, (np.matmul(np.swapaxes(U, -1, -2), resid[..., None])[..., 0]
                             / ev)[..., None])[..., 0]
        step = np.where(active[..., None], step, 0.0)
        alpha = np.ones(shape)
        pending = active.copy()
        newP, newH, newg, newobj = P.copy(), H.copy(), g.copy(), obj.copy()
        for _ in range(40):
            trial = P + alpha[..., None] * step
            tn = np.linalg.norm(trial, axis=-1)
            over = tn > bound
            trial = np.where(over[..., None], trial * (bound / np.maximum(tn, 1e-300))[..., None], trial)
            tH, tg = hamiltonian_and_grad_array(model, X, trial, Q=Q)
            tobj = np.sum(trial * V, axis=-1) - tH
            ok = pending & (tobj >= obj - 1e-13 * (1.0 + np.abs(obj)))
            newP = np.where(ok[..., None], trial, newP)
            newH = np.where(ok, tH, newH)
            newg = np.where(ok[..., None], tg, newg)
            newobj = np.where(ok, tobj, newobj)
            pending &= ~ok
            if not np.any(pending):
                break
            alpha = np.where(pending, 0.5 * alpha, alpha)
        if np.any(pending):
            # no ascent direction left at working precision
            stuck = pending & (rnorm > 1e-7 * scale)
            if np.any(stuck):
                raise NumericalFailure("Legendre line search stalled", stage="legendre",
                                       residual=float(np.max(rnorm[stuck])))
            active &= ~pending
        P, H, g, obj = newP, newH, newg, newobj
    rnorm = np.linalg.norm(V - g, axis=-1)
    if np.any(rnorm > 1e-7 * scale):
        raise NumericalFailure("Legendre Newton did not converge", stage="legendre",
                               residual=float(np.max(rnorm)))
    return obj, P, max_iter


def legendre(model, x: ManifoldPoint, v: TangentVector, tol=1e-10) -> LagrangianResult:
    if v.base.manifold != x.manifold or np.any(np.abs(v.base.coords - x.coords) > 1e-12):
        raise ContractViolation("vector is not based at x")
    L, P, it = legendre_array(model, x.coords, v.components, tol=tol)
    return LagrangianResult(max(0.0, float(L)), CotangentVector(x, P), True, it)


def lagrangian_array(model, X, V, **kw):
    return np.maximum(legendre_array(model, X, V, **kw)[0], 0.0)


def double_transform(model, x: ManifoldPoint, p: CotangentVector, tol=1e-10, max_iter=100):
    """sup_v {p.v - L(x, v)} by Newton in v (Hess L = (Hess H at p*)^-1).

    Returns (value, maximising v components).
    """
    _check_based(x, p)
    X = x.coords
    pc = p.components
    bbar = np.zeros_like(pc)
    if model.n_states > 1:
        bbar = grad_p_array(model, X, np.zeros_like(pc))
    else:
        bbar = model.drift.frame_all(X)[0]
    v = pc + bbar
    Pstar = None
    for it in range(max_iter):
        L, Pstar, _ = legendre_array(model, X, v, P0=Pstar)
        resid = pc - Pstar
        obj = float(pc @ v - L)
        if np.linalg.norm(resid) < tol * max(1.0, np.linalg.norm(pc)):
            return obj, v
        Hs = hess_p_array(model, X, Pstar)
        step = Hs @ resid
        alpha = 1.0
        while alpha > 1e-10:
            vt = v + alpha * step
            Lt, _, _ = legendre_array(model, X, vt, P0=Pstar)
            if float(pc @ vt - Lt) >= obj - 1e-14 * (1 + abs(obj)):
                break
            alpha *= 0.5
        v = vt
    raise NumericalFailure("double Legendre transform did not converge", stage="double_transform")


# --------------------------------------------------------------------------
# growth profiles
# --------------------------------------------------------------------------


def unit_directions(d, count=16):
    if d == 1:
        return np.array([[1.0], [-1.0]])
    if d == 2:
        ang = np.linspace(0.0, 2 * np.pi, count, endpoint=False)
        return np.stack([np.cos(ang), np.sin(ang)], -1)
    # Fibonacci sphere
    k = np.arange(count) + 0.5
    z = 1.0 - 2.0 * k / count
    phi = np.pi * (1.0 + 5 ** 0.5) * k
    rr = np.sqrt(1.0 - z * z)
    return np.stack([rr * np.cos(phi), rr * np.sin(phi), z], -1)


def lagrangian_growth(model, K_sample, s_grid, n_dirs=16, extend=2.0, n_extra=32):
    """theta(s) = s * inf_{x in K} inf_{|v| >= s} L(x, v) / |v| on s_grid.

    The inner infimum over |v| >= s is taken on a radial grid reaching
    ``extend * max(s_grid)`` (L / |v| grows superlinearly beyond it).
    """
    s_grid = np.asarray(s_grid, dtype=float)
    if len(K_sample) == 0:
        raise ContractViolation("need at least one sample point")
    if np.any(s_grid <= 0) or np.any(np.diff(s_grid) <= 0):
        raise ContractViolation("s_grid must be positive and increasing")
    X = np.stack([k.coords if isinstance(k, ManifoldPoint) else np.asarray(k, float) for k in K_sample])
    d = model.dim
    dirs = unit_directions(d, n_dirs)
    radii = np.union1d(s_grid, np.linspace(s_grid[0], extend * s_grid[-1], n_extra))
    XX = np.broadcast_to(X[:, None, None, :], (len(X), len(radii), len(dirs), X.shape[-1]))
    VV = radii[None, :, None, None] * dirs[None, None, :, :]
    VV = np.broadcast_to(VV, (len(X), len(radii), len(dirs), d))
    L = lagrangian_array(model, XX, VV)
    per_radius = np.min(L, axis=(0, 2)) / radii
    suffix_min = np.minimum.accumulate(per_radius[::-1])[::-1]
    pos = np.searchsorted(radii, s_grid)
    return s_grid * suffix_min[pos]


def sublevel_radius_constant(model, X, n_dirs=16):
    """C1 = max over x in X and unit p of H(x, p)."""
    X = np.asarray(X, dtype=float)
    dirs = unit_directions(model.dim, n_dirs)
    XX = np.broadcast_to(X[:, None, :], (len(X), len(dirs), X.shape[-1]))
    PP = np.broadcast_to(dirs[None], (len(X),) + dirs.shape)
    return float(np.max(hamiltonian_array(model, XX, PP)))
