"""Finite-state fast process: generators, invariant measures, Donsker-Varadhan cost.

States are labelled 0..N-1.  Generators are dense N x N arrays, possibly with
leading batch axes where noted.
"""
from __future__ import annotations

import numpy as np

from .errors import ContractViolation, InvalidGenerator, NoUniqueInvariant, NumericalFailure

ROW_SUM_TOL = 1e-12


def validate_generator(Q, tol=ROW_SUM_TOL, check_irreducible=True):
    """Raise InvalidGenerator / NoUniqueInvariant unless Q is a valid generator.

    Works on a single matrix or a batch (..., N, N).  Row sums must vanish to
    within ``tol`` times the largest rate in the row (at least ``tol``).
    """
    Q = np.asarray(Q, dtype=float)
    if Q.ndim < 2 or Q.shape[-1] != Q.shape[-2]:
        raise InvalidGenerator(f"generator must be square, got shape {Q.shape}")
    if not np.all(np.isfinite(Q)):
        raise InvalidGenerator("generator has non-finite entries")
    N = Q.shape[-1]
    off = ~np.eye(N, dtype=bool)
    if np.any(Q[..., off] < 0.0):
        raise InvalidGenerator("negative off-diagonal rate")
    scale = np.maximum(1.0, np.max(np.abs(Q), axis=-1))
    rows = np.abs(Q.sum(axis=-1))
    if np.any(rows > tol * scale):
        raise InvalidGenerator(f"row sums do not vanish (max {rows.max():.3e})")
    if check_irreducible:
        flat = Q.reshape(-1, N, N)
        for k in range(flat.shape[0]):
            if not is_irreducible(flat[k]):
                raise NoUniqueInvariant("generator is reducible")
    return Q


def is_irreducible(Q) -> bool:
    """Strong connectivity of the jump graph (edges where q_ij > 0)."""
    Q = np.asarray(Q, dtype=float)
    N = Q.shape[0]
    if N == 1:
        return True
    adj = (Q > 0.0) & ~np.eye(N, dtype=bool)

    def reach(A):
        seen = np.zeros(N, dtype=bool)
        seen[0] = True
        frontier = seen.copy()
        while frontier.any():
            nxt = A[frontier].any(axis=0) & ~seen
            seen |= nxt
            frontier = nxt
        return seen.all()

    return reach(adj) and reach(adj.T)


def rate_matrix(field, x, validate=True):
    """Generator of ``field`` at the point x (a ManifoldPoint)."""
    Q = np.asarray(field.matrix(x.coords), dtype=float)
    if validate:
        validate_generator(Q)
    return Q


def invariant_measure(Q) -> np.ndarray:
    """Solve pi Q = 0, sum(pi) = 1 through the augmented least-squares system."""
    Q = np.asarray(Q, dtype=float)
    validate_generator(Q)
    N = Q.shape[0]
    A = np.vstack([Q.T, np.ones((1, N))])
    rhs = np.zeros(N + 1)
    rhs[-1] = 1.0
    pi, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    pi = np.clip(pi, 0.0, None)
    pi /= pi.sum()
    if np.any(pi <= 0.0):
        raise NoUniqueInvariant("invariant measure is not strictly positive")
    return pi


def invariant_measure_batch(Q) -> np.ndarray:
    """Invariant measures of a batch of (validated) generators (..., N, N)."""
    Q = np.asarray(Q, dtype=float)
    N = Q.shape[-1]
    if N == 1:
        return np.ones(Q.shape[:-1])
    # replace the last column of Q^T-system by the normalisation row
    A = np.swapaxes(Q, -1, -2).copy()
    A[..., -1, :] = 1.0
    rhs = np.zeros(Q.shape[:-1])
    rhs[..., -1] = 1.0
    pi = np.linalg.solve(A, rhs[..., None])[..., 0]
    return pi / pi.sum(axis=-1, keepdims=True)


def averaged_drift(drift, field, x):
    """Sum_i pi_i^x b(x, i) as a TangentVector at x."""
    from .geometry import TangentVector

    pi = invariant_measure(rate_matrix(field, x))
    B = drift.frame_all(x.coords)
    return TangentVector(x, pi @ B)


def averaged_drift_array(drift, field, X):
    """Frame components of the averaged drift at each point of X."""
    X = np.asarray(X, dtype=float)
    Q = field.matrix(X)
    pi = invariant_measure_batch(Q)
    return np.einsum("...i,...ik->...k", pi, drift.frame_all(X))


# --------------------------------------------------------------------------
# Donsker-Varadhan functional
# --------------------------------------------------------------------------


def _dv_objective(u, pi, Q):
    """F(u) = sum_z pi_z (Q e^u)_z / e^{u_z} with gradient and Hessian."""
    N = len(u)
    E = np.exp(u[None, :] - u[:, None])  # E[z, j] = e^{u_j - u_z}
    W = pi[:, None] * Q * E
    np.fill_diagonal(W, 0.0)
    F = float(pi @ np.diag(Q) + W.sum())
    grad = W.sum(axis=0) - W.sum(axis=1)
    # each edge z->j contributes W_zj (e_j - e_z)(e_j - e_z)^T
    S = W + W.T
    Hess = -S
    Hess[np.diag_indices(N)] = S.sum(axis=1)
    return F, grad, Hess


def _dv_reduced(Q, pi, tol=1e-10, max_iter=200):
    """Infimum of F over u with pi > 0 everywhere; returns (inf F, u)."""
    N = len(pi)
    u = np.zeros(N)
    F, g, Hm = _dv_objective(u, pi, Q)
    for it in range(max_iter):
        gr = g[1:]
        gnorm = float(np.max(np.abs(gr))) if N > 1 else 0.0
        if gnorm < tol:
            return F, u, it
        Hr = Hm[1:, 1:]
        ridge = 1e-14 * max(1.0, float(np.trace(Hr)))
        try:
            step = -np.linalg.solve(Hr + ridge * np.eye(N - 1), gr)
        except np.linalg.LinAlgError:
            step = -gr
        if gr @ step >= 0.0:
            step = -gr
        elif -(gr @ step) <= 1e-15 * max(1.0, abs(F)):
            # Newton decrement below rounding of F: the infimum is reached
            return F, u, it
        alpha = 1.0
        while alpha > 1e-12:
            trial = u.copy()
            trial[1:] += alpha * step
            F_new, g_new, H_new = _dv_objective(trial, pi, Q)
            if F_new <= F + 1e-4 * alpha * (gr @ step):
                break
            alpha *= 0.5
        else:
            # no further decrease available at double precision
            if gnorm < 1e-7 * max(1.0, np.max(np.abs(Q))):
                return F, u, it
            raise NumericalFailure("Donsker-Varadhan line search stalled", stage="donsker_varadhan",
                                   grad_norm=gnorm, iterations=it)
        if np.max(np.abs(trial)) > 60.0:
            # the infimum sits at infinity; the remaining terms are below e^-60
            return F_new, trial, it
        u, F, g, Hm = trial, F_new, g_new, H_new
    raise NumericalFailure("Donsker-Varadhan Newton did not converge", stage="donsker_varadhan",
                           grad_norm=float(np.max(np.abs(g[1:]))), iterations=max_iter)


def donsker_varadhan(Q, pi, tol=1e-10, return_g=False):
    """I(pi) = -inf_{g > 0} sum_z pi_z (Q g)_z / g_z.

    The infimum is taken over g = exp(u) with u_0 = 0 by damped Newton.
    States with zero mass are eliminated first (their g may be sent to 0,
    which removes every term flowing into them).
    """
    Q = np.asarray(Q, dtype=float)
    validate_generator(Q, check_irreducible=False)
    pi = np.asarray(pi, dtype=float)
    if pi.shape != (Q.shape[0],) or np.any(pi < -1e-15) or abs(pi.sum() - 1.0) > 1e-10:
        raise ContractViolation("pi must be a probability vector matching Q")
    pi = np.clip(pi, 0.0, None)
    support = pi > 0.0
    idx = np.flatnonzero(support)
    diag_part = float(pi[idx] @ np.diag(Q)[idx])
    Qs = Q[np.ix_(idx, idx)].copy()
    np.fill_diagonal(Qs, 0.0)
    # objective on the support: diag part + off-diagonal exponential terms
    Qr = Qs.copy()
    np.fill_diagonal(Qr, -Qs.sum(axis=1))
    F_off, u_s, _ = _dv_reduced(Qr, pi[idx], tol=tol)
    F = diag_part + (F_off - float(pi[idx] @ np.diag(Qr)))
    value = max(0.0, -F)
    if return_g:
        u = np.full(len(pi), -np.inf)
        u[idx] = u_s - u_s[0]
        return value, np.exp(u)
    return value


def donsker_varadhan_twostate(q12, q21, pi):
    """Closed form (sqrt(pi_1 q12) - sqrt(pi_2 q21))^2 for two states."""
    return (np.sqrt(pi[0] * q12) - np.sqrt(pi[1] * q21)) ** 2
