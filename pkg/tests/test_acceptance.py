"""Acceptance suite: one test per criterion, with the stated tolerances and time budgets.

A pass/fail line per criterion is printed in the terminal summary (see conftest.py).
"""
import time

import numpy as np
import pytest

from geoldp.dynamics import limit_generator
from geoldp.geometry import (CotangentVector, Euclidean, ScalarField, Sphere2, Torus2,
                             grad_half_dist_sq, laplace_beltrami, point, transport_covector)
from geoldp.hamiltonian import (double_transform, hamiltonian, hamiltonian_array,
                                legendre_array)
from geoldp.lab import EventSpec, estimate_rare_event, parse_config, theoretical_rate
from geoldp.lab.experiments import (averaging_study, eigenvector_phi, operator_convergence,
                                    random_test_functions, resolvent_check, sample_points)
from geoldp.models import brownian, build_model, symmetric_twostate
from geoldp.variational import (GrowthConstants, action, growth_constants, growth_violations,
                                hopf_lax, optimal_curve, semigroup)

MANIFOLDS = ("euclidean:1", "sphere2", "torus2")


def random_model(rng, manifold, N):
    kind = rng.integers(3)
    if kind == 0 or N == 1:
        Q = rng.uniform(0.2, 2.0, size=(N, N))
        np.fill_diagonal(Q, 0.0)
        np.fill_diagonal(Q, -Q.sum(axis=1))
        vecs = rng.normal(size=(N, build_model(manifold).manifold.amb_dim))
        return build_model(manifold, rates={"family": "matrix", "q": Q.tolist()},
                           drift={"family": "constant", "vectors": vecs.tolist()})
    if N == 2:
        return build_model(manifold, family="twostate_spatial")
    return build_model(manifold, family="cycle3")


def closed_form(p, a, beta):
    return 0.5 * p * p - a + np.sqrt(a * a + beta * beta * p * p)


def test_criterion_01_hamiltonian_zero_law(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    draws = 0
    for manifold in MANIFOLDS:
        for N in (1, 2, 3):
            for _ in range(4):
                m = random_model(rng, manifold, N)
                assert m.n_states == N
                X = m.manifold.random_points(rng, 28)
                H = hamiltonian_array(m, X, np.zeros((28, m.dim)))
                worst = max(worst, float(np.max(np.abs(H))))
                draws += 28
    # the scalar entry point on a few of the same kind
    for manifold in MANIFOLDS:
        m = random_model(rng, manifold, 3)
        x = point(m.manifold, m.manifold.random_points(rng, 1)[0])
        worst = max(worst, abs(hamiltonian(m, x, CotangentVector(x, np.zeros(m.dim))).eigenvalue))
        draws += 1
    elapsed = time.perf_counter() - t0
    record_property("detail", f"{draws} draws, max |H(x,0)| = {worst:.2e}, {elapsed:.1f} s")
    assert draws >= 1000
    assert worst <= 1e-12
    assert elapsed < 10


def test_criterion_02_closed_form_oracle(record_property):
    t0 = time.perf_counter()
    A, B, P = np.meshgrid(np.linspace(0.1, 5.0, 10), np.linspace(0.0, 3.0, 10),
                          np.linspace(-4.0, 4.0, 10), indexing="ij")
    worst = 0.0
    for a, beta, p in zip(A.ravel(), B.ravel(), P.ravel()):
        m = symmetric_twostate(float(a), float(beta))
        H = hamiltonian_array(m, np.zeros((1, 1)), np.array([[p]]))[0]
        worst = max(worst, abs(H - closed_form(p, a, beta)))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"1000 grid points, max error = {worst:.2e}, {elapsed:.1f} s")
    assert worst <= 1e-8
    assert elapsed < 10


def test_criterion_03_legendre_duality(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(303)
    dual, young = 0.0, 0.0
    for k in range(100):
        m = random_model(rng, MANIFOLDS[k % 3], int(rng.integers(1, 4)))
        x = point(m.manifold, m.manifold.random_points(rng, 1)[0])
        p = CotangentVector(x, rng.normal(scale=1.5, size=m.dim))
        val, _ = double_transform(m, x, p)
        dual = max(dual, abs(val - hamiltonian(m, x, p).eigenvalue))
        v = rng.normal(scale=1.5, size=(1, m.dim))
        L, Pstar, _ = legendre_array(m, x.coords[None], v)
        gap = float(Pstar[0] @ v[0] - L[0] - hamiltonian_array(m, x.coords[None], Pstar)[0])
        young = max(young, abs(gap))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"double transform {dual:.2e}, Young equality {young:.2e}, "
                              f"{elapsed:.1f} s")
    assert dual <= 1e-6
    assert young <= 1e-8
    assert elapsed < 60


def test_criterion_04_geometry_identities(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(404)
    S2, T2, E2 = Sphere2(), Torus2(), Euclidean(2)
    roundtrip, d2 = 0.0, 0.0
    for m in (S2, T2, E2):
        X = m.project(m.random_points(rng, 300))
        C = rng.normal(size=(300, m.dim))
        C *= (rng.uniform(0.0, 0.9 * min(m.injectivity_radius, 4.0), size=300)
              / np.linalg.norm(C, axis=1))[:, None]
        V = m.from_frame(X, C)
        Y = m.exp(X, V)
        roundtrip = max(roundtrip, float(np.max(np.abs(m.log(X, Y) - V))))
        for x, y in zip(X[:100], Y[:100]):
            px, py = point(m, x), point(m, y)
            moved = transport_covector(px, py, grad_half_dist_sq(px, py))
            back = grad_half_dist_sq(py, px).components
            d2 = max(d2, float(np.max(np.abs(moved.components + back))))
    X = S2.project(rng.normal(size=(1000, 3)))
    Y = S2.project(rng.normal(size=(1000, 3)))
    keep = S2.dist(X, Y) < 0.95 * np.pi
    V = S2.tangent_project(X, rng.normal(size=(1000, 3)))
    W = S2.transport(X[keep], Y[keep], V[keep])
    iso = float(np.max(np.abs(np.linalg.norm(W, axis=1) - np.linalg.norm(V[keep], axis=1))))
    height = ScalarField(S2, lambda Z: Z[..., 2])
    lb = laplace_beltrami(height, point(S2, [0.0, 0.0, 1.0]))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"exp/log {roundtrip:.1e}, isometry {iso:.1e}, "
                              f"d^2-gradient {d2:.1e}, Laplacian {lb:.6f}, {elapsed:.1f} s")
    assert roundtrip <= 1e-9
    assert iso <= 1e-12
    assert d2 <= 1e-9
    assert abs(lb + 2.0) <= 1e-4
    assert elapsed < 10


def _equator_curve():
    b = brownian("sphere2")
    x0 = point(b.manifold, [1.0, 0.0, 0.0])
    # df has unit norm on the equator and points along it, so the flow runs
    # along the equator at speed pi/2
    f = ScalarField(b.manifold, lambda X: 0.5 * np.pi * np.arctan2(X[..., 1], X[..., 0]),
                    name="longitude")
    return b, x0, f, optimal_curve(x0, f, 1.0, 200, b)


def test_criterion_05_sphere_brownian_action(record_property):
    t0 = time.perf_counter()
    b, x0, f, c = _equator_curve()
    reached = float(b.manifold.dist(c.end.coords, x0.coords))
    total = action(c, b).total
    rate = theoretical_rate(EventSpec(center=x0.coords.tolist(), radius=np.pi / 2, T=1.0), b,
                            x0.coords)
    target = np.pi ** 2 / 8
    elapsed = time.perf_counter() - t0
    record_property("detail", f"distance {reached:.6f}, action {total:.6f}, "
                              f"rate {rate!r} vs pi^2/8 = {target!r}, {elapsed:.1f} s")
    assert reached == pytest.approx(np.pi / 2, rel=1e-3)
    assert abs(total - target) <= 0.01 * target
    assert rate == target
    assert elapsed < 60


SEMIGROUP_CASES = {
    "euclidean:1": ([0.3], [
        ("sin 2x", lambda X: np.sin(2.0 * X[..., 0])),
        ("-x^2/2", lambda X: -0.5 * X[..., 0] ** 2),
        ("exp(-x^2)", lambda X: np.exp(-X[..., 0] ** 2)),
    ]),
    "sphere2": ([0.0, 0.0, 1.0], [
        ("x1", lambda X: X[..., 0]),
        ("x1 x3 + x2/2", lambda X: X[..., 0] * X[..., 2] + 0.5 * X[..., 1]),
        ("exp(x2)", lambda X: np.exp(X[..., 1])),
    ]),
}


def test_criterion_06_semigroup_hopf_lax(record_property):
    t0 = time.perf_counter()
    t = 0.5
    worst, parts = 0.0, []
    for manifold, (x0, cases) in SEMIGROUP_CASES.items():
        b = brownian(manifold)
        x = point(b.manifold, x0)
        if manifold == "sphere2":
            ys = b.manifold.random_points(np.random.default_rng(6), 4000)
        else:
            ys = np.linspace(x0[0] - 4.0, x0[0] + 4.0, 801)[:, None]
        for name, fn in cases:
            f = ScalarField(b.manifold, fn, name=name)
            got = semigroup(t, f, x, 32, b)
            ref = hopf_lax(f, t, x, ys)
            err = abs(got - ref) / abs(ref)
            worst = max(worst, err)
            parts.append(f"{manifold} {name} {100 * err:.2f}%")
    elapsed = time.perf_counter() - t0
    record_property("detail", f"max rel error {100 * worst:.2f}% ({'; '.join(parts)}), "
                              f"{elapsed:.0f} s")
    assert worst <= 0.02
    assert elapsed < 300


def test_criterion_07_operator_convergence(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(707)
    n_list = [2.0 ** k for k in range(4, 11)]
    slopes, spread = [], 0.0
    for manifold in MANIFOLDS:
        m = build_model(manifold, family="twostate_spatial")
        x0 = m.manifold.random_points(rng, 1)[0]
        f, phi = random_test_functions(m, rng)
        pts = sample_points(m, x0, 6, rng)
        _, slope = operator_convergence(m, f, phi, pts, n_list)
        slopes.append(slope)
        pf = eigenvector_phi(m, f)
        for y in pts:
            x = point(m.manifold, y)
            vals = [limit_generator(f, pf, x, i, m) for i in range(m.n_states)]
            spread = max(spread, max(vals) - min(vals))
    elapsed = time.perf_counter() - t0
    record_property("detail", "slopes " + ", ".join(f"{s:.3f}" for s in slopes)
                    + f"; PF spread {spread:.1e}, {elapsed:.1f} s")
    assert all(abs(s + 1.0) <= 0.1 for s in slopes)
    assert spread <= 1e-10
    assert elapsed < 60


AVERAGING = """\
experiment: averaging
model:
  manifold: euclidean:1
  family: twostate
  a: 1.0
  beta: 1.0
x0: [0.0]
n_list: [4, 64]
samples: 100
seed: 8
event:
  T: 1.0
"""


def test_criterion_08_averaging_principle(record_property):
    t0 = time.perf_counter()
    rec = averaging_study(parse_config(AVERAGING))
    med = rec.column("median")
    elapsed = time.perf_counter() - t0
    record_property("detail", f"median sup deviation n=4: {med[0]:.4f}, n=64: {med[1]:.4f} "
                              f"(ratio {med[1] / med[0]:.3f}), {elapsed:.1f} s")
    assert med[1] <= 0.5 * med[0]
    assert elapsed < 120


# Calibrated so that T * L(rho) = 0.2 in both cases (see README).
LDP_CONFIGS = {
    "gaussian": """\
experiment: rare_event
model:
  manifold: euclidean:1
  family: brownian
x0: [0.0]
n_list: [4, 8, 16, 32]
samples: 100000
seed: 11
event:
  radius: 0.6324555320336759
  T: 1.0
""",
    "twostate": """\
experiment: rare_event
model:
  manifold: euclidean:1
  family: twostate
  a: 1.0
  beta: 1.0
x0: [0.0]
n_list: [4, 8, 16, 32]
samples: 100000
seed: 11
event:
  radius: 0.88373331
  T: 1.0
""",
}


@pytest.fixture(scope="module")
def ldp_records():
    t0 = time.perf_counter()
    recs = {name: estimate_rare_event(parse_config(text)) for name, text in LDP_CONFIGS.items()}
    return recs, time.perf_counter() - t0


def test_criterion_09_empirical_ldp(ldp_records, record_property):
    recs, elapsed = ldp_records
    parts, ok = [], True
    for name, rec in recs.items():
        p = rec.column("p_hat")
        ratio = rec.fit["slope"] / rec.theory
        ok &= abs(ratio - 1.0) <= 0.2
        parts.append(f"{name}: slope {rec.fit['slope']:.4f} vs rate {rec.theory:.4f} "
                     f"(ratio {ratio:.3f}), p in [{p.min():.2e}, {p.max():.2e}]")
    record_property("detail", "; ".join(parts) + f"; {elapsed:.0f} s")
    assert ok
    assert elapsed < 600


@pytest.mark.xfail(strict=True, reason="no radius puts p in [1e-4, 1e-1] at both n=4 and n=32 "
                                       "for these models; see README")
def test_ldp_event_probability_window(ldp_records):
    recs, _ = ldp_records
    for rec in recs.values():
        p = rec.column("p_hat")
        assert np.all((p >= 1e-4) & (p <= 1e-1))


def test_criterion_10_resolvent_properties(record_property):
    t0 = time.perf_counter()
    m = symmetric_twostate(1.0, 1.0)
    h = ScalarField(m.manifold, lambda X: np.cos(X[..., 0]), name="cos")
    chk = resolvent_check(m, h, [0.0])
    elapsed = time.perf_counter() - t0
    record_property("detail", f"pseudo-resolvent gap {chk.pseudo_resolvent_gap:.4f}, "
                              f"viscosity residual {chk.residual:.4f} of |h|, constant error "
                              f"{chk.constant_error:.1e}, {elapsed:.0f} s")
    assert chk.pseudo_resolvent_gap <= 0.05
    assert chk.residual <= 0.05
    assert chk.constant_error <= 1e-4
    assert elapsed < 300


def test_criterion_11_curve_growth_bounds(record_property):
    t0 = time.perf_counter()
    problems = []
    b, x0, f, c = _equator_curve()
    problems.append(("sphere2 brownian", b, x0, f, c))
    rng = np.random.default_rng(1111)
    for manifold in MANIFOLDS:
        m = build_model(manifold, family="twostate_spatial")
        y0 = point(m.manifold, m.manifold.random_points(rng, 1)[0])
        fields = [ScalarField(m.manifold, lambda X: 0.8 * X[..., 0], name="x1"),
                  ScalarField(m.manifold, lambda X: np.sin(X[..., -1]) + 0.3 * X[..., 0] ** 2,
                              name="mix")]
        for g in fields:
            problems.append((f"{manifold} {g.name}", m, y0, g, optimal_curve(y0, g, 1.0, 200, m)))
    bad, parts = 0, []
    for name, m, y0, g, curve in problems:
        R = float(np.max(m.manifold.dist(curve.points, y0.coords))) + 0.5
        k = growth_constants(m, g, y0, R)
        C = max(k.cost_rate, k.distance_rate)
        cost, dist = growth_violations(curve, m, GrowthConstants(C, C, k.radius))
        bad += cost + dist
        parts.append(f"{name} C={C:.3g}")
    elapsed = time.perf_counter() - t0
    record_property("detail", f"{len(problems)} curves, {bad} violations ({'; '.join(parts)}), "
                              f"{elapsed:.1f} s")
    assert bad == 0
    assert elapsed < 60
