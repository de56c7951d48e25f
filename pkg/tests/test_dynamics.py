import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geoldp.errors import ContractViolation
from geoldp.geometry import ScalarField, point
from geoldp.dynamics import (PathSample, SimConfig, SlowFastState, limit_generator,
                             prelimit_generator, simulate, simulate_averaged, simulate_batch,
                             step_diffusion, step_switch, stream_rng)
from geoldp.hamiltonian import tilt_values
from geoldp.models import brownian, build_model, symmetric_twostate


def test_step_diffusion_examples():
    m = brownian("sphere2")
    x0 = m.manifold.project([0.2, 0.3, 0.9])
    cfg = SimConfig(m, math.inf, 1.0, x0)
    st0 = SlowFastState(point(m.manifold, x0), 0)
    out = step_diffusion(st0, 0.1, [1.0, -2.0], cfg)
    assert np.allclose(out.position.coords, x0, atol=1e-15)
    assert out.time == pytest.approx(0.1)
    cfg = SimConfig(m, 4.0, 1.0, x0)
    rng = np.random.default_rng(0)
    for _ in range(200):
        st0 = step_diffusion(st0, 0.05, rng.standard_normal(2), cfg)
        assert abs(np.linalg.norm(st0.position.coords) - 1.0) <= 1e-12
    with pytest.raises(ContractViolation):
        step_diffusion(st0, 0.0, [0.0, 0.0], cfg)


def test_euclidean_increment_moments():
    b = np.array([0.4, -1.0])
    m = build_model("euclidean:2", rates="single", drift={"family": "constant", "value": b.tolist()})
    n, dt, size = 25.0, 0.2, 100_000
    cfg = SimConfig(m, n, dt, [1.0, 2.0], seed=3)
    X, _, _ = simulate_batch(cfg, size)
    inc = X - np.array([1.0, 2.0])
    var = dt / n
    se_mean = math.sqrt(var / size)
    assert np.all(np.abs(inc.mean(axis=0) - b * dt) <= 3 * se_mean)
    cov = np.cov(inc.T)
    se_var = var * math.sqrt(2.0 / size)
    assert np.all(np.abs(np.diag(cov) - var) <= 3 * se_var)
    assert abs(cov[0, 1]) <= 3 * var / math.sqrt(size)


def test_step_switch_examples():
    m = build_model("euclidean:1", rates="matrix{q: [[0.0]]}")
    cfg = SimConfig(m, 10.0, 1.0, [0.0])
    st0 = SlowFastState(point(m.manifold, [0.0]), 0)
    new, occ, ev = step_switch(st0, 1.0, np.random.default_rng(0), cfg)
    assert new.switch == 0 and ev == [] and occ[0] == 1.0
    with pytest.raises(ContractViolation):
        step_switch(st0, -1.0, np.random.default_rng(0), cfg)


def test_jump_count_is_poisson():
    a, n, T, runs = 1.0, 5.0, 1.0, 10_000
    m = symmetric_twostate(a, 1.0)
    cfg = SimConfig(m, n, T, [0.0])
    rng = np.random.default_rng(1)
    counts = np.empty(runs)
    for r in range(runs):
        _, occ, ev = step_switch(SlowFastState(point(m.manifold, [0.0]), 0), T, rng, cfg)
        counts[r] = len(ev)
        assert occ.sum() == pytest.approx(T)
    mean = n * a * T
    assert abs(counts.mean() - mean) <= 3 * math.sqrt(mean / runs)
    assert counts.var() == pytest.approx(mean, rel=0.1)


def test_long_run_occupation_is_half():
    m = symmetric_twostate(1.0, 1.0)
    cfg = SimConfig(m, 1.0, 1.0, [0.0])
    _, occ, ev = step_switch(SlowFastState(point(m.manifold, [0.0]), 0), 4000.0,
                             np.random.default_rng(2), cfg)
    # variance of the occupation integral is about T / (4a)
    assert abs(occ[0] / 4000.0 - 0.5) <= 4 * math.sqrt(4000.0 / 4) / 4000.0
    times = [e[0] for e in ev]
    assert np.all(np.diff(times) > 0)


def test_simulate_is_deterministic():
    m = build_model("sphere2", family="twostate_spatial")
    cfg = SimConfig(m, 8.0, 0.5, [0.0, 0.0, 1.0], seed=17)
    a = simulate(cfg, trajectory=2)
    b = simulate(cfg, trajectory=2)
    assert a.same_as(b)
    assert not a.same_as(simulate(cfg, trajectory=3))
    X1, S1, _ = simulate_batch(cfg, 300, block_size=64, threads=1)
    X2, S2, _ = simulate_batch(cfg, 300, block_size=64, threads=3)
    assert np.array_equal(X1, X2) and np.array_equal(S1, S2)


def test_single_state_has_no_events():
    m = brownian("torus2")
    path = simulate(SimConfig(m, 10.0, 1.0, [0.5, 0.5], max_dt=0.01))
    assert path.switch_events == []
    assert np.all(path.switches == 0)
    assert len(path.times) == 101


def test_sphere_small_ball_distance():
    m = brownian("sphere2")
    n, T, size = 1e4, 1.0, 20_000
    cfg = SimConfig(m, n, T, [0.0, 0.0, 1.0], seed=5, max_dt=0.05)
    X, _, _ = simulate_batch(cfg, size)
    d = m.manifold.dist(X, np.array([0.0, 0.0, 1.0]))
    # planar Brownian motion: |W_T| is Rayleigh with sigma^2 = T / n
    sigma = math.sqrt(T / n)
    mean = sigma * math.sqrt(math.pi / 2)
    sd = sigma * math.sqrt(2 - math.pi / 2)
    assert abs(d.mean() - mean) <= 3 * sd / math.sqrt(size)


def test_config_contracts():
    m = symmetric_twostate(1.0, 1.0)
    with pytest.raises(ContractViolation):
        SimConfig(m, 4.0, 0.0, [0.0])
    with pytest.raises(ContractViolation):
        SimConfig(m, 4.0, 1.0, [0.0], dt=0.5)
    with pytest.raises(ContractViolation):
        SimConfig(m, 4.0, 1.0, [0.0], dt=0.03)
    cfg = SimConfig(m, 4.0, 1.0, [0.0])
    assert cfg.dt <= 1.0 / 16 + 1e-15 and cfg.steps * cfg.dt == pytest.approx(1.0)
    with pytest.raises(ContractViolation):
        simulate_batch(cfg, 0)
    assert np.array_equal(stream_rng(4, 1).random(3), stream_rng(4, 1).random(3))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(["sphere2", "torus2"]))
def test_positions_stay_on_manifold(seed, manifold):
    m = build_model(manifold, family="twostate_spatial")
    x0 = m.manifold.random_points(np.random.default_rng(seed), 1)[0]
    path = simulate(SimConfig(m, 2.0, 1.0, x0, seed=seed))
    for x in path.positions:
        m.manifold.check_point(x)


def test_path_roundtrips(tmp_path):
    m = build_model("sphere2", family="twostate")
    path = simulate(SimConfig(m, 4.0, 0.5, [1.0, 0.0, 0.0], seed=9))
    assert path.switch_events
    path.to_jsonl(tmp_path / "p.jsonl")
    path.to_binary(tmp_path / "p.bin")
    assert PathSample.from_jsonl(tmp_path / "p.jsonl").same_as(path)
    assert PathSample.from_binary(tmp_path / "p.bin").same_as(path)
    (tmp_path / "junk.bin").write_bytes(b"not a path")
    with pytest.raises(ContractViolation):
        PathSample.from_binary(tmp_path / "junk.bin")


def test_averaged_flow_examples():
    m = symmetric_twostate(1.0, 2.0)
    c = simulate_averaged(point(m.manifold, [0.7]), 2.0, 0.1, m)
    assert np.allclose(c.points, 0.7)
    lin = build_model("euclidean:2", rates="matrix{q: [[-1, 1], [2, -2]]}",
                      drift="constant{vectors: [[1, 0], [0, 1]]}")
    c = simulate_averaged(point(lin.manifold, [1.0, -1.0]), 1.5, 0.05, lin)
    expected = np.array([1.0, -1.0]) + c.times[:, None] * np.array([2 / 3, 1 / 3])
    assert np.max(np.abs(c.points - expected)) <= 1e-10


def test_averaged_flow_richardson():
    m = build_model("euclidean:1", drift="ou{kappa: 1.0, centers: [[2.0], [-1.0]]}",
                    rates="twostate_spatial{a0: 1.0, a1: 0.8}")
    x0 = point(m.manifold, [0.3])
    ends = [simulate_averaged(x0, 2.0, dt, m).points[-1, 0] for dt in (0.1, 0.05, 0.025)]
    ratio = abs(ends[0] - ends[1]) / abs(ends[1] - ends[2])
    assert 16 * 0.7 <= ratio <= 16 * 1.3


def test_prelimit_generator_linear_example():
    b = 0.6
    m = build_model("euclidean:1", rates="single", drift={"family": "constant", "value": [b]})
    f = ScalarField(m.manifold, lambda X: X[..., 0], name="x1")
    phi = lambda X, i: np.zeros(X.shape[:-1])
    x = point(m.manifold, [0.4])
    for n in (1.0, 10.0, 1e4):
        assert prelimit_generator(f, phi, n, x, 0, m) == pytest.approx(0.5 + b, abs=1e-8)


def test_limit_generator_reductions():
    m = build_model("sphere2", family="twostate_spatial")
    f = ScalarField(m.manifold, lambda X: X[..., 0] * X[..., 2], name="xz")
    const = lambda X, i: np.full(X.shape[:-1], 0.3)
    x = point(m.manifold, m.manifold.project([0.3, 0.5, 0.8]))
    df = f.differential_array(x.coords)
    B = tilt_values(m, x.coords, df)
    for i in range(2):
        assert limit_generator(f, const, x, i, m) == pytest.approx(B[i], abs=1e-12)


def test_prelimit_converges_to_limit():
    rng = np.random.default_rng(12)
    n = 1e3
    for manifold in ("euclidean:1", "sphere2", "torus2"):
        m = build_model(manifold, family="twostate_spatial")
        # moderate frequencies keep the O(1/n) constant near one
        w = rng.normal(scale=0.5, size=m.manifold.amb_dim)
        c = rng.normal(scale=0.5, size=(2, m.manifold.amb_dim))
        f = ScalarField(m.manifold, lambda X: np.sin(X @ w), name="f")
        phi = lambda X, i: np.cos(X @ c[i])
        for _ in range(5):
            x = point(m.manifold, m.manifold.random_points(rng, 1)[0])
            for i in range(2):
                gap = abs(prelimit_generator(f, phi, n, x, i, m) - limit_generator(f, phi, x, i, m))
                assert gap <= 2.0 / n
