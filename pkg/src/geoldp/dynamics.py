"""Monte Carlo simulation of the slow-fast system and its generators.

The slow component follows

    dX = (1/sqrt(n)) (Brownian motion on M) + b(X, Lambda) dt,

while Lambda jumps from i to j at rate n q_ij(X).  Each step of length dt
first simulates the switching process exactly (exponential clocks, rates
frozen at the step's starting position) and then moves X along the geodesic

    exp_x( sqrt(dt / n) sum_k g_k E_k(x) + sum_i tau_i b(x, i) ),

where tau_i is the time spent in state i during the step (sum_i tau_i = dt).
Weighting the drift by occupation times instead of using the state at the
start of the step removes an O(1) bias in the switching-induced variance
when n q dt is not small.
"""
from __future__ import annotations

import json
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np

from .curves import Curve, chart_rk4
from .errors import ContractViolation
from .geometry import ManifoldPoint, ScalarField, fd_differential, laplace_beltrami
from .hamiltonian import tilt_values
from .models import Model
from .switching import averaged_drift_array, invariant_measure_batch

BINARY_MAGIC = b"GLDPPATH"
BINARY_VERSION = 1
DEFAULT_BLOCK = 4096


def stream_rng(seed: int, key: int) -> np.random.Generator:
    """Counter-based generator for stream ``key`` derived from ``seed``."""
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(int(key),))
    return np.random.Generator(np.random.Philox(ss))


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("GEOLDP_THREADS", "1")))
    except ValueError:
        return 1


def auto_dt(model: Model, n: float, T: float, x0=None, max_dt=None):
    """Largest dt = T / k with dt <= 1 / (4 n max_rate) (and <= max_dt)."""
    bound = T if max_dt is None else min(T, max_dt)
    if model.n_states > 1:
        rate = model.max_rate(None if x0 is None else np.atleast_2d(x0))
        if rate > 0:
            bound = min(bound, 1.0 / (4.0 * n * rate))
    steps = max(1, math.ceil(T / bound - 1e-12))
    return T / steps, steps


@dataclass
class SimConfig:
    model: Model
    n: float
    T: float
    x0: np.ndarray
    seed: int = 0
    dt: float | None = None
    i0: int | str = 0
    max_dt: float | None = None

    def __post_init__(self):
        m = self.model.manifold
        self.x0 = m.check_point(m.project(np.asarray(self.x0, dtype=float).reshape(-1)))
        if not self.T > 0:
            raise ContractViolation("horizon T must be positive")
        if not self.n > 0:
            raise ContractViolation("scale parameter n must be positive")
        if self.dt is None:
            self.dt, self.steps = auto_dt(self.model, self.n, self.T, self.x0, self.max_dt)
        else:
            self.steps = max(1, round(self.T / self.dt))
            if abs(self.steps * self.dt - self.T) > 1e-9 * self.T:
                raise ContractViolation("dt must divide the horizon T")
            if self.model.n_states > 1:
                limit = 1.0 / (4.0 * self.n * self.model.max_rate(np.atleast_2d(self.x0)))
                if self.dt > limit * (1 + 1e-12):
                    raise ContractViolation(
                        f"dt={self.dt:g} does not resolve switching (need <= {limit:g})")

    def initial_states(self, size, rng):
        N = self.model.n_states
        if self.i0 == "invariant":
            pi = invariant_measure_batch(self.model.rates.matrix(self.x0))
            return rng.choice(N, size=size, p=pi)
        i0 = int(self.i0)
        if not 0 <= i0 < N:
            raise ContractViolation(f"initial switch state {i0} out of range")
        return np.full(size, i0, dtype=np.int64)


@dataclass(frozen=True)
class SlowFastState:
    position: ManifoldPoint
    switch: int
    time: float = 0.0


@dataclass
class PathSample:
    manifold: object
    times: np.ndarray
    positions: np.ndarray
    switches: np.ndarray
    switch_events: list = dc_field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.positions = np.asarray(self.positions, dtype=float)
        self.switches = np.asarray(self.switches, dtype=np.int64)
        if not (len(self.times) == len(self.positions) == len(self.switches)):
            raise ContractViolation("path arrays must have equal length")
        if np.any(np.diff(self.times) <= 0):
            raise ContractViolation("path times must be strictly increasing")

    def point(self, k) -> ManifoldPoint:
        return ManifoldPoint(self.manifold, self.positions[k])

    def same_as(self, other) -> bool:
        return (np.array_equal(self.times, other.times)
                and np.array_equal(self.positions, other.positions)
                and np.array_equal(self.switches, other.switches)
                and self.switch_events == other.switch_events and self.seed == other.seed)

    # -- serialisation ------------------------------------------------------
    def to_jsonl(self, path):
        with open(path, "w") as fh:
            fh.write(json.dumps({"kind": "header", "manifold": self.manifold.name,
                                 "seed": int(self.seed)}) + "\n")
            for t, x, s in zip(self.times, self.positions, self.switches):
                fh.write(json.dumps({"kind": "point", "t": float(t), "x": [float(c) for c in x],
                                     "switch": int(s)}) + "\n")
            for t, a, b in self.switch_events:
                fh.write(json.dumps({"kind": "event", "t": float(t), "from": int(a),
                                     "to": int(b)}) + "\n")

    @classmethod
    def from_jsonl(cls, path):
        from .geometry import manifold_from_id

        times, xs, sw, ev = [], [], [], []
        header = None
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                kind = rec.get("kind")
                if kind == "header":
                    header = rec
                elif kind == "point":
                    times.append(rec["t"])
                    xs.append(rec["x"])
                    sw.append(rec["switch"])
                elif kind == "event":
                    ev.append((rec["t"], rec["from"], rec["to"]))
        if header is None:
            raise ContractViolation(f"{path}: missing header record")
        return cls(manifold_from_id(header["manifold"]), times, xs, sw, ev, header["seed"])

    def to_binary(self, path):
        """Little-endian layout: magic, u32 version, u32 coordinate count, u64 seed,
        u32 manifold-name length + bytes, u64 record count, records of
        (f64 time, f64 x coords, u32 switch), u64 event count, events of
        (f64 time, u32 from, u32 to)."""
        d = self.positions.shape[1]
        rec = np.dtype([("t", "<f8"), ("x", "<f8", (d,)), ("s", "<u4")])
        arr = np.empty(len(self.times), dtype=rec)
        arr["t"] = self.times
        arr["x"] = self.positions
        arr["s"] = self.switches
        evt = np.dtype([("t", "<f8"), ("a", "<u4"), ("b", "<u4")])
        ev = np.array([tuple(e) for e in self.switch_events], dtype=evt)
        name = self.manifold.name.encode()
        with open(path, "wb") as fh:
            fh.write(BINARY_MAGIC)
            fh.write(struct.pack("<IIQI", BINARY_VERSION, d, int(self.seed) & (2**64 - 1), len(name)))
            fh.write(name)
            fh.write(struct.pack("<Q", len(arr)))
            fh.write(arr.tobytes())
            fh.write(struct.pack("<Q", len(ev)))
            fh.write(ev.tobytes())

    @classmethod
    def from_binary(cls, path):
        from .geometry import manifold_from_id

        with open(path, "rb") as fh:
            buf = fh.read()
        if buf[:8] != BINARY_MAGIC:
            raise ContractViolation(f"{path}: not a path dump")
        version, d, seed, ln = struct.unpack_from("<IIQI", buf, 8)
        if version != BINARY_VERSION:
            raise ContractViolation(f"{path}: unsupported version {version}")
        off = 8 + 20
        name = buf[off:off + ln].decode()
        off += ln
        (count,) = struct.unpack_from("<Q", buf, off)
        off += 8
        rec = np.dtype([("t", "<f8"), ("x", "<f8", (d,)), ("s", "<u4")])
        arr = np.frombuffer(buf, dtype=rec, count=count, offset=off)
        off += count * rec.itemsize
        (nev,) = struct.unpack_from("<Q", buf, off)
        off += 8
        evt = np.dtype([("t", "<f8"), ("a", "<u4"), ("b", "<u4")])
        ev = np.frombuffer(buf, dtype=evt, count=nev, offset=off)
        events = [(float(e["t"]), int(e["a"]), int(e["b"])) for e in ev]
        return cls(manifold_from_id(name), arr["t"].copy(), arr["x"].copy(),
                   arr["s"].astype(np.int64), events, seed)


# --------------------------------------------------------------------------
# vectorised stepping kernels
# --------------------------------------------------------------------------


def _switch_kernel(Q, S, n, dt, rng, t0=0.0, events=None):
    """Exact jump simulation on [t0, t0 + dt] with frozen generators Q (B, N, N).

    Updates S in place and returns occupation times (B, N).
    """
    B, N = Q.shape[0], Q.shape[-1]
    occ = np.zeros((B, N))
    if N == 1:
        occ[:, 0] = dt
        return occ
    rows = np.arange(B)
    rem = np.full(B, float(dt))
    active = rows.copy()
    while active.size:
        s = S[active]
        q = n * Q[active, :, :][np.arange(active.size), s]  # outgoing rate rows (k, N)
        q[np.arange(active.size), s] = 0.0
        total = q.sum(axis=-1)
        with np.errstate(divide="ignore"):
            wait = rng.exponential(size=active.size) / total
        stay = wait >= rem[active]
        done = active[stay]
        occ[done, S[done]] += rem[done]
        jump = ~stay
        movers = active[jump]
        if movers.size:
            w = wait[jump]
            occ[movers, S[movers]] += w
            rem[movers] -= w
            cdf = np.cumsum(q[jump], axis=-1) / total[jump][:, None]
            u = rng.random(movers.size)
            new = np.minimum((u[:, None] >= cdf).sum(axis=-1), N - 1)
            if events is not None:
                for k, mv in enumerate(movers):
                    events.append((t0 + dt - rem[mv], int(S[mv]), int(new[k])))
            S[movers] = new
        active = movers
    return occ


def _diffusion_kernel(model, X, occ, n, dt, gauss):
    m = model.manifold
    drift = np.einsum("bi,bik->bk", occ, model.drift.frame_all(X))
    noise = 0.0 if math.isinf(n) else math.sqrt(dt / n) * gauss
    step = m.from_frame(X, drift + noise)
    return m.exp(X, step)


def step_switch(state: SlowFastState, dt: float, rng, cfg: SimConfig):
    """Jump simulation on [t, t + dt]; returns (new state, occupation times, events)."""
    if dt <= 0:
        raise ContractViolation("dt must be positive")
    Q = cfg.model.rates.matrix(state.position.coords)[None]
    S = np.array([state.switch])
    events = []
    occ = _switch_kernel(Q, S, cfg.n, dt, rng, t0=state.time, events=events)
    return SlowFastState(state.position, int(S[0]), state.time + dt), occ[0], events


def step_diffusion(state: SlowFastState, dt: float, gauss, cfg: SimConfig, occupation=None):
    """Geodesic Euler step; the drift uses ``occupation`` times when given."""
    if dt <= 0:
        raise ContractViolation("dt must be positive")
    N = cfg.model.n_states
    if occupation is None:
        occupation = np.zeros(N)
        occupation[state.switch] = dt
    X = state.position.coords[None]
    g = np.asarray(gauss, dtype=float).reshape(1, -1)
    Xn = _diffusion_kernel(cfg.model, X, np.asarray(occupation, float)[None], cfg.n, dt, g)
    return SlowFastState(ManifoldPoint(state.position.manifold, Xn[0]), state.switch,
                         state.time + dt)


def simulate(cfg: SimConfig, trajectory: int = 0) -> PathSample:
    """One recorded trajectory; stream ``trajectory`` of the config seed."""
    rng = stream_rng(cfg.seed, trajectory)
    m = cfg.model.manifold
    d = m.dim
    X = cfg.x0[None].copy()
    S = cfg.initial_states(1, rng)
    steps, dt = cfg.steps, cfg.dt
    times = np.arange(steps + 1) * dt
    pos = np.empty((steps + 1, m.amb_dim))
    sw = np.empty(steps + 1, dtype=np.int64)
    pos[0], sw[0] = X[0], S[0]
    events: list = []
    for k in range(steps):
        Q = cfg.model.rates.matrix(X)
        occ = _switch_kernel(Q, S, cfg.n, dt, rng, t0=times[k], events=events)
        g = rng.standard_normal((1, d))
        X = _diffusion_kernel(cfg.model, X, occ, cfg.n, dt, g)
        pos[k + 1], sw[k + 1] = X[0], S[0]
    return PathSample(m, times, pos, sw, events, cfg.seed)


def _run_block(cfg: SimConfig, size: int, rng, reference=None):
    m = cfg.model.manifold
    X = np.broadcast_to(cfg.x0, (size, m.amb_dim)).copy()
    S = cfg.initial_states(size, rng)
    sup_dev = np.zeros(size) if reference is not None else None
    const_Q = cfg.model.rates.x_independent
    Q = cfg.model.rates.matrix(X) if const_Q else None
    for k in range(cfg.steps):
        if not const_Q:
            Q = cfg.model.rates.matrix(X)
        occ = _switch_kernel(Q, S, cfg.n, cfg.dt, rng)
        g = rng.standard_normal((size, m.dim))
        X = _diffusion_kernel(cfg.model, X, occ, cfg.n, cfg.dt, g)
        if reference is not None:
            np.maximum(sup_dev, m.dist(X, reference[k + 1]), out=sup_dev)
    return X, S, sup_dev


def simulate_batch(cfg: SimConfig, n_paths: int, block_size: int = DEFAULT_BLOCK,
                   reference=None, threads=None):
    """Endpoints of ``n_paths`` trajectories, simulated in blocks.

    Block b draws from stream b of the seed, so results depend only on
    (config, n_paths, block_size) and not on the thread count.  When a
    ``reference`` array of points on the step grid is given, the running
    sup of d(X_t, reference_t) is returned as well.

    Returns (endpoints (n_paths, amb), final states, sup deviations or None).
    """
    if n_paths < 1:
        raise ContractViolation("need at least one path")
    sizes = [min(block_size, n_paths - s) for s in range(0, n_paths, block_size)]

    def work(b):
        return _run_block(cfg, sizes[b], stream_rng(cfg.seed, b), reference)

    workers = threads or thread_count()
    if workers > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(work, range(len(sizes))))
    else:
        parts = [work(b) for b in range(len(sizes))]
    X = np.concatenate([p[0] for p in parts])
    S = np.concatenate([p[1] for p in parts])
    dev = None if reference is None else np.concatenate([p[2] for p in parts])
    return X, S, dev


# --------------------------------------------------------------------------
# averaged dynamics
# --------------------------------------------------------------------------


def averaged_velocity(model: Model):
    return lambda X: averaged_drift_array(model.drift, model.rates, X)


def simulate_averaged(x0: ManifoldPoint, T: float, dt: float, model: Model) -> Curve:
    """RK4 integration of the averaged ODE with chart re-centring."""
    if dt <= 0 or T <= 0:
        raise ContractViolation("T and dt must be positive")
    steps = max(1, round(T / dt))
    pts = chart_rk4(model.manifold, x0.coords, T, steps, averaged_velocity(model))
    return Curve(model.manifold, np.linspace(0.0, T, steps + 1), pts)


# --------------------------------------------------------------------------
# nonlinear generators
# --------------------------------------------------------------------------


def _phi_field(model, phi, i):
    return ScalarField(model.manifold, lambda X: phi(X, i), name=f"phi[{i}]")


def _switch_term(model, phi, X, i):
    Q = model.rates.matrix(X)
    vals = np.array([phi(X, j) for j in range(model.n_states)])
    return float(sum(Q[i, j] * (math.exp(vals[j] - vals[i]) - 1.0)
                     for j in range(model.n_states) if j != i))


def limit_generator(f: ScalarField, phi, x: ManifoldPoint, i: int, model: Model) -> float:
    """b(x, i).df + |df|^2 / 2 + sum_j q_ij (e^{phi_j - phi_i} - 1)."""
    df = f.differential_array(x.coords)
    B = tilt_values(model, x.coords, df)[i]
    return float(B + _switch_term(model, phi, x.coords, i))


def prelimit_generator(f: ScalarField, phi, n: float, x: ManifoldPoint, i: int,
                       model: Model) -> float:
    """(1/n) e^{-n f_n} A_n e^{n f_n} at (x, i) for f_n = f + phi(., i) / n.

    Assembled as b.df_n + |df_n|^2 / 2 + Delta f_n / (2n) + switching term.
    """
    m = model.manifold
    X = x.coords
    df = f.differential_array(X)
    dphi = fd_differential(m, lambda Y: phi(Y, i), X)
    dfn = df + dphi / n
    lap = laplace_beltrami(f, x) + laplace_beltrami(_phi_field(model, phi, i), x) / n
    b = model.drift.frame_all(X)[i]
    return float(b @ dfn + 0.5 * dfn @ dfn + lap / (2.0 * n) + _switch_term(model, phi, X, i))
