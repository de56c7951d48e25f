"""Discretised curves and a chart-patched RK4 integrator for vector fields."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .geometry import Manifold, ManifoldPoint, manifold_from_id


@dataclass
class Curve:
    """Time-stamped points on a manifold; ``points`` holds coordinates (K, amb)."""

    manifold: Manifold
    times: np.ndarray
    points: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.points = np.asarray(self.points, dtype=float)
        if self.times.ndim != 1 or len(self.times) != len(self.points):
            raise ContractViolation("curve times and points must have equal length")
        if len(self.times) < 1 or abs(self.times[0]) > 0.0:
            raise ContractViolation("curve times must start at 0")
        if np.any(np.diff(self.times) <= 0.0):
            raise ContractViolation("curve times must be strictly increasing")

    def __len__(self):
        return len(self.times)

    @property
    def T(self):
        return float(self.times[-1])

    def point(self, k) -> ManifoldPoint:
        return ManifoldPoint(self.manifold, self.points[k])

    @property
    def start(self) -> ManifoldPoint:
        return self.point(0)

    @property
    def end(self) -> ManifoldPoint:
        return self.point(-1)

    def segment(self, k0, k1):
        """Sub-curve between knots k0 and k1 with times shifted to start at 0."""
        t = self.times[k0:k1 + 1]
        return Curve(self.manifold, t - t[0], self.points[k0:k1 + 1])

    def to_jsonl(self, path):
        with open(path, "w") as fh:
            for t, x in zip(self.times, self.points):
                fh.write(json.dumps({"manifold": self.manifold.name, "t": float(t),
                                     "x": [float(c) for c in x]}) + "\n")

    @classmethod
    def from_jsonl(cls, path):
        """Read a curve file, or the positions of a simulated path file."""
        times, pts, name = [], [], None
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                name = rec.get("manifold", name)
                # path files also carry header and switch-event records
                if rec.get("kind", "point") != "point":
                    continue
                if "t" not in rec or "x" not in rec:
                    raise ContractViolation(f"curve record without t and x in {path}")
                times.append(rec["t"])
                pts.append(rec["x"])
        if name is None or not times:
            raise ContractViolation(f"no curve records in {path}")
        m = manifold_from_id(name)
        return cls(m, np.array(times), m.project(np.array(pts)))


def geodesic_curve(x: ManifoldPoint, y: ManifoldPoint, T: float, steps: int) -> Curve:
    """Constant-speed minimal geodesic from x to y on [0, T]."""
    m = x.manifold
    v = m.log(x.coords, y.coords)
    s = np.linspace(0.0, 1.0, steps + 1)
    pts = m.exp(np.broadcast_to(x.coords, (steps + 1, m.amb_dim)), s[:, None] * v)
    return Curve(m, s * T, pts)


def chart_rk4(m: Manifold, x0, T: float, steps: int, field):
    """Integrate dx/dt = F(x) with RK4 in charts, re-centring as needed.

    ``field(X)`` returns frame components (..., d) at ambient points X.
    x0 may carry a leading batch axis; the result has shape
    (steps + 1,) + x0.shape.  Flat manifolds integrate in a single global
    chart; on the sphere a normal chart is re-centred at the current point
    whenever chart coordinates exceed half the chart radius.
    """
    x0 = m.project(np.asarray(x0, dtype=float))
    h = T / steps
    out = np.empty((steps + 1,) + x0.shape)
    out[0] = x0
    if m.flat:
        def g(X):
            return field(X)

        x = x0.copy()
        for k in range(steps):
            k1 = g(x)
            k2 = g(m.exp(x, 0.5 * h * k1))
            k3 = g(m.exp(x, 0.5 * h * k2))
            k4 = g(m.exp(x, h * k3))
            x = m.exp(x, h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4))
            out[k + 1] = x
        return out

    centers = x0.copy()
    chart = m.normal_chart(centers)
    y = np.zeros(x0.shape[:-1] + (m.dim,))
    limit = 0.5 * m.chart_radius

    def g(yy):
        X = chart.to_point(yy)
        F = field(X)
        B = chart.frame_matrix(yy)
        return np.linalg.solve(B, F[..., None])[..., 0]

    for k in range(steps):
        k1 = g(y)
        k2 = g(y + 0.5 * h * k1)
        k3 = g(y + 0.5 * h * k2)
        k4 = g(y + h * k3)
        y = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        x = chart.to_point(y)
        out[k + 1] = x
        far = np.linalg.norm(y, axis=-1) > limit
        if np.any(far):
            centers = np.where(far[..., None], x, centers)
            chart = m.normal_chart(centers)
            y = np.where(far[..., None], 0.0, y)
    return out
