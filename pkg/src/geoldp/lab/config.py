"""Experiment configuration files.

A config is a YAML mapping::

    experiment: rare_event        # rare_event | averaging | operator_convergence
                                  # | resolvent_check | rate_curve
    model:
      manifold: euclidean:1
      family: twostate            # preset; or give `drift:` and `rates:` specs
      a: 1.0
      beta: 1.0
    x0: [0.0]
    n_list: [4, 8, 16, 32]
    samples: 100000
    seed: 7
    event:
      center: averaged            # or a coordinate list
      radius: 0.8
      T: 1.0
      sense: outside              # outside: d >= radius, inside: d <= radius
    output: results/twostate      # path prefix for .json and .csv
    options: {}                   # experiment-specific knobs

Schema errors carry the line and column of the offending node.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
import yaml

from ..errors import ConfigError, GeoLDPError
from ..models import Model, build_model

KINDS = ("rare_event", "averaging", "operator_convergence", "resolvent_check", "rate_curve")


@dataclass
class EventSpec:
    center: object = "averaged"
    radius: float = 1.0
    T: float = 1.0
    sense: str = "outside"

    def contains(self, distances):
        d = np.asarray(distances)
        return d >= self.radius if self.sense == "outside" else d <= self.radius


@dataclass
class ExperimentConfig:
    kind: str
    model_spec: dict
    x0: list
    n_list: list = dc_field(default_factory=lambda: [4, 8, 16, 32])
    samples: int = 1000
    seed: int = 0
    event: EventSpec = dc_field(default_factory=EventSpec)
    output: str | None = None
    options: dict = dc_field(default_factory=dict)
    source: str | None = None
    _model: Model | None = dc_field(default=None, repr=False)

    @property
    def model(self) -> Model:
        if self._model is None:
            self._model = build_model(**self.model_spec)
        return self._model

    def canonical(self) -> dict:
        return {"experiment": self.kind, "model": self.model_spec, "x0": list(map(float, self.x0)),
                "n_list": list(self.n_list), "samples": self.samples, "seed": self.seed,
                "event": {"center": self.event.center, "radius": self.event.radius,
                          "T": self.event.T, "sense": self.event.sense},
                "options": self.options}

    def inputs_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _marks(node, path=()):
    """Map key paths to (line, column) of their value nodes (1-based)."""
    out = {path: (node.start_mark.line + 1, node.start_mark.column + 1)}
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            out.update(_marks(v, path + (k.value,)))
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            out.update(_marks(v, path + (i,)))
    return out


def _fail(msg, marks, path):
    line, col = marks.get(tuple(path), marks.get((), (None, None)))
    raise ConfigError(msg, line=line, column=col)


def parse_config(text: str, source: str | None = None) -> ExperimentConfig:
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        raise ConfigError(f"YAML syntax error: {exc.problem}",
                          line=mark.line + 1 if mark else None,
                          column=mark.column + 1 if mark else None) from None
    if not isinstance(data, dict) or node is None:
        raise ConfigError("config must be a mapping", line=1, column=1)
    marks = _marks(node)

    kind = data.get("experiment")
    if kind not in KINDS:
        _fail(f"'experiment' must be one of {', '.join(KINDS)}", marks, ("experiment",))
    model = data.get("model")
    if not isinstance(model, dict):
        _fail("'model' block missing or not a mapping", marks, ("model",))
    model = dict(model)
    model.setdefault("manifold", "euclidean:1")
    try:
        built = build_model(**model)
    except GeoLDPError as exc:
        _fail(f"invalid model: {exc}", marks, ("model",))
    except TypeError as exc:
        _fail(f"invalid model keys: {exc}", marks, ("model",))

    x0 = data.get("x0")
    if x0 is None:
        x0 = [0.0, 0.0, 1.0] if built.manifold.kind == "sphere" else [0.0] * built.manifold.amb_dim
    if not isinstance(x0, list) or len(x0) != built.manifold.amb_dim:
        _fail(f"'x0' must list {built.manifold.amb_dim} coordinates", marks, ("x0",))
    n_list = data.get("n_list", [4, 8, 16, 32])
    if (not isinstance(n_list, list) or not n_list
            or any(not isinstance(n, (int, float)) or n <= 0 for n in n_list)
            or any(b <= a for a, b in zip(n_list, n_list[1:]))):
        _fail("'n_list' must be a nonempty increasing list of positive numbers", marks, ("n_list",))
    samples = data.get("samples", 1000)
    if not isinstance(samples, int) or samples < 1:
        _fail("'samples' must be a positive integer", marks, ("samples",))
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        _fail("'seed' must be a nonnegative integer", marks, ("seed",))

    ev = data.get("event", {}) or {}
    if not isinstance(ev, dict):
        _fail("'event' must be a mapping", marks, ("event",))
    event = EventSpec(center=ev.get("center", "averaged"), radius=ev.get("radius", 1.0),
                      T=ev.get("T", 1.0), sense=ev.get("sense", "outside"))
    if not isinstance(event.radius, (int, float)) or event.radius <= 0:
        _fail("event radius must be positive", marks, ("event", "radius"))
    if not isinstance(event.T, (int, float)) or event.T <= 0:
        _fail("event horizon T must be positive", marks, ("event", "T"))
    if event.sense not in ("inside", "outside"):
        _fail("event sense must be 'inside' or 'outside'", marks, ("event", "sense"))
    if event.center != "averaged" and (not isinstance(event.center, list)
                                       or len(event.center) != built.manifold.amb_dim):
        _fail("event center must be 'averaged' or a coordinate list", marks, ("event", "center"))
    options = data.get("options", {}) or {}
    if not isinstance(options, dict):
        _fail("'options' must be a mapping", marks, ("options",))
    unknown = set(data) - {"experiment", "model", "x0", "n_list", "samples", "seed", "event",
                           "output", "options"}
    if unknown:
        key = sorted(unknown)[0]
        _fail(f"unknown key '{key}'", marks, (key,))
    cfg = ExperimentConfig(kind, model, [float(v) for v in x0], list(n_list), samples, seed,
                           event, data.get("output"), options, source)
    cfg._model = built
    return cfg


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, source=str(p))
