import json
import math
import subprocess
import sys
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize
from scipy.stats import norm

from geoldp.errors import ConfigError, InsufficientData
from geoldp.lab import (EventSpec, estimate_rare_event, extract_rate, parse_config,
                        theoretical_rate, wilson_interval)
from geoldp.lab.cli import main
from geoldp.lab.config import load_config
from geoldp.lab.experiments import averaged_endpoint, averaging_study, derived_seed, endpoint_rate
from geoldp.lab.io import read_csv, save_result, value_record, write_csv
from geoldp.models import build_model, symmetric_twostate

BASE = """\
experiment: rare_event
model:
  manifold: euclidean:1
  family: twostate
x0: [0.0]
n_list: [2, 4, 8]
samples: 2000
seed: 3
event:
  radius: 0.8
  T: 0.5
"""


def test_parse_config_defaults_and_hash():
    cfg = parse_config(BASE)
    assert cfg.kind == "rare_event" and cfg.samples == 2000
    assert cfg.event.sense == "outside" and cfg.event.center == "averaged"
    assert cfg.inputs_hash() == parse_config(BASE).inputs_hash()
    assert cfg.inputs_hash() != parse_config(BASE.replace("seed: 3", "seed: 4")).inputs_hash()


@pytest.mark.parametrize("old,new,line", [
    ("experiment: rare_event", "experiment: nope", 1),
    ("x0: [0.0]", "x0: [0.0, 1.0]", 5),
    ("n_list: [2, 4, 8]", "n_list: [4, 2]", 6),
    ("samples: 2000", "samples: -1", 7),
    ("  radius: 0.8", "  radius: 0", 10),
    ("  T: 0.5", "  T: -2", 11),
    ("seed: 3", "seed: 3\nbogus: 1", 9),
])
def test_config_errors_carry_position(old, new, line):
    with pytest.raises(ConfigError) as exc:
        parse_config(BASE.replace(old, new))
    assert exc.value.line == line
    assert exc.value.column is not None


def test_config_syntax_and_file_errors(tmp_path):
    with pytest.raises(ConfigError) as exc:
        parse_config("experiment: [unclosed\n")
    assert exc.value.line is not None
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    with pytest.raises(ConfigError):
        parse_config(BASE.replace("family: twostate", "family: unknown"))


def test_wilson_interval():
    lo, hi = wilson_interval(0, 100)
    assert lo == 0.0 and 0 < hi < 0.05
    lo, hi = wilson_interval(100, 100)
    assert hi == 1.0 and lo > 0.95
    # symmetric case has the textbook center
    lo, hi = wilson_interval(50, 100, z=norm.ppf(0.975))
    assert (lo + hi) / 2 == pytest.approx(0.5)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 10_000), st.floats(0, 1))
def test_wilson_contains_estimate(samples, frac):
    hits = int(round(frac * samples))
    lo, hi = wilson_interval(hits, samples)
    assert 0.0 <= lo <= hits / samples <= hi <= 1.0


def test_extract_rate_synthetic():
    n = np.array([4.0, 8.0, 16.0, 32.0])
    fit = extract_rate((n, 0.2 * np.exp(-0.7 * n)), theory=0.7)
    assert fit.slope == pytest.approx(0.7, abs=1e-10)
    assert math.exp(-fit.intercept) == pytest.approx(0.2, rel=1e-10)
    assert fit.ratio == pytest.approx(1.0)
    rows = [{"n": 4, "p_hat": 0.1}, {"n": 8, "p_hat": 0.0}, {"n": 16, "p_hat": 0.01}]
    with pytest.raises(InsufficientData):
        extract_rate(rows)


def test_derived_seeds_are_distinct():
    seeds = {derived_seed(7, k) for k in range(100)}
    assert len(seeds) == 100
    assert derived_seed(7, 3) == derived_seed(7, 3)


def test_whole_space_event():
    cfg = parse_config(BASE.replace("  T: 0.5", "  T: 0.5\n  sense: inside")
                       .replace("radius: 0.8", "radius: 100.0"))
    res = estimate_rare_event(cfg, theory=False)
    assert all(r["p_hat"] == 1.0 for r in res.rows)


def test_gaussian_tail_frequency():
    # N = 1, b = 0 on the line: X_n(T) ~ N(0, T / n) exactly
    text = BASE.replace("family: twostate", "family: brownian").replace("samples: 2000",
                                                                         "samples: 40000")
    cfg = parse_config(text)
    res = estimate_rare_event(cfg, theory=False)
    for r in res.rows:
        p = 2 * norm.sf(0.8 / math.sqrt(0.5 / r["n"]))
        assert abs(r["p_hat"] - p) <= 3 * math.sqrt(p * (1 - p) / r["samples"])
        assert r["lo"] <= r["p_hat"] <= r["hi"]


def test_interval_width_scales_with_samples():
    text = BASE.replace("n_list: [2, 4, 8]", "n_list: [2, 3, 4]")
    w1 = [r["hi"] - r["lo"] for r in estimate_rare_event(parse_config(text), False).rows]
    text2 = text.replace("samples: 2000", "samples: 4000")
    w2 = [r["hi"] - r["lo"] for r in estimate_rare_event(parse_config(text2), False).rows]
    for a, b in zip(w1, w2):
        assert a / b == pytest.approx(math.sqrt(2), rel=0.2)


def test_event_frequency_monotone_in_radius():
    # common random numbers: same seed, nested events
    p = []
    for radius in (0.4, 0.6, 0.8, 1.0):
        cfg = parse_config(BASE.replace("radius: 0.8", f"radius: {radius}"))
        p.append([r["hits"] for r in estimate_rare_event(cfg, theory=False).rows])
    assert np.all(np.diff(np.array(p), axis=0) <= 0)


@pytest.mark.parametrize("manifold,x0", [("euclidean:1", [0.0]), ("euclidean:2", [0.0, 0.0]),
                                         ("sphere2", [0.0, 0.0, 1.0]), ("torus2", [0.0, 0.0])])
def test_rate_of_brownian_escape(manifold, x0):
    ev = EventSpec(radius=0.5, T=1.0)
    assert theoretical_rate(ev, build_model(manifold, family="brownian"), x0) == pytest.approx(
        0.125, abs=1e-12)
    # two states with identical zero drift have H = |p|^2 / 2 as well, via the scan
    m = build_model(manifold, drift="zero", rates="twostate")
    assert theoretical_rate(ev, m, x0) == pytest.approx(0.125, rel=1e-6)


def test_rate_zero_when_flow_lands_in_event():
    m = build_model("euclidean:1", rates="single", drift="constant{value: [1.0]}")
    assert theoretical_rate(EventSpec(center=[0.9], radius=0.3, T=1.0, sense="inside"), m,
                            [0.0]) == 0.0


def _transcription_oracle(a, beta, rho, T, K=40):
    # minimise sum dt [ (v - beta (2q - 1))^2 / 2 + (sqrt(q a) - sqrt((1 - q) a))^2 ]
    # over knots x_1..x_K and occupations q_k, with x_K >= rho
    dt = T / K

    def cost(z):
        x = np.concatenate([[0.0], z[:K]])
        q = np.clip(z[K:], 0.0, 1.0)
        v = np.diff(x) / dt
        dv = (np.sqrt(q * a) - np.sqrt((1 - q) * a)) ** 2
        return float(np.sum(dt * (0.5 * (v - beta * (2 * q - 1)) ** 2 + dv)))

    z0 = np.concatenate([np.linspace(rho / K, rho, K), np.full(K, 0.6)])
    res = minimize(cost, z0, method="SLSQP", bounds=[(None, None)] * K + [(0.0, 1.0)] * K,
                   constraints=[{"type": "ineq", "fun": lambda z: z[K - 1] - rho}],
                   options={"ftol": 1e-12, "maxiter": 1000})
    assert res.success
    return res.fun


def test_twostate_rate_matches_transcription():
    m = symmetric_twostate(1.0, 1.0)
    rate = theoretical_rate(EventSpec(radius=1.0, T=1.0), m, [0.0])
    assert rate == pytest.approx(_transcription_oracle(1.0, 1.0, 1.0, 1.0), rel=2e-2)
    assert endpoint_rate(m, [0.0], [1.0], 1.0) == pytest.approx(rate, rel=1e-6)


def test_spatial_rate_matches_endpoint_shooting():
    m = build_model("euclidean:1", family="twostate_spatial")
    rate = theoretical_rate(EventSpec(radius=0.6, T=1.0), m, [0.0])
    center = averaged_endpoint(m, [0.0], 1.0)[0]
    both = min(endpoint_rate(m, [0.0], [center + 0.6], 1.0),
               endpoint_rate(m, [0.0], [center - 0.6], 1.0))
    assert rate == pytest.approx(both, rel=1e-4)


def test_averaging_study_reproducible_and_decaying():
    text = BASE.replace("experiment: rare_event", "experiment: averaging").replace(
        "samples: 2000", "samples: 200").replace("n_list: [2, 4, 8]", "n_list: [4, 16, 64]")
    r1 = averaging_study(parse_config(text))
    r2 = averaging_study(parse_config(text))
    assert r1.rows == r2.rows
    med = r1.column("median")
    assert np.all(np.diff(med) < 0)


def test_io_roundtrip(tmp_path):
    path = write_csv("demo", ["n", "p"], [{"n": 4, "p": 0.25}, {"n": 8, "p": math.nan}],
                     tmp_path / "d.csv")
    header, cols, rows = read_csv(path)
    assert header == "# geoldp-csv v1 kind=demo"
    assert cols == ["n", "p"] and rows[0] == {"n": "4", "p": "0.25"} and rows[1]["p"] == "nan"
    rec = value_record({"x": np.array([1.0])}, math.inf, 1e-12, {"k": np.int64(3)})
    assert rec["value"] == "inf" and rec["diagnostics"] == {"k": 3}
    json.dumps(rec)


def test_save_result_is_deterministic(tmp_path):
    cfg = parse_config(BASE)
    a = estimate_rare_event(cfg, theory=False)
    b = estimate_rare_event(cfg, theory=False)
    save_result(a, tmp_path / "a")
    save_result(b, tmp_path / "b")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["hamiltonian", "eval", "--x", "0", "--p", "1"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["value"] == pytest.approx(0.9142135624, abs=1e-10)
    assert main(["hamiltonian", "eval", "--x", "0", "--p", "1 2"]) == 2
    assert main(["run", str(tmp_path / "absent.yaml")]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text(BASE.replace("samples: 2000", "samples: zero"))
    assert main(["run", str(bad)]) == 2
    assert "line 7" in capsys.readouterr().err
    assert main(["resolvent", "--lambda", "1", "--h", "nothing"]) == 2
    assert main(["nosuchcommand"]) == 2


def test_cli_simulate_and_rate(tmp_path, capsys):
    out = tmp_path / "path.jsonl"
    assert main(["simulate", "--n", "8", "--T", "0.5", "--out", str(out)]) == 0
    assert out.exists()
    curve = tmp_path / "curve.jsonl"
    from geoldp.curves import geodesic_curve
    from geoldp.geometry import point
    geodesic_curve(point("sphere2", [0, 0, 1]), point("sphere2", [1, 0, 0]), 1.0, 64).to_jsonl(curve)
    capsys.readouterr()
    assert main(["rate", "--manifold", "sphere2", "--model", "brownian", "--curve", str(curve)]) == 0
    val = json.loads(capsys.readouterr().out)["value"]
    assert val == pytest.approx(math.pi ** 2 / 8, rel=1e-2)
    # a simulated path file is a valid curve too
    assert main(["rate", "--curve", str(out)]) == 0
    assert math.isfinite(json.loads(capsys.readouterr().out)["value"])
    junk = tmp_path / "junk.jsonl"
    junk.write_text('{"foo": 1}\n')
    assert main(["rate", "--curve", str(junk)]) == 2


def test_cli_run_smoke(tmp_path):
    cfg = tmp_path / "smoke.yaml"
    cfg.write_text(BASE + "output: out/smoke\n")
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "geoldp.lab.cli", "run", str(cfg)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert time.perf_counter() - t0 < 60
    first = (tmp_path / "out" / "smoke.csv").read_bytes()
    subprocess.run([sys.executable, "-m", "geoldp.lab.cli", "run", str(cfg)], check=True,
                   capture_output=True)
    assert (tmp_path / "out" / "smoke.csv").read_bytes() == first
    rec = json.loads((tmp_path / "out" / "smoke.json").read_text())
    assert rec["inputs_hash"] == load_config(cfg).inputs_hash()
