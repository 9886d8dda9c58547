import json
import math
import textwrap
from pathlib import Path

import numpy as np
import pytest

from hybridbem import io
from hybridbem.cli import main
from hybridbem.config import from_dict, load, parse_text
from hybridbem.errors import ConfigError
from hybridbem.experiments import fit_window, stationarity_time

from conftest import CONFIGS

EXAMPLE = Path(CONFIGS) / "cubic_printed.toml"
CORRECTED = Path(CONFIGS) / "cubic_corrected.toml"


def _write(tmp_path, text, name="c.toml"):
    p = tmp_path / name
    p.write_text(textwrap.dedent(text))
    return p


def _run(args, capsys=None):
    code = main([str(a) for a in args])
    out = capsys.readouterr().out if capsys else None
    return code, out


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(Path(root).rglob("*")) if p.is_file()}


LINEAR_OU = """
out = "{out}"
[model]
state_dim = 1
noise_dim = 1
[[model.regimes]]
drift = [{{ coeffs = [0.0, -1.0] }}]
diffusion = [[{{ coeffs = [{sigma}] }}]]
[generator]
rates = [[0.0]]
[simulation]
dt = {dt}
steps = {steps}
paths = {paths}
seed = 5
initial = [{{ x = 1.0, regime = 1 }}, {{ x = -2.0, regime = 1 }}]
[wasserstein]
p = 0.5
subsample = 256
resamples = 3
"""


# ----------------------------------------------------------------- config


def test_shipped_configs_load():
    a, b = load(EXAMPLE), load(CORRECTED)
    assert a.generator.rates.tolist() == [[-1, 1], [3, -3]]
    assert b.generator.rates.tolist() == [[-4, 4], [1, -1]]
    assert a.initial[0].x == (0.5,) and a.initial[0].regime == 2
    assert b.model.constants.n == (2.0, -4.0)


def test_missing_generator_row_names_field():
    text = EXAMPLE.read_text().replace("rates = [[-1.0, 1.0], [3.0, -3.0]]", "rates = [[-1.0, 1.0]]")
    with pytest.raises(ConfigError, match=r"generator\.rates"):
        from_dict(parse_text(text))


def test_parse_error_reports_line():
    with pytest.raises(ConfigError, match="line"):
        parse_text("[model\nname = 1")


def test_missing_fields_are_named(tmp_path):
    with pytest.raises(ConfigError, match="model"):
        from_dict({"generator": {"rates": [[0.0]]}})
    with pytest.raises(ConfigError, match="generator.rates"):
        from_dict({"model": {"name": "two-regime-cubic"}})
    base = parse_text(EXAMPLE.read_text())
    base["simulation"]["initial"] = [{"x": 0.5, "regime": 3}]
    with pytest.raises(ConfigError, match=r"simulation\.initial\[1\]\.regime"):
        from_dict(base)


def test_generator_errors_become_config_errors():
    base = parse_text(EXAMPLE.read_text())
    base["generator"]["rates"] = [[-1, 1], [0, 0]]
    with pytest.raises(ConfigError, match="state 2"):
        from_dict(base)


def test_step_bound_is_a_config_error(tmp_path):
    base = parse_text(EXAMPLE.read_text())
    base["simulation"]["dt"] = 0.2
    with pytest.raises(ConfigError, match="allow-unstable-step"):
        from_dict(base)
    assert from_dict(base, allow_unstable=True).dt == 0.2


def test_polynomial_terms_model(tmp_path):
    text = """
    [model]
    state_dim = 2
    noise_dim = 1
    [[model.regimes]]
    drift = [{ terms = [{ c = -1, e = [1, 0] }] }, { terms = [{ c = -2, e = [0, 1] }, { c = 1, e = [2, 0] }] }]
    diffusion = [[{ terms = [{ c = 0.5, e = [0, 0] }] }], [0.0]]
    [generator]
    rates = [[0.0]]
    [simulation]
    initial = [{ x = [1.0, 2.0], regime = 1 }]
    """
    cfg = load(_write(tmp_path, text))
    f = cfg.model.drift([1.0, 2.0], 1)
    np.testing.assert_allclose(f, [-1.0, -4.0 + 1.0])
    assert cfg.model.diffusion([1.0, 2.0], 1).tolist() == [[0.5], [0.0]]


def test_overrides_and_hash_ignore_workers_and_out():
    a = load(CORRECTED, {"simulation.workers": 3, "out": "/tmp/x"})
    b = load(CORRECTED)
    c = load(CORRECTED, {"simulation.seed": 1})
    assert a.workers == 3
    assert io.config_hash(a.raw) == io.config_hash(b.raw) != io.config_hash(c.raw)


# -------------------------------------------------------------------- cli


def test_check_exit_codes(tmp_path, capsys):
    code, out = _run(["check", "--config", EXAMPLE, "--out", tmp_path], capsys)
    report = json.loads(out)
    assert code == 3
    assert report["S1"] == pytest.approx(4.0, abs=1e-12) and report["passes"] is False
    code, out = _run(["check", "--config", CORRECTED, "--out", tmp_path], capsys)
    report = json.loads(out)
    assert code == 0
    assert report["lambda1"] == pytest.approx(0.4, abs=1e-12)
    assert report["lambda2"] == pytest.approx(1.32, abs=1e-12)
    assert report["max_step"] == pytest.approx(1 / 6)
    assert report["empirical_violations"] == []


def test_config_error_exit_code(tmp_path, capsys):
    bad = _write(tmp_path, "[model]\nname = 'two-regime-cubic'\n")
    assert main(["check", "--config", str(bad)]) == 2
    assert "generator.rates" in capsys.readouterr().err


def test_simulate_zero_steps(tmp_path):
    assert main(["simulate", "--config", str(EXAMPLE), "--steps", "0", "--out", str(tmp_path), "--quiet"]) == 0
    lines = (tmp_path / "simulate" / "trajectory_1.csv").read_text().splitlines()
    assert lines[0].startswith("# config_hash=") and "seed=20240501" in lines[0]
    assert lines[1:] == ["k,t,x1,regime", "0,0.0,0.5,2"]


def test_simulate_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert main(["simulate", "--config", str(EXAMPLE), "--steps", "500", "--out", str(tmp_path / d),
                     "--quiet"]) == 0
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")


def test_simulate_two_regime_cubic_long_run_is_finite(tmp_path):
    assert main(["simulate", "--config", str(EXAMPLE), "--out", str(tmp_path), "--quiet"]) == 0
    header, rows = io.read_csv(tmp_path / "simulate" / "trajectory_1.csv")
    x = np.array(rows)[:, 2]
    assert len(x) == 10001 and np.all(np.isfinite(x))


def test_invariant_small_run_and_worker_invariance(tmp_path):
    args = ["invariant", "--config", str(CORRECTED), "--paths", "300", "--quiet"]
    assert main(args + ["--out", str(tmp_path / "w1")]) == 0
    assert main(args + ["--out", str(tmp_path / "w2"), "--workers", "2"]) == 0
    assert _tree(tmp_path / "w1") == _tree(tmp_path / "w2")
    d = tmp_path / "w1" / "invariant"
    for t in ("0.05", "0.1", "0.3", "2", "10"):
        _, dens = io.read_csv(d / f"density_t{t}.csv")
        dens = np.array(dens)
        spacing = dens[1, 0] - dens[0, 0] if len(dens) > 1 else 1.0
        assert abs(dens[:, 1].sum() * spacing - 1) < 1e-6
        _, snap = io.read_csv(d / f"snapshot_t{t}.csv")
        assert len(snap) == 300
    header, ks = io.read_csv(d / "ks.csv")
    assert header == ["i", "t_prev", "t", "D", "p_value"] and len(ks) == 200
    summary = json.loads((d / "summary.json").read_text())
    assert summary["provenance"]["seed"] == 20240501


def test_invariant_deterministic_model_has_zero_ks(tmp_path):
    # dx = (1 - x) dt from x = 2: the implicit iterates hit the fixed point 1 exactly
    text = LINEAR_OU.format(out=tmp_path, sigma=0.0, dt=0.1, steps=1000, paths=40)
    text = text.replace("coeffs = [0.0, -1.0]", "coeffs = [1.0, -1.0]").replace("x = 1.0,", "x = 2.0,")
    text += "[invariant]\nks_grid = { h = 5.0, count = 21 }\npairing = \"same-paths\"\n"
    assert main(["invariant", "--config", str(_write(tmp_path, text)), "--quiet"]) == 0
    _, ks = io.read_csv(tmp_path / "invariant" / "ks.csv")
    assert ks[0][3] == 1.0
    assert all(row[3] == 0.0 for row in ks if row[1] >= 50)
    s = json.loads((tmp_path / "invariant" / "summary.json").read_text())
    assert s["t_star_strict"] is not None and s["t_star_strict"] <= 50


def test_coupling_identical_initial_data(tmp_path):
    text = CORRECTED.read_text().replace('{ x = -3.0, regime = 1 }', '{ x = 0.5, regime = 2 }')
    p = _write(tmp_path, text)
    assert main(["coupling-decay", "--config", str(p), "--out", str(tmp_path), "--quiet"]) == 0
    s = json.loads((tmp_path / "coupling_decay" / "summary.json").read_text())
    assert s["gamma_hat"] is None and "NonPositiveValues" in s["note"]
    _, rows = io.read_csv(tmp_path / "coupling_decay" / "decay.csv")
    assert all(r[2] == 0 for r in rows)


def test_coupling_linear_rate(tmp_path):
    dt = 0.05
    text = LINEAR_OU.format(out=tmp_path, sigma=0.0, dt=dt, steps=200, paths=10)
    assert main(["coupling-decay", "--config", str(_write(tmp_path, text)), "--quiet"]) == 0
    s = json.loads((tmp_path / "coupling_decay" / "summary.json").read_text())
    expected = math.log(1 + dt) / dt
    assert s["gamma_hat_per_p"] == pytest.approx(expected, rel=0.05)
    assert s["gamma_hat"] == pytest.approx(0.5 * expected, rel=0.05)
    assert s["r2"] == pytest.approx(1.0, abs=1e-9)


def test_coupling_p_must_be_below_4_over_q(tmp_path):
    text = CORRECTED.read_text().replace("[coupling]\np = 0.5", "[coupling]\np = 0.7")
    assert main(["coupling-decay", "--config", str(_write(tmp_path, text)), "--quiet"]) == 2


def test_initial_independence_identical_ics_common_noise(tmp_path):
    text = LINEAR_OU.format(out=tmp_path, sigma=1.0, dt=0.05, steps=10, paths=400) + textwrap.dedent("""
    [independence]
    time = 2.0
    common_noise = true
    initial = [{ x = 1.0, regime = 1 }, { x = 1.0, regime = 1 }]
    """)
    assert main(["initial-independence", "--config", str(_write(tmp_path, text)), "--quiet"]) == 0
    s = json.loads((tmp_path / "initial_independence" / "summary.json").read_text())
    assert s["w_mean"][0][1] == 0.0
    assert s["noise_floor"] > 0


def test_initial_independence_distinct_fixed_points(tmp_path):
    # dx = (x - x^3) dt has stable points -1 and 1; the two ensembles collapse onto them
    text = f"""
    out = "{tmp_path}"
    [model]
    [[model.regimes]]
    drift = [{{ coeffs = [0.0, 1.0, 0.0, -1.0] }}]
    diffusion = [[{{ coeffs = [0.0] }}]]
    [generator]
    rates = [[0.0]]
    [simulation]
    dt = 0.05
    paths = 64
    initial = [{{ x = -5.0, regime = 1 }}, {{ x = 5.0, regime = 1 }}]
    [independence]
    time = 40.0
    [wasserstein]
    p = 0.5
    subsample = 64
    resamples = 2
    """
    # inexact solves leave each path tol / (2 dt) from its fixed point, so tighten tol
    assert main(["initial-independence", "--config", str(_write(tmp_path, text)), "--tol", "1e-15",
                 "--quiet"]) == 0
    s = json.loads((tmp_path / "initial_independence" / "summary.json").read_text())
    assert s["w_mean"][0][1] == pytest.approx(2 ** 0.5, abs=1e-12)
    assert s["noise_floor"] == 0.0


def test_order_rejects_degenerate_dt_list(tmp_path):
    text = LINEAR_OU.format(out=tmp_path, sigma=1.0, dt=0.1, steps=10, paths=100) + \
        "[order]\ndts = [0.1, 0.1, 0.1]\ndt_ref = 0.025\n"
    assert main(["wasserstein-order", "--config", str(_write(tmp_path, text)), "--quiet"]) == 2
    text = LINEAR_OU.format(out=tmp_path, sigma=1.0, dt=0.1, steps=10, paths=100) + \
        "[order]\ndts = [0.2, 0.1, 0.05]\ndt_ref = 0.02\n"
    assert main(["wasserstein-order", "--config", str(_write(tmp_path, text, "d.toml")), "--quiet"]) == 2


def test_order_ou_error_shrinks_with_dt(tmp_path):
    text = LINEAR_OU.format(out=tmp_path, sigma=1.0, dt=0.1, steps=10, paths=1000) + \
        "[order]\ndts = [0.4, 0.2, 0.1]\ndt_ref = 0.025\nhorizon = 6.0\n"
    assert main(["wasserstein-order", "--config", str(_write(tmp_path, text)), "--quiet"]) == 0
    s = json.loads((tmp_path / "wasserstein_order" / "summary.json").read_text())
    w = s["w_mean"]
    assert w[0] > w[1] > w[2] > 0
    assert s["slope"] > 0


def test_bem_ou_stationary_variance():
    """Implicit Euler for dX = -X dt + dB has stationary variance 1 / (2 + dt)."""
    from hybridbem.config import from_dict
    from hybridbem.simulator import ensemble_snapshots
    cfg = from_dict(parse_text(LINEAR_OU.format(out="x", sigma=1.0, dt=0.4, steps=1, paths=1)))
    x = ensemble_snapshots(cfg.model, cfg.generator, [0.0], 1, 0.4, [20.0], 40000, seed=2)[0].x[:, 0]
    var, se = x.var(ddof=1), x.var(ddof=1) * math.sqrt(2 / (len(x) - 1))
    assert abs(var - 1 / 2.4) <= 3 * se
    assert abs(var - 0.5) > 5 * se  # visibly biased away from the exact law N(0, 1/2)


# ---------------------------------------------------------------- helpers


def test_stationarity_time_readings():
    t = np.arange(10) * 0.5
    p = np.array([0.0, 0.0, 0.3, 0.6, 0.2, 0.9, 0.01, 0.5, 0.7, 0.4])
    flag = stationarity_time(t, p, alpha=0.05, confirm=3, fraction=0.8)
    assert flag["t_star_strict"] == 3.5
    assert flag["t_star"] == 1.0
    assert flag["fraction_after"] == pytest.approx(7 / 8)
    none = stationarity_time(t, np.zeros(10))
    assert none["t_star"] is None and none["t_star_strict"] is None


def test_fit_window_truncates_at_floor():
    v = np.concatenate([np.exp(-np.arange(50) * 0.5), np.zeros(50)])
    start, stop = fit_window(v, 0.2, 1e-8)
    assert v[stop - 1] > 1e-8 >= v[stop]
    assert start == math.ceil(0.2 * stop)
