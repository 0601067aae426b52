import csv
from dataclasses import replace

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from qihnmpc.cli import EXIT_CONFIG, EXIT_OK, EXIT_PROPERTY, cmd_closed_loop, cmd_synthesize, main
from qihnmpc.config import ApproachSpec, ConfigError, SweepSpec, default_config, load_config, parse_config

SMALL = """
synthesis: {boundary_samples: 180}
comparison:
  - {name: ac_best, approach: arbitrary_controller, rho_x: 100, rho_u: 100}
sweeps:
  - {table: I, approach: arbitrary_controller, vary: rho_x, rho_x: [1, 100], rho_u: 0}
N_max: 15
"""


def test_default_round_trip():
    cfg = default_config()
    text = cfg.dumps()
    again = parse_config(text)
    assert again == cfg
    assert again.dumps() == text


rhos = st.lists(st.floats(1.5, 500.0, allow_nan=False).map(lambda v: round(v, 3)), min_size=1, max_size=4)


@settings(max_examples=40, deadline=None)
@given(rhos, st.floats(0.01, 300.0).map(lambda v: round(v, 4)), st.integers(0, 2**31 - 1),
       st.floats(0.5, 0.999), st.booleans())
def test_random_configs_round_trip(rx, ru, seed, beta, coupled):
    cfg = replace(
        default_config(),
        seed=seed,
        beta=beta,
        comparison=(ApproachSpec("a", "arbitrary_controller", rho_x=ru, rho_u=0.0),
                    ApproachSpec("y", "yu", kappa=1.05)),
        sweeps=(SweepSpec("X", "lqr_inflated", "rho_x", tuple(rx), (2.0,), coupled),),
    )
    text = cfg.dumps()
    assert parse_config(text).dumps() == text


@pytest.mark.parametrize("text, line, field", [
    ("weights:\n  Wx: [[1, 0], [0, -1]]\n", 1, "weights"),
    ("N_max: 10\nsynthesis:\n  beta: 1.5\n", 3, "synthesis.beta"),
    ("comparison:\n  - approach: arbitrary_controller\n    rho_x: 0\n    rho_u: 0\n", 2, "comparison[0]"),
    ("sweeps:\n  - approach: lqr_inflated\n    vary: rho_u\n    rho_x: 50\n    rho_u: [0.5, 2]\n", 5, "sweeps[0].rho_u"),
    ("initial_conditions:\n  - [1, 2, 3]\n", 2, "initial_conditions[0]"),
    ("seed: 1\nbogus: 2\n", 2, "bogus"),
    ("model:\n  name: nope\n", 1, "model"),
])
def test_diagnostics_carry_line_and_field(text, line, field):
    with pytest.raises(ConfigError) as exc:
        parse_config(text, "run.yaml")
    assert str(exc.value).startswith(f"run.yaml:{line}: {field}:")


def test_exponent_floats_accepted():
    cfg = parse_config("synthesis: {gamma_max: 1.0e6, beta: 9.9e-1}\n")
    assert cfg.gamma_max == 1e6 and cfg.beta == 0.99
    with pytest.raises(ConfigError, match="expected a number"):
        parse_config("synthesis: {gamma_max: big}\n")


def test_invalid_yaml():
    with pytest.raises(ConfigError, match="invalid YAML"):
        parse_config("a: [1, 2\n", "bad.yaml")


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.yaml")


def test_cli_config_error_exit_code(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("comparison:\n  - {approach: arbitrary_controller, rho_x: 0, rho_u: 0}\n")
    assert main(["verify", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "dQ must be positive definite" in capsys.readouterr().err


def test_cli_kappa_violation_fails_verify(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("comparison:\n  - {name: yu_bad, approach: yu, kappa: 1.2}\nsweeps: []\n")
    assert main(["verify", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_PROPERTY
    assert "kappa violates spectral bound" in capsys.readouterr().out


def test_cli_export_region(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(SMALL)
    assert main(["export-region", "--config", str(cfg), "--out", str(tmp_path), "--points", "36"]) == EXIT_OK
    with (tmp_path / "region_ac_best.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["x1", "x2"] and len(rows) == 37


def test_synthesize_is_deterministic(tmp_path):
    cfg = parse_config(SMALL)
    a, b = tmp_path / "a", tmp_path / "b"
    cmd_synthesize(cfg, a)
    cmd_synthesize(cfg, b)
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file() and p.name != "provenance.json")
    assert files
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


def test_synthesize_rows_carry_config_values(tmp_path):
    rep = cmd_synthesize(parse_config(SMALL), tmp_path)
    text = (tmp_path / "synthesis.txt").read_text()
    assert parse_config(SMALL).digest() in text
    with (tmp_path / "sweeps.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert [(r["rho_x"], r["rho_u"]) for r in rows] == [("1", "0"), ("100", "0")]
    assert rep.comparison[0].ingredients is not None


def test_empty_approach_list(tmp_path):
    cfg = parse_config("comparison: []\nsweeps: []\n")
    rep = cmd_synthesize(cfg, tmp_path)
    text = (tmp_path / "synthesis.txt").read_text()
    assert "LQR gain" in text and "Comparison" not in text
    np.testing.assert_allclose(rep.lqr_L.ravel(), [2.2534, 2.2534], atol=1e-3)


def test_closed_loop_trivial_and_infeasible_rows(tmp_path):
    cfg = parse_config(SMALL + "initial_conditions: [[0, 0], [-30, 20]]\n")
    cfg = replace(cfg, N_max=3)
    rep = cmd_closed_loop(cfg, tmp_path)
    trivial, far = rep.horizons
    assert trivial.horizon == 1 and trivial.steps == 0
    assert far.horizon is None and "infeasible up to N_max = 3" in far.error
    assert (tmp_path / "traces" / "ac_best_ic_0.csv").exists()
    assert "infeasible up to N_max" in (tmp_path / "horizons.txt").read_text()


def test_cli_overrides(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(SMALL)
    assert main(["synthesize", "--config", str(cfg), "--out", str(tmp_path / "o"), "--seed", "7",
                 "--samples", "90"]) == EXIT_OK
    saved = yaml.safe_load((tmp_path / "o" / "config.yaml").read_text())
    assert saved["seed"] == 7 and saved["synthesis"]["boundary_samples"] == 90
