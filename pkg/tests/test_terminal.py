import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qihnmpc.lyapunov import StageWeights, TuningParams, gain_penalty, lqr_gain
from qihnmpc.model import BoxSet, linear_model, linearize
from qihnmpc.terminal import (
    CertificationError,
    Ellipsoid,
    certification_samples,
    compute_gamma,
    is_invariant_by_simulation,
    nonlinearity_residual_chi,
    region_area,
    search_alpha,
    synthesize_terminal,
    write_region_csv,
)


def _spd(seed, n=2, cond=50.0):
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    ev = np.exp(rng.uniform(0.0, math.log(cond), n))
    return Q @ np.diag(ev) @ Q.T


def test_gamma_unit_ball():
    assert compute_gamma([[1.0, 0.0]], np.eye(2), BoxSet.symmetric(1.0)) == pytest.approx(1.0, rel=1e-15)


def test_gamma_zero_gain_is_infinite():
    assert compute_gamma(np.zeros((1, 2)), np.eye(2), BoxSet.symmetric(1.0)) == math.inf


def test_gamma_uses_nearest_face():
    box = BoxSet(np.array([-0.5]), np.array([3.0]))
    assert compute_gamma([[1.0, 0.0]], np.eye(2), box) == pytest.approx(0.25)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 5.0), st.floats(-3.0, 3.0), st.floats(-3.0, 3.0))
def test_gamma_tangency(seed, bound, l1, l2):
    # oracle: max of |L x| over the dense boundary of {x' P x = gamma}
    L = np.array([[l1, l2]])
    if np.abs(L).max() < 1e-3:
        return
    P = _spd(seed)
    g = compute_gamma(L, P, BoxSet.symmetric(bound))
    pts = Ellipsoid(P, g).boundary(200_000)
    assert np.abs(pts @ L.T).max() == pytest.approx(bound, rel=1e-8)


def test_chi_matches_direct_lyapunov_difference(bench, weights):
    # chi = -(V(F(x,-Lx)) - V(x) + x'Q*x), evaluated without the residual decomposition
    lin = linearize(bench)
    gp = gain_penalty(lin, weights, TuningParams("arbitrary_controller", rho_x=100.0, rho_u=100.0))
    rng = np.random.default_rng(0)
    X = rng.uniform(-0.5, 0.5, (200, 2))
    chi = nonlinearity_residual_chi(bench, gp, gp.delta_q, X)
    Y = bench.step_batch(X, -X @ gp.L.T)
    V = lambda Z: np.einsum("ij,jk,ik->i", Z, gp.P, Z)
    direct = -(V(Y) - V(X) + np.einsum("ij,jk,ik->i", X, gp.Qstar, X))
    np.testing.assert_allclose(chi, direct, rtol=1e-9, atol=1e-9 * np.abs(direct).max())


def test_chi_at_origin_is_zero(bench, weights):
    gp = gain_penalty(linearize(bench), weights, TuningParams("yu", kappa=1.05))
    assert nonlinearity_residual_chi(bench, gp, gp.delta_q, np.zeros(2)) == 0.0


def test_chi_linear_model_is_slack_quadratic(weights):
    m = linear_model([[1.0, 0.1], [0.1, 1.0]], [[0.05], [0.05]])
    gp = gain_penalty(linearize(m), weights, TuningParams("arbitrary_controller", rho_x=2.0, rho_u=1.0))
    x = np.array([0.3, -1.7])
    assert nonlinearity_residual_chi(m, gp, gp.delta_q, x) == pytest.approx(x @ gp.delta_q @ x, rel=1e-10)


def test_linear_model_alpha_equals_gamma(weights):
    m = linear_model([[1.0, 0.1], [0.1, 1.0]], [[0.05], [0.05]])
    for p in (TuningParams("arbitrary_controller", rho_x=5.0, rho_u=0.0), TuningParams("yu", kappa=1.05)):
        ti = synthesize_terminal(m, weights, p, BoxSet.symmetric(2.0))
        assert ti.alpha == ti.gamma
        assert ti.backoff_steps == 0


def test_underflow_raises(bench, weights):
    gp = gain_penalty(linearize(bench), weights, TuningParams("arbitrary_controller", rho_x=1.0, rho_u=0.0))
    p = TuningParams("arbitrary_controller", rho_x=1.0, beta=0.5, boundary_samples=36)
    with pytest.raises(CertificationError, match="no certifiable terminal region"):
        search_alpha(bench, gp, -np.eye(2), 10.0, p)


def test_certified_region_decreases_lyapunov(bench, weights, regions):
    # on fresh samples, V(F(x,-Lx)) - V(x) <= -x'Q*x
    for ti in regions.values():
        gp = ti.pair
        X = certification_samples(gp.P, 1000, seed=99) * math.sqrt(ti.alpha)
        Y = bench.step_batch(X, -X @ gp.L.T)
        V = lambda Z: np.einsum("ij,jk,ik->i", Z, gp.P, Z)
        dV = V(Y) - V(X) + np.einsum("ij,jk,ik->i", X, gp.Qstar, X)
        assert dV.max() <= 1e-9 * max(1.0, ti.alpha)


def test_alpha_non_increasing_with_nested_density(bench, weights, ubox):
    gp = gain_penalty(linearize(bench), weights, TuningParams("arbitrary_controller", rho_x=5.0, rho_u=0.0))
    g = compute_gamma(gp.L, gp.P, ubox)
    alphas = [search_alpha(bench, gp, gp.delta_q, g,
                           TuningParams("arbitrary_controller", rho_x=5.0, boundary_samples=n)).alpha
              for n in (225, 450, 900, 1800, 3600)]
    assert all(b <= a for a, b in zip(alphas, alphas[1:]))


def test_area_examples():
    assert region_area(np.eye(2), 1.0) == pytest.approx(math.pi, rel=1e-15)
    with pytest.raises(ValueError):
        region_area(np.eye(3), 1.0)


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_area_against_monte_carlo(seed):
    P, alpha = _spd(seed), 2.5
    r = math.sqrt(alpha / np.linalg.eigvalsh(P).min())
    rng = np.random.default_rng(seed)
    X = rng.uniform(-r, r, (1_000_000, 2))
    frac = np.mean(np.einsum("ij,jk,ik->i", X, P, X) <= alpha)
    assert region_area(P, alpha) == pytest.approx(frac * (2 * r) ** 2, rel=0.02)


def test_area_against_polygon():
    P, alpha = _spd(7), 0.3
    pts = Ellipsoid(P, alpha).boundary(20_000)
    x, y = pts[:, 0], pts[:, 1]
    shoelace = 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
    assert region_area(P, alpha) == pytest.approx(shoelace, rel=1e-6)


def test_invariance_of_certified_region(bench, regions, ubox):
    ti = regions["ac_best"]
    rep = is_invariant_by_simulation(bench, ti.pair, ti.region, 500, 200, ubox)
    assert rep.ok and rep.counterexample is None


def test_inflated_level_breaks_invariance(bench, regions, ubox):
    ti = regions["ac_best"]
    rep = is_invariant_by_simulation(bench, ti.pair, Ellipsoid(ti.penalty, 10.0 * ti.gamma), 500, 200, ubox)
    assert not rep.ok
    assert rep.counterexample["reason"] in ("input constraint violated", "left the level set")


def test_invariance_at_origin(bench, regions):
    ti = regions["yu"]
    assert is_invariant_by_simulation(bench, ti.pair, Ellipsoid(ti.penalty, 0.0), 10, 20).ok


def test_region_csv(tmp_path, regions):
    region = regions["lqr_best"].region
    path = write_region_csv(tmp_path / "r.csv", region, 90)
    with path.open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["x1", "x2"]
    pts = np.array(rows[1:], dtype=float)
    assert pts.shape == (90, 2)
    np.testing.assert_allclose(region.value(pts), region.level, rtol=1e-8)


def test_ingredients_reject_alpha_above_gamma(regions):
    from dataclasses import replace
    ti = regions["yu"]
    with pytest.raises(ValueError):
        replace(ti, alpha=2 * ti.gamma)
