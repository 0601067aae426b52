"""Property battery over synthesized regions and closed-loop runs."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .lyapunov import StageWeights
from .model import BoxSet, DiscreteModel
from .nmpc import CANDIDATE_TOL, STOP_NORM, ClosedLoopTrace
from .terminal import TerminalIngredients, is_invariant_by_simulation, sample_ellipsoid

LYAP_TOL = 1e-10
SLACK_TOL = -1e-8
DOMINATION_RTOL = 1e-6
COST_DECREASE_TOL = 1e-5
REACH_NORM = 1e-3


@dataclass
class PropertyResult:
    name: str
    subject: str
    ok: bool
    value: float = math.nan
    detail: str = ""
    counterexample: Optional[dict] = None

    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        msg = f"{status}  {self.subject:<28s} {self.name:<28s} {self.value:.3e}"
        if self.detail:
            msg += f"  {self.detail}"
        return msg


@dataclass
class PropertyReport:
    results: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.results)

    def add(self, r: PropertyResult):
        self.results.append(r)

    def failures(self):
        return [r for r in self.results if not r.ok]


def lyapunov_residual(ti: TerminalIngredients, subject: str) -> PropertyResult:
    """Residual relative to ``max(1, |Q* + dQ|)``, the scale the identity is built on."""
    gp = ti.pair
    scale = max(1.0, float(np.max(np.abs(gp.Qstar + gp.delta_q))))
    res = gp.residual() / scale
    return PropertyResult("lyapunov_residual", subject, res <= LYAP_TOL, res, f"abs {gp.residual():.2e}")


def decrease_slack(ti: TerminalIngredients, subject: str) -> PropertyResult:
    v = ti.pair.decrease_slack_min_eig()
    return PropertyResult("decrease_matrix_inequality", subject, v >= SLACK_TOL, v,
                          "min eig of P - PhiL' P PhiL - Q*")


def invariance(model, ti, input_set, n_samples, n_steps, seed, subject) -> PropertyResult:
    rep = is_invariant_by_simulation(model, ti.pair, ti.region, n_samples, n_steps, input_set, seed)
    return PropertyResult("invariance_by_simulation", subject, rep.ok, float(n_samples),
                          f"{n_samples} samples x {n_steps} steps", rep.counterexample)


def domination(model: DiscreteModel, weights: StageWeights, ti: TerminalIngredients,
               n_samples: int, n_steps: int, seed: int, subject: str) -> PropertyResult:
    """Accumulated stage cost under ``u = -L x`` from points of the region stays below ``x' P x``."""
    X0 = sample_ellipsoid(ti.region, n_samples, seed)
    X = X0.copy()
    total = np.zeros(n_samples)
    for _ in range(n_steps):
        U = -X @ ti.gain.T
        total += np.einsum("ij,jk,ik->i", X, weights.Wx, X) + np.einsum("ij,jk,ik->i", U, weights.Wu, U)
        X = model.step_batch(X, U)
    bound = np.einsum("ij,jk,ik->i", X0, ti.penalty, X0)
    ratio = total / np.maximum(bound, 1e-300)
    worst = int(np.argmax(ratio))
    ok = bool(np.all(total <= bound * (1.0 + DOMINATION_RTOL)))
    ce = None if ok else {"x0": X0[worst], "tail_cost": float(total[worst]), "xPx": float(bound[worst])}
    return PropertyResult("infinite_horizon_domination", subject, ok, float(ratio.max()),
                          "max tail cost / x'Px", ce)


def closed_loop_properties(trace: ClosedLoopTrace, ti: TerminalIngredients, subject: str) -> list:
    out = []
    cv = trace.candidate_violations
    worst = float(cv.max(initial=0.0))
    out.append(PropertyResult("candidate_shift_feasible", subject, worst <= CANDIDATE_TOL, worst,
                              f"{cv.size} shifts"))

    J, st = trace.ocp_costs, trace.stage_costs
    gaps = J[1:] - (J[:-1] - st[:-1]) if J.size > 1 else np.zeros(0)
    worst = float(gaps.max(initial=-math.inf)) if gaps.size else 0.0
    out.append(PropertyResult("optimal_cost_decrease", subject, worst <= COST_DECREASE_TOL, worst,
                              "max J(k+1) - J(k) + stage(k)"))

    # V(x(k)) along steps that start inside the region, up to the stopping norm
    norms = np.linalg.norm(trace.states, axis=1)
    V = trace.lyapunov_values
    inside = ~np.isnan(V)
    first = int(np.argmax(inside)) if inside.any() else None
    ok, worst = True, -math.inf
    if first is not None:
        seg = V[first:]
        seg_norms = norms[first:len(V)]
        for k in range(len(seg) - 1):
            if seg_norms[k] <= STOP_NORM:
                break
            d = seg[k + 1] - seg[k]
            worst = max(worst, d)
            if not (d < 0):
                ok = False
    out.append(PropertyResult("terminal_value_decreasing", subject, ok, worst if np.isfinite(worst) else 0.0,
                              "max V(k+1) - V(k) inside region"))

    reached = np.nonzero(norms <= REACH_NORM)[0]
    k_reach = int(reached[0]) if reached.size else -1
    out.append(PropertyResult("reaches_origin", subject, k_reach >= 0, float(norms[-1]),
                              f"|x| <= {REACH_NORM:g} at k = {k_reach}" if k_reach >= 0 else "not reached"))
    return out
