"""Finite-horizon OCP with terminal ellipsoid, receding-horizon loop, horizon scans.

The OCP is solved by single shooting: the decision vector is the stacked
input sequence, predicted states come from forward simulation, and exact
input sensitivities are propagated alongside using the model Jacobians.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.optimize import least_squares, minimize, nnls

from .lyapunov import StageWeights
from .model import BoxSet, DiscreteModel
from .terminal import TerminalIngredients

FEAS_TOL = 1e-6
KKT_TOL = 1e-7
CANDIDATE_TOL = 1e-8
STOP_NORM = 1e-6


class OCPError(RuntimeError):
    pass


class RecursiveFeasibilityError(OCPError):
    pass


@dataclass(frozen=True)
class OCPProblem:
    model: DiscreteModel
    weights: StageWeights
    terminal: TerminalIngredients
    horizon: int
    input_set: BoxSet
    x_init: np.ndarray
    state_set: Optional[BoxSet] = None

    def __post_init__(self):
        if self.horizon < 1:
            raise OCPError("horizon must be >= 1")
        x = np.asarray(self.x_init, dtype=float).reshape(self.model.n_x)
        if not np.all(np.isfinite(x)):
            raise OCPError("initial state must be finite")
        object.__setattr__(self, "x_init", x)

    def at(self, x=None, horizon: Optional[int] = None) -> "OCPProblem":
        return replace(
            self,
            x_init=self.x_init if x is None else np.asarray(x, dtype=float),
            horizon=self.horizon if horizon is None else horizon,
        )


@dataclass(frozen=True)
class OCPSolution:
    inputs: np.ndarray
    predicted_states: np.ndarray
    cost: float
    terminal_value: float
    feasible: bool
    kkt_residual: float
    converged: bool = False
    violation: float = 0.0
    message: str = ""


@dataclass
class ClosedLoopTrace:
    states: np.ndarray
    applied_inputs: np.ndarray
    stage_costs: np.ndarray
    lyapunov_values: np.ndarray
    ocp_costs: np.ndarray
    horizon: int
    candidate_violations: np.ndarray = field(default_factory=lambda: np.zeros(0))
    kkt_residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))


class _Shooting:
    """Rollout, cost and constraint evaluation with cached sensitivities."""

    def __init__(self, prob: OCPProblem):
        self.prob = prob
        self.m = prob.model
        self.N = prob.horizon
        self.nx, self.nu = self.m.n_x, self.m.n_u
        self.P = prob.terminal.penalty
        self.alpha = prob.terminal.alpha
        self._key = None

    def rollout(self, u_flat):
        key = u_flat.tobytes()
        if key == self._key:
            return self._cache
        N, nx, nu = self.N, self.nx, self.nu
        U = u_flat.reshape(N, nu)
        Z = np.empty((N + 1, nx))
        S = np.zeros((N + 1, nx, N * nu))
        Z[0] = self.prob.x_init
        with np.errstate(all="ignore"):
            for i in range(N):
                Z[i + 1], A, B = self.m.step_jac(Z[i], U[i])
                S[i + 1] = A @ S[i]
                S[i + 1][:, i * nu:(i + 1) * nu] += B
        self._key, self._cache = key, (U, Z, S)
        return U, Z, S

    def cost(self, u_flat):
        U, Z, S = self.rollout(u_flat)
        W = self.prob.weights
        J = float(
            np.einsum("ij,jk,ik->", Z[:-1], W.Wx, Z[:-1])
            + np.einsum("ij,jk,ik->", U, W.Wu, U)
            + Z[-1] @ self.P @ Z[-1]
        )
        g = 2.0 * (U @ W.Wu).reshape(-1)
        g += 2.0 * np.einsum("ia,ab,ibk->k", Z[1:-1], W.Wx, S[1:-1])
        g += 2.0 * (Z[-1] @ self.P) @ S[-1]
        return J, g

    def residuals(self, u_flat):
        """Cost as ``||r||^2`` with ``r`` stacked from Cholesky factors of the weights."""
        U, Z, S = self.rollout(u_flat)
        W = self.prob.weights
        Cx, Cu, Cp = (np.linalg.cholesky(M).T for M in (W.Wx, W.Wu, self.P))
        r = np.concatenate([(Z[:-1] @ Cx.T).ravel(), (U @ Cu.T).ravel(), Cp @ Z[-1]])
        J = np.concatenate([
            np.einsum("ab,ibk->iak", Cx, S[:-1]).reshape(-1, self.N * self.nu),
            np.kron(np.eye(self.N), Cu),
            Cp @ S[-1],
        ])
        return r, J

    def terminal_value(self, u_flat):
        U, Z, S = self.rollout(u_flat)
        return float(Z[-1] @ self.P @ Z[-1]), 2.0 * (Z[-1] @ self.P) @ S[-1]

    def state_rows(self, u_flat):
        """Constraint values ``>= 0`` and Jacobian rows for the optional state box."""
        box = self.prob.state_set
        U, Z, S = self.rollout(u_flat)
        vals, jac = [], []
        for i in range(1, self.N + 1):
            for j in range(self.nx):
                if np.isfinite(box.upper[j]):
                    vals.append(box.upper[j] - Z[i, j])
                    jac.append(-S[i, j])
                if np.isfinite(box.lower[j]):
                    vals.append(Z[i, j] - box.lower[j])
                    jac.append(S[i, j])
        return np.array(vals), np.array(jac).reshape(len(vals), -1)

    def violation(self, u_flat) -> float:
        """Scaled constraint violation: terminal excess relative to ``max(alpha, 1)``,
        state-box excess absolute, input-box excess absolute."""
        U, Z, _ = self.rollout(u_flat)
        if not np.all(np.isfinite(Z)):
            return math.inf
        V = float(Z[-1] @ self.P @ Z[-1])
        v = max(0.0, V - self.alpha) / max(self.alpha, 1.0)
        v = max(v, self.prob.input_set.violation(U))
        if self.prob.state_set is not None:
            v = max(v, self.prob.state_set.violation(Z[1:]))
        return v


def _kkt_residual(sh: _Shooting, u, scale: float) -> float:
    """Infinity norm of projected Lagrangian stationarity, complementarity and infeasibility.

    The objective is divided by ``scale`` and the terminal constraint is used
    in the normalized form ``1 - V/alpha``; multipliers of the active
    inequalities come from a nonnegative least-squares fit on the free inputs.
    """
    lo = np.tile(sh.prob.input_set.lower, sh.N)
    hi = np.tile(sh.prob.input_set.upper, sh.N)
    _, gJ = sh.cost(u)
    gf = gJ / scale
    V, gV = sh.terminal_value(u)
    cons_vals = [1.0 - V / sh.alpha]
    cons_grads = [-gV / sh.alpha]
    if sh.prob.state_set is not None:
        sv, sj = sh.state_rows(u)
        cons_vals.extend(sv)
        cons_grads.extend(sj)
    cons_vals = np.asarray(cons_vals)
    cons_grads = np.asarray(cons_grads).reshape(len(cons_vals), -1)
    span = np.maximum(hi - lo, 1.0)
    at_lo = u <= lo + 1e-9 * span
    at_hi = u >= hi - 1e-9 * span
    free = ~(at_lo | at_hi)
    active = cons_vals <= 1e-6
    mu = np.zeros(len(cons_vals))
    if np.any(active) and np.any(free):
        G = cons_grads[active][:, free].T
        mu_active, _ = nnls(G, gf[free])
        mu[active] = mu_active
    r = gf - mu @ cons_grads
    stat = np.where(free, np.abs(r), 0.0)
    stat = np.where(at_lo, np.maximum(-r, 0.0), stat)
    stat = np.where(at_hi, np.maximum(r, 0.0), stat)
    comp = np.abs(mu * cons_vals)
    feas = max(0.0, -cons_vals.min())
    return float(max(stat.max(initial=0.0), comp.max(initial=0.0), feas))


def _feedback_rollout(prob: OCPProblem) -> np.ndarray:
    """Inputs of the saturated local controller ``clip(-L z)`` along the horizon."""
    m, L = prob.model, prob.terminal.gain
    z = prob.x_init.copy()
    U = np.empty((prob.horizon, m.n_u))
    for i in range(prob.horizon):
        U[i] = prob.input_set.clip(-L @ z)
        z = m.step(z, U[i])
        if not np.all(np.isfinite(z)):
            U[i:] = 0.0
            break
    return U.reshape(-1)


def _phase_one(sh: _Shooting, starts, bounds) -> np.ndarray:
    """Minimize the terminal value (plus squared state-box excess) over the input box."""
    prob = sh.prob

    def obj(u):
        V, gV = sh.terminal_value(u)
        f, g = V / sh.alpha, gV / sh.alpha
        if prob.state_set is not None:
            vals, jac = sh.state_rows(u)
            neg = np.minimum(vals, 0.0)
            f += 1e3 * float(neg @ neg)
            g = g + 2e3 * (neg @ jac)
        if not np.isfinite(f):
            return 1e300, np.zeros_like(u)
        return f, g

    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    best, best_v = None, math.inf
    for u0 in starts:
        res = minimize(obj, u0, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": 2000, "ftol": 1e-15, "gtol": 1e-12})
        u = np.clip(res.x, lo, hi)
        v = sh.violation(u)
        if v < best_v:
            best, best_v = u, v
        if v <= 0.0:
            break
    return best


def _slsqp(sh: _Shooting, u0, bounds, scale):
    cons = [{
        "type": "ineq",
        "fun": lambda u: np.array([1.0 - sh.terminal_value(u)[0] / sh.alpha]),
        "jac": lambda u: (-sh.terminal_value(u)[1] / sh.alpha)[None, :],
    }]
    if sh.prob.state_set is not None:
        cons.append({"type": "ineq", "fun": lambda u: sh.state_rows(u)[0], "jac": lambda u: sh.state_rows(u)[1]})

    def obj(u):
        J, g = sh.cost(u)
        if not np.isfinite(J):
            raise OCPError("trajectory blow-up, shorten horizon or scale inputs")
        return J / scale, g / scale

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = minimize(obj, u0, jac=True, method="SLSQP", bounds=bounds, constraints=cons,
                       options={"maxiter": 500, "ftol": 1e-14})
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    return np.clip(res.x, lo, hi), res.message


def _polish(sh: _Shooting, u, bounds):
    """Bound-constrained Gauss-Newton refinement, used when the terminal constraint is slack."""
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    x0 = np.clip(u, lo, hi)
    # least_squares needs a strictly interior start
    span = hi - lo
    x0 = np.clip(x0, lo + 1e-12 * span, hi - 1e-12 * span)
    res = least_squares(lambda v: sh.residuals(v)[0], x0, jac=lambda v: sh.residuals(v)[1],
                        bounds=(lo, hi), method="trf", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=200)
    return np.clip(res.x, lo, hi)


def solve_ocp(problem: OCPProblem, warm_start=None) -> OCPSolution:
    """Local solution of the terminal-constrained OCP from ``problem.x_init``.

    Starts SLSQP from ``warm_start`` (default: zeros). If the result violates
    the constraints by more than ``FEAS_TOL``, a bound-constrained phase-one
    problem (minimize the terminal value) is solved from several starts and
    SLSQP is restarted from its minimizer. The returned iterate is the best
    feasible one seen, including the warm start itself, so the optimal cost
    never exceeds the cost of a feasible initial guess.
    """
    sh = _Shooting(problem)
    N, nu = problem.horizon, problem.model.n_u
    bounds = list(zip(np.tile(problem.input_set.lower, N), np.tile(problem.input_set.upper, N)))
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])

    if warm_start is None:
        u0 = np.zeros(N * nu)
    else:
        u0 = np.asarray(warm_start, dtype=float).reshape(-1)
        if u0.size != N * nu:
            raise OCPError(f"warm start has {u0.size} entries, expected {N * nu}")
        u0 = np.clip(u0, lo, hi)

    J0, _ = sh.cost(u0)
    scale = J0 if np.isfinite(J0) and J0 > 1e-300 else 1.0
    candidates = [u0]
    u, msg = _slsqp(sh, u0, bounds, scale)
    candidates.append(u)
    if sh.violation(u) > FEAS_TOL:
        starts = [u, u0, _feedback_rollout(problem), np.zeros(N * nu)]
        u1 = _phase_one(sh, starts, bounds)
        candidates.append(u1)
        if sh.violation(u1) <= FEAS_TOL:
            J1, _ = sh.cost(u1)
            scale = J1 if J1 > 1e-300 else 1.0
            u, msg = _slsqp(sh, u1, bounds, scale)
            candidates.append(u)

    feas = [v for v in candidates if sh.violation(v) <= FEAS_TOL]
    if feas:
        top = min(feas, key=lambda v: sh.cost(v)[0])
        if sh.terminal_value(top)[0] < (1.0 - 1e-6) * sh.alpha:
            candidates.append(_polish(sh, top, bounds))

    def rank(v):
        viol = sh.violation(v)
        J, _ = sh.cost(v)
        feasible = viol <= FEAS_TOL
        return (0, J) if feasible and np.isfinite(J) else (1, viol)

    best = min(candidates, key=rank)
    J, _ = sh.cost(best)
    kkt = _kkt_residual(sh, best, max(1.0, J)) if np.isfinite(J) else math.inf
    if kkt > KKT_TOL and sh.violation(best) <= FEAS_TOL:
        # one restart from the best point, with the final cost as scale
        retry, msg = _slsqp(sh, best, bounds, max(J, 1e-300))
        if rank(retry) < rank(best):
            best = retry
            J, _ = sh.cost(best)
            kkt = _kkt_residual(sh, best, max(1.0, J))
    U, Z, _ = sh.rollout(best)
    viol = sh.violation(best)
    return OCPSolution(
        inputs=U.copy(),
        predicted_states=Z.copy(),
        cost=J,
        terminal_value=float(Z[-1] @ sh.P @ Z[-1]),
        feasible=bool(viol <= FEAS_TOL),
        kkt_residual=kkt,
        converged=bool(kkt <= KKT_TOL),
        violation=viol,
        message=str(msg),
    )


def shifted_candidate(problem: OCPProblem, sol: OCPSolution) -> np.ndarray:
    """Drop the first move and append the local control ``-L z(k+N)``."""
    tail = -problem.terminal.gain @ sol.predicted_states[-1]
    return np.vstack([sol.inputs[1:], tail[None, :]])


def candidate_violation(problem: OCPProblem, x_next, candidate) -> float:
    """Constraint violation of ``candidate`` for the problem started at ``x_next``."""
    sh = _Shooting(problem.at(x_next))
    u = np.asarray(candidate, dtype=float).reshape(-1)
    U, Z, _ = sh.rollout(u)
    V = float(Z[-1] @ sh.P @ Z[-1])
    v = max(0.0, V - sh.alpha) / max(sh.alpha, 1.0)
    v = max(v, problem.input_set.violation(U))
    if problem.state_set is not None:
        v = max(v, problem.state_set.violation(Z[1:]))
    return v


def receding_horizon_run(problem: OCPProblem, T_steps: int, stop_norm: float = STOP_NORM) -> ClosedLoopTrace:
    """Apply the first optimal move, advance the nominal plant, warm-start with the shifted candidate."""
    m, W = problem.model, problem.weights
    region = problem.terminal.region
    x = problem.x_init.copy()
    states, inputs, stage, lyap, costs, cand, kkts = [x.copy()], [], [], [], [], [], []
    warm = None
    for k in range(T_steps):
        lyap.append(float(region.value(x)) if region.contains(x, tol=1e-9) else math.nan)
        if np.linalg.norm(x) <= stop_norm:
            break
        prob_k = problem.at(x)
        sol = solve_ocp(prob_k, warm)
        if not sol.feasible:
            if k == 0:
                raise OCPError("OCP infeasible at k = 0")
            raise RecursiveFeasibilityError(
                f"recursive feasibility violated at k = {k} (violation {sol.violation:.3e})")
        u = sol.inputs[0]
        inputs.append(u.copy())
        stage.append(float(x @ W.Wx @ x + u @ W.Wu @ u))
        costs.append(sol.cost)
        kkts.append(sol.kkt_residual)
        x = m.step(x, u)
        states.append(x.copy())
        warm = shifted_candidate(prob_k, sol)
        cand.append(candidate_violation(prob_k, x, warm))
    else:
        lyap.append(float(region.value(x)) if region.contains(x, tol=1e-9) else math.nan)
    return ClosedLoopTrace(
        states=np.array(states),
        applied_inputs=np.array(inputs).reshape(-1, m.n_u),
        stage_costs=np.array(stage),
        lyapunov_values=np.array(lyap),
        ocp_costs=np.array(costs),
        horizon=problem.horizon,
        candidate_violations=np.array(cand),
        kkt_residuals=np.array(kkts),
    )


def minimum_feasible_horizon(
    model: DiscreteModel,
    weights: StageWeights,
    terminal: TerminalIngredients,
    input_set: BoxSet,
    x0,
    N_max: int,
    state_set: Optional[BoxSet] = None,
) -> Optional[int]:
    """Smallest ``N`` in ``[1, N_max]`` with a feasible OCP from ``x0``; ``None`` if there is none."""
    if N_max < 1:
        raise OCPError("N_max must be >= 1")
    warm = None
    for N in range(1, N_max + 1):
        prob = OCPProblem(model, weights, terminal, N, input_set, np.asarray(x0, dtype=float), state_set)
        # screen with the phase-one problem; the full solve confirms the first candidate N
        sh = _Shooting(prob)
        bounds = list(zip(np.tile(input_set.lower, N), np.tile(input_set.upper, N)))
        starts = [_feedback_rollout(prob), np.zeros(N * model.n_u)]
        if warm is not None:
            starts.insert(0, warm.reshape(-1))
        u = _phase_one(sh, starts, bounds)
        if sh.violation(u) <= FEAS_TOL:
            sol = solve_ocp(prob, u)
            if sol.feasible:
                return N
            u = sol.inputs.reshape(-1)
        U, Z, _ = sh.rollout(u)
        tail = input_set.clip(-terminal.gain @ Z[-1])
        warm = np.vstack([U, tail[None, :]]) if np.all(np.isfinite(tail)) else None
    return None


def write_trace_csv(path, trace: ClosedLoopTrace) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    nx = trace.states.shape[1]
    nu = trace.applied_inputs.shape[1] if trace.applied_inputs.size else 0
    header = ["k"] + [f"x{i + 1}" for i in range(nx)] + [f"u{j + 1}" for j in range(nu)] + ["stage_cost", "V"]
    fmt = lambda v: "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.12g}"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for k, x in enumerate(trace.states):
            if k < len(trace.applied_inputs):
                u = list(trace.applied_inputs[k])
                sc = trace.stage_costs[k]
            else:
                u, sc = [None] * nu, None
            V = trace.lyapunov_values[k] if k < len(trace.lyapunov_values) else None
            w.writerow([k] + [fmt(float(v)) for v in x] + [fmt(None if v is None else float(v)) for v in u]
                       + [fmt(sc), fmt(V)])
    return path
