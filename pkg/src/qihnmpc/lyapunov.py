"""Discrete Lyapunov and Riccati solvers producing the local gain and terminal penalty.

All three terminal-penalty constructions end up satisfying the same identity

    PhiL' P PhiL - P = -(Q* + dQ),        Q* = Wx + L' Wu L

with a positive (semi)definite slack ``dQ``. For the kappa-scaled construction
the slack is ``(kappa**2 - 1) PhiL' P PhiL``; for the additive one it is the
user-supplied ``rho_x Wx + rho_u L' Wu L``; for the inflated-weight LQR it is
``(rho_x - 1) Wx + (rho_u - 1) L' Wu L``. Storing ``dQ`` on the result lets the
terminal-set search treat every approach with one residual function.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import Linearization

APPROACHES = ("yu", "arbitrary_controller", "lqr_inflated")

KRONECKER_MAX_DIM = 20
LYAP_RESIDUAL_TOL = 1e-10
RICCATI_TOL = 1e-11
RICCATI_MAX_ITER = 10000


class SynthesisError(ValueError):
    """Raised when a gain/penalty pair cannot be constructed."""


def _check_inflation(rho_x: float, rho_u: float):
    # rho_u == 1 is allowed (the weights only need to dominate jointly); dQ > 0 is checked later
    if rho_x < 1.0 or rho_u < 1.0 or (rho_x == 1.0 and rho_u == 1.0):
        raise SynthesisError("lqr_inflated requires rho_x >= 1, rho_u >= 1 and at least one strictly above 1")


def sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def spectral_radius(A: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def _check_spd(M: np.ndarray, name: str, tol: float = 1e-12):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1]:
        raise SynthesisError(f"{name} must be square, got {M.shape}")
    if np.max(np.abs(M - M.T)) > tol * max(1.0, np.max(np.abs(M))):
        raise SynthesisError(f"{name} must be symmetric")
    if np.min(np.linalg.eigvalsh(sym(M))) <= 0.0:
        raise SynthesisError(f"{name} must be positive definite")
    return M


@dataclass(frozen=True)
class StageWeights:
    Wx: np.ndarray
    Wu: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "Wx", _check_spd(self.Wx, "Wx"))
        object.__setattr__(self, "Wu", _check_spd(self.Wu, "Wu"))


@dataclass(frozen=True)
class TuningParams:
    """Knobs of one terminal-region synthesis.

    ``coupled_gain`` only matters for ``lqr_inflated``: when true (default) the
    gain is the steady-state LQR gain for the inflated weights
    ``(rho_x Wx, rho_u Wu)``; when false the unscaled LQR gain (or
    ``gain_override``) is kept fixed.
    """

    approach: str
    rho_x: float = 0.0
    rho_u: float = 0.0
    kappa: float = 1.0
    beta: float = 0.99
    boundary_samples: int = 3600
    gain_override: Optional[np.ndarray] = None
    coupled_gain: bool = True
    gamma_max: float = 1e6

    def __post_init__(self):
        if self.approach not in APPROACHES:
            raise SynthesisError(f"unknown approach {self.approach!r}; expected one of {APPROACHES}")
        if not 0.0 < self.beta < 1.0:
            raise SynthesisError("backoff factor beta must lie in (0, 1)")
        if self.boundary_samples < 1:
            raise SynthesisError("boundary_samples must be positive")
        if self.rho_x < 0 or self.rho_u < 0:
            raise SynthesisError("rho_x and rho_u must be non-negative")
        if self.approach == "arbitrary_controller" and not (self.rho_x > 0 or self.rho_u > 0):
            raise SynthesisError("dQ must be positive definite: need rho_x > 0 or rho_u > 0")
        if self.approach == "lqr_inflated":
            _check_inflation(self.rho_x, self.rho_u)
        if self.approach == "yu" and not self.kappa > 1:
            raise SynthesisError("kappa must exceed 1")
        if self.gain_override is not None:
            object.__setattr__(self, "gain_override", np.atleast_2d(np.asarray(self.gain_override, dtype=float)))

    @property
    def label(self) -> str:
        if self.approach == "yu":
            return f"yu(kappa={self.kappa:g})"
        return f"{self.approach}(rho_x={self.rho_x:g}, rho_u={self.rho_u:g})"


@dataclass(frozen=True)
class GainPenaltyPair:
    L: np.ndarray
    P: np.ndarray
    PhiL: np.ndarray
    Qstar: np.ndarray
    delta_q: np.ndarray
    approach: str = "lqr"
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        rho = spectral_radius(self.PhiL)
        if rho >= 1.0:
            raise SynthesisError(f"unstable closed loop: spectral radius {rho:.6g} >= 1")
        if np.min(np.linalg.eigvalsh(self.P)) <= 0.0:
            raise SynthesisError("terminal penalty P is not positive definite")
        res = self.residual()
        scale = max(1.0, float(np.max(np.abs(self.Qstar + self.delta_q))))
        if res > LYAP_RESIDUAL_TOL * scale:
            raise SynthesisError(f"Lyapunov residual {res:.3e} exceeds tolerance")

    def residual(self) -> float:
        """Max-norm residual of ``PhiL' P PhiL - P + Q* + dQ``."""
        R = self.PhiL.T @ self.P @ self.PhiL - self.P + self.Qstar + self.delta_q
        return float(np.max(np.abs(R)))

    def decrease_slack_min_eig(self) -> float:
        """Smallest eigenvalue of ``P - PhiL' P PhiL - Q*``; non-negative iff the
        linear closed loop decreases ``x' P x`` by at least ``x' Q* x``."""
        S = sym(self.P - self.PhiL.T @ self.P @ self.PhiL - self.Qstar)
        return float(np.min(np.linalg.eigvalsh(S)))

    @property
    def spectral_radius(self) -> float:
        return spectral_radius(self.PhiL)


def solve_discrete_lyapunov(A, Q) -> np.ndarray:
    """Solve ``A' P A - P = -Q`` for the unique symmetric solution.

    Uses the Kronecker form ``(I - A'(x)A') vec(P) = vec(Q)`` up to
    ``n = 20``, and a doubling (squared Smith) iteration of the convergent
    series ``sum_k (A')^k Q A^k`` above that.

    Raises
    ------
    SynthesisError
        If ``A`` is not Schur stable or the residual check fails.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    n = A.shape[0]
    if A.shape != (n, n) or Q.shape != (n, n):
        raise SynthesisError(f"shape mismatch: A {A.shape}, Q {Q.shape}")
    rho = spectral_radius(A)
    if rho >= 1.0:
        raise SynthesisError(f"unstable closed loop: spectral radius {rho:.6g} >= 1")

    if n <= KRONECKER_MAX_DIM:
        K = np.eye(n * n) - np.kron(A.T, A.T)
        P = np.linalg.solve(K, Q.reshape(-1, order="F")).reshape(n, n, order="F")
        # one step of iterative refinement
        R = A.T @ P @ A - P + Q
        P = P + np.linalg.solve(K, R.reshape(-1, order="F")).reshape(n, n, order="F")
    else:
        P = Q.copy()
        Ak = A.copy()
        for _ in range(200):
            step = Ak.T @ P @ Ak
            P = P + step
            Ak = Ak @ Ak
            if np.max(np.abs(step)) <= 1e-16 * np.max(np.abs(P)):
                break
    P = sym(P)
    res = float(np.max(np.abs(A.T @ P @ A - P + Q)))
    if res > LYAP_RESIDUAL_TOL * max(1.0, float(np.max(np.abs(Q)))):
        raise SynthesisError(f"Lyapunov solve failed: residual {res:.3e}")
    return P


def riccati_fixed_point(Phi, Gamma, Wx, Wu, tol: float = RICCATI_TOL, max_iter: int = RICCATI_MAX_ITER):
    """Iterate ``L <- (Wu + G'PG)^-1 G'P Phi`` and ``P <- PhiL' P PhiL + Wx + L'Wu L``.

    Returns ``(L, P, iterations)``. The step tolerance is applied relative to
    ``max(1, |P|_max)`` so that heavily scaled weights converge in floating point.
    """
    P = np.array(Wx, dtype=float)
    for it in range(1, max_iter + 1):
        S = Wu + Gamma.T @ P @ Gamma
        L = np.linalg.solve(S, Gamma.T @ P @ Phi)
        PhiL = Phi - Gamma @ L
        P_new = sym(PhiL.T @ P @ PhiL + Wx + L.T @ Wu @ L)
        if not np.all(np.isfinite(P_new)):
            raise SynthesisError("Riccati iteration failed: divergence")
        step = float(np.max(np.abs(P_new - P)))
        P = P_new
        if step <= tol * max(1.0, float(np.max(np.abs(P)))):
            L = np.linalg.solve(Wu + Gamma.T @ P @ Gamma, Gamma.T @ P @ Phi)
            return L, P, it
    raise SynthesisError(f"Riccati iteration failed: no convergence in {max_iter} iterations")


def lqr_gain(lin: Linearization, w: StageWeights) -> GainPenaltyPair:
    """Steady-state LQR gain and cost-to-go for the linearization."""
    L, P, iters = riccati_fixed_point(lin.Phi, lin.Gamma, w.Wx, w.Wu)
    PhiL = lin.Phi - lin.Gamma @ L
    Qstar = w.Wx + L.T @ w.Wu @ L
    # polish P against the final gain so the Lyapunov identity holds to round-off
    P = solve_discrete_lyapunov(PhiL, Qstar)
    return GainPenaltyPair(
        L=L, P=P, PhiL=PhiL, Qstar=Qstar, delta_q=np.zeros_like(P), approach="lqr", info={"iterations": iters}
    )


def _closed_loop(lin: Linearization, w: StageWeights, L):
    L = np.atleast_2d(np.asarray(L, dtype=float))
    if L.shape != (lin.n_u, lin.n_x):
        raise SynthesisError(f"gain must have shape ({lin.n_u}, {lin.n_x}), got {L.shape}")
    PhiL = lin.Phi - lin.Gamma @ L
    return L, PhiL, sym(w.Wx + L.T @ w.Wu @ L)


def penalty_yu(lin: Linearization, w: StageWeights, L, kappa: float) -> GainPenaltyPair:
    """Solve ``kappa^2 PhiL' P PhiL - P = -Q*`` (requires ``1 < kappa < 1/rho(PhiL)``)."""
    L, PhiL, Qstar = _closed_loop(lin, w, L)
    rho = spectral_radius(PhiL)
    if not (1.0 < kappa and kappa * rho < 1.0):
        bound = np.inf if rho == 0 else 1.0 / rho
        raise SynthesisError(
            f"kappa violates spectral bound: need 1 < kappa < 1/rho_max(PhiL) = {bound:.6g} "
            f"(rho_max = {rho:.6g}), got kappa = {kappa:.6g}"
        )
    P = solve_discrete_lyapunov(kappa * PhiL, Qstar)
    dQ = sym((kappa**2 - 1.0) * PhiL.T @ P @ PhiL)
    return GainPenaltyPair(L=L, P=P, PhiL=PhiL, Qstar=Qstar, delta_q=dQ, approach="yu", info={"kappa": kappa, "rho_max": rho})


def penalty_arbitrary_controller(lin: Linearization, w: StageWeights, L, rho_x: float, rho_u: float) -> GainPenaltyPair:
    """Solve ``PhiL' P PhiL - P = -(Q* + dQ)`` with ``dQ = rho_x Wx + rho_u L' Wu L``."""
    L, PhiL, Qstar = _closed_loop(lin, w, L)
    dQ = sym(rho_x * w.Wx + rho_u * L.T @ w.Wu @ L)
    if np.min(np.linalg.eigvalsh(dQ)) <= 0.0:
        raise SynthesisError("dQ must be positive definite")
    P = solve_discrete_lyapunov(PhiL, Qstar + dQ)
    return GainPenaltyPair(
        L=L, P=P, PhiL=PhiL, Qstar=Qstar, delta_q=dQ, approach="arbitrary_controller",
        info={"rho_x": rho_x, "rho_u": rho_u},
    )


def penalty_lqr_inflated(
    lin: Linearization, w: StageWeights, L, rho_x: float, rho_u: float, coupled: bool = True
) -> GainPenaltyPair:
    """Penalty from inflated weights ``(rho_x Wx, rho_u Wu)``.

    With ``coupled=True`` the gain and penalty are the joint steady state of
    the inflated-weight Riccati pair (``L`` is ignored). With ``coupled=False``
    the supplied ``L`` is kept and only the Lyapunov equation
    ``PhiL' P PhiL - P = -(rho_x Wx + rho_u L' Wu L)`` is solved.
    """
    _check_inflation(rho_x, rho_u)
    if coupled:
        L, _, iters = riccati_fixed_point(lin.Phi, lin.Gamma, rho_x * w.Wx, rho_u * w.Wu)
    else:
        iters = 0
    L, PhiL, Qstar = _closed_loop(lin, w, L)
    P = solve_discrete_lyapunov(PhiL, sym(rho_x * w.Wx + rho_u * L.T @ w.Wu @ L))
    dQ = sym((rho_x - 1.0) * w.Wx + (rho_u - 1.0) * L.T @ w.Wu @ L)
    if np.min(np.linalg.eigvalsh(dQ)) <= 0.0:
        raise SynthesisError("dQ must be positive definite")
    return GainPenaltyPair(
        L=L, P=P, PhiL=PhiL, Qstar=Qstar, delta_q=dQ, approach="lqr_inflated",
        info={"rho_x": rho_x, "rho_u": rho_u, "coupled": coupled, "iterations": iters},
    )


def gain_penalty(lin: Linearization, w: StageWeights, params: TuningParams) -> GainPenaltyPair:
    """Dispatch on ``params.approach``; the base gain is the unscaled LQR gain unless overridden."""
    L = params.gain_override if params.gain_override is not None else lqr_gain(lin, w).L
    if params.approach == "yu":
        return penalty_yu(lin, w, L, params.kappa)
    if params.approach == "arbitrary_controller":
        return penalty_arbitrary_controller(lin, w, L, params.rho_x, params.rho_u)
    coupled = params.coupled_gain and params.gain_override is None
    return penalty_lqr_inflated(lin, w, L, params.rho_x, params.rho_u, coupled=coupled)
