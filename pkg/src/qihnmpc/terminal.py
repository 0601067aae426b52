"""Ellipsoidal terminal regions: input bound, nonlinearity backoff search, areas."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.stats import norm, qmc

from .lyapunov import GainPenaltyPair, StageWeights, TuningParams, gain_penalty
from .model import BoxSet, DiscreteModel, linearize

INTERIOR_FRACTION = 0.1
ALPHA_UNDERFLOW = 1e-12


class CertificationError(RuntimeError):
    """No positive level could be certified; indicates a bug or a degenerate slack."""


@dataclass(frozen=True)
class Ellipsoid:
    P: np.ndarray
    level: float

    def __post_init__(self):
        if self.level < 0:
            raise ValueError("ellipsoid level must be non-negative")

    def value(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.einsum("...i,ij,...j->...", x, self.P, x)

    def contains(self, x, tol: float = 0.0):
        return self.value(x) <= self.level + tol

    def boundary(self, n_points: int = 360) -> np.ndarray:
        """Points on ``x' P x = level`` for a 2-D ellipsoid, counter-clockwise."""
        if self.P.shape != (2, 2):
            raise ValueError("boundary tracing is only defined for 2-D ellipsoids")
        theta = np.linspace(0.0, 2.0 * np.pi, n_points, endpoint=False)
        D = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        return _map_unit_sphere(self.P, D) * math.sqrt(self.level)


@dataclass(frozen=True)
class TerminalIngredients:
    gain: np.ndarray
    penalty: np.ndarray
    gamma: float
    alpha: float
    area: Optional[float]
    approach: str
    samples_checked: int
    pair: Optional[GainPenaltyPair] = None
    label: str = ""
    backoff_steps: int = 0
    min_chi: float = 0.0
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 < self.alpha <= self.gamma):
            raise ValueError(f"need 0 < alpha <= gamma, got alpha={self.alpha}, gamma={self.gamma}")

    @property
    def region(self) -> Ellipsoid:
        return Ellipsoid(self.penalty, self.alpha)


def _map_unit_sphere(P: np.ndarray, D: np.ndarray) -> np.ndarray:
    """Map unit vectors ``D`` onto ``{x : x' P x = 1}`` through the Cholesky factor."""
    C = np.linalg.cholesky(P)
    return np.linalg.solve(C.T, D.T).T


def compute_gamma(L, P, U: BoxSet) -> float:
    """Largest ``gamma`` with ``-L x`` inside the box for all ``x' P x <= gamma``.

    For each input row ``j`` the maximum of ``|L_j x|`` over the ellipsoid is
    ``sqrt(gamma * L_j P^-1 L_j')``, so the binding level is
    ``min_j r_j**2 / (L_j P^-1 L_j')`` with ``r_j`` the distance to the
    nearest face. Returns ``inf`` when ``L`` is zero.
    """
    L = np.atleast_2d(np.asarray(L, dtype=float))
    P = np.asarray(P, dtype=float)
    if L.shape[0] != U.dim:
        raise ValueError(f"gain has {L.shape[0]} rows but the input box has dimension {U.dim}")
    try:
        Pinv_Lt = np.linalg.solve(P, L.T)
    except np.linalg.LinAlgError as exc:
        raise ValueError("singular penalty matrix") from exc
    spread = np.einsum("ij,ji->i", L, Pinv_Lt)
    r = U.radius
    active = spread > 0.0
    if not np.any(active):
        return math.inf
    return float(np.min(r[active] ** 2 / spread[active]))


def nonlinearity_residual_chi(model: DiscreteModel, gp: GainPenaltyPair, DeltaQ, x) -> np.ndarray:
    """Decrease margin ``chi(x)`` left after the plant's deviation from its linearization.

    ``chi = x' dQ x - 2 Psi' P PhiL x - Psi' P Psi`` with
    ``Psi = F(x, -L x) - PhiL x``. Accepts a single state or a stack of rows.
    """
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    U = -X @ gp.L.T
    Y_lin = X @ gp.PhiL.T
    Psi = model.step_batch(X, U) - Y_lin
    dQ = np.asarray(DeltaQ, dtype=float)
    chi = (
        np.einsum("ij,jk,ik->i", X, dQ, X)
        - 2.0 * np.einsum("ij,jk,ik->i", Psi, gp.P, Y_lin)
        - np.einsum("ij,jk,ik->i", Psi, gp.P, Psi)
    )
    return chi[0] if single else chi


def _unit_directions(n_x: int, n: int) -> np.ndarray:
    if n_x == 1:
        return np.array([[1.0], [-1.0]])
    if n_x == 2:
        theta = 2.0 * np.pi * np.arange(n) / n
        return np.stack([np.cos(theta), np.sin(theta)], axis=1)
    # low-discrepancy points pushed through the normal quantile, then normalized
    H = qmc.Halton(d=n_x, scramble=False).random(n + 1)[1:]
    G = norm.ppf(np.clip(H, 1e-12, 1 - 1e-12))
    return G / np.linalg.norm(G, axis=1, keepdims=True)


def _interior_points(n_x: int, n: int, seed) -> np.ndarray:
    """Uniform points of the unit ball; directions and radii use separate streams
    so that a smaller draw is a prefix of a larger one with the same seed."""
    dir_ss, rad_ss = np.random.SeedSequence(seed).spawn(2)
    G = np.random.default_rng(dir_ss).standard_normal((n, n_x))
    G /= np.linalg.norm(G, axis=1, keepdims=True)
    r = np.random.default_rng(rad_ss).random(n) ** (1.0 / n_x)
    return G * r[:, None]


def certification_samples(P, boundary_samples: int, seed: int = 0) -> np.ndarray:
    """Sample set on/inside ``{x' P x <= 1}``; scale by ``sqrt(alpha)`` to use."""
    n_x = P.shape[0]
    D = _unit_directions(n_x, boundary_samples)
    n_int = int(math.ceil(INTERIOR_FRACTION * D.shape[0]))
    inner = _interior_points(n_x, n_int, seed)
    return _map_unit_sphere(P, np.vstack([D, inner]))


def search_alpha(
    model: DiscreteModel,
    gp: GainPenaltyPair,
    DeltaQ,
    gamma: float,
    params: TuningParams,
    seed: int = 0,
) -> TerminalIngredients:
    """Back off from ``alpha = gamma`` by ``beta`` until ``chi >= 0`` on every sample.

    ``gamma = inf`` is capped at ``params.gamma_max``.
    """
    if DeltaQ is None:
        DeltaQ = gp.delta_q
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    gamma = min(gamma, params.gamma_max)
    S = certification_samples(gp.P, params.boundary_samples, seed)
    alpha = gamma
    steps = 0
    while alpha >= ALPHA_UNDERFLOW * gamma:
        chi = nonlinearity_residual_chi(model, gp, DeltaQ, S * math.sqrt(alpha))
        min_chi = float(chi.min())
        if min_chi >= 0.0:
            return TerminalIngredients(
                gain=gp.L,
                penalty=gp.P,
                gamma=gamma,
                alpha=alpha,
                area=region_area(gp.P, alpha) if gp.P.shape == (2, 2) else None,
                approach=gp.approach,
                samples_checked=S.shape[0],
                pair=gp,
                label=params.label,
                backoff_steps=steps,
                min_chi=min_chi,
            )
        alpha *= params.beta
        steps += 1
    raise CertificationError("no certifiable terminal region")


def region_area(P, alpha: float) -> float:
    """Area ``pi * alpha / sqrt(det P)`` of the planar ellipse ``x' P x <= alpha``."""
    P = np.asarray(P, dtype=float)
    if P.shape != (2, 2):
        raise ValueError(f"region_area needs a 2x2 matrix, got shape {P.shape}")
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    return float(math.pi * alpha / math.sqrt(np.linalg.det(P)))


@dataclass
class InvarianceReport:
    ok: bool
    samples: int
    steps: int
    counterexample: Optional[dict] = None


def sample_ellipsoid(region: Ellipsoid, n: int, seed: int = 0) -> np.ndarray:
    """Uniform samples from the solid ellipsoid."""
    return _map_unit_sphere(region.P, _interior_points(region.P.shape[0], n, seed)) * math.sqrt(region.level)


def is_invariant_by_simulation(
    model: DiscreteModel,
    gp: GainPenaltyPair,
    region: Ellipsoid,
    n_samples: int = 500,
    n_steps: int = 200,
    input_set: Optional[BoxSet] = None,
    seed: int = 0,
    rel_tol: float = 1e-9,
) -> InvarianceReport:
    """Simulate ``x+ = F(x, -L x)`` from samples of the region.

    Fails on the first trajectory that leaves the level set or, when
    ``input_set`` is given, applies an inadmissible input.
    """
    X = sample_ellipsoid(region, n_samples, seed)
    X0 = X.copy()
    tol = rel_tol * max(1.0, region.level)
    for k in range(n_steps):
        U = -X @ gp.L.T
        if input_set is not None:
            bad = np.any((U < input_set.lower) | (U > input_set.upper), axis=1)
            if np.any(bad):
                i = int(np.argmax(bad))
                return InvarianceReport(False, n_samples, n_steps, {
                    "reason": "input constraint violated", "x0": X0[i], "step": k, "x": X[i], "u": U[i]})
        X = model.step_batch(X, U)
        V = region.value(X)
        out = V > region.level + tol
        if np.any(out) or not np.all(np.isfinite(V)):
            i = int(np.argmax(out | ~np.isfinite(V)))
            return InvarianceReport(False, n_samples, n_steps, {
                "reason": "left the level set", "x0": X0[i], "step": k + 1, "x": X[i], "V": float(V[i])})
    return InvarianceReport(True, n_samples, n_steps)


def synthesize_terminal(
    model: DiscreteModel,
    weights: StageWeights,
    params: TuningParams,
    input_set: BoxSet,
    seed: int = 0,
) -> TerminalIngredients:
    """Linearize, build (L, P) for the chosen approach, then compute gamma and alpha."""
    lin = linearize(model)
    gp = gain_penalty(lin, weights, params)
    gamma = compute_gamma(gp.L, gp.P, input_set)
    return search_alpha(model, gp, gp.delta_q, gamma, params, seed=seed)


def write_region_csv(path, region: Ellipsoid, n_points: int = 360) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pts = region.boundary(n_points)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x1", "x2"])
        for x1, x2 in pts:
            w.writerow([f"{x1:.10g}", f"{x2:.10g}"])
    return path
