"""Discrete-time nonlinear models, box sets and Jacobian linearization."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np

JacobianFn = Callable[[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]

FD_STEP = 1e-6


class ModelError(ValueError):
    pass


class TrajectoryDiverged(ModelError):
    def __init__(self, step: int):
        super().__init__(f"trajectory diverged at step {step}")
        self.step = step


@dataclass(frozen=True)
class BoxSet:
    """Axis-aligned box ``lower <= v <= upper`` with the origin strictly inside."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ModelError(f"box bounds must be 1-D of equal length, got {lo.shape} and {hi.shape}")
        if not (np.all(lo < 0.0) and np.all(hi > 0.0)):
            raise ModelError("box must contain the origin strictly in its interior")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def symmetric(cls, bound) -> "BoxSet":
        b = np.atleast_1d(np.asarray(bound, dtype=float))
        return cls(-b, b)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def radius(self) -> np.ndarray:
        """Distance from the origin to the nearest face, per coordinate."""
        return np.minimum(-self.lower, self.upper)

    def contains(self, v, tol: float = 0.0) -> bool:
        v = np.asarray(v, dtype=float)
        return bool(np.all(v >= self.lower - tol) and np.all(v <= self.upper + tol))

    def violation(self, v) -> float:
        """Largest bound violation over the trailing axis (0 when inside)."""
        v = np.asarray(v, dtype=float)
        over = np.maximum(v - self.upper, self.lower - v)
        return float(max(over.max(initial=0.0), 0.0))

    def clip(self, v) -> np.ndarray:
        return np.clip(v, self.lower, self.upper)


@dataclass(frozen=True)
class Linearization:
    Phi: np.ndarray
    Gamma: np.ndarray

    def __post_init__(self):
        Phi = np.atleast_2d(np.asarray(self.Phi, dtype=float))
        Gamma = np.asarray(self.Gamma, dtype=float)
        if Gamma.ndim == 1:
            Gamma = Gamma.reshape(-1, 1)
        n = Phi.shape[0]
        if Phi.shape != (n, n):
            raise ModelError(f"Phi must be square, got {Phi.shape}")
        if Gamma.shape[0] != n:
            raise ModelError(f"Gamma must have {n} rows, got {Gamma.shape}")
        object.__setattr__(self, "Phi", Phi)
        object.__setattr__(self, "Gamma", Gamma)

    @property
    def n_x(self) -> int:
        return self.Phi.shape[0]

    @property
    def n_u(self) -> int:
        return self.Gamma.shape[1]


@dataclass(frozen=True)
class DiscreteModel:
    """Nonlinear map ``x(k+1) = F(x(k), u(k))`` with equilibrium at the origin.

    ``dynamics`` takes arrays of shape ``(..., n_x)`` and ``(..., n_u)``. When
    ``vectorized`` is true it must broadcast over the leading batch axes;
    otherwise batch evaluation falls back to a Python loop.

    ``analytic_jacobians`` (optional) returns ``(dF/dx, dF/du)`` at a single
    point.
    """

    n_x: int
    n_u: int
    dynamics: Callable[[np.ndarray, np.ndarray], np.ndarray]
    analytic_jacobians: Optional[JacobianFn] = None
    name: str = "model"
    vectorized: bool = True
    params: dict = field(default_factory=dict)
    step_with_jacobians: Optional[Callable] = None

    def __post_init__(self):
        if self.n_x < 1 or self.n_u < 1:
            raise ModelError("state and input dimensions must be positive")
        f0 = self.step(np.zeros(self.n_x), np.zeros(self.n_u))
        if f0.shape != (self.n_x,):
            raise ModelError(f"dynamics returned shape {f0.shape}, expected ({self.n_x},)")
        if np.max(np.abs(f0)) > 1e-12:
            raise ModelError(f"origin is not an equilibrium: F(0,0) = {f0}")

    def step(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return np.asarray(self.dynamics(x, u), dtype=float)

    def step_batch(self, X, U) -> np.ndarray:
        """Evaluate the map on stacked rows ``X (m, n_x)``, ``U (m, n_u)``."""
        X = np.asarray(X, dtype=float)
        U = np.asarray(U, dtype=float).reshape(X.shape[0], self.n_u)
        if self.vectorized:
            return np.asarray(self.dynamics(X, U), dtype=float)
        return np.array([self.step(x, u) for x, u in zip(X, U)]).reshape(X.shape)

    def jacobians(self, x, u) -> Tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=float)
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if self.analytic_jacobians is not None:
            A, B = self.analytic_jacobians(x, u)
            return np.asarray(A, dtype=float), np.asarray(B, dtype=float).reshape(self.n_x, self.n_u)
        return finite_difference_jacobians(self, x, u)


    def step_jac(self, x, u) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(F(x, u), dF/dx, dF/du)`` at a single point, fused when the model provides it."""
        if self.step_with_jacobians is not None:
            return self.step_with_jacobians(x, u)
        A, B = self.jacobians(x, u)
        return self.step(x, u), A, B


def finite_difference_jacobians(model: DiscreteModel, x, u) -> Tuple[np.ndarray, np.ndarray]:
    """Central differences with step ``1e-6 * max(1, |coordinate|)``."""
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    z = np.concatenate([x, u])
    n = z.size
    h = FD_STEP * np.maximum(1.0, np.abs(z))
    E = np.diag(h)
    Z = np.vstack([z + E, z - E])
    F = model.step_batch(Z[:, : model.n_x], Z[:, model.n_x:])
    J = ((F[:n] - F[n:]) / (2.0 * h[:, None])).T
    return J[:, : model.n_x], J[:, model.n_x:]


def linearize(model: DiscreteModel) -> Linearization:
    """Jacobian pair (Phi, Gamma) of the model at the origin."""
    Phi, Gamma = model.jacobians(np.zeros(model.n_x), np.zeros(model.n_u))
    if not (np.all(np.isfinite(Phi)) and np.all(np.isfinite(Gamma))):
        raise ModelError("model not differentiable at origin")
    return Linearization(Phi, Gamma)


def simulate_open_loop(model: DiscreteModel, x0, inputs) -> np.ndarray:
    """Iterate the dynamics; returns states ``x(0..N)`` with shape ``(N+1, n_x)``."""
    U = np.asarray(inputs, dtype=float).reshape(-1, model.n_u)
    if U.shape[0] < 1:
        raise ModelError("input sequence must contain at least one move")
    X = np.empty((U.shape[0] + 1, model.n_x))
    X[0] = np.asarray(x0, dtype=float)
    for k, u in enumerate(U):
        with np.errstate(over="ignore", invalid="ignore"):
            X[k + 1] = model.step(X[k], u)
        if not np.all(np.isfinite(X[k + 1])):
            raise TrajectoryDiverged(k + 1)
    return X


def linear_model(A, B, name: str = "linear") -> DiscreteModel:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B.reshape(-1, 1)

    def dynamics(x, u):
        return x @ A.T + u @ B.T

    return DiscreteModel(
        n_x=A.shape[0],
        n_u=B.shape[1],
        dynamics=dynamics,
        analytic_jacobians=lambda x, u: (A.copy(), B.copy()),
        name=name,
    )


# --- two-state benchmark -------------------------------------------------


def _benchmark_rhs(mu0: float):
    c = 1.0 - mu0

    def f(x, u):
        x1, x2, v = x[..., 0], x[..., 1], u[..., 0]
        return np.stack([x2 + v * (mu0 + c * x1), x1 + v * (mu0 - 4.0 * c * x2)], axis=-1)

    def f_jac(x, u):
        # single point only
        x1, x2, v = x[0], x[1], u[0]
        fx = np.array([[c * v, 1.0], [1.0, -4.0 * c * v]])
        fu = np.array([[mu0 + c * x1], [mu0 - 4.0 * c * x2]])
        return fx, fu

    return f, f_jac


def two_state_benchmark(
    T: float = 0.1, mu0: float = 0.5, discretization: str = "exact", substeps: int = 10
) -> DiscreteModel:
    """The classic two-state unstable benchmark.

    Continuous dynamics::

        dx1/dt = x2 + u (mu0 + (1 - mu0) x1)
        dx2/dt = x1 + u (mu0 - 4 (1 - mu0) x2)

    ``discretization="euler"`` is the single forward-Euler step
    ``x + T f(x, u)``. ``"exact"`` holds ``u`` constant over the sample and
    integrates with ``substeps`` classical RK4 steps; its linearization is the
    zero-order-hold pair ``(expm(A T), int expm(A s) B ds)`` with eigenvalues
    ``exp(+-T)``.

    Both variants carry exact Jacobians of the discrete map (the RK4 one is
    obtained by propagating tangents through every stage).
    """
    if not T > 0:
        raise ModelError("sampling interval T must be positive")
    if not 0.0 < mu0 < 1.0:
        raise ModelError("mu0 must lie in (0, 1)")
    f, f_jac = _benchmark_rhs(mu0)
    params = {"T": float(T), "mu0": float(mu0), "discretization": discretization}

    if discretization == "euler":

        def dynamics(x, u):
            return x + T * f(x, u)

        def jac(x, u):
            fx, fu = f_jac(x, u)
            return np.eye(2) + T * fx, T * fu

        fused = None

    elif discretization == "exact":
        if substeps < 1:
            raise ModelError("substeps must be >= 1")
        h = T / substeps
        params["substeps"] = int(substeps)

        def dynamics(x, u):
            for _ in range(substeps):
                k1 = f(x, u)
                k2 = f(x + 0.5 * h * k1, u)
                k3 = f(x + 0.5 * h * k2, u)
                k4 = f(x + h * k3, u)
                x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            return x

        def jac(x, u):
            Jx = np.eye(2)
            Ju = np.zeros((2, 1))
            for _ in range(substeps):
                stages = []
                xs, dxs, dus = x, Jx, Ju
                for c in (0.0, 0.5, 0.5, 1.0):
                    if stages:
                        k_prev, dk_x, dk_u = stages[-1]
                        xs = x + c * h * k_prev
                        dxs = Jx + c * h * dk_x
                        dus = Ju + c * h * dk_u
                    k = f(xs, u)
                    fx, fu = f_jac(xs, u)
                    stages.append((k, fx @ dxs, fx @ dus + fu))
                w = (1.0, 2.0, 2.0, 1.0)
                x = x + (h / 6.0) * sum(wi * s[0] for wi, s in zip(w, stages))
                Jx = Jx + (h / 6.0) * sum(wi * s[1] for wi, s in zip(w, stages))
                Ju = Ju + (h / 6.0) * sum(wi * s[2] for wi, s in zip(w, stages))
            return Jx, Ju

        def fused(x, u):
            return _rk4_point(float(x[0]), float(x[1]), float(u[0]), mu0, h, substeps)

    else:
        raise ModelError(f"unknown discretization {discretization!r}; use 'exact' or 'euler'")

    return DiscreteModel(
        n_x=2,
        n_u=1,
        dynamics=dynamics,
        analytic_jacobians=jac,
        name="two_state",
        params=params,
        step_with_jacobians=fused,
    )


def _rk4_point(x1, x2, v, mu0, h, substeps):
    """Scalar RK4 of the benchmark with tangents; same numbers as the array path, much less overhead."""
    c = 1.0 - mu0
    # J = [[a, b], [d, e]] (dx/dx0), g = [g1, g2] (dx/du)
    a, b, d, e, g1, g2 = 1.0, 0.0, 0.0, 1.0, 0.0, 0.0
    fx11, fx22 = c * v, -4.0 * c * v
    for _ in range(substeps):
        sx1 = sx2 = 0.0
        sa = sb = sd = se = sg1 = sg2 = 0.0
        k1 = k2 = 0.0
        ka = kb = kd = ke = kg1 = kg2 = 0.0
        for cw, w in ((0.0, 1.0), (0.5, 2.0), (0.5, 2.0), (1.0, 1.0)):
            t = cw * h
            y1, y2 = x1 + t * k1, x2 + t * k2
            ya, yb, yd, ye = a + t * ka, b + t * kb, d + t * kd, e + t * ke
            yg1, yg2 = g1 + t * kg1, g2 + t * kg2
            k1 = y2 + v * (mu0 + c * y1)
            k2 = y1 + v * (mu0 - 4.0 * c * y2)
            ka, kb = fx11 * ya + yd, fx11 * yb + ye
            kd, ke = ya + fx22 * yd, yb + fx22 * ye
            kg1 = fx11 * yg1 + yg2 + mu0 + c * y1
            kg2 = yg1 + fx22 * yg2 + mu0 - 4.0 * c * y2
            sx1 += w * k1
            sx2 += w * k2
            sa += w * ka
            sb += w * kb
            sd += w * kd
            se += w * ke
            sg1 += w * kg1
            sg2 += w * kg2
        s = h / 6.0
        x1, x2 = x1 + s * sx1, x2 + s * sx2
        a, b, d, e = a + s * sa, b + s * sb, d + s * sd, e + s * se
        g1, g2 = g1 + s * sg1, g2 + s * sg2
    return np.array([x1, x2]), np.array([[a, b], [d, e]]), np.array([[g1], [g2]])


MODELS: dict[str, Callable[..., DiscreteModel]] = {
    "two_state": two_state_benchmark,
}


def get_model(name: str, **params) -> DiscreteModel:
    try:
        factory = MODELS[name]
    except KeyError:
        raise ModelError(f"unknown model {name!r}; registered: {sorted(MODELS)}") from None
    return factory(**params)
