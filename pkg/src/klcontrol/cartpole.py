"""Frictionless cart-pole, Euler-discretized.

State ``(x̄, x̄_dot, θ, θ_dot)`` with ``θ = 0`` upright; θ is never wrapped.
The input is the horizontal force on the cart.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

from .core import CostSchedule, DomainError, DynamicsModel, NoiseModel

DEFAULT_Q = (7.0, 2.5, 7.0, 2.5)
DEFAULT_X0 = (2.0, 0.0, 0.5, 0.0)
DEFAULT_SIGMA = 5.0
DEFAULT_HORIZON = 60


@dataclass(frozen=True)
class CartPoleParams:
    M: float = 1.0    # cart mass [kg]
    m: float = 0.1    # point mass [kg]
    L: float = 1.0    # rod length [m]
    g: float = 9.8    # [m/s^2]
    tau: float = 0.05  # Euler step [s]

    def __post_init__(self):
        for name in ("M", "m", "L", "g", "tau"):
            if not getattr(self, name) > 0:
                raise DomainError(f"cart-pole parameter {name} must be positive")


def accelerations(p: CartPoleParams, theta, theta_dot, u):
    """Cart and pole accelerations ``(h1, h2)``."""
    s, c = np.sin(theta), np.cos(theta)
    h1 = (-p.m * p.L * theta_dot**2 * s + p.m * p.g * s * c + u) / (p.M + p.m * s**2)
    h2 = (h1 * c + p.g * s) / p.L
    return h1, h2


@nb.njit(cache=True, nogil=True)
def _euler_kernel(X, U, M, m, L, g, tau, out):
    for i in range(X.shape[0]):
        pos = X[i, 0]
        vel = X[i, 1]
        th = X[i, 2]
        om = X[i, 3]
        s = np.sin(th)
        c = np.cos(th)
        h1 = (-m * L * om * om * s + m * g * s * c + U[i]) / (M + m * s * s)
        h2 = (h1 * c + g * s) / L
        out[i, 0] = pos + tau * vel
        out[i, 1] = vel + tau * h1
        out[i, 2] = th + tau * om
        out[i, 3] = om + tau * h2


@nb.njit(cache=True, nogil=True)
def _cost_kernel(X, q0, q1, q2, q3, out):
    for i in range(X.shape[0]):
        out[i] = q0 * abs(X[i, 0]) + q1 * abs(X[i, 1]) + q2 * abs(X[i, 2]) + q3 * abs(X[i, 3])


def euler_step(p: CartPoleParams, state, u) -> np.ndarray:
    """One Euler step on states ``(..., 4)`` with forces ``(..., 1)`` or ``(...)``."""
    state = np.asarray(state, dtype=float)
    u = np.asarray(u, dtype=float)
    if u.ndim and u.shape[-1] == 1 and u.ndim == state.ndim:
        u = u[..., 0]
    shape = np.broadcast_shapes(state.shape[:-1], u.shape)
    X = np.ascontiguousarray(np.broadcast_to(state, shape + (4,))).reshape(-1, 4)
    U = np.ascontiguousarray(np.broadcast_to(u, shape)).reshape(-1)
    out = np.empty_like(X)
    _euler_kernel(X, U, p.M, p.m, p.L, p.g, p.tau, out)
    return out.reshape(shape + (4,))


def stage_cost(q, state) -> np.ndarray:
    """``q1|x̄| + q2|x̄_dot| + q3|θ| + q4|θ_dot|`` over states ``(..., 4)``."""
    state = np.asarray(state, dtype=float)
    X = np.ascontiguousarray(state).reshape(-1, 4)
    out = np.empty(X.shape[0])
    _cost_kernel(X, float(q[0]), float(q[1]), float(q[2]), float(q[3]), out)
    return out.reshape(state.shape[:-1])


def dynamics(p: CartPoleParams | None = None) -> DynamicsModel:
    p = CartPoleParams() if p is None else p
    return DynamicsModel(4, 1, lambda x, u: euler_step(p, x, u), name="cart-pole")


def costs(q=DEFAULT_Q, horizon: int = DEFAULT_HORIZON) -> CostSchedule:
    q = tuple(float(v) for v in q)
    if len(q) != 4:
        raise ValueError("need four cost weights")
    return CostSchedule.stationary(lambda x: stage_cost(q, x), horizon)


def action_grid(step: float = 2.0, count: int = 10) -> np.ndarray:
    """Forces ``{step * i : i = -count..count}``."""
    return step * np.arange(-count, count + 1, dtype=float)


def default_noise(sigma: float = DEFAULT_SIGMA, support=None) -> NoiseModel:
    from .discrete import discretized_gaussian_pmf

    return discretized_gaussian_pmf(action_grid() if support is None else support, sigma)
