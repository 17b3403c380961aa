"""Small plants and closed-form barriers used as oracles.

* ``integrator_system``: ``z' = u`` in the plane, no jumps.
* ``reset_integrator_system``: the same flow on ``z_1 <= x_reset`` with a reset
  ``z+ = z * shrink`` once ``z_1`` reaches ``x_reset``.
* ``QuadraticBarrier``: ``h(z) = c (r^2 - |z|^2)``; ``LinearBarrier``: ``h = w.z + b``.
"""
from __future__ import annotations

import numpy as np

from .hybrid import HybridSystem, InputBox, guarded_sets


class QuadraticBarrier:
    def __init__(self, radius: float = 1.0, scale: float = 1.0):
        self.radius = radius
        self.scale = scale

    def forward(self, z):
        Z = np.asarray(z, dtype=float)
        h = self.scale * (self.radius**2 - np.sum(Z * Z, axis=-1))
        return float(h) if Z.ndim == 1 else h

    __call__ = forward

    def grad_z(self, z):
        return -2.0 * self.scale * np.asarray(z, dtype=float)

    def value_and_grad(self, z):
        return self.forward(z), self.grad_z(z)


class LinearBarrier:
    def __init__(self, w, b: float = 0.0):
        self.w = np.atleast_1d(np.asarray(w, dtype=float))
        self.b = b

    def forward(self, z):
        Z = np.asarray(z, dtype=float)
        h = Z @ self.w + self.b
        return float(h) if Z.ndim <= 1 else h

    __call__ = forward

    def grad_z(self, z):
        Z = np.asarray(z, dtype=float)
        return np.broadcast_to(self.w, Z.shape if Z.ndim > 1 else self.w.shape).copy()

    def value_and_grad(self, z):
        return self.forward(z), self.grad_z(z)

    def global_lipschitz_bound(self) -> float:
        return float(np.linalg.norm(self.w))


def integrator_system(dim: int = 2, delta_c: float = 0.05, u_max: float = 1.0) -> HybridSystem:
    return HybridSystem(
        n_z=dim,
        m_c=dim,
        m_d=0,
        flow_set=lambda z: True,
        jump_set=lambda z: False,
        guard=None,
        est_flow=lambda z, t, u: np.asarray(u, dtype=float).copy(),
        est_jump=lambda z, t, u: np.asarray(z, dtype=float).copy(),
        err_flow=lambda z, t, u: delta_c,
        input_box_c=InputBox.symmetric(u_max, dim),
        input_box_d=InputBox.empty(),
        flow_lipschitz=0.0,
        err_flow_lipschitz=0.0,
        jump_lipschitz=1.0,
        name="integrator",
    )


def reset_integrator_system(delta_c: float = 0.05, delta_d: float = 0.005, x_reset: float = 0.9,
                            shrink: float = 0.5, u_max: float = 1.0, jump_width: float = 1e-6) -> HybridSystem:
    """Planar integrator that is pulled back toward the origin when ``z_1`` hits ``x_reset``.

    The flow set is ``z_1 <= x_reset``; the jump set is the thin strip
    ``x_reset <= z_1 <= x_reset + jump_width``, so states beyond the reset
    line are outside the domain.
    """
    guard = lambda z: x_reset - z[0]  # noqa: E731
    C, _ = guarded_sets(guard)
    D = lambda z: -jump_width <= guard(z) <= 0.0  # noqa: E731
    return HybridSystem(
        n_z=2,
        m_c=2,
        m_d=0,
        flow_set=C,
        jump_set=D,
        guard=guard,
        est_flow=lambda z, t, u: np.asarray(u, dtype=float).copy(),
        est_jump=lambda z, t, u: shrink * np.asarray(z, dtype=float),
        err_flow=lambda z, t, u: delta_c,
        err_jump=lambda z, t, u: delta_d,
        input_box_c=InputBox.symmetric(u_max, 2),
        input_box_d=InputBox.empty(),
        flow_lipschitz=0.0,
        err_flow_lipschitz=0.0,
        jump_lipschitz=shrink,
        err_jump_lipschitz=0.0,
        name="reset_integrator",
    )


def linear_expert(gain: float = 1.0, u_max: float = 1.0):
    """``u = clip(-gain z)`` as a ``(flow law, jump law)`` pair."""
    def law(z, t):
        return np.clip(-gain * np.asarray(z, dtype=float), -u_max, u_max)

    return (law, None)


def approach_expert(x_target: float = 1.0, gain: float = 1.0, gain_y: float = None, u_max: float = 1.0):
    """Drive ``z_1`` toward ``x_target`` (beyond the reset line) and ``z_2`` to zero.

    The approach slows down near the reset line so the flow reaches the guard
    at speed ``gain (x_target - x_reset)``.
    """
    gy = gain if gain_y is None else gain_y

    def law(z, t):
        z = np.asarray(z, dtype=float)
        return np.clip(np.array([gain * (x_target - z[0]), -gy * z[1]]), -u_max, u_max)

    return (law, None)


def disk_grid(spacing: float, radius: float = 1.0) -> np.ndarray:
    """Grid points with the given spacing inside the closed disk."""
    ax = np.arange(-radius, radius + 0.5 * spacing, spacing)
    X, Y = np.meshgrid(ax, ax, indexing="ij")
    P = np.column_stack([X.ravel(), Y.ravel()])
    return P[np.sum(P * P, axis=1) <= radius**2 + 1e-12]
