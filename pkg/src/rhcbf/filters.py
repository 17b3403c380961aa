"""Min-norm safety filters built on a barrier.

Flow constraint at (z, t), for an input-independent error bound:

    <grad h, f + g u> - |grad h| Delta_c + kappa h >= 0   <=>   a . u >= b
    a = g^T grad h,   b = -kappa h - <grad h, f> + |grad h| Delta_c

The filter returns the point of {a . u >= b} within the input box closest to
the nominal input.  By the KKT conditions that point is clip(u_nom + nu a)
for the smallest nu >= 0 meeting the constraint; a . clip(u_nom + nu a) is
piecewise linear and non-decreasing in nu, so nu is found exactly from its
breakpoints.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .hybrid import ContractError, HybridArc, HybridSystem, InputBox, simulate

SLACK_TOL = 1e-9


@dataclass
class FilterResult:
    u_applied: np.ndarray
    constraint_slack: float
    feasible: bool
    modified: bool


def halfspace_box_projection(u_nom, a, b, lower, upper, tol: float = SLACK_TOL):
    """Closest point to ``u_nom`` in ``{a.u >= b} ∩ [lower, upper]``.

    Returns ``(u, feasible)``.  When the intersection is empty the box point
    maximizing ``a.u`` is returned (coordinates with ``a_k = 0`` keep the
    clipped nominal value).
    """
    u_nom = np.asarray(u_nom, dtype=float)
    a = np.asarray(a, dtype=float)
    lo = np.asarray(lower, dtype=float)
    hi = np.asarray(upper, dtype=float)
    u0 = np.clip(u_nom, lo, hi)
    if a @ u0 >= b:
        return u0, True
    best = np.where(a > 0, hi, np.where(a < 0, lo, u0))
    if a @ best < b - tol:
        return best, False
    # breakpoints where a coordinate of u_nom + nu a hits a bound
    nz = a != 0
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        t_hi = np.where(nz, (np.where(a > 0, hi, lo) - u_nom) / a, np.inf)
        t_lo = np.where(nz, (np.where(a > 0, lo, hi) - u_nom) / a, -np.inf)
    knots = np.unique(np.concatenate([[0.0], t_hi[np.isfinite(t_hi)], t_lo[np.isfinite(t_lo)]]))
    knots = knots[knots >= 0]
    phi = lambda nu: a @ np.clip(u_nom + nu * a, lo, hi)  # noqa: E731
    prev_nu, prev_val = knots[0], phi(knots[0])
    for nu in knots[1:]:
        val = phi(nu)
        if val >= b:
            # linear between knots
            nu_star = prev_nu + (b - prev_val) * (nu - prev_nu) / (val - prev_val) if val > prev_val else nu
            u = np.clip(u_nom + nu_star * a, lo, hi)
            return u, True
        prev_nu, prev_val = nu, val
    # beyond the last knot all nonzero-a coordinates are saturated
    return best, bool(a @ best >= b - tol)


def flow_constraint(net, sys: HybridSystem, z, t: float, kappa: float = 1.0):
    """``(a, b)`` of the flow constraint ``a . u >= b`` at ``(z, t)``."""
    h, g_h = net.value_and_grad(np.asarray(z, dtype=float))
    f, G = sys.flow_affine(z, t)
    delta = sys.err_flow(z, t, np.zeros(sys.m_c))
    a = G.T @ g_h
    b = -kappa * h - g_h @ f + np.linalg.norm(g_h) * delta
    return a, b


class FlowFilter:
    """Min-norm robust flow filter for a fixed (net, system, kappa)."""

    def __init__(self, net, sys: HybridSystem, kappa: float = 1.0):
        if sys.err_flow_depends_on_input:
            raise ContractError("runtime filtering needs an input-independent flow error bound")
        self.net, self.sys, self.kappa = net, sys, kappa

    def __call__(self, z, t, u_nom) -> FilterResult:
        a, b = flow_constraint(self.net, self.sys, z, t, self.kappa)
        box = self.sys.input_box_c
        u_nom = np.asarray(u_nom, dtype=float).reshape(self.sys.m_c)
        u, feasible = halfspace_box_projection(u_nom, a, b, box.lower, box.upper)
        slack = float(a @ u - b)
        if feasible and slack < -SLACK_TOL:
            feasible = False
        return FilterResult(u, slack, feasible, bool(not np.array_equal(u, u_nom)))


def flow_filter(net, sys: HybridSystem, z, t: float, u_nom, kappa: float = 1.0) -> FilterResult:
    return FlowFilter(net, sys, kappa)(z, t, u_nom)


def jump_filter(net, sys: HybridSystem, z, t: float, candidates: Optional[Sequence] = None, lip_bar: float = 10.0) -> FilterResult:
    """Pick the jump input with the largest robust jump margin."""
    if candidates is None:
        candidates = [np.zeros(sys.m_d)]
    if len(candidates) == 0:
        raise ValueError("candidates must be nonempty")
    best_u, best_q = None, -np.inf
    for u in candidates:
        u = np.asarray(u, dtype=float).reshape(sys.m_d)
        post = np.asarray(sys.est_jump(z, t, u), dtype=float)
        q = float(net.forward(post) - lip_bar * sys.err_jump(z, t, u))
        if q > best_q:
            best_u, best_q = u, q
    return FilterResult(best_u, best_q, bool(best_q >= 0), False)


def batch_halfspace_box_projection(U_nom, A, b, lower, upper, tol: float = SLACK_TOL):
    """Row-wise :func:`halfspace_box_projection`; returns ``(U, feasible)``."""
    U_nom = np.asarray(U_nom, dtype=float)
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    lo = np.broadcast_to(np.asarray(lower, dtype=float), U_nom.shape)
    hi = np.broadcast_to(np.asarray(upper, dtype=float), U_nom.shape)
    U0 = np.clip(U_nom, lo, hi)
    out = U0.copy()
    feas = np.einsum("nm,nm->n", A, U0) >= b
    todo = np.flatnonzero(~feas)
    if todo.size == 0:
        return out, feas
    un, a, bb, l, u = U_nom[todo], A[todo], b[todo], lo[todo], hi[todo]
    best = np.where(a > 0, u, np.where(a < 0, l, np.clip(un, l, u)))
    best_val = np.einsum("nm,nm->n", a, best)
    nz = a != 0
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        t1 = np.where(nz, (np.where(a > 0, u, l) - un) / a, 0.0)
        t2 = np.where(nz, (np.where(a > 0, l, u) - un) / a, 0.0)
    knots = np.sort(np.maximum(np.concatenate([np.zeros((len(todo), 1)), t1, t2], axis=1), 0.0), axis=1)
    P = np.clip(un[:, None, :] + knots[:, :, None] * a[:, None, :], l[:, None, :], u[:, None, :])
    phi = np.einsum("nkm,nm->nk", P, a)
    reach = phi >= bb[:, None]
    k = np.argmax(reach, axis=1)
    hit = reach[np.arange(len(todo)), k] & (k > 0)
    rows = np.arange(len(todo))
    k0 = np.maximum(k - 1, 0)
    p0, p1 = phi[rows, k0], phi[rows, k]
    n0, n1 = knots[rows, k0], knots[rows, k]
    with np.errstate(divide="ignore", invalid="ignore"):
        nu = np.where(p1 > p0, n0 + (bb - p0) * (n1 - n0) / (p1 - p0), n1)
    proj = np.clip(un + nu[:, None] * a, l, u)
    res = np.where(hit[:, None], proj, best)
    out[todo] = res
    feas[todo] = hit | (best_val >= bb - tol)
    return out, feas


def batch_flow_filter(h, grad_h, f, G, delta, u_nom, lower, upper, kappa: float = 1.0):
    """Vectorized filter for many states (same semantics as :func:`halfspace_box_projection`).

    ``grad_h`` (N, n), ``f`` (N, n), ``G`` (N, n, m), ``u_nom`` (N, m).
    Returns ``(u, feasible, modified)``.
    """
    a = np.einsum("nim,ni->nm", G, grad_h)
    b = -kappa * h - np.einsum("ni,ni->n", grad_h, f) + np.linalg.norm(grad_h, axis=1) * delta
    out, feas = batch_halfspace_box_projection(u_nom, a, b, lower, upper)
    return out, feas, np.any(out != u_nom, axis=1)


# --------------------------------------------------------------------------
# closed loop


@dataclass
class ViolationLog:
    rows: list

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "j", "h", "slack", "modified"])
            for r in self.rows:
                w.writerow([repr(float(r[0])), r[1], repr(float(r[2])), repr(float(r[3])), int(r[4])])

    @property
    def min_h(self) -> float:
        return min((r[2] for r in self.rows), default=float("nan"))

    @property
    def negative_events(self) -> list:
        return [r for r in self.rows if r[2] < 0]


def closed_loop(net, sys: HybridSystem, nominal: Callable, z0, disturbance=None, horizon=(10.0, 100),
                step: float = 1e-3, kappa: float = 1.0, lip_bar: float = 10.0, seed: Optional[int] = None,
                rng=None, jump_candidates: Optional[Callable] = None):
    """Simulate with the flow/jump filters wrapped around ``nominal(z, t)``.

    The log has one row per filter call (flow) and per jump with ``h`` at the
    current state; ``h < 0`` rows are safety violations.
    """
    z0 = np.asarray(z0, dtype=float)
    if net.forward(z0) < 0:
        raise ContractError("initial state must satisfy h(z0) >= 0")
    filt = FlowFilter(net, sys, kappa)
    rows = []
    current_j = [0]

    def flow_law(z, t):
        res = filt(z, t, nominal(z, t))
        rows.append((t, current_j[0], net.forward(z), res.constraint_slack, res.modified))
        return res.u_applied

    def jump_law(z, t):
        cands = jump_candidates(z, t) if jump_candidates is not None else None
        res = jump_filter(net, sys, z, t, cands, lip_bar)
        return res.u_applied

    def on_jump(rec):
        current_j[0] = rec.j + 1
        rows.append((rec.t, rec.j + 1, net.forward(rec.z_after), np.nan, False))

    arc = simulate(sys, z0, (flow_law, jump_law), disturbance, horizon=horizon, step=step, seed=seed, rng=rng, on_jump=on_jump)
    # include the final state
    fz = arc.final_state
    if fz is not None:
        last_t = arc.segments[-1].t[-1] if arc.segments else 0.0
        rows.append((last_t, arc.n_jumps, net.forward(fz), np.nan, False))
    return arc, ViolationLog(rows)


@dataclass
class BatchLoopResult:
    min_h: np.ndarray  # per initial condition
    first_negative_t: np.ndarray  # nan when h stayed non-negative
    infeasible_calls: int
    final_z: np.ndarray

    @property
    def n_negative(self) -> int:
        return int(np.sum(np.isfinite(self.first_negative_t)))


def closed_loop_batch(net, flow_affine_batch: Callable, delta: float, nominal: Callable, Z0, lower, upper,
                      disturbance: str = "worst", t_max: float = 10.0, step: float = 1e-3, kappa: float = 1.0,
                      rng=None) -> BatchLoopResult:
    """Filtered closed loop for many initial conditions of a flow-only control-affine plant.

    ``flow_affine_batch(Z) -> (F (N,n), G (N,n,m))``; ``nominal(Z, t) -> (N,m)``.
    The filter is applied once per step (zero-order hold) and RK4 integrates
    ``F + G u + w`` where ``w`` is ``-delta grad h/|grad h|`` at every stage
    (``"worst"``), a uniform direction on the sphere of radius ``delta``
    redrawn each step (``"sphere"``) or zero (``"none"``).
    """
    if disturbance not in ("worst", "sphere", "none"):
        raise ValueError("disturbance must be 'worst', 'sphere' or 'none'")
    Z = np.array(Z0, dtype=float, copy=True)
    if np.any(net.forward(Z) < 0):
        raise ContractError("initial states must satisfy h(z0) >= 0")
    rng = np.random.default_rng(0) if rng is None else rng
    N, n = Z.shape
    n_steps = int(round(t_max / step))
    min_h = net.forward(Z).astype(float)
    first_neg = np.full(N, np.nan)
    infeasible = 0

    def field(X, U, W):
        F, G = flow_affine_batch(X)
        out = F + np.einsum("nim,nm->ni", G, U)
        if disturbance == "worst":
            g = net.grad_z(X)
            nrm = np.linalg.norm(g, axis=1, keepdims=True)
            out = out - delta * np.divide(g, nrm, out=np.zeros_like(g), where=nrm > 0)
        elif disturbance == "sphere":
            out = out + W
        return out

    for k in range(n_steps):
        t = k * step
        h, g = net.value_and_grad(Z)
        F, G = flow_affine_batch(Z)
        U, feas, _ = batch_flow_filter(h, g, F, G, delta, nominal(Z, t), lower, upper, kappa)
        infeasible += int(np.sum(~feas))
        W = None
        if disturbance == "sphere":
            d = rng.standard_normal((N, n))
            W = delta * d / np.linalg.norm(d, axis=1, keepdims=True)
        k1 = field(Z, U, W)
        k2 = field(Z + 0.5 * step * k1, U, W)
        k3 = field(Z + 0.5 * step * k2, U, W)
        k4 = field(Z + step * k3, U, W)
        Z = Z + step / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        h = net.forward(Z)
        min_h = np.minimum(min_h, h)
        newly = (h < 0) & np.isnan(first_neg)
        first_neg[newly] = t + step
    return BatchLoopResult(min_h, first_neg, infeasible, Z)
