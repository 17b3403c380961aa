"""Robust margins, the empirical Lagrangian and the primal-dual iteration.

Flow margin   q_c = <grad h, W_c> - |grad h| Delta_c + kappa h
Jump margin   q_d = h(W_d) - lip_bar Delta_d

The Lagrangian averages lambda-weighted hinge penalties over four sample
families (safe points, ring points, flow samples, jump samples) and adds
weight decay.  Each epoch takes one gradient step on the parameters and one
projected ascent step on the multipliers, evaluated at the new parameters.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .datasets import DatasetBundle
from .hybrid import HybridSystem
from .net import BarrierNet

FAMILIES = ("safe", "unsafe", "dyn_c", "dyn_d")


class TrainingDivergence(FloatingPointError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace


@dataclass(frozen=True)
class Hyperparams:
    gamma_safe: float = 0.1
    gamma_unsafe: float = 0.1
    gamma_dyn_c: float = 0.05
    gamma_dyn_d: float = 0.05
    lip_bar: float = 10.0
    alpha_gain: float = 1.0
    weight_decay: float = 1e-4
    epochs: int = 30000
    eta: float = 0.005
    beta: float = 0.05
    seed: int = 0
    layer_dims: tuple = (4, 32, 16, 1)

    def __post_init__(self):
        for name in ("gamma_safe", "gamma_unsafe", "gamma_dyn_c", "gamma_dyn_d", "lip_bar", "alpha_gain", "beta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.eta < 0:
            raise ValueError("eta must be non-negative")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))


@dataclass
class DualVars:
    lambda_safe: np.ndarray
    lambda_unsafe: np.ndarray
    lambda_dyn_c: np.ndarray
    lambda_dyn_d: np.ndarray

    @classmethod
    def ones(cls, n_safe, n_unsafe, n_dyn_c, n_dyn_d) -> "DualVars":
        return cls(np.ones(n_safe), np.ones(n_unsafe), np.ones(n_dyn_c), np.ones(n_dyn_d))

    def get(self, fam: str) -> np.ndarray:
        return getattr(self, "lambda_" + fam)

    def scaled(self, c: float) -> "DualVars":
        return DualVars(*(c * self.get(f) for f in FAMILIES))


# --------------------------------------------------------------------------
# margins


def q_c(net, sys: HybridSystem, z, u_c, t: float = 0.0, kappa: float = 1.0) -> float:
    """Robust flow margin at one sample."""
    z = np.asarray(z, dtype=float)
    u_c = np.asarray(u_c, dtype=float)
    h, g = net.value_and_grad(z)
    w = np.asarray(sys.est_flow(z, t, u_c), dtype=float)
    return float(g @ w - np.linalg.norm(g) * sys.err_flow(z, t, u_c) + kappa * h)


def q_d(net, sys: HybridSystem, z, u_d, t: float = 0.0, lip_bar: float = 10.0) -> float:
    """Robust jump margin at one sample, with ``lip_bar`` standing in for the local constant."""
    z = np.asarray(z, dtype=float)
    u_d = np.asarray(u_d, dtype=float).reshape(sys.m_d)
    post = np.asarray(sys.est_jump(z, t, u_d), dtype=float)
    return float(net.forward(post) - lip_bar * sys.err_jump(z, t, u_d))


def q_c_batch(net, Z, W, delta, kappa: float):
    h, g = net.value_and_grad(Z)
    return np.einsum("ij,ij->i", g, W) - np.linalg.norm(g, axis=1) * delta + kappa * h


def q_d_batch(net, post, delta, lip_bar: float):
    return net.forward(post) - lip_bar * delta


# --------------------------------------------------------------------------
# training data (dynamics evaluated once; they do not depend on the parameters)


@dataclass
class TrainingData:
    safe_z: np.ndarray
    ring_z: np.ndarray
    flow_z: np.ndarray
    flow_w: np.ndarray  # estimated flow at each sample
    flow_delta: np.ndarray
    jump_post: np.ndarray  # estimated post-jump state
    jump_delta: np.ndarray

    @classmethod
    def build(cls, sys: HybridSystem, bundle: DatasetBundle) -> "TrainingData":
        fz, fu, ft = bundle.flow_z, bundle.flow_u, bundle.flow_t
        W = np.array([sys.est_flow(z, t, u) for z, u, t in zip(fz, fu, ft)]).reshape(-1, bundle.n_z)
        dc = np.array([sys.err_flow(z, t, u) for z, u, t in zip(fz, fu, ft)], dtype=float)
        jz, ju, jt = bundle.jump_z, bundle.jump_u, bundle.jump_t
        P = np.array([sys.est_jump(z, t, u) for z, u, t in zip(jz, ju, jt)]).reshape(-1, bundle.n_z)
        dd = np.array([sys.err_jump(z, t, u) for z, u, t in zip(jz, ju, jt)], dtype=float)
        if np.any(dc < 0) or np.any(dd < 0):
            raise ValueError("error bounds must be non-negative")
        sf, sj = bundle.safe_points()
        return cls(np.vstack([sf, sj]), bundle.ring_z.copy(), fz.copy(), W, dc, P, dd)

    def sizes(self):
        return len(self.safe_z), len(self.ring_z), len(self.flow_z), len(self.jump_post)


def _hinge_mean(lam, r):
    if r.size == 0:
        return 0.0
    return float(np.mean(lam * np.maximum(r, 0.0)))


def residuals(net, data: TrainingData, hp: Hyperparams) -> dict:
    """Pre-hinge constraint residuals (positive means violated)."""
    out = {}
    out["safe"] = hp.gamma_safe - net.forward(data.safe_z) if len(data.safe_z) else np.zeros(0)
    out["unsafe"] = net.forward(data.ring_z) + hp.gamma_unsafe if len(data.ring_z) else np.zeros(0)
    if len(data.flow_z):
        out["dyn_c"] = hp.gamma_dyn_c - q_c_batch(net, data.flow_z, data.flow_w, data.flow_delta, hp.alpha_gain)
    else:
        out["dyn_c"] = np.zeros(0)
    if len(data.jump_post):
        out["dyn_d"] = hp.gamma_dyn_d - q_d_batch(net, data.jump_post, data.jump_delta, hp.lip_bar)
    else:
        out["dyn_d"] = np.zeros(0)
    return out


def lagrangian(net, data: TrainingData, hp: Hyperparams, lam: DualVars):
    """Return ``(L, residuals)``."""
    res = residuals(net, data, hp)
    theta = net.get_flat()
    L = hp.weight_decay * float(theta @ theta)
    for f in FAMILIES:
        L += _hinge_mean(lam.get(f), res[f])
    return L, res


def lagrangian_grad(net, data: TrainingData, hp: Hyperparams, lam: DualVars, res: Optional[dict] = None) -> np.ndarray:
    """Exact parameter gradient of the Lagrangian (hinge slope 0 at zero residual)."""
    if res is None:
        res = residuals(net, data, hp)
    n = data.flow_z.shape[1] if data.flow_z.size else net.n_in
    Zs, C, V, CN = [], [], [], []

    def weights(fam, N):
        return np.where(res[fam] > 0, lam.get(fam) / N, 0.0) if N else np.zeros(0)

    ns, nr, nc, nd = data.sizes()
    w = weights("safe", ns)
    Zs.append(data.safe_z), C.append(-w), V.append(np.zeros((ns, n))), CN.append(np.zeros(ns))
    w = weights("unsafe", nr)
    Zs.append(data.ring_z), C.append(w), V.append(np.zeros((nr, n))), CN.append(np.zeros(nr))
    w = weights("dyn_c", nc)
    Zs.append(data.flow_z), C.append(-w * hp.alpha_gain), V.append(-w[:, None] * data.flow_w), CN.append(w * data.flow_delta)
    w = weights("dyn_d", nd)
    Zs.append(data.jump_post), C.append(-w), V.append(np.zeros((nd, n))), CN.append(np.zeros(nd))

    Z = np.vstack(Zs)
    c = np.concatenate(C)
    active = (c != 0) | np.any(np.vstack(V) != 0, axis=1) | (np.concatenate(CN) != 0)
    grad = 2.0 * hp.weight_decay * net.get_flat()
    if np.any(active):
        grad = grad + net.param_grad(Z[active], c[active], np.vstack(V)[active], np.concatenate(CN)[active])
    return grad


def primal_step(net, data: TrainingData, hp: Hyperparams, lam: DualVars, res: Optional[dict] = None) -> np.ndarray:
    """One full-batch gradient step; updates ``net`` in place and returns the new parameters."""
    g = lagrangian_grad(net, data, hp, lam, res)
    if not np.all(np.isfinite(g)):
        raise TrainingDivergence(f"non-finite gradient (|theta|={np.linalg.norm(net.get_flat()):.3g})")
    theta = net.get_flat() - hp.eta * g
    net.set_flat(theta)
    return theta


def dual_step(res: dict, lam: DualVars, beta: float) -> DualVars:
    """Projected ascent ``lambda <- [lambda + beta r]_+`` per sample."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    return DualVars(*(np.maximum(lam.get(f) + beta * res[f], 0.0) for f in FAMILIES))


# --------------------------------------------------------------------------
# the loop


@dataclass
class TrainingTrace:
    rows: list = field(default_factory=list)

    COLUMNS = ("epoch", "L", "viol_safe", "viol_unsafe", "viol_dyn_c", "viol_dyn_d", "theta_norm",
               "lam_max_safe", "lam_max_unsafe", "lam_max_dyn_c", "lam_max_dyn_d")

    def record(self, epoch, L, res, theta, lam):
        row = [epoch, L]
        row += [float(np.mean(res[f] > 0)) if res[f].size else 0.0 for f in FAMILIES]
        row.append(float(np.linalg.norm(theta)))
        row += [float(lam.get(f).max()) if lam.get(f).size else 0.0 for f in FAMILIES]
        self.rows.append(row)

    def final_violations(self) -> dict:
        if not self.rows:
            return {f: float("nan") for f in FAMILIES}
        return dict(zip(FAMILIES, self.rows[-1][2:6]))

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([r[0]] + [repr(float(x)) for x in r[1:]])


def violation_counts(res: dict) -> int:
    return int(sum(int(np.sum(res[f] > 0)) for f in FAMILIES))


def train(
    sys: HybridSystem,
    bundle: DatasetBundle,
    hp: Hyperparams,
    net: Optional[BarrierNet] = None,
    data: Optional[TrainingData] = None,
    callback: Optional[Callable[[int, float, dict], None]] = None,
):
    """Primal-dual training.

    Returns ``(final_net, trace, best_net, duals)``; ``best_net`` minimizes the
    number of violated constraints (ties go to the later epoch).
    """
    data = TrainingData.build(sys, bundle) if data is None else data
    if len(data.flow_z) == 0:
        raise ValueError("training needs at least one flow sample")
    net = BarrierNet.init(hp.layer_dims, seed=hp.seed) if net is None else net.copy()
    if net.n_in != bundle.n_z:
        raise ValueError(f"network input {net.n_in} != state dimension {bundle.n_z}")
    lam = DualVars.ones(*data.sizes())
    trace = TrainingTrace()
    best, best_count = net.copy(), None
    for epoch in range(hp.epochs + 1):
        L, res = lagrangian(net, data, hp, lam)
        if not math.isfinite(L):
            raise TrainingDivergence(f"non-finite Lagrangian at epoch {epoch}", trace)
        if epoch > 0:
            # ascent on the multipliers at the freshly updated parameters
            lam = dual_step(res, lam, hp.beta)
            L = hp.weight_decay * float(net.get_flat() @ net.get_flat()) + sum(_hinge_mean(lam.get(f), res[f]) for f in FAMILIES)
        trace.record(epoch, L, res, net.get_flat(), lam)
        count = violation_counts(res)
        if best_count is None or count <= best_count:
            best, best_count = net.copy(), count
        if callback is not None:
            callback(epoch, L, res)
        if epoch == hp.epochs:
            break
        primal_step(net, data, hp, lam, res)
    net.metadata.update({"seed": hp.seed, "epochs": hp.epochs})
    best.metadata.update({"seed": hp.seed, "best_violations": best_count})
    return net, trace, best, lam
