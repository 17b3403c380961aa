"""Post-hoc certification of a learned barrier.

Sound local bounds on a tanh network over a Euclidean ball come from interval
propagation: the first pre-activation is bounded exactly over the ball, later
layers by interval arithmetic; the slopes ``tanh'`` and curvatures ``tanh''``
are then maximized over each neuron's interval.  These give per-ball bounds
on ``|grad h|`` and on the Hessian norm, from which Lipschitz bounds of the
flow and jump margins follow.  Sampled maxima are reported next to every
bound as a looseness diagnostic.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .datasets import DatasetBundle, epsilon_net_radius
from .hybrid import HybridSystem
from .net import BarrierNet
from .train import Hyperparams, q_c_batch, q_d_batch

X_PEAK = math.atanh(1.0 / math.sqrt(3.0))  # argmax of |tanh''|
D2_PEAK = 4.0 / (3.0 * math.sqrt(3.0))


# --------------------------------------------------------------------------
# interval helpers


def _tanh_slope_range(lo, hi):
    """(min, max) of tanh' = 1 - tanh^2 over [lo, hi], elementwise."""
    s = lambda x: 1.0 - np.tanh(x) ** 2  # noqa: E731
    a, b = s(lo), s(hi)
    mx = np.where((lo <= 0) & (hi >= 0), 1.0, np.maximum(a, b))
    return np.minimum(a, b), mx


def _imul(a_lo, a_hi, b_lo, b_hi):
    p = np.stack([a_lo * b_lo, a_lo * b_hi, a_hi * b_lo, a_hi * b_hi])
    return p.min(axis=0), p.max(axis=0)


def _ilin(W, lo, hi):
    """Interval image of ``W x`` (batched rows of x)."""
    mid, rad = 0.5 * (lo + hi), 0.5 * (hi - lo)
    c = mid @ W.T
    r = rad @ np.abs(W).T
    return c - r, c + r


@dataclass
class BallBounds:
    value_lo: np.ndarray
    value_hi: np.ndarray
    grad: np.ndarray  # sup |grad h| over the ball
    hess: np.ndarray  # sup |Hessian|_2 over the ball
    grad_box: Optional[tuple] = None  # entrywise enclosure of grad h, (lo, hi) each (N, n)
    hess_box: Optional[tuple] = None  # entrywise enclosure of the Hessian, (lo, hi) each (N, n, n)

    def directional(self, v, kappa: float = 0.0) -> np.ndarray:
        """Sound ``sup |H(z) v + kappa grad h(z)|`` over each ball, for fixed vectors ``v`` (N, n)."""
        v = np.atleast_2d(np.asarray(v, dtype=float))
        if self.hess_box is None:
            return self.hess * np.linalg.norm(v, axis=1) + abs(kappa) * self.grad
        H_lo, H_hi = self.hess_box
        mid, rad = 0.5 * (H_lo + H_hi), 0.5 * (H_hi - H_lo)
        c = np.einsum("nij,nj->ni", mid, v)
        r = np.einsum("nij,nj->ni", rad, np.abs(v))
        g_lo, g_hi = self.grad_box
        lo = c - r + kappa * np.where(kappa >= 0, g_lo, g_hi)
        hi = c + r + kappa * np.where(kappa >= 0, g_hi, g_lo)
        box = np.linalg.norm(np.maximum(np.abs(lo), np.abs(hi)), axis=1)
        return np.minimum(box, self.hess * np.linalg.norm(v, axis=1) + abs(kappa) * self.grad)


def _tanh_curv_range(lo, hi):
    """(min, max) of tanh'' over [lo, hi], elementwise."""
    c = lambda x: -2.0 * np.tanh(x) * (1.0 - np.tanh(x) ** 2)  # noqa: E731
    a, b = c(lo), c(hi)
    mn, mx = np.minimum(a, b), np.maximum(a, b)
    mn = np.where((lo <= X_PEAK) & (hi >= X_PEAK), -D2_PEAK, mn)
    mx = np.where((lo <= -X_PEAK) & (hi >= -X_PEAK), D2_PEAK, mx)
    return mn, mx


def _imat(W, lo, hi):
    """Interval image of ``W @ X`` for interval matrices ``X`` of shape (N, k, n)."""
    mid, rad = 0.5 * (lo + hi), 0.5 * (hi - lo)
    c = np.einsum("ij,njk->nik", W, mid)
    r = np.einsum("ij,njk->nik", np.abs(W), rad)
    return c - r, c + r


def _abs_spectral(lo, hi):
    """Spectral norm bound for every matrix inside the interval matrix (batched)."""
    M = np.maximum(np.abs(lo), np.abs(hi))
    return np.linalg.norm(M, ord=2, axis=(-2, -1))


def ball_bounds(net: BarrierNet, centers, radius, chunk: int = 2048) -> BallBounds:
    """Sound bounds of ``h``, ``|grad h|`` and ``|hess h|`` over ``B(c_i, r_i)``.

    Intervals of the hidden pre-activations are propagated forward (the first
    layer exactly over the ball), then intervals of the layer Jacobians and of
    the backpropagated sensitivities.  The gradient and the Hessian
    ``sum_k J_k^T diag(tanh''(p_k) g_k) J_k`` are enclosed entrywise; their
    norms are bounded through the entrywise magnitudes.  Each bound is also
    capped by a cruder norm-product bound and the gradient additionally by
    ``|grad h(c)| + r * hess``.
    """
    C = np.atleast_2d(np.asarray(centers, dtype=float))
    N = C.shape[0]
    r = np.broadcast_to(np.asarray(radius, dtype=float), (N,))
    if N > chunk:
        parts = [ball_bounds(net, C[i : i + chunk], r[i : i + chunk], chunk) for i in range(0, N, chunk)]
        cat = lambda f: np.concatenate([getattr(p, f) for p in parts])  # noqa: E731
        box = lambda f, k: np.concatenate([getattr(p, f)[k] for p in parts])  # noqa: E731
        return BallBounds(cat("value_lo"), cat("value_hi"), cat("grad"), cat("hess"),
                          (box("grad_box", 0), box("grad_box", 1)), (box("hess_box", 0), box("hess_box", 1)))
    Ws, bs = net.weights, net.biases
    L = len(Ws)
    n = C.shape[1]
    W_norms = [float(np.linalg.norm(W, 2)) for W in Ws]
    if L == 1:
        g = np.full(N, W_norms[0])
        v = C @ Ws[0][0] + bs[0][0]
        G = np.broadcast_to(Ws[0][0], (N, n)).copy()
        return BallBounds(v - g * r, v + g * r, g, np.zeros(N), (G, G.copy()), (np.zeros((N, n, n)), np.zeros((N, n, n))))

    # forward intervals of pre-activations p_1 .. p_{L-1}
    p_lo, p_hi = [], []
    c1 = C @ Ws[0].T + bs[0]
    r1 = r[:, None] * np.linalg.norm(Ws[0], axis=1)[None, :]
    lo, hi = c1 - r1, c1 + r1
    for k in range(1, L):
        p_lo.append(lo)
        p_hi.append(hi)
        a_lo, a_hi = np.tanh(lo), np.tanh(hi)
        lo, hi = _ilin(Ws[k], a_lo, a_hi)
        lo, hi = lo + bs[k], hi + bs[k]
    v_lo, v_hi = lo[:, 0], hi[:, 0]

    slopes = [_tanh_slope_range(a, b) for a, b in zip(p_lo, p_hi)]
    curvs = [_tanh_curv_range(a, b) for a, b in zip(p_lo, p_hi)]

    # Jacobians J_k = dp_k/dz (hidden layers), as intervals (N, n_k, n)
    J_lo = [np.broadcast_to(Ws[0], (N,) + Ws[0].shape)]
    J_hi = [J_lo[0]]
    for k in range(1, L - 1):
        d_lo, d_hi = slopes[k - 1]
        a_lo, a_hi = _imul(J_lo[-1], J_hi[-1], d_lo[:, :, None], d_hi[:, :, None])
        lo_, hi_ = _imat(Ws[k], a_lo, a_hi)
        J_lo.append(lo_)
        J_hi.append(hi_)

    # backward intervals of g_k = dh/da_k and s_k = dh/dp_k
    g_lo = [None] * L
    g_hi = [None] * L
    w_out = np.broadcast_to(Ws[-1][0], (N, Ws[-1].shape[1]))
    g_lo[L - 1], g_hi[L - 1] = w_out.copy(), w_out.copy()
    s_lo, s_hi = None, None
    for k in range(L - 1, 0, -1):
        if k < L - 1:
            g_lo[k], g_hi[k] = _ilin(Ws[k].T, s_lo, s_hi)
        d_lo, d_hi = slopes[k - 1]
        s_lo, s_hi = _imul(g_lo[k], g_hi[k], d_lo, d_hi)
    # grad h = W_1^T s_1
    gr_lo, gr_hi = _ilin(Ws[0].T, s_lo, s_hi)
    grad = np.linalg.norm(np.maximum(np.abs(gr_lo), np.abs(gr_hi)), axis=1)
    s_abs = np.maximum(np.abs(s_lo), np.abs(s_hi))
    grad = np.minimum(grad, W_norms[0] * np.linalg.norm(s_abs, axis=1))
    grad = np.minimum(grad, float(np.prod(W_norms)))

    # Hessian enclosure
    H_lo = np.zeros((N, n, n))
    H_hi = np.zeros((N, n, n))
    for k in range(1, L):
        c_lo, c_hi = _imul(curvs[k - 1][0], curvs[k - 1][1], g_lo[k], g_hi[k])
        Jl, Jh = J_lo[k - 1], J_hi[k - 1]
        # outer products J[m,i] J[m,j]
        o_lo, o_hi = _imul(Jl[:, :, :, None], Jh[:, :, :, None], Jl[:, :, None, :], Jh[:, :, None, :])
        t_lo, t_hi = _imul(o_lo, o_hi, c_lo[:, :, None, None], c_hi[:, :, None, None])
        H_lo += t_lo.sum(axis=1)
        H_hi += t_hi.sum(axis=1)
    hess = _abs_spectral(H_lo, H_hi)

    # crude product bound, kept as a cap
    crude = np.zeros(N)
    for k in range(1, L):
        g_abs = np.maximum(np.abs(g_lo[k]), np.abs(g_hi[k]))
        coef = np.max(np.maximum(np.abs(curvs[k - 1][0]), np.abs(curvs[k - 1][1])) * g_abs, axis=1)
        crude += float(np.prod(W_norms[:k])) ** 2 * coef
    hess = np.minimum(hess, crude)

    h_c, g_c = net.value_and_grad(C)
    h_c = np.atleast_1d(h_c)
    g_c = np.atleast_2d(g_c)
    grad = np.minimum(grad, np.linalg.norm(g_c, axis=1) + r * hess)
    v_lo = np.maximum(v_lo, h_c - r * grad)
    v_hi = np.minimum(v_hi, h_c + r * grad)
    # the gradient also lies within r * hess of its value at the center
    rh = (r * hess)[:, None]
    gr_lo = np.maximum(gr_lo, g_c - rh)
    gr_hi = np.minimum(gr_hi, g_c + rh)
    return BallBounds(v_lo, v_hi, grad, hess, (gr_lo, gr_hi), (H_lo, H_hi))


def sampled_grad_max(f, center, radius, n_samples=256, rng=None) -> float:
    """Largest ``|grad f|`` over random points in the ball (a lower bound on the local constant)."""
    rng = np.random.default_rng(0) if rng is None else rng
    center = np.asarray(center, dtype=float)
    n = center.size
    # separate streams for directions and radii: a larger sample extends a smaller one
    dir_rng, rad_rng = (np.random.default_rng(s) for s in rng.integers(0, 2**63, size=2))
    d = dir_rng.standard_normal((n_samples, n))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    P = center + radius * rad_rng.random((n_samples, 1)) ** (1.0 / n) * d
    P = np.vstack([center, P])
    g = np.atleast_2d(f.grad_z(P))
    return float(np.linalg.norm(g, axis=1).max())


def local_lipschitz(f, center, radius: float, n_samples: int = 256, rng=None):
    """``(upper, sampled)`` Lipschitz estimates of ``f`` on ``B(center, radius)``.

    ``upper`` is sound: the interval bound for a :class:`BarrierNet`, else the
    object's ``global_lipschitz_bound``.  ``sampled`` is the running maximum of
    gradient norms at random ball points.
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    sampled = sampled_grad_max(f, center, radius, n_samples, rng)
    if isinstance(f, BarrierNet):
        upper = float(ball_bounds(f, center, radius).grad[0])
    elif hasattr(f, "global_lipschitz_bound"):
        upper = float(f.global_lipschitz_bound())
    else:
        upper = float("inf")
    return upper, sampled


def time_variation_bound(q: Callable, center, radius: float, u, time_probes: Sequence[float],
                         n_samples: int = 64, rng=None, time_invariant: bool = False) -> float:
    """``max |q(z,u,t') - q(z,u,t'')|`` over ball samples and probe pairs."""
    if len(time_probes) == 0:
        raise ValueError("time probes must be nonempty")
    if time_invariant or len(time_probes) == 1:
        return 0.0
    rng = np.random.default_rng(0) if rng is None else rng
    center = np.asarray(center, dtype=float)
    n = center.size
    d = rng.standard_normal((n_samples, n))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    P = np.vstack([center, center + radius * rng.random((n_samples, 1)) ** (1.0 / n) * d])
    best = 0.0
    for z in P:
        vals = np.array([q(z, u, t) for t in time_probes])
        best = max(best, float(vals.max() - vals.min()))
    return best


# --------------------------------------------------------------------------
# the three checks


@dataclass
class PropResult:
    ok: bool
    margin: float
    diagnosis: str = ""
    offending: list = field(default_factory=list)


def check_prop1(eps_bar: float, gamma_unsafe: float, L_h, h_ring) -> PropResult:
    """Ring: ``eps_bar < gamma_unsafe / L_h(z_i)`` and ``h(z_i) <= -gamma_unsafe`` at every ring sample."""
    L_h = np.asarray(L_h, dtype=float).reshape(-1)
    h_ring = np.asarray(h_ring, dtype=float).reshape(-1)
    if L_h.size == 0:
        return PropResult(False, float("-inf"), "no ring samples")
    with np.errstate(divide="ignore"):
        cap = np.where(L_h > 0, gamma_unsafe / L_h, np.inf)
    margin = float(np.min(cap - eps_bar))
    bad_h = np.flatnonzero(h_ring > -gamma_unsafe)
    bad_eps = np.flatnonzero(~(eps_bar < cap))
    diag = []
    if bad_h.size:
        diag.append(f"{bad_h.size} ring samples with h > -gamma_unsafe")
    if bad_eps.size:
        diag.append(f"{bad_eps.size} ring samples with eps_bar >= gamma_unsafe/L_h")
    return PropResult(bool(bad_h.size == 0 and bad_eps.size == 0), margin, "; ".join(diag),
                      sorted(set(bad_h.tolist()) | set(bad_eps.tolist())))


def check_prop2(eps_c: float, eps_d: float, gamma_safe, L_h_c, L_h_d, h_safe_c, h_safe_d) -> PropResult:
    """Safe samples: ``eps <= gamma_safe / L_h(z_i)`` and ``h(z_i) >= gamma_safe``.

    ``gamma_safe`` may be a scalar or a ``(flow, jump)`` pair of per-sample arrays.
    """
    parts, diag, offending = [], [], []
    g_c, g_d = gamma_safe if isinstance(gamma_safe, tuple) else (gamma_safe, gamma_safe)
    for tag, eps, L_h, h, gamma_safe in (("flow", eps_c, L_h_c, h_safe_c, g_c), ("jump", eps_d, L_h_d, h_safe_d, g_d)):
        L_h = np.asarray(L_h, dtype=float).reshape(-1)
        h = np.asarray(h, dtype=float).reshape(-1)
        if L_h.size == 0:
            continue
        with np.errstate(divide="ignore"):
            cap = np.where(L_h > 0, gamma_safe / L_h, np.inf)
        parts.append(float(np.min(cap - eps)))
        bad = np.flatnonzero(~(eps <= cap) | (h < gamma_safe))
        if bad.size:
            diag.append(f"{bad.size} {tag} safe samples fail")
            offending += [(tag, int(i)) for i in bad]
    if not parts:
        return PropResult(False, float("-inf"), "no safe samples")
    return PropResult(not offending, min(parts), "; ".join(diag), offending)


def check_prop3(eps_c: float, eps_d: float, gamma_dyn_c: float, gamma_dyn_d: float,
                Lq_c, Lq_d, Mq_c, Mq_d, q_c_vals, q_d_vals) -> PropResult:
    """Dynamics samples: ``eps <= (gamma - M_q)/L_q`` and ``q >= gamma``."""
    margins, diag, offending = [], [], []
    for tag, eps, gam, Lq, Mq, q in (("flow", eps_c, gamma_dyn_c, Lq_c, Mq_c, q_c_vals),
                                     ("jump", eps_d, gamma_dyn_d, Lq_d, Mq_d, q_d_vals)):
        Lq = np.asarray(Lq, dtype=float).reshape(-1)
        q = np.asarray(q, dtype=float).reshape(-1)
        if Lq.size == 0:
            continue
        Mq = np.broadcast_to(np.asarray(Mq, dtype=float), Lq.shape)
        slack = gam - Mq
        if np.any(slack <= 0):
            diag.append(f"{tag}: margin exhausted by time variation")
            offending += [(tag, int(i)) for i in np.flatnonzero(slack <= 0)]
            margins.append(float(np.min(slack)))
            continue
        with np.errstate(divide="ignore"):
            cap = np.where(Lq > 0, slack / Lq, np.inf)
        margins.append(float(np.min(cap - eps)))
        bad = np.flatnonzero(~(eps <= cap) | (q < gam))
        if bad.size:
            diag.append(f"{bad.size} {tag} samples fail")
            offending += [(tag, int(i)) for i in bad]
    if not margins:
        return PropResult(False, float("-inf"), "no dynamics samples")
    return PropResult(not offending, min(margins), "; ".join(diag), offending)


def grid_validate(f, probes, region: str):
    """Evaluate ``h`` on probes.  Ring: violations are ``h >= 0``; covered region: ``h < 0``.

    Returns ``(extreme, violation_indices)`` with the max (ring) or min (covered).
    """
    P = np.atleast_2d(np.asarray(probes, dtype=float))
    if P.shape[0] == 0:
        raise ValueError("empty probe set")
    h = np.asarray(f.forward(P) if hasattr(f, "forward") else f(P), dtype=float).reshape(-1)
    if region == "ring":
        return float(h.max()), np.flatnonzero(h >= 0)
    if region == "covered":
        return float(h.min()), np.flatnonzero(h < 0)
    raise ValueError("region must be 'ring' or 'covered'")


# --------------------------------------------------------------------------
# plant constants


def _jacobian_norm_estimate(fn, Z, h=1e-6):
    worst = 0.0
    for z in Z:
        n = z.size
        J = np.empty((np.asarray(fn(z)).size, n))
        for i in range(n):
            e = np.zeros(n)
            e[i] = h
            J[:, i] = (np.asarray(fn(z + e)) - np.asarray(fn(z - e))) / (2 * h)
        worst = max(worst, float(np.linalg.norm(J, 2)))
    return worst


def plant_constants(sys: HybridSystem, bundle: DatasetBundle, n_probe: int = 200, seed: int = 0):
    """Lipschitz constants of the estimates in z (for fixed input).

    Uses the system's declared constants when present; otherwise estimates
    them from finite-difference Jacobians at sampled points (not sound, flagged).
    """
    rng = np.random.default_rng(seed)
    out = {"sound": True}
    if sys.flow_lipschitz is not None:
        out["L_W_c"] = float(sys.flow_lipschitz)
    else:
        idx = rng.choice(bundle.n_flow, size=min(n_probe, bundle.n_flow), replace=False)
        est = 0.0
        for i in idx:
            u, t = bundle.flow_u[i], bundle.flow_t[i]
            est = max(est, _jacobian_norm_estimate(lambda z: sys.est_flow(z, t, u), bundle.flow_z[i : i + 1]))
        out["L_W_c"] = 1.1 * est
        out["sound"] = False
    out["L_Delta_c"] = float(sys.err_flow_lipschitz) if sys.err_flow_lipschitz is not None else float("nan")
    if sys.jump_lipschitz is not None:
        out["L_W_d"] = float(sys.jump_lipschitz)
    elif bundle.n_jump:
        idx = rng.choice(bundle.n_jump, size=min(n_probe, bundle.n_jump), replace=False)
        est = 0.0
        for i in idx:
            u, t = bundle.jump_u[i], bundle.jump_t[i]
            est = max(est, _jacobian_norm_estimate(lambda z: sys.est_jump(z, t, u), bundle.jump_z[i : i + 1]))
        out["L_W_d"] = 1.1 * est
        out["sound"] = False
    else:
        out["L_W_d"] = 0.0
    out["L_Delta_d"] = float(sys.err_jump_lipschitz) if sys.err_jump_lipschitz is not None else float("nan")
    return out


# --------------------------------------------------------------------------
# report


@dataclass
class VerificationReport:
    prop1: PropResult
    prop2: PropResult
    prop3: PropResult
    lip_bar_ok: bool
    numbers: dict
    probes: dict
    provenance: dict

    @property
    def passed(self) -> bool:
        return bool(self.prop1.ok and self.prop2.ok and self.prop3.ok and self.lip_bar_ok
                    and self.probes.get("ring_ok", True) and self.probes.get("covered_ok", True))

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "prop1": asdict(self.prop1),
            "prop2": asdict(self.prop2),
            "prop3": asdict(self.prop3),
            "lip_bar_ok": self.lip_bar_ok,
            "numbers": self.numbers,
            "probes": self.probes,
            "provenance": self.provenance,
        }

    def save(self, path) -> None:
        d = self.to_dict()
        for k in ("prop1", "prop2", "prop3"):
            d[k]["offending"] = d[k]["offending"][:200]
        Path(path).write_text(json.dumps(d, indent=1, sort_keys=True, default=_jsonable))

    def summary(self) -> str:
        n = self.numbers
        lines = [
            f"verification {'PASSED' if self.passed else 'FAILED'}",
            f"  ring:    ok={self.prop1.ok} margin={self.prop1.margin:.4g} {self.prop1.diagnosis}",
            f"  safe:    ok={self.prop2.ok} margin={self.prop2.margin:.4g} {self.prop2.diagnosis}",
            f"  dynamics ok={self.prop3.ok} margin={self.prop3.margin:.4g} {self.prop3.diagnosis}",
            f"  lip_bar={n.get('lip_bar')} >= certified Lip(h) {n.get('lip_h_certified', float('nan')):.4g}: {self.lip_bar_ok}"
            f" (global product bound {n.get('lip_h_global', float('nan')):.4g})",
        ]
        if "ring_max_h" in self.probes:
            lines.append(f"  probes: ring max h={self.probes['ring_max_h']:.4g} ({self.probes['ring_n']} pts), "
                         f"covered min h={self.probes.get('covered_min_h', float('nan')):.4g} ({self.probes.get('covered_n', 0)} pts)")
        if not n.get("plant_constants_sound", True):
            lines.append("  note: plant Lipschitz constants were estimated by sampling (not sound)")
        return "\n".join(lines)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o).__name__)


def _stats(a):
    a = np.asarray(a, dtype=float)
    if a.size == 0:
        return {"n": 0}
    return {"n": int(a.size), "min": float(a.min()), "max": float(a.max()), "mean": float(a.mean())}


def verify(
    net: BarrierNet,
    sys: HybridSystem,
    bundle: DatasetBundle,
    hp: Hyperparams,
    ring_probes: Optional[np.ndarray] = None,
    covered_probes: Optional[np.ndarray] = None,
    eps_bar: Optional[float] = None,
    n_lip_samples: int = 32,
    seed: int = 0,
    per_sample_margins: bool = True,
) -> VerificationReport:
    """Run the ring, safe-set and dynamics checks plus the Lipschitz budget check.

    ``eps_bar`` defaults to the covering radius of the ring samples over
    ``ring_probes`` (or the value stored in the bundle geometry).  The safe
    checks use the thinned safe samples.  Probe sets, when given, are evaluated
    with :func:`grid_validate`.

    With ``per_sample_margins`` each sample's margin is the value its
    constraint actually attains (never below the configured margin), which is
    the least conservative admissible choice; otherwise the configured
    constants are used.
    """
    geo = bundle.geometry
    if eps_bar is None:
        if ring_probes is not None and len(ring_probes):
            eps_bar = epsilon_net_radius(bundle.ring_z, ring_probes)
        elif geo.eps_bar is not None:
            eps_bar = geo.eps_bar
        else:
            raise ValueError("eps_bar unknown: pass ring probes or set it in the geometry")
    rng = np.random.default_rng(seed)
    numbers = {"eps_bar": eps_bar, "eps_c": geo.eps_c, "eps_d": geo.eps_d, "sigma": geo.sigma, "lip_bar": hp.lip_bar}

    # ring
    ring_b = ball_bounds(net, bundle.ring_z, eps_bar) if bundle.n_ring else None
    h_ring = net.forward(bundle.ring_z) if bundle.n_ring else np.zeros(0)
    L_h_ring = ring_b.grad if ring_b is not None else np.zeros(0)
    margin = (lambda achieved, gamma: np.maximum(np.asarray(achieved, dtype=float), gamma)) if per_sample_margins \
        else (lambda achieved, gamma: gamma)
    p1 = check_prop1(eps_bar, margin(-h_ring, hp.gamma_unsafe), L_h_ring, h_ring)

    # safe (thinned)
    fm, jm = bundle.safe_flow_mask, bundle.safe_jump_mask
    sf, sj = bundle.flow_z[fm], bundle.jump_z[jm]
    b_sf = ball_bounds(net, sf, bundle.flow_radius[fm]) if len(sf) else None
    b_sj = ball_bounds(net, sj, bundle.jump_radius[jm]) if len(sj) else None
    h_sf = net.forward(sf) if len(sf) else np.zeros(0)
    h_sj = net.forward(sj) if len(sj) else np.zeros(0)
    p2 = check_prop2(bundle.flow_radius[fm], bundle.jump_radius[jm],
                     (margin(h_sf, hp.gamma_safe), margin(h_sj, hp.gamma_safe)),
                     b_sf.grad if b_sf else [], b_sj.grad if b_sj else [], h_sf, h_sj)

    # dynamics
    pc = plant_constants(sys, bundle, seed=seed)
    fz, fu, ft = bundle.flow_z, bundle.flow_u, bundle.flow_t
    Wc = np.array([sys.est_flow(z, t, u) for z, u, t in zip(fz, fu, ft)]).reshape(-1, bundle.n_z)
    Dc = np.array([sys.err_flow(z, t, u) for z, u, t in zip(fz, fu, ft)], dtype=float)
    eps_f = bundle.flow_radius
    b_f = ball_bounds(net, fz, eps_f)
    L_dc = 0.0 if math.isnan(pc["L_Delta_c"]) else pc["L_Delta_c"]
    # grad q_c = H W + J_W^T grad h - Delta H grad h/|grad h| - |grad h| grad Delta + kappa grad h
    Db = Dc + L_dc * eps_f
    Lq_c = (b_f.directional(Wc, hp.alpha_gain) + b_f.hess * (pc["L_W_c"] * eps_f + Db)
            + b_f.grad * (pc["L_W_c"] + L_dc))
    qc = q_c_batch(net, fz, Wc, Dc, hp.alpha_gain)

    jz, ju, jt = bundle.jump_z, bundle.jump_u, bundle.jump_t
    if bundle.n_jump:
        post = np.array([sys.est_jump(z, t, u) for z, u, t in zip(jz, ju, jt)]).reshape(-1, bundle.n_z)
        Dd = np.array([sys.err_jump(z, t, u) for z, u, t in zip(jz, ju, jt)], dtype=float)
        img_r = np.maximum(pc["L_W_d"] * bundle.jump_radius, 1e-12)
        b_img = ball_bounds(net, post, img_r)
        L_dd = 0.0 if math.isnan(pc["L_Delta_d"]) else pc["L_Delta_d"]
        Lq_d = b_img.grad * pc["L_W_d"] + hp.lip_bar * L_dd
        qd = q_d_batch(net, post, Dd, hp.lip_bar)
        # h must be lip_bar-Lipschitz around every realizable post-jump state
        b_post = ball_bounds(net, post, img_r + Dd + L_dd * bundle.jump_radius + 1e-12)
        lip_post = float(b_post.grad.max())
    else:
        Lq_d, qd, lip_post = np.zeros(0), np.zeros(0), 0.0
    Mq = 0.0 if sys.time_invariant else float("nan")
    if not sys.time_invariant:
        raise NotImplementedError("time-varying plants need explicit time probes; use time_variation_bound")
    # per-sample radii (equal to eps_c / eps_d unless shrunk into the safe set)
    p3 = check_prop3(eps_f, bundle.jump_radius, margin(qc, hp.gamma_dyn_c), margin(qd, hp.gamma_dyn_d),
                     Lq_c, Lq_d, Mq, Mq, qc, qd)

    lip_global = net.global_lipschitz_bound()
    lip_cert = min(lip_global, lip_post) if bundle.n_jump else lip_global
    lip_ok = bool(hp.lip_bar >= lip_cert)

    # sampled diagnostics on a few balls
    k = min(n_lip_samples, bundle.n_ring)
    idx = rng.choice(bundle.n_ring, size=k, replace=False) if k else []
    sampled = [sampled_grad_max(net, bundle.ring_z[i], eps_bar, 64, rng) for i in idx]
    numbers.update({
        "lip_h_global": lip_global,
        "lip_h_post_jump": lip_post,
        "lip_h_certified": lip_cert,
        "L_h_ring": _stats(L_h_ring),
        "L_h_ring_sampled_subset": _stats(sampled),
        "L_h_ring_bound_subset": _stats(L_h_ring[idx] if k else []),
        "L_h_safe_flow": _stats(b_sf.grad if b_sf else []),
        "L_h_safe_jump": _stats(b_sj.grad if b_sj else []),
        "L_q_c": _stats(Lq_c),
        "L_q_d": _stats(Lq_d),
        "M_q_c": 0.0,
        "M_q_d": 0.0,
        "h_ring": _stats(h_ring),
        "h_safe_flow": _stats(net.forward(sf) if len(sf) else []),
        "h_safe_jump": _stats(net.forward(sj) if len(sj) else []),
        "q_c": _stats(qc),
        "q_d": _stats(qd),
        "plant_constants": pc,
        "plant_constants_sound": pc["sound"],
    })

    probes = {}
    if ring_probes is not None and len(ring_probes):
        mx, bad = grid_validate(net, ring_probes, "ring")
        probes.update(ring_max_h=mx, ring_n=int(len(ring_probes)), ring_violations=int(bad.size), ring_ok=bool(bad.size == 0))
    if covered_probes is not None and len(covered_probes):
        mn, bad = grid_validate(net, covered_probes, "covered")
        probes.update(covered_min_h=mn, covered_n=int(len(covered_probes)), covered_violations=int(bad.size),
                      covered_ok=bool(bad.size == 0))
    prov = {"seed": seed, "per_sample_margins": per_sample_margins, "hyperparams": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(hp).items()},
            "n_ring": bundle.n_ring, "n_flow": bundle.n_flow, "n_jump": bundle.n_jump,
            "n_safe_flow": int(fm.sum()), "n_safe_jump": int(jm.sum())}
    return VerificationReport(p1, p2, p3, lip_ok, numbers, probes, prov)
