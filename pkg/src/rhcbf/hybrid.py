"""Time-varying hybrid control systems with bounded model uncertainty.

A system flows on ``C`` with ``z' = W_c(z, t, u_c)`` and jumps on ``D`` with
``z+ = W_d(z, t, u_d)``.  Only estimates ``est_flow``/``est_jump`` are known,
together with error radii ``err_flow``/``err_jump``; the realized dynamics may be
any vector in the closed Euclidean ball of that radius around the estimate.

Integration is fixed-step RK4 with zero-order hold on the control and on the
disturbance realization over each step.  Guard crossings (positive to
non-positive) are localized by bisection on the step length.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

Array = np.ndarray

GUARD_TOL = 1e-8
MAX_BISECTIONS = 200
ZENO_JUMPS = 25


class ContractError(ValueError):
    """A documented precondition of a hybrid-system operation was violated."""


class DivergenceError(FloatingPointError):
    """The integrator produced a non-finite state."""


class AdmissibilityError(AssertionError):
    """Ground-truth dynamics left the admissible ball around the estimate."""


@dataclass(frozen=True, order=True)
class HybridTime:
    t: float
    j: int

    def __post_init__(self):
        if self.t < 0 or self.j < 0:
            raise ValueError(f"hybrid time must be non-negative, got {(self.t, self.j)}")


@dataclass(frozen=True)
class HybridState:
    z: Array
    time: HybridTime


@dataclass(frozen=True)
class InputBox:
    lower: Array
    upper: Array

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).reshape(-1)
        hi = np.asarray(self.upper, dtype=float).reshape(-1)
        if lo.shape != hi.shape:
            raise ValueError("input box bounds must have equal length")
        if np.any(lo > hi):
            raise ValueError("input box lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    def clip(self, u: Array) -> Array:
        return np.clip(u, self.lower, self.upper)

    def contains(self, u: Array, tol: float = 1e-12) -> bool:
        u = np.asarray(u, dtype=float)
        return bool(np.all(u >= self.lower - tol) and np.all(u <= self.upper + tol))

    @classmethod
    def symmetric(cls, bound, dim: int) -> "InputBox":
        b = np.broadcast_to(np.asarray(bound, dtype=float), (dim,))
        return cls(-b, b.copy())

    @classmethod
    def empty(cls) -> "InputBox":
        return cls(np.zeros(0), np.zeros(0))


def _always(z) -> bool:
    return True


def _zero_err(z, t, u) -> float:
    return 0.0


@dataclass(frozen=True)
class HybridSystem:
    """Uncertain hybrid control system (immutable, shareable across workers).

    ``est_flow(z, t, u)`` must be affine in ``u``; the safety filter recovers the
    drift and input matrix from it.  ``failure`` is an optional plant-specific
    predicate (e.g. a fallen walker) that terminates simulation with ``fell``.
    ``flow_lipschitz``/``jump_lipschitz`` are optional z-Lipschitz constants of
    the estimates (for fixed input) used by the verifier; ``None`` means unknown.
    """

    n_z: int
    m_c: int
    m_d: int
    flow_set: Callable[[Array], bool]
    jump_set: Callable[[Array], bool]
    guard: Optional[Callable[[Array], float]]
    est_flow: Callable[[Array, float, Array], Array]
    est_jump: Callable[[Array, float, Array], Array]
    err_flow: Callable[[Array, float, Array], float] = _zero_err
    err_jump: Callable[[Array, float, Array], float] = _zero_err
    input_box_c: InputBox = None
    input_box_d: InputBox = None
    truth_flow: Optional[Callable[[Array, float, Array], Array]] = None
    truth_jump: Optional[Callable[[Array, float, Array], Array]] = None
    failure: Optional[Callable[[Array], bool]] = None
    time_invariant: bool = True
    err_flow_depends_on_input: bool = False
    flow_lipschitz: Optional[float] = None
    err_flow_lipschitz: Optional[float] = 0.0
    jump_lipschitz: Optional[float] = None
    err_jump_lipschitz: Optional[float] = 0.0
    name: str = "hybrid"

    def __post_init__(self):
        if self.input_box_c is None:
            object.__setattr__(self, "input_box_c", InputBox.symmetric(np.inf, self.m_c))
        if self.input_box_d is None:
            object.__setattr__(self, "input_box_d", InputBox.symmetric(np.inf, self.m_d))
        if self.input_box_c.dim != self.m_c or self.input_box_d.dim != self.m_d:
            raise ValueError("input box dimensions do not match m_c / m_d")

    def in_domain(self, z) -> bool:
        return bool(self.flow_set(z) or self.jump_set(z))

    def flow_affine(self, z: Array, t: float) -> tuple[Array, Array]:
        """Drift ``f`` and input matrix ``g`` of the (affine) flow estimate."""
        f = np.asarray(self.est_flow(z, t, np.zeros(self.m_c)), dtype=float)
        g = np.empty((self.n_z, self.m_c))
        for k in range(self.m_c):
            e = np.zeros(self.m_c)
            e[k] = 1.0
            g[:, k] = np.asarray(self.est_flow(z, t, e), dtype=float) - f
        return f, g

    def check_truth(self, z, t, u, which: str = "flow", tol: float = 1e-9) -> bool:
        """True when the ground-truth map lies in the admissible ball at (z, t, u)."""
        if which == "flow":
            if self.truth_flow is None:
                return True
            gap = np.linalg.norm(self.truth_flow(z, t, u) - self.est_flow(z, t, u))
            return bool(gap <= self.err_flow(z, t, u) + tol)
        if self.truth_jump is None:
            return True
        gap = np.linalg.norm(self.truth_jump(z, t, u) - self.est_jump(z, t, u))
        return bool(gap <= self.err_jump(z, t, u) + tol)


def guarded_sets(guard: Callable[[Array], float], slack: float = 1e-6):
    """Closed flow/jump sets ``{g >= -slack}`` and ``{g <= 0}`` from a guard.

    The slack absorbs bisection residue so that a localized event state is a
    member of both sets.
    """
    return (lambda z: guard(z) >= -slack), (lambda z: guard(z) <= 0.0)


# --------------------------------------------------------------------------
# admissible dynamics and disturbance policies


def uniform_ball(rng: np.random.Generator, dim: int, radius: float = 1.0) -> Array:
    """One draw uniform over the closed Euclidean ball."""
    if dim == 0:
        return np.zeros(0)
    d = rng.standard_normal(dim)
    n = np.linalg.norm(d)
    while n == 0.0:
        d = rng.standard_normal(dim)
        n = np.linalg.norm(d)
    return d * (radius * rng.random() ** (1.0 / dim) / n)


def sample_admissible(sys: HybridSystem, z, t, u, which: str, rng: np.random.Generator) -> Array:
    """Realized dynamics ``W_hat + d`` with ``d`` uniform in the admissible ball."""
    if which == "flow":
        w, r = sys.est_flow(z, t, u), sys.err_flow(z, t, u)
    elif which == "jump":
        w, r = sys.est_jump(z, t, u), sys.err_jump(z, t, u)
    else:
        raise ValueError(f"which must be 'flow' or 'jump', got {which!r}")
    w = np.asarray(w, dtype=float)
    if r < 0:
        raise ContractError("error bound must be non-negative")
    if r == 0:
        return w.copy()
    return w + uniform_ball(rng, w.size, r)


class Disturbance:
    """Chooses a realized element of the admissible sets.

    ``flow_field`` is called once per integrator step and returns the vector
    field used for every RK4 stage of that step.
    """

    def flow_field(self, sys: HybridSystem, z, t, u, rng) -> Callable[[Array, float], Array]:
        return lambda x, s: sys.est_flow(x, s, u)

    def jump_value(self, sys: HybridSystem, z, t, u, rng) -> Array:
        return np.asarray(sys.est_jump(z, t, u), dtype=float)


class Nominal(Disturbance):
    """Realize the estimate itself (zero disturbance)."""


class UniformBall(Disturbance):
    """Additive disturbance uniform in a ball, redrawn every integrator step.

    ``radius=None`` uses the system's own error bound; a number overrides it
    (test-time noise levels).  The unit draw is scaled by the radius at each
    RK4 stage so every stage stays admissible.
    """

    def __init__(self, radius: Optional[float] = None, jump_radius: Optional[float] = None):
        self.radius = radius
        self.jump_radius = jump_radius

    def _r(self, sys, x, s, u):
        return sys.err_flow(x, s, u) if self.radius is None else self.radius

    def flow_field(self, sys, z, t, u, rng):
        xi = uniform_ball(rng, sys.n_z)
        return lambda x, s: sys.est_flow(x, s, u) + self._r(sys, x, s, u) * xi

    def jump_value(self, sys, z, t, u, rng):
        r = sys.err_jump(z, t, u) if self.jump_radius is None else self.jump_radius
        w = np.asarray(sys.est_jump(z, t, u), dtype=float)
        return w + uniform_ball(rng, sys.n_z, r) if r > 0 else w


class WorstCase(Disturbance):
    """Adversarial realization on the ball surface, opposing ``grad h``.

    For jumps the disturbance moves the post-jump state against ``grad h``
    evaluated at the estimated post-jump state.
    """

    def __init__(self, grad_h: Callable[[Array], Array], radius: Optional[float] = None):
        self.grad_h = grad_h
        self.radius = radius

    def _push(self, x, r):
        g = np.asarray(self.grad_h(x), dtype=float)
        n = np.linalg.norm(g)
        return -r * g / n if n > 0 else np.zeros_like(g)

    def flow_field(self, sys, z, t, u, rng):
        def field(x, s):
            r = sys.err_flow(x, s, u) if self.radius is None else self.radius
            return sys.est_flow(x, s, u) + self._push(x, r)

        return field

    def jump_value(self, sys, z, t, u, rng):
        w = np.asarray(sys.est_jump(z, t, u), dtype=float)
        return w + self._push(w, sys.err_jump(z, t, u))


class Truth(Disturbance):
    """Use the system's ground-truth maps (falls back to the estimate)."""

    def flow_field(self, sys, z, t, u, rng):
        f = sys.truth_flow or sys.est_flow
        return lambda x, s: f(x, s, u)

    def jump_value(self, sys, z, t, u, rng):
        g = sys.truth_jump or sys.est_jump
        return np.asarray(g(z, t, u), dtype=float)


class _FixedField(Disturbance):
    def __init__(self, dyn):
        self.dyn = dyn

    def flow_field(self, sys, z, t, u, rng):
        return lambda x, s: self.dyn(x, s, u)


def as_disturbance(dyn) -> Disturbance:
    if dyn is None:
        return Nominal()
    if isinstance(dyn, Disturbance):
        return dyn
    if callable(dyn):
        return _FixedField(dyn)
    raise TypeError(f"cannot use {type(dyn).__name__} as flow dynamics")


# --------------------------------------------------------------------------
# integration


def rk4_step(field, z: Array, t: float, h: float) -> Array:
    k1 = field(z, t)
    k2 = field(z + 0.5 * h * k1, t + 0.5 * h)
    k3 = field(z + 0.5 * h * k2, t + 0.5 * h)
    k4 = field(z + h * k3, t + h)
    return z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@dataclass
class FlowSegment:
    j: int
    t: Array  # (k,)
    z: Array  # (k, n_z)
    u: Array  # (k, m_c); input held on [t_k, t_{k+1})

    def __len__(self):
        return self.t.size


@dataclass
class JumpRecord:
    t: float
    j: int
    z_before: Array
    z_after: Array
    u: Array


@dataclass
class FlowResult:
    segment: FlowSegment
    exit: str  # guard_hit | t_max | left_flow_set | failed
    exit_state: Optional[Array] = None
    exit_time: Optional[float] = None


def _bisect_guard(sys, field, z, t, h, tol):
    """Largest-residual-safe localization of a positive→non-positive crossing.

    Returns (tau, z(tau)) with guard(z(tau)) <= 0 and, when the guard is
    Lipschitz on the step, |guard| <= tol.
    """
    lo, hi = 0.0, h
    z_hi = rk4_step(field, z, t, hi)
    for _ in range(MAX_BISECTIONS):
        if sys.guard(z_hi) >= -tol or hi - lo <= 1e-16 * max(1.0, t):
            break
        mid = 0.5 * (lo + hi)
        z_mid = rk4_step(field, z, t, mid)
        if sys.guard(z_mid) > 0:
            lo = mid
        else:
            hi, z_hi = mid, z_mid
    return hi, z_hi


def integrate_flow(
    sys: HybridSystem,
    z0,
    t0: float,
    j: int,
    control: Callable[[Array, float], Array],
    dyn=None,
    t_max: float = 1.0,
    step: float = 1e-3,
    rng: Optional[np.random.Generator] = None,
    guard_tol: float = GUARD_TOL,
) -> FlowResult:
    """Flow from ``z0`` until the guard fires, ``t_max`` or the flow set is left.

    ``dyn`` is a :class:`Disturbance` or a plain callable ``(z, t, u) -> z'``.
    Stored states are at most ``step`` apart; the final state of a
    ``guard_hit`` exit is the bisection-refined event state.
    """
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    policy = as_disturbance(dyn)
    rng = np.random.default_rng(0) if rng is None else rng
    z = np.array(z0, dtype=float)
    m = sys.m_c
    if not sys.flow_set(z):
        return FlowResult(FlowSegment(j, np.zeros(0), np.zeros((0, sys.n_z)), np.zeros((0, m))), "left_flow_set", z, t0)

    ts, zs, us = [t0], [z.copy()], []
    t = t0
    exit_reason = "t_max"
    exit_state = None
    g_prev = sys.guard(z) if sys.guard is not None else None
    while t < t_max - 1e-12:
        h = min(step, t_max - t)
        u = np.asarray(control(z, t), dtype=float).reshape(m)
        us.append(u)
        field = policy.flow_field(sys, z, t, u, rng)
        z_new = rk4_step(field, z, t, h)
        if not np.all(np.isfinite(z_new)):
            raise DivergenceError(f"non-finite state at t={t + h:.6g}: {z_new}")
        if sys.guard is not None:
            g_new = sys.guard(z_new)
            if g_prev > 0 and g_new <= 0:
                tau, z_e = _bisect_guard(sys, field, z, t, h, guard_tol)
                t = t + tau
                ts.append(t)
                zs.append(z_e)
                exit_reason = "guard_hit"
                break
            g_prev = g_new
        if not sys.flow_set(z_new):
            exit_reason = "left_flow_set"
            exit_state = z_new
            t_exit = t + h
            us.pop()
            break
        t = t + h
        z = z_new
        ts.append(t)
        zs.append(z.copy())
        if sys.failure is not None and sys.failure(z):
            exit_reason = "failed"
            break
    if len(us) < len(ts):
        us.append(us[-1] if us else np.asarray(control(zs[-1], ts[-1]), dtype=float).reshape(m))
    seg = FlowSegment(j, np.array(ts), np.array(zs), np.array(us).reshape(len(ts), m))
    if exit_reason == "left_flow_set":
        return FlowResult(seg, exit_reason, exit_state, t_exit)
    return FlowResult(seg, exit_reason, seg.z[-1], seg.t[-1])


def apply_jump(sys: HybridSystem, z, t: float, u_d, dyn=None, rng=None, check_input: bool = True) -> Array:
    """Post-jump state ``dyn(z, t, u_d)`` (the estimate when ``dyn`` is None)."""
    z = np.asarray(z, dtype=float)
    if not sys.jump_set(z):
        raise ContractError(f"state {z} is not in the jump set")
    u_d = np.asarray(u_d, dtype=float).reshape(sys.m_d)
    if check_input and not sys.input_box_d.contains(u_d):
        raise ContractError(f"jump input {u_d} outside the input box")
    if dyn is None:
        return np.asarray(sys.est_jump(z, t, u_d), dtype=float)
    if isinstance(dyn, Disturbance):
        return dyn.jump_value(sys, z, t, u_d, rng if rng is not None else np.random.default_rng(0))
    return np.asarray(dyn(z, t, u_d), dtype=float)


# --------------------------------------------------------------------------
# hybrid arcs


@dataclass
class HybridArc:
    n_z: int
    m_c: int
    m_d: int
    segments: list = field(default_factory=list)
    jumps: list = field(default_factory=list)
    termination: str = "horizon_reached"
    truth_violations: int = 0

    @property
    def domain(self) -> list[tuple[float, float, int]]:
        """Hybrid time domain as ``[(t_j, t_{j+1}, j), ...]``."""
        out = [(float(s.t[0]), float(s.t[-1]), s.j) for s in self.segments if len(s)]
        return out

    @property
    def n_jumps(self) -> int:
        return len(self.jumps)

    @property
    def final_state(self) -> Optional[Array]:
        last_seg = next((s for s in reversed(self.segments) if len(s)), None)
        last_jump = self.jumps[-1] if self.jumps else None
        if last_jump is not None and (last_seg is None or last_seg.j <= last_jump.j):
            return last_jump.z_after
        return None if last_seg is None else last_seg.z[-1]

    def states(self):
        """All stored flow states as ``(t, j, z, u)`` in hybrid-time order."""
        for s in self.segments:
            for k in range(len(s)):
                yield float(s.t[k]), s.j, s.z[k], s.u[k]

    def to_csv(self, path) -> None:
        path = Path(path)
        header = ["t", "j"] + [f"z_{i + 1}" for i in range(self.n_z)] + [f"u_{i + 1}" for i in range(self.m_c)] + ["segment_id"]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for sid, s in enumerate(self.segments):
                for k in range(len(s)):
                    w.writerow([repr(float(s.t[k])), s.j] + [repr(float(x)) for x in s.z[k]] + [repr(float(x)) for x in s.u[k]] + [sid])
        sidecar = {
            "termination": self.termination,
            "n_z": self.n_z,
            "m_c": self.m_c,
            "m_d": self.m_d,
            "truth_violations": self.truth_violations,
            "domain": self.domain,
            "jumps": [
                {"t": jp.t, "j": jp.j, "z_before": jp.z_before.tolist(), "z_after": jp.z_after.tolist(), "u": jp.u.tolist()}
                for jp in self.jumps
            ],
        }
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1))

    @classmethod
    def from_csv(cls, path) -> "HybridArc":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        n, m = meta["n_z"], meta["m_c"]
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        arc = cls(n, m, meta["m_d"], termination=meta["termination"], truth_violations=meta.get("truth_violations", 0))
        if rows.size:
            for sid in np.unique(rows[:, -1]).astype(int):
                r = rows[rows[:, -1] == sid]
                arc.segments.append(FlowSegment(int(r[0, 1]), r[:, 0].copy(), r[:, 2 : 2 + n].copy(), r[:, 2 + n : 2 + n + m].copy()))
        for jp in meta["jumps"]:
            arc.jumps.append(JumpRecord(jp["t"], jp["j"], np.array(jp["z_before"]), np.array(jp["z_after"]), np.array(jp["u"])))
        return arc


def simulate(
    sys: HybridSystem,
    z0,
    controls: Sequence,
    disturbance=None,
    horizon: tuple[float, int] = (10.0, 100),
    step: float = 1e-3,
    rng: Optional[np.random.Generator] = None,
    seed: Optional[int] = None,
    check_truth: bool = False,
    max_jumps_per_instant: int = ZENO_JUMPS,
    on_jump: Optional[Callable[[JumpRecord], None]] = None,
) -> HybridArc:
    """Alternate flows and jumps until ``t >= T``, ``j >= J`` or the domain is left.

    ``controls`` is ``(flow_law, jump_law)``; a missing jump law selects the
    zero input.  With ``check_truth`` every realized flow/jump is checked against
    the admissible ball when truth maps are present; violations raise
    :class:`AdmissibilityError`.
    """
    T, J = horizon
    if not T > 0 or J < 0:
        raise ValueError("horizon must have T > 0 and J >= 0")
    flow_law = controls[0]
    jump_law = controls[1] if len(controls) > 1 and controls[1] is not None else (lambda z, t: np.zeros(sys.m_d))
    policy = as_disturbance(disturbance)
    if rng is None:
        rng = np.random.default_rng(seed)
    arc = HybridArc(sys.n_z, sys.m_c, sys.m_d)
    z = np.array(z0, dtype=float)
    t, j = 0.0, 0
    if not sys.in_domain(z):
        arc.termination = "left_domain"
        return arc

    law = flow_law
    if check_truth and sys.truth_flow is not None:
        def law(x, s):
            u = flow_law(x, s)
            if not sys.check_truth(x, s, u, "flow"):
                raise AdmissibilityError(f"truth flow outside admissible ball at t={s:.6g}, z={x}")
            return u

    same_instant = 0
    while True:
        if sys.jump_set(z) and j < J:
            u_d = np.asarray(jump_law(z, t), dtype=float).reshape(sys.m_d)
            if check_truth and not sys.check_truth(z, t, u_d, "jump"):
                raise AdmissibilityError(f"truth jump outside admissible ball at t={t:.6g}")
            z_after = apply_jump(sys, z, t, u_d, dyn=policy, rng=rng)
            rec = JumpRecord(t, j, z.copy(), z_after, u_d)
            arc.jumps.append(rec)
            if on_jump is not None:
                on_jump(rec)
            j += 1
            same_instant += 1
            z = z_after
            if same_instant > max_jumps_per_instant:
                arc.termination = "zeno_suspected"
                return arc
            if not sys.in_domain(z):
                arc.termination = "left_domain"
                return arc
            continue
        if j >= J and sys.jump_set(z) and not sys.flow_set(z):
            arc.termination = "horizon_reached"
            return arc
        if t >= T - 1e-12:
            arc.termination = "horizon_reached"
            return arc
        if not sys.flow_set(z):
            arc.termination = "left_domain"
            return arc
        res = integrate_flow(sys, z, t, j, law, policy, t_max=T, step=step, rng=rng)
        if len(res.segment):
            arc.segments.append(res.segment)
        if res.segment.t.size and res.segment.t[-1] > t:
            same_instant = 0
        z, t = res.exit_state, res.exit_time
        if res.exit == "failed":
            arc.termination = "fell"
            return arc
        if res.exit == "t_max":
            arc.termination = "horizon_reached"
            return arc
        if res.exit == "left_flow_set":
            if sys.jump_set(z) and j < J:
                seg = arc.segments[-1] if arc.segments and arc.segments[-1].j == j else None
                if seg is not None:
                    seg.t = np.append(seg.t, t)
                    seg.z = np.vstack([seg.z, z])
                    seg.u = np.vstack([seg.u, seg.u[-1:]])
                continue
            arc.termination = "left_domain"
            return arc
        if j >= J:
            arc.termination = "horizon_reached"
            return arc
        if not sys.jump_set(z):
            arc.termination = "left_domain"
            return arc
