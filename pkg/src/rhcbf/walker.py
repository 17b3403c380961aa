"""Compass-gait biped on a slope (swing dynamics, plastic impact, energy expert).

Conventions
-----------
State ``z = [th_st, th_sw, dth_st, dth_sw]``.  Both angles are the direction of
the foot-to-hip vector measured from the vertical, positive toward the walking
direction, so with the stance foot at the origin::

    hip        = l (sin th_st, cos th_st)
    swing foot = hip - l (sin th_sw, cos th_sw)

The ramp descends in the walking direction with normal at angle ``slope`` from
the vertical.  Swing phase obeys ``M(q) q'' + C(q, q') q' + G(q) = S u`` with

    M = [[(m_H + m) l^2 + m a^2,  -m l b cos(st - sw)],
         [-m l b cos(st - sw),     m b^2            ]]
    C q' = [-m l b sin(st - sw) dsw^2,  m l b sin(st - sw) dst^2]
    G    = [-(m_H l + m a + m l) g sin(st),  m b g sin(sw)]
    S    = [[1, -1], [0, 1]],  u = [ankle torque, hip torque]

(the ankle torque acts between ramp and stance leg, the hip torque between the
legs).  Impact conserves angular momentum of the whole walker about the new
stance foot and of the trailing leg about the hip; with ``c = cos(st - sw)``::

    Q- = [[-m a b, -m a b + (m_H l^2 + 2 m a l) c], [0, -m a b]]
    Q+ = [[m b (b - l c), m l (l - b c) + m a^2 + m_H l^2], [m b^2, -m b l c]]
    [dns+, ds+] = Q+^{-1} Q- [dsw-, dst-]

followed by relabelling stance <-> swing.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from numba import njit

from .hybrid import HybridArc, HybridSystem, InputBox, ContractError

LIMIT_CYCLE_STATE = np.array([0.0, 0.0, 0.4, -2.0])
SCISSOR = 0.05
FALL_ANGLE = np.pi / 2
FALL_HIP_FRACTION = 0.3
JUMP_WIDTH = 1e-2


@dataclass(frozen=True)
class WalkerParams:
    m: float = 5.0
    m_h: float = 10.0
    a: float = 0.5
    b: float = 0.5
    slope: float = 0.0525
    gravity: float = 9.81

    def __post_init__(self):
        if min(self.m, self.m_h, self.a, self.b, self.gravity) <= 0:
            raise ValueError("walker masses, lengths and gravity must be positive")
        if abs(self.slope) >= np.pi / 2:
            raise ValueError("|slope| must be below pi/2")

    @property
    def l(self) -> float:
        return self.a + self.b


@dataclass
class WalkerState:
    theta_stance: float
    theta_swing: float
    dtheta_stance: float
    dtheta_swing: float

    def as_vector(self) -> np.ndarray:
        return np.array([self.theta_stance, self.theta_swing, self.dtheta_stance, self.dtheta_swing])

    @classmethod
    def from_vector(cls, z) -> "WalkerState":
        z = np.asarray(z, dtype=float)
        return cls(*map(float, z[:4]))


ACTUATION = np.array([[1.0, -1.0], [0.0, 1.0]])


def mass_matrix(p: WalkerParams, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    c = np.cos(z[..., 0] - z[..., 1])
    l = p.l
    M = np.empty(z.shape[:-1] + (2, 2))
    M[..., 0, 0] = (p.m_h + p.m) * l * l + p.m * p.a * p.a
    M[..., 0, 1] = M[..., 1, 0] = -p.m * l * p.b * c
    M[..., 1, 1] = p.m * p.b * p.b
    return M


def bias(p: WalkerParams, z) -> np.ndarray:
    """Coriolis/centrifugal plus gravity terms ``C q' + G``."""
    z = np.asarray(z, dtype=float)
    st, sw, dst, dsw = z[..., 0], z[..., 1], z[..., 2], z[..., 3]
    s = np.sin(st - sw)
    l, g = p.l, p.gravity
    out = np.empty(z.shape[:-1] + (2,))
    out[..., 0] = -p.m * l * p.b * s * dsw**2 - (p.m_h * l + p.m * p.a + p.m * l) * g * np.sin(st)
    out[..., 1] = p.m * l * p.b * s * dst**2 + p.m * p.b * g * np.sin(sw)
    return out


def _solve2(M, r):
    # closed-form 2x2 solve, batched over leading axes
    det = M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] * M[..., 1, 0]
    if np.any(np.abs(det) < 1e-12):
        raise FloatingPointError("singular mass matrix")
    x0 = (M[..., 1, 1] * r[..., 0] - M[..., 0, 1] * r[..., 1]) / det
    x1 = (M[..., 0, 0] * r[..., 1] - M[..., 1, 0] * r[..., 0]) / det
    return np.stack([x0, x1], axis=-1)


def walker_flow(p: WalkerParams, z, u=None) -> np.ndarray:
    """State derivative of the swing phase; batched over leading axes."""
    z = np.asarray(z, dtype=float)
    rhs = -bias(p, z)
    if u is not None:
        rhs = rhs + np.asarray(u, dtype=float) @ ACTUATION.T
    acc = _solve2(mass_matrix(p, z), rhs)
    return np.concatenate([z[..., 2:4], acc], axis=-1)


def flow_affine(p: WalkerParams, z):
    """``(f, g)`` with ``walker_flow(z, u) = f + g u``; ``g`` has shape (..., 4, 2)."""
    z = np.asarray(z, dtype=float)
    f = walker_flow(p, z)
    M = mass_matrix(p, z)
    det = M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] ** 2
    Minv = np.empty_like(M)
    Minv[..., 0, 0] = M[..., 1, 1] / det
    Minv[..., 1, 1] = M[..., 0, 0] / det
    Minv[..., 0, 1] = Minv[..., 1, 0] = -M[..., 0, 1] / det
    g = np.zeros(z.shape[:-1] + (4, 2))
    g[..., 2:, :] = Minv @ ACTUATION
    return f, g


def foot_height(p: WalkerParams, z) -> np.ndarray:
    """Swing-foot height above the ramp surface."""
    z = np.asarray(z, dtype=float)
    return p.l * (np.cos(z[..., 0] - p.slope) - np.cos(z[..., 1] - p.slope))


def touchdown_guard(p: WalkerParams, z, scissor: float = SCISSOR):
    """Foot height, held positive while the legs are spread less than ``scissor``.

    Equals :func:`foot_height` whenever the swing foot leads the stance foot by
    more than ``scissor`` rad; the max with ``sw - st + scissor`` removes the
    spurious crossing as the legs pass each other.
    """
    z = np.asarray(z, dtype=float)
    return np.maximum(foot_height(p, z), z[..., 1] - z[..., 0] + scissor)


def hip_height(p: WalkerParams, z):
    z = np.asarray(z, dtype=float)
    return p.l * np.cos(z[..., 0] - p.slope)


def fallen(p: WalkerParams, z):
    z = np.asarray(z, dtype=float)
    return (
        (np.abs(z[..., 0]) > FALL_ANGLE)
        | (np.abs(z[..., 1]) > FALL_ANGLE)
        | (hip_height(p, z) < FALL_HIP_FRACTION * p.l)
    )


def relabel(z):
    z = np.asarray(z, dtype=float)
    return z[..., [1, 0, 3, 2]]


def impact_matrices(p: WalkerParams, z):
    z = np.asarray(z, dtype=float)
    c = np.cos(z[..., 0] - z[..., 1])
    m, mh, a, b, l = p.m, p.m_h, p.a, p.b, p.l
    Qm = np.zeros(z.shape[:-1] + (2, 2))
    Qm[..., 0, 0] = -m * a * b
    Qm[..., 0, 1] = -m * a * b + (mh * l * l + 2 * m * a * l) * c
    Qm[..., 1, 1] = -m * a * b
    Qp = np.empty(z.shape[:-1] + (2, 2))
    Qp[..., 0, 0] = m * b * (b - l * c)
    Qp[..., 0, 1] = m * l * (l - b * c) + m * a * a + mh * l * l
    Qp[..., 1, 0] = m * b * b
    Qp[..., 1, 1] = -m * b * l * c
    return Qm, Qp


def impact_map(p: WalkerParams, z) -> np.ndarray:
    """Post-impact state (plastic impact, then stance/swing relabelling)."""
    z = np.asarray(z, dtype=float)
    Qm, Qp = impact_matrices(p, z)
    pre = z[..., [3, 2]]  # [non-stance, stance] velocities
    rhs = (Qm @ pre[..., None])[..., 0]
    det = Qp[..., 0, 0] * Qp[..., 1, 1] - Qp[..., 0, 1] * Qp[..., 1, 0]
    if np.any(np.abs(det) < 1e-12):
        raise FloatingPointError("singular impact matrix")
    post = _solve2(Qp, rhs)  # [new swing (old stance), new stance (old swing)]
    out = np.empty_like(z)
    out[..., 0] = z[..., 1]
    out[..., 1] = z[..., 0]
    out[..., 2] = post[..., 1]
    out[..., 3] = post[..., 0]
    return out


def kinetic_energy(p: WalkerParams, z):
    z = np.asarray(z, dtype=float)
    q = z[..., 2:4]
    M = mass_matrix(p, z)
    return 0.5 * np.einsum("...i,...ij,...j->...", q, M, q)


def potential_energy(p: WalkerParams, z):
    """Gravitational potential relative to the current stance foot."""
    z = np.asarray(z, dtype=float)
    st, sw = z[..., 0], z[..., 1]
    l = p.l
    return p.gravity * ((p.m * p.a + p.m_h * l + p.m * l) * np.cos(st) - p.m * p.b * np.cos(sw))


def mechanical_energy(p: WalkerParams, z):
    return kinetic_energy(p, z) + potential_energy(p, z)


# --------------------------------------------------------------------------
# expert controller


@dataclass(frozen=True)
class ExpertGains:
    """Energy-shaping gains and the input box (ankle, hip) in N m."""

    k_energy: float = 2.0
    u_max_ankle: float = 10.0
    u_max_hip: float = 10.0

    @property
    def box(self) -> InputBox:
        return InputBox(np.array([-self.u_max_ankle, -self.u_max_hip]), np.array([self.u_max_ankle, self.u_max_hip]))


def energy_expert(p: WalkerParams, z, E_ref: float, gains: ExpertGains = ExpertGains()):
    """``u = clip(-k (E - E_ref) S^T q')``; injected power is ``-k (E - E_ref) |S^T q'|^2``."""
    z = np.asarray(z, dtype=float)
    err = mechanical_energy(p, z) - E_ref
    w = z[..., 2:4] @ ACTUATION  # S^T q'
    u = -gains.k_energy * err[..., None] * w
    return gains.box.clip(u)


# --------------------------------------------------------------------------
# hybrid system construction


def walker_system(
    params: WalkerParams = WalkerParams(),
    delta_c: float = 0.0,
    truth_params: Optional[WalkerParams] = None,
    gains: ExpertGains = ExpertGains(),
    name: str = "compass_gait",
    jump_width: float = None,
) -> HybridSystem:
    """Walker as a :class:`HybridSystem`.

    The estimate uses ``params``; ``truth_params`` (if given) provides the
    ground-truth flow used by :class:`~rhcbf.hybrid.Truth` realizations.  The jump
    is unactuated and exact (``Delta_d = 0``).  The jump set is the touchdown
    band ``-jump_width <= guard <= 0``; states with the foot deeper below the
    ramp are outside the domain.
    """
    jump_width = JUMP_WIDTH if jump_width is None else jump_width

    def guard(z):
        return float(touchdown_guard(params, z))

    def est_flow(z, t, u):
        return walker_flow(params, z, u)

    def est_jump(z, t, u):
        return impact_map(params, z)

    truth_flow = truth_jump = None
    if truth_params is not None:
        truth_flow = lambda z, t, u: walker_flow(truth_params, z, u)  # noqa: E731
        truth_jump = lambda z, t, u: impact_map(truth_params, z)  # noqa: E731

    return HybridSystem(
        n_z=4,
        m_c=2,
        m_d=0,
        flow_set=lambda z: guard(z) >= -1e-6,
        jump_set=lambda z: -jump_width <= guard(z) <= 0.0,
        guard=guard,
        est_flow=est_flow,
        est_jump=est_jump,
        err_flow=lambda z, t, u: delta_c,
        err_jump=lambda z, t, u: 0.0,
        input_box_c=gains.box,
        input_box_d=InputBox.empty(),
        truth_flow=truth_flow,
        truth_jump=truth_jump,
        failure=lambda z: bool(fallen(params if truth_params is None else truth_params, z)),
        name=name,
    )


def in_walker_domain(p: WalkerParams, Z, jump_width: float = JUMP_WIDTH) -> np.ndarray:
    """Batched membership in the flow set or touchdown band."""
    return touchdown_guard(p, Z) >= -jump_width


def with_delta(sys: HybridSystem, delta_c: float) -> HybridSystem:
    return replace(sys, err_flow=lambda z, t, u: delta_c)


def swing_initial_conditions(n_grid: int = 1, noise_halfwidth=(0.0, 0.0), rng=None, uniform: bool = False):
    """Swing-leg initial conditions around the passive limit-cycle point.

    Stance is fixed at ``(0, 0.4)``; the swing ``(angle, rate)`` lies on an
    ``n_grid x n_grid`` grid (or ``n_grid**2`` uniform draws) centred at
    ``(0, -2.0)`` with the given half-widths.
    """
    if n_grid < 1:
        raise ValueError("n_grid must be >= 1")
    hw = np.broadcast_to(np.asarray(noise_halfwidth, dtype=float), (2,))
    if uniform:
        rng = np.random.default_rng(0) if rng is None else rng
        off = rng.uniform(-hw, hw, size=(n_grid * n_grid, 2))
    else:
        ax0 = np.linspace(-hw[0], hw[0], n_grid) if n_grid > 1 else np.zeros(1)
        ax1 = np.linspace(-hw[1], hw[1], n_grid) if n_grid > 1 else np.zeros(1)
        A, B = np.meshgrid(ax0, ax1, indexing="ij")
        off = np.column_stack([A.ravel(), B.ravel()])
    out = np.tile(LIMIT_CYCLE_STATE, (off.shape[0], 1))
    out[:, 1] += off[:, 0]
    out[:, 3] += off[:, 1]
    return out


def count_steps(arc: HybridArc, max_steps: Optional[int] = 20) -> int:
    """Impacts recorded before termination, capped at ``max_steps``."""
    n = arc.n_jumps
    return n if max_steps is None else min(n, max_steps)


def passive_energy_reference(params: WalkerParams = WalkerParams(), z0=LIMIT_CYCLE_STATE, settle_steps: int = 6, step: float = 1e-3) -> float:
    """Average mechanical energy over one period of the passive limit cycle."""
    from .hybrid import simulate

    sys = walker_system(params)
    zero = lambda z, t: np.zeros(2)  # noqa: E731
    arc = simulate(sys, z0, (zero, None), horizon=(60.0, settle_steps + 1), step=step)
    if arc.n_jumps < settle_steps + 1:
        raise ContractError("passive walker did not settle onto a limit cycle")
    seg = next(s for s in arc.segments if s.j == settle_steps)
    E = mechanical_energy(params, seg.z)
    # trapezoid time average over the stride
    return float(np.trapezoid(E, seg.t) / (seg.t[-1] - seg.t[0]))


# --------------------------------------------------------------------------
# batched simulation (sweeps and data collection)

RUNNING, WALKED, FELL, TIMEOUT = 0, 1, 2, 3


@dataclass
class BatchResult:
    steps: np.ndarray  # (N,) impacts before termination
    status: np.ndarray  # (N,) WALKED | FELL | TIMEOUT
    t_final: np.ndarray
    z_final: np.ndarray
    flow_samples: Optional[dict] = None  # walker, j, t, z, u arrays
    jump_samples: Optional[dict] = None  # walker, j, t, z arrays


def _ball_batch(rng, n, dim):
    d = rng.standard_normal((n, dim))
    nrm = np.linalg.norm(d, axis=1, keepdims=True)
    nrm[nrm == 0] = 1.0
    return d / nrm * rng.random((n, 1)) ** (1.0 / dim)


def simulate_batch(
    params: WalkerParams,
    z0,
    control=None,
    noise_radius: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    max_steps: int = 20,
    t_max: float = 20.0,
    step: float = 1e-3,
    truth_params: Optional[WalkerParams] = None,
    sample_every: int = 0,
    guard_tol: float = 1e-8,
) -> BatchResult:
    """Simulate many walkers at once with RK4 and per-walker impact bisection.

    ``control(z) -> u`` acts on a (k, 4) batch and is held over each step.  The
    realized flow is the ``truth_params`` dynamics (default ``params``) plus a
    disturbance uniform in the ball of radius ``noise_radius``, redrawn every
    step and held over its RK4 stages.  The touchdown guard and impact use the
    same realized parameters.  ``sample_every > 0`` records flow samples every
    that many integrator steps (restarting at each impact) plus every
    pre-impact state.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    plant = truth_params if truth_params is not None else params
    pv = _param_vector(plant)
    Z = np.array(z0, dtype=float).reshape(-1, 4).copy()
    N = Z.shape[0]
    T = np.zeros(N)
    J = np.zeros(N, dtype=np.int64)
    status = np.zeros(N, dtype=np.int64)
    k_step = np.zeros(N, dtype=np.int64)
    rec_f = {"walker": [], "j": [], "t": [], "z": [], "u": []} if sample_every else None
    rec_j = {"walker": [], "j": [], "t": [], "z": []} if sample_every else None
    if max_steps <= 0:
        status[:] = WALKED
    status[fallen(plant, Z) & (status == RUNNING)] = FELL

    while True:
        act = np.flatnonzero(status == RUNNING)
        if act.size == 0:
            break
        z = Z[act]
        u = np.zeros((act.size, 2)) if control is None else np.asarray(control(z), dtype=float).reshape(act.size, 2)
        if noise_radius > 0:
            xi = noise_radius * _ball_batch(rng, act.size, 4)
        else:
            xi = np.zeros((act.size, 4))
        h = np.minimum(step, t_max - T[act])

        if rec_f is not None:
            take = k_step[act] % sample_every == 0
            if np.any(take):
                rec_f["walker"].append(act[take])
                rec_f["j"].append(J[act][take])
                rec_f["t"].append(T[act][take])
                rec_f["z"].append(z[take])
                rec_f["u"].append(u[take])

        z_new, cross, tau, z_pre = _kernel_step(pv, z, u, xi, h, guard_tol)
        if not np.all(np.isfinite(z_new)):
            raise FloatingPointError("non-finite walker state")
        if rec_j is not None and np.any(cross):
            c = np.flatnonzero(cross)
            rec_j["walker"].append(act[c])
            rec_j["j"].append(J[act[c]])
            rec_j["t"].append(T[act[c]] + tau[c])
            rec_j["z"].append(z_pre[c])
        T[act] += tau
        Z[act] = z_new
        J[act] += cross
        k_step[act] += 1
        k_step[act[cross]] = 0
        st = status[act]
        st[fallen(plant, z_new)] = FELL
        st[(st == RUNNING) & (J[act] >= max_steps)] = WALKED
        st[(st == RUNNING) & (T[act] >= t_max - 1e-12)] = TIMEOUT
        status[act] = st

    def pack(rec):
        if rec is None:
            return None
        if not rec["walker"]:
            return {k: np.zeros((0,) + ((4,) if k == "z" else (2,) if k == "u" else ())) for k in rec}
        return {k: np.concatenate(v) for k, v in rec.items()}

    return BatchResult(np.minimum(J, max_steps), status, T, Z, pack(rec_f), pack(rec_j))


def _param_vector(p: WalkerParams) -> np.ndarray:
    return np.array([p.m, p.m_h, p.a, p.b, p.slope, p.gravity, SCISSOR])


@njit(cache=True)
def _nb_flow(pv, x, u, xi, out):
    m, mh, a, b, gr = pv[0], pv[1], pv[2], pv[3], pv[5]
    l = a + b
    st, sw, dst, dsw = x[0], x[1], x[2], x[3]
    c = np.cos(st - sw)
    s = np.sin(st - sw)
    M11 = (mh + m) * l * l + m * a * a
    M12 = -m * l * b * c
    M22 = m * b * b
    r1 = m * l * b * s * dsw * dsw + (mh * l + m * a + m * l) * gr * np.sin(st) + u[0] - u[1]
    r2 = -m * l * b * s * dst * dst - m * b * gr * np.sin(sw) + u[1]
    det = M11 * M22 - M12 * M12
    out[0] = dst + xi[0]
    out[1] = dsw + xi[1]
    out[2] = (M22 * r1 - M12 * r2) / det + xi[2]
    out[3] = (M11 * r2 - M12 * r1) / det + xi[3]


@njit(cache=True)
def _nb_guard(pv, x):
    l = pv[2] + pv[3]
    hgt = l * (np.cos(x[0] - pv[4]) - np.cos(x[1] - pv[4]))
    sc = x[1] - x[0] + pv[6]
    return hgt if hgt > sc else sc


@njit(cache=True)
def _nb_rk4(pv, x, u, xi, h, out):
    k1 = np.empty(4)
    k2 = np.empty(4)
    k3 = np.empty(4)
    k4 = np.empty(4)
    y = np.empty(4)
    _nb_flow(pv, x, u, xi, k1)
    for i in range(4):
        y[i] = x[i] + 0.5 * h * k1[i]
    _nb_flow(pv, y, u, xi, k2)
    for i in range(4):
        y[i] = x[i] + 0.5 * h * k2[i]
    _nb_flow(pv, y, u, xi, k3)
    for i in range(4):
        y[i] = x[i] + h * k3[i]
    _nb_flow(pv, y, u, xi, k4)
    for i in range(4):
        out[i] = x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])


@njit(cache=True)
def _nb_impact(pv, x, out):
    m, mh, a, b = pv[0], pv[1], pv[2], pv[3]
    l = a + b
    c = np.cos(x[0] - x[1])
    qm11 = -m * a * b
    qm12 = -m * a * b + (mh * l * l + 2.0 * m * a * l) * c
    qm22 = -m * a * b
    qp11 = m * b * (b - l * c)
    qp12 = m * l * (l - b * c) + m * a * a + mh * l * l
    qp21 = m * b * b
    qp22 = -m * b * l * c
    r1 = qm11 * x[3] + qm12 * x[2]
    r2 = qm22 * x[2]
    det = qp11 * qp22 - qp12 * qp21
    v_ns = (qp22 * r1 - qp12 * r2) / det
    v_s = (qp11 * r2 - qp21 * r1) / det
    out[0] = x[1]
    out[1] = x[0]
    out[2] = v_s
    out[3] = v_ns


@njit(cache=True)
def _kernel_step(pv, Z, U, XI, H, tol):
    n = Z.shape[0]
    Znew = np.empty_like(Z)
    cross = np.zeros(n, dtype=np.bool_)
    tau = H.copy()
    Zpre = np.zeros_like(Z)
    zn = np.empty(4)
    zm = np.empty(4)
    zh = np.empty(4)
    for k in range(n):
        x = Z[k]
        _nb_rk4(pv, x, U[k], XI[k], H[k], zn)
        g0 = _nb_guard(pv, x)
        g1 = _nb_guard(pv, zn)
        if g0 > 0.0 and g1 <= 0.0:
            lo = 0.0
            hi = H[k]
            for i in range(4):
                zh[i] = zn[i]
            for _ in range(200):
                if _nb_guard(pv, zh) >= -tol:
                    break
                mid = 0.5 * (lo + hi)
                _nb_rk4(pv, x, U[k], XI[k], mid, zm)
                if _nb_guard(pv, zm) > 0.0:
                    lo = mid
                else:
                    hi = mid
                    for i in range(4):
                        zh[i] = zm[i]
            cross[k] = True
            tau[k] = hi
            for i in range(4):
                Zpre[k, i] = zh[i]
            _nb_impact(pv, zh, zn)
        for i in range(4):
            Znew[k, i] = zn[i]
    return Znew, cross, tau, Zpre


def _rk4_batch(field, z, h):
    k1 = field(z)
    k2 = field(z + 0.5 * h * k1)
    k3 = field(z + 0.5 * h * k2)
    k4 = field(z + h * k3)
    return z + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
