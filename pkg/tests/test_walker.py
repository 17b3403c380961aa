import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings, strategies as st

from rhcbf.hybrid import HybridArc, JumpRecord, simulate
from rhcbf.walker import (
    ACTUATION,
    FELL,
    LIMIT_CYCLE_STATE,
    WALKED,
    ExpertGains,
    WalkerParams,
    WalkerState,
    bias,
    count_steps,
    energy_expert,
    fallen,
    flow_affine,
    foot_height,
    impact_map,
    kinetic_energy,
    mass_matrix,
    mechanical_energy,
    swing_initial_conditions,
    passive_energy_reference,
    relabel,
    simulate_batch,
    touchdown_guard,
    walker_flow,
    walker_system,
)

P = WalkerParams()


# --------------------------------------------------------------------------
# independent oracle: Euler-Lagrange equations derived symbolically


def _lagrange_oracle(p: WalkerParams):
    st_, sw_, dst, dsw = sp.symbols("st sw dst dsw")
    t = sp.symbols("t")
    q1, q2 = sp.Function("q1")(t), sp.Function("q2")(t)
    a, b, l = p.a, p.b, p.a + p.b
    # positions in the vertical/horizontal world frame, stance foot at the origin
    r_st = sp.Matrix([a * sp.sin(q1), a * sp.cos(q1)])
    r_hip = sp.Matrix([l * sp.sin(q1), l * sp.cos(q1)])
    r_sw = r_hip - sp.Matrix([b * sp.sin(q2), b * sp.cos(q2)])
    T = 0
    V = 0
    for m, r in ((p.m, r_st), (p.m_h, r_hip), (p.m, r_sw)):
        v = r.diff(t)
        T += sp.Rational(1, 2) * m * (v.T * v)[0]
        V += m * p.gravity * r[1]
    L = T - V
    eqs = [sp.diff(L.diff(qi.diff(t)), t) - L.diff(qi) for qi in (q1, q2)]
    subs = {q1.diff(t, 2): sp.Symbol("a1"), q2.diff(t, 2): sp.Symbol("a2")}
    eqs = [e.subs(subs) for e in eqs]
    subs = {q1.diff(t): dst, q2.diff(t): dsw}
    eqs = [e.subs(subs).subs({q1: st_, q2: sw_}) for e in eqs]
    acc = sp.Matrix([sp.Symbol("a1"), sp.Symbol("a2")])
    M = sp.Matrix([[sp.expand(e).coeff(s) for s in acc] for e in eqs])
    rest = sp.Matrix([sp.expand(e - sum(M[i, j] * acc[j] for j in range(2))) for i, e in enumerate(eqs)])
    args = (st_, sw_, dst, dsw)
    return sp.lambdify(args, M, "numpy"), sp.lambdify(args, rest, "numpy")


_ORACLE = _lagrange_oracle(P)


def random_states(n, seed=0):
    rng = np.random.default_rng(seed)
    return np.column_stack([rng.uniform(-0.6, 0.6, (n, 2)), rng.uniform(-3, 3, (n, 2))])


def test_mass_matrix_and_bias_match_lagrangian_oracle():
    M_fn, rest_fn = _ORACLE
    for z in random_states(50):
        np.testing.assert_allclose(mass_matrix(P, z), np.array(M_fn(*z), dtype=float), rtol=1e-10, atol=1e-10)
        np.testing.assert_allclose(bias(P, z), np.array(rest_fn(*z), dtype=float).ravel(), rtol=1e-10, atol=1e-10)


def test_mass_matrix_symmetric_positive_definite():
    M = mass_matrix(P, random_states(200))
    np.testing.assert_array_equal(M, np.swapaxes(M, -1, -2))
    assert np.all(np.linalg.eigvalsh(M) > 0)


def test_gravity_only_accelerations_point_downhill():
    # legs spread symmetrically at rest: the stance leg (leaning forward) tips further forward
    z = np.array([0.2, -0.2, 0.0, 0.0])
    acc = walker_flow(P, z)[2:]
    expected = np.linalg.solve(mass_matrix(P, z), -bias(P, z))
    np.testing.assert_allclose(acc, expected, rtol=1e-12)
    assert acc[0] > 0


@given(st.floats(-0.5, 0.5), st.floats(-0.5, 0.5), st.floats(-3, 3), st.floats(-3, 3),
       st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10))
def test_flow_is_affine_in_control(a, b, c, d, u1, u2, v1, v2):
    z = np.array([a, b, c, d])
    u, v = np.array([u1, u2]), np.array([v1, v2])
    f0 = walker_flow(P, z)
    lhs = walker_flow(P, z, u + v) - f0
    rhs = (walker_flow(P, z, u) - f0) + (walker_flow(P, z, v) - f0)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)
    F, G = flow_affine(P, z)
    np.testing.assert_allclose(F + G @ u, walker_flow(P, z, u), atol=1e-10)


def test_doubling_input_doubles_its_contribution():
    z = np.array([0.1, -0.15, 1.0, -1.2])
    u = np.array([1.5, -0.7])
    f0 = walker_flow(P, z)
    np.testing.assert_allclose(walker_flow(P, z, 2 * u) - f0, 2 * (walker_flow(P, z, u) - f0), atol=1e-12)


def test_flow_batched_matches_rowwise():
    Z = random_states(20)
    U = np.random.default_rng(1).uniform(-5, 5, (20, 2))
    rows = np.array([walker_flow(P, z, u) for z, u in zip(Z, U)])
    np.testing.assert_allclose(walker_flow(P, Z, U), rows, atol=1e-12)


def test_state_vector_round_trip():
    s = WalkerState(0.1, -0.2, 0.3, -0.4)
    np.testing.assert_array_equal(s.as_vector(), [0.1, -0.2, 0.3, -0.4])
    assert WalkerState.from_vector(s.as_vector()) == s


def test_params_validation():
    with pytest.raises(ValueError):
        WalkerParams(m=0.0)
    with pytest.raises(ValueError):
        WalkerParams(slope=2.0)
    assert WalkerParams().l == 1.0


# --------------------------------------------------------------------------
# guard


def test_guard_zero_with_both_legs_vertical_on_flat_ground():
    flat = WalkerParams(slope=0.0)
    assert foot_height(flat, np.zeros(4)) == pytest.approx(0.0, abs=1e-15)


def test_guard_positive_with_swing_leg_lifted():
    # swing leg bent back and up relative to a vertical stance leg
    assert foot_height(P, np.array([0.0, 0.3, 0, 0])) > 0
    assert touchdown_guard(P, np.array([0.0, 0.3, 0, 0])) > 0


def test_scissor_guard_masks_leg_crossing():
    # legs together: the foot height is ~0 but the guard stays positive
    z = np.array([0.0, 0.0, 0.4, -2.0])
    assert touchdown_guard(P, z) > 0.04


def test_guard_continuous_along_passive_trajectory():
    sys = walker_system(P)
    arc = simulate(sys, LIMIT_CYCLE_STATE, (lambda z, t: np.zeros(2), None), horizon=(3.0, 3), step=1e-3)
    for seg in arc.segments:
        g = touchdown_guard(P, seg.z)
        assert np.all(np.isfinite(g))
        vel = np.abs(seg.z[:, 2:]).max()
        assert np.abs(np.diff(g)).max() <= 1e-3 * 2 * P.l * vel + 1e-9


# --------------------------------------------------------------------------
# impact


def pre_impact_states(n, seed=0):
    rng = np.random.default_rng(seed)
    stance = rng.uniform(0.1, 0.45, n)
    swing = 2 * P.slope - stance  # swing foot on the ramp
    return np.column_stack([stance, swing, rng.normal(0, 1.5, n), rng.normal(0, 1.5, n)])


def _kinematics(p, z):
    """Masses, positions and velocities (stance leg mass, hip, swing leg mass) with the stance foot at the origin."""
    st_, sw, dst, dsw = z
    e = lambda th: np.array([np.sin(th), np.cos(th)])  # noqa: E731
    de = lambda th, w: w * np.array([np.cos(th), -np.sin(th)])  # noqa: E731
    r = [p.a * e(st_), p.l * e(st_), p.l * e(st_) - p.b * e(sw)]
    v = [p.a * de(st_, dst), p.l * de(st_, dst), p.l * de(st_, dst) - p.b * de(sw, dsw)]
    return [p.m, p.m_h, p.m], r, v


def _cross(u, w):
    return u[0] * w[1] - u[1] * w[0]


def test_impact_conserves_momentum_about_contact_and_hip():
    for z in pre_impact_states(100):
        m, r, v = _kinematics(P, z)
        foot = r[1] - P.l * np.array([np.sin(z[1]), np.cos(z[1])])
        pre_contact = sum(mi * _cross(ri - foot, vi) for mi, ri, vi in zip(m, r, v))
        pre_trailing = m[0] * _cross(r[0] - r[1], v[0])  # old stance leg about the hip
        m, r, v = _kinematics(P, impact_map(P, z))  # new stance foot at the origin
        post_contact = sum(mi * _cross(ri, vi) for mi, ri, vi in zip(m, r, v))
        post_trailing = m[2] * _cross(r[2] - r[1], v[2])  # the same leg, now swinging
        np.testing.assert_allclose(post_contact, pre_contact, rtol=1e-9, atol=1e-9)
        np.testing.assert_allclose(post_trailing, pre_trailing, rtol=1e-9, atol=1e-9)


def test_impact_never_increases_kinetic_energy():
    Z = pre_impact_states(1000, seed=3)
    before = kinetic_energy(P, Z)
    after = kinetic_energy(P, impact_map(P, Z))
    assert np.all(after <= before * (1 + 1e-12) + 1e-12)


def test_impact_zero_velocity_swaps_angles():
    z = np.array([0.2, 2 * P.slope - 0.2, 0.0, 0.0])
    out = impact_map(P, z)
    np.testing.assert_array_equal(out[:2], z[[1, 0]])
    np.testing.assert_allclose(out[2:], 0.0, atol=1e-15)


def test_relabel_is_an_involution():
    z = np.array([0.1, -0.2, 0.3, -0.4])
    np.testing.assert_array_equal(relabel(relabel(z)), z)


# --------------------------------------------------------------------------
# energy and expert


def test_passive_energy_drift_per_step():
    sys = walker_system(P)
    arc = simulate(sys, LIMIT_CYCLE_STATE, (lambda z, t: np.zeros(2), None), horizon=(8.0, 10), step=1e-3)
    for seg in arc.segments:
        E = mechanical_energy(P, seg.z)
        assert np.abs(np.diff(E)).max() <= 1e-5


def test_expert_zero_at_reference_energy():
    z = np.array([0.1, -0.1, 0.5, -1.5])
    u = energy_expert(P, z, mechanical_energy(P, z))
    np.testing.assert_allclose(u, 0.0, atol=1e-12)


def test_expert_respects_input_box():
    gains = ExpertGains(k_energy=50.0, u_max_ankle=3.0, u_max_hip=2.0)
    Z = random_states(10_000, seed=5) * 2
    U = energy_expert(P, Z, 100.0, gains)
    assert np.all(np.abs(U[:, 0]) <= 3.0) and np.all(np.abs(U[:, 1]) <= 2.0)


def test_expert_power_drives_energy_toward_reference():
    Z = random_states(500, seed=2)
    E_ref = 150.0
    U = energy_expert(P, Z, E_ref, ExpertGains(k_energy=0.01, u_max_ankle=1e9, u_max_hip=1e9))
    power = np.einsum("ni,ni->n", U, Z[:, 2:4] @ ACTUATION)
    err = mechanical_energy(P, Z) - E_ref
    assert np.all(power * err <= 1e-12)


def test_energy_reference_is_stable():
    e1 = passive_energy_reference(P)
    assert 140 < e1 < 170
    assert passive_energy_reference(P) == e1


# --------------------------------------------------------------------------
# walking behaviour


def test_passive_walker_walks_ten_steps():
    sys = walker_system(P)
    arc = simulate(sys, LIMIT_CYCLE_STATE, (lambda z, t: np.zeros(2), None), horizon=(30.0, 10), step=1e-3)
    assert count_steps(arc) >= 10


def test_passive_walker_falls_after_swing_perturbation():
    z0 = LIMIT_CYCLE_STATE + np.array([0, 0, 0, 0.5])
    res = simulate_batch(P, z0, None, max_steps=20, t_max=30.0)
    assert res.status[0] == FELL and res.steps[0] <= 5


def test_expert_walks_from_limit_cycle_point():
    E_ref = passive_energy_reference(P)
    res = simulate_batch(P, LIMIT_CYCLE_STATE, lambda Z: energy_expert(P, Z, E_ref), max_steps=12, t_max=30.0)
    assert res.status[0] == WALKED and res.steps[0] >= 10


def test_batch_matches_generic_simulator():
    E_ref = passive_energy_reference(P)
    z0 = LIMIT_CYCLE_STATE + np.array([0, 0.02, 0, 0.1])
    sys = walker_system(P)
    law = lambda z, t: energy_expert(P, z, E_ref)  # noqa: E731
    arc = simulate(sys, z0, (law, None), horizon=(4.0, 3), step=1e-3)
    res = simulate_batch(P, z0, lambda Z: energy_expert(P, Z, E_ref), max_steps=3, t_max=4.0)
    assert res.steps[0] == arc.n_jumps == 3
    np.testing.assert_allclose(res.t_final[0], arc.jumps[-1].t, atol=2e-6)
    np.testing.assert_allclose(res.z_final[0], arc.jumps[-1].z_after, atol=1e-4)


def test_fall_detection():
    assert fallen(P, np.array([1.7, 0, 0, 0]))
    assert fallen(P, np.array([0, -1.7, 0, 0]))
    assert not fallen(P, LIMIT_CYCLE_STATE)


def _arc_with_jumps(n):
    arc = HybridArc(4, 2, 0, segments=[], jumps=[JumpRecord(float(k), k, np.zeros(4), np.zeros(4), np.zeros(0)) for k in range(n)])
    return arc


def test_count_steps_counts_and_caps():
    assert count_steps(_arc_with_jumps(3)) == 3
    assert count_steps(_arc_with_jumps(25)) == 20
    assert count_steps(_arc_with_jumps(25), max_steps=None) == 25


# --------------------------------------------------------------------------
# initial conditions


def test_initial_conditions_centre_point():
    np.testing.assert_array_equal(swing_initial_conditions(1, 0.0), [[0.0, 0.0, 0.4, -2.0]])


def test_initial_conditions_grid_symmetric():
    Z = swing_initial_conditions(3, (0.1, 0.5))
    assert Z.shape == (9, 4)
    np.testing.assert_allclose(Z[:, 0], 0.0)
    np.testing.assert_allclose(Z[:, 2], 0.4)
    off = Z[:, [1, 3]] - np.array([0.0, -2.0])
    np.testing.assert_allclose(np.sort(off, axis=0), np.sort(-off, axis=0), atol=1e-15)


def test_initial_conditions_uniform_within_halfwidth():
    Z = swing_initial_conditions(5, (0.1, 0.5), rng=np.random.default_rng(0), uniform=True)
    assert Z.shape == (25, 4)
    assert np.all(np.abs(Z[:, 1]) <= 0.1) and np.all(np.abs(Z[:, 3] + 2.0) <= 0.5)
    with pytest.raises(ValueError):
        swing_initial_conditions(0)


@settings(max_examples=10)
@given(st.floats(0.0, 0.4))
def test_batch_noise_is_reproducible(radius):
    z0 = swing_initial_conditions(2, (0.05, 0.2))
    a = simulate_batch(P, z0, None, noise_radius=radius, rng=np.random.default_rng(4), max_steps=2, t_max=2.0)
    b = simulate_batch(P, z0, None, noise_radius=radius, rng=np.random.default_rng(4), max_steps=2, t_max=2.0)
    np.testing.assert_array_equal(a.z_final, b.z_final)
    np.testing.assert_array_equal(a.steps, b.steps)
