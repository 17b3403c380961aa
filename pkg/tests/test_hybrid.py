import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rhcbf.hybrid import (
    ContractError,
    DivergenceError,
    HybridArc,
    HybridSystem,
    HybridTime,
    InputBox,
    UniformBall,
    apply_jump,
    guarded_sets,
    integrate_flow,
    sample_admissible,
    simulate,
    uniform_ball,
)


def scalar_system(rate, guard=None, jump=lambda z, t, u: 0.0 * z, flow_set=None, jump_set=None, **kw):
    if guard is not None and flow_set is None:
        flow_set, jump_set = guarded_sets(guard)
    return HybridSystem(
        n_z=1,
        m_c=1,
        m_d=0,
        flow_set=flow_set or (lambda z: True),
        jump_set=jump_set or (lambda z: False),
        guard=guard,
        est_flow=lambda z, t, u: rate(z),
        est_jump=jump,
        **kw,
    )


def no_input(z, t):
    return np.zeros(1)


def decay_error(step):
    sys = scalar_system(lambda z: -z)
    res = integrate_flow(sys, [1.0], 0.0, 0, no_input, t_max=1.0, step=step)
    return abs(res.segment.z[-1, 0] - math.exp(-1.0))


def test_hybrid_time_ordering_and_validation():
    assert HybridTime(1.0, 0) < HybridTime(1.0, 1) < HybridTime(2.0, 0)
    with pytest.raises(ValueError):
        HybridTime(-1.0, 0)


def test_input_box_rejects_inverted_bounds():
    with pytest.raises(ValueError):
        InputBox(np.array([1.0]), np.array([0.0]))


def test_linear_crossing_localized():
    sys = scalar_system(lambda z: np.ones(1), guard=lambda z: 1.0 - z[0])
    res = integrate_flow(sys, [0.0], 0.0, 0, no_input, t_max=5.0)
    assert res.exit == "guard_hit"
    assert abs(res.exit_time - 1.0) <= 1e-8
    assert abs(sys.guard(res.exit_state)) <= 1e-8


def test_exponential_decay_endpoint():
    assert decay_error(1e-3) <= 1e-6


def test_rk4_order():
    e1, e2 = decay_error(0.1), decay_error(0.05)
    assert e1 / e2 >= 12


def test_start_outside_flow_set():
    sys = scalar_system(lambda z: np.ones(1), flow_set=lambda z: z[0] < 1)
    res = integrate_flow(sys, [2.0], 0.0, 0, no_input)
    assert res.exit == "left_flow_set"
    assert len(res.segment) == 0


def test_bad_step():
    sys = scalar_system(lambda z: np.ones(1))
    with pytest.raises(ValueError):
        integrate_flow(sys, [0.0], 0.0, 0, no_input, step=0.0)


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_divergence_detected():
    sys = scalar_system(lambda z: z**2 * 1e200)
    with pytest.raises(DivergenceError):
        integrate_flow(sys, [1e200], 0.0, 0, no_input, t_max=1.0)


def test_stored_states_at_most_one_step_apart():
    sys = scalar_system(lambda z: -z)
    res = integrate_flow(sys, [1.0], 0.0, 0, no_input, t_max=0.37, step=0.01)
    assert np.all(np.diff(res.segment.t) <= 0.01 + 1e-15)
    assert res.segment.t[-1] == pytest.approx(0.37)


@given(st.floats(0.1, 3.0), st.floats(0.05, 2.0))
def test_guard_localization_property(rate, level):
    sys = scalar_system(lambda z: np.array([rate]), guard=lambda z: level - z[0])
    res = integrate_flow(sys, [0.0], 0.0, 0, no_input, t_max=level / rate + 1.0, step=0.01)
    assert res.exit == "guard_hit"
    assert abs(sys.guard(res.exit_state)) <= 1e-8
    assert res.exit_time == pytest.approx(level / rate, abs=1e-8 / rate + 1e-12)


def test_apply_jump_examples():
    sys = scalar_system(lambda z: z, jump=lambda z, t, u: z / 2, jump_set=lambda z: z[0] >= 1)
    assert apply_jump(sys, np.array([1.0]), 0.0, np.zeros(0))[0] == 0.5
    with pytest.raises(ContractError):
        apply_jump(sys, np.array([0.5]), 0.0, np.zeros(0))


def test_jump_with_truth_inside_ball():
    sys = scalar_system(
        lambda z: z,
        jump=lambda z, t, u: np.array([0.5]),
        jump_set=lambda z: True,
        err_jump=lambda z, t, u: 0.1,
        truth_jump=lambda z, t, u: np.array([0.55]),
    )
    out = apply_jump(sys, np.array([1.0]), 0.0, np.zeros(0), dyn=sys.truth_jump)
    assert out[0] == pytest.approx(0.55)
    assert sys.check_truth(np.array([1.0]), 0.0, np.zeros(0), "jump")


def test_simulate_no_jump_toy():
    sys = scalar_system(lambda z: np.zeros(1), flow_set=lambda z: z[0] < 1, jump_set=lambda z: z[0] >= 1)
    arc = simulate(sys, [0.0], (no_input, None), horizon=(1.0, 10))
    assert arc.n_jumps == 0
    assert len(arc.segments) == 1
    assert arc.termination == "horizon_reached"


def test_simulate_two_resets():
    sys = scalar_system(lambda z: np.ones(1), guard=lambda z: 1.0 - z[0])
    arc = simulate(sys, [0.0], (no_input, None), horizon=(2.5, 10))
    assert arc.n_jumps == 2
    assert [jp.t for jp in arc.jumps] == pytest.approx([1.0, 2.0], abs=1e-7)
    assert arc.termination == "horizon_reached"
    # segment endpoints match jump records
    for jp, seg, nxt in zip(arc.jumps, arc.segments, arc.segments[1:]):
        assert np.allclose(seg.z[-1], jp.z_before)
        assert np.allclose(nxt.z[0], jp.z_after)
    times = [(t, j) for t, j, _, _ in arc.states()]
    assert times == sorted(times)


def test_simulate_outside_domain():
    sys = scalar_system(lambda z: z, flow_set=lambda z: z[0] < 1, jump_set=lambda z: False)
    arc = simulate(sys, [5.0], (no_input, None))
    assert arc.termination == "left_domain"


def test_zeno_flagged():
    sys = scalar_system(lambda z: z, jump=lambda z, t, u: z, jump_set=lambda z: True)
    arc = simulate(sys, [1.0], (no_input, None), horizon=(1.0, 1000))
    assert arc.termination == "zeno_suspected"
    assert arc.n_jumps == 26


def test_simulated_states_respect_sets():
    sys = scalar_system(lambda z: np.ones(1), guard=lambda z: 1.0 - z[0])
    arc = simulate(sys, [0.3], (no_input, None), horizon=(3.3, 10))
    assert all(sys.flow_set(z) for _, _, z, _ in arc.states())
    assert all(sys.jump_set(jp.z_before) for jp in arc.jumps)


def test_sample_admissible_degenerate_and_containment():
    sys = HybridSystem(
        n_z=2, m_c=2, m_d=0,
        flow_set=lambda z: True, jump_set=lambda z: False, guard=None,
        est_flow=lambda z, t, u: np.zeros(2), est_jump=lambda z, t, u: z,
        err_flow=lambda z, t, u: 1.0,
    )
    rng = np.random.default_rng(3)
    draws = np.array([sample_admissible(sys, np.zeros(2), 0.0, np.zeros(2), "flow", rng) for _ in range(10_000)])
    assert np.all(np.linalg.norm(draws, axis=1) <= 1.0 + 1e-12)
    # rough uniformity: P(|d| <= 1/2) = 1/4 in 2-D
    assert abs(np.mean(np.linalg.norm(draws, axis=1) <= 0.5) - 0.25) < 0.02
    zero = sys.__class__(**{**sys.__dict__, "err_flow": lambda z, t, u: 0.0})
    assert np.array_equal(sample_admissible(zero, np.zeros(2), 0.0, np.zeros(2), "flow", rng), np.zeros(2))
    a = sample_admissible(sys, np.zeros(2), 0.0, np.zeros(2), "flow", np.random.default_rng(7))
    b = sample_admissible(sys, np.zeros(2), 0.0, np.zeros(2), "flow", np.random.default_rng(7))
    assert np.array_equal(a, b)


@given(st.integers(1, 6), st.floats(0.0, 5.0), st.integers(0, 2**31))
def test_uniform_ball_inside(dim, radius, seed):
    d = uniform_ball(np.random.default_rng(seed), dim, radius)
    assert np.linalg.norm(d) <= radius * (1 + 1e-12)


def test_noisy_simulation_is_deterministic():
    sys = scalar_system(lambda z: -z, err_flow=lambda z, t, u: 0.3)
    a = simulate(sys, [1.0], (no_input, None), UniformBall(), horizon=(0.5, 0), seed=11)
    b = simulate(sys, [1.0], (no_input, None), UniformBall(), horizon=(0.5, 0), seed=11)
    assert np.array_equal(a.segments[0].z, b.segments[0].z)


def test_arc_csv_roundtrip(tmp_path):
    sys = scalar_system(lambda z: np.ones(1), guard=lambda z: 1.0 - z[0])
    arc = simulate(sys, [0.0], (no_input, None), horizon=(2.5, 10), step=0.01)
    arc.to_csv(tmp_path / "arc.csv")
    back = HybridArc.from_csv(tmp_path / "arc.csv")
    assert back.termination == arc.termination
    assert back.n_jumps == arc.n_jumps
    for s, r in zip(arc.segments, back.segments):
        assert np.array_equal(s.t, r.t) and np.array_equal(s.z, r.z)
    header = (tmp_path / "arc.csv").read_text().splitlines()[0]
    assert header == "t,j,z_1,u_1,segment_id"
