import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rhcbf.datasets import (
    DatasetBundle,
    Geometry,
    GeometryError,
    build_ring,
    collect_expert,
    cover_contains,
    epsilon_net_radius,
    gap_to_cover,
    in_covered_region,
    in_ring,
    load_bundle,
    region_probes,
    save_bundle,
    thin_safe_sets,
)
from rhcbf.toys import integrator_system, linear_expert, reset_integrator_system, approach_expert
from rhcbf.walker import WalkerParams, energy_expert, swing_initial_conditions, passive_energy_reference, \
    simulate_batch, touchdown_guard


def point_bundle(points, eps=1.0, sigma=0.5, jump_points=None, **kw):
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = points.shape[1]
    jz = np.zeros((0, n)) if jump_points is None else np.atleast_2d(jump_points)
    return DatasetBundle(n, 1, 0, points, np.zeros((len(points), 1)), np.zeros(len(points)), jz,
                         np.zeros((len(jz), 0)), np.zeros(len(jz)), Geometry(eps, eps, sigma), **kw)


# --------------------------------------------------------------------------
# collection


def test_collect_counts_flow_samples():
    sys = integrator_system(dim=2)
    b = collect_expert(sys, linear_expert(), [[0.5, 0.5]], Geometry(0.1, 0.1, 0.1), sample_dt=0.1,
                       horizon=(1.0, 0), step=1e-3)
    assert (b.n_flow, b.n_jump) == (10, 0)
    np.testing.assert_allclose(b.flow_t, np.arange(10) * 0.1, atol=1e-12)


def test_collect_excludes_samples_outside_safe_interior():
    sys = integrator_system(dim=2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        b = collect_expert(sys, linear_expert(gain=1.0), [[0.5, 0.0]], Geometry(0.1, 0.1, 0.1), sample_dt=0.1,
                           horizon=(1.0, 0), step=1e-3, safe_interior=lambda z: z[0] < 0.4)
    # z_1(t) = 0.5 e^{-t} drops below 0.4 after t = ln(1.25) = 0.223
    assert b.meta["excluded"] == 3
    assert b.n_flow == 7


def test_collect_records_jumps_on_reset_plant():
    sys = reset_integrator_system(delta_c=0.0, delta_d=0.0)
    b = collect_expert(sys, approach_expert(gain=1.0), [[0.5, 0.0]], Geometry(0.05, 0.05, 0.1), sample_dt=0.01,
                       horizon=(5.0, 3), step=1e-3)
    assert b.n_jump >= 1
    np.testing.assert_allclose(b.jump_z[:, 0], 0.9, atol=1e-7)


def test_walker_jump_samples_lie_on_touchdown_guard():
    p = WalkerParams()
    e_ref = passive_energy_reference(p)
    ics = swing_initial_conditions(1, (0.1, 0.5))
    ics = np.vstack([swing_initial_conditions(7, (0.1, 0.5), rng=np.random.default_rng(0), uniform=True), ics])[:50]
    assert len(ics) == 50
    res = simulate_batch(p, ics, lambda Z: energy_expert(p, Z, e_ref), noise_radius=0.25,
                         rng=np.random.default_rng(1), max_steps=3, sample_every=20)
    jz = res.jump_samples["z"]
    assert len(res.flow_samples["z"]) > 0 and len(jz) > 0
    assert np.abs(touchdown_guard(p, jz)).max() <= 1e-7


# --------------------------------------------------------------------------
# cover membership


def test_cover_contains_open_flow_closed_jump():
    b = point_bundle([[0.0, 0.0]], eps=1.0, jump_points=[[0.0, 0.0]])
    assert cover_contains(b, [0.5, 0.0], "flow")
    assert not cover_contains(b, [1.0, 0.0], "flow")
    assert cover_contains(b, [1.0, 0.0], "jump")
    assert not cover_contains(b, [2.0, 0.0], "flow")
    assert not cover_contains(b, [2.0, 0.0], "jump")


def test_cover_respects_flow_set():
    b = point_bundle([[0.0, 0.0]], eps=1.0, flow_set=lambda z: z[0] <= 0.2)
    np.testing.assert_array_equal(cover_contains(b, [[0.1, 0.0], [0.5, 0.0]]), [True, False])


def test_cover_with_per_sample_radii():
    b = point_bundle([[0.0], [3.0]], eps=1.0, flow_radius=np.array([0.5, 1.0]))
    np.testing.assert_array_equal(cover_contains(b, [[0.6], [2.1], [2.5]]), [False, True, True])
    np.testing.assert_allclose(gap_to_cover(b, [[0.6], [1.5]]), [0.1, 0.5])


# --------------------------------------------------------------------------
# ring


def test_ring_is_annulus_around_single_point():
    b = point_bundle([[0.0, 0.0]], eps=1.0, sigma=0.5)
    Z = build_ring(b, 2000, seed=0)
    r = np.linalg.norm(Z, axis=1)
    assert len(Z) == 2000
    assert np.all(r > 1.0) and np.all(r <= 1.5 + 1e-12)
    assert not in_ring(b, [[0.9, 0.0]])[0]


def test_ring_fixed_seed_reproducible():
    b = point_bundle([[0.0, 0.0], [0.5, 0.1]], eps=0.3, sigma=0.2)
    np.testing.assert_array_equal(build_ring(b, 500, seed=4), build_ring(b, 500, seed=4))


def test_ring_respects_domain():
    b = point_bundle([[0.0, 0.0]], eps=1.0, sigma=0.5, domain=lambda z: z[0] <= 0.0)
    Z = build_ring(b, 500, seed=0)
    assert np.all(Z[:, 0] <= 0.0)


def test_ring_rejects_bad_target():
    with pytest.raises(ValueError):
        build_ring(point_bundle([[0.0]]), 0)


def test_ring_geometry_error_when_domain_empty():
    b = point_bundle([[0.0, 0.0]], eps=1.0, sigma=0.5, domain=lambda z: False)
    with pytest.raises(GeometryError):
        build_ring(b, 10, seed=0, batch=50_000, max_proposals=100_000)


@settings(max_examples=20)
@given(st.lists(st.tuples(st.floats(-2, 2), st.floats(-2, 2)), min_size=1, max_size=6),
       st.floats(0.1, 0.5), st.floats(0.05, 0.5), st.integers(0, 100))
def test_ring_samples_are_outside_cover_and_within_sigma(pts, eps, sigma, seed):
    b = point_bundle(pts, eps=eps, sigma=sigma)
    Z = build_ring(b, 200, seed=seed)
    assert not np.any(in_covered_region(b, Z))
    assert np.all(gap_to_cover(b, Z) <= sigma + 1e-12)


# --------------------------------------------------------------------------
# covering radius and thinning


def test_epsilon_net_radius_midpoints():
    probes = np.linspace(-1, 1, 2001)[:, None]
    assert epsilon_net_radius([[-1.0], [0.0], [1.0]], probes) == pytest.approx(0.5, abs=1e-3)


def test_epsilon_net_radius_identity_and_circle():
    P = np.random.default_rng(0).normal(size=(30, 2))
    assert epsilon_net_radius(P, P) == 0.0
    th = np.linspace(0, 2 * np.pi, 100)
    assert epsilon_net_radius([[0.0, 0.0]], np.column_stack([np.cos(th), np.sin(th)])) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        epsilon_net_radius(P, np.zeros((0, 2)))


def test_thinning_zero_standoff_is_identity():
    b = point_bundle([[0.0], [0.9]], eps=0.1, ring_z=np.array([[1.0]]))
    t = thin_safe_sets(b, 0.0)
    assert t.safe_flow_mask.all()


def test_thinning_drops_points_near_ring():
    b = point_bundle([[0.0], [0.9]], eps=0.1, ring_z=np.array([[1.0]]))
    sf, _ = thin_safe_sets(b, 0.2).safe_points()
    np.testing.assert_array_equal(sf, [[0.0]])


def test_thinning_everything_warns():
    b = point_bundle([[0.0], [0.9]], eps=0.1, ring_z=np.array([[1.0]]))
    with pytest.warns(UserWarning):
        t = thin_safe_sets(b, 5.0)
    assert not t.safe_flow_mask.any()


# --------------------------------------------------------------------------
# probes and files


def test_region_probes_membership():
    b = point_bundle([[0.0, 0.0]], eps=1.0, sigma=0.5)
    ring = region_probes(b, "ring", resolution=0.05)
    cov = region_probes(b, "covered", resolution=0.05)
    assert np.all(in_ring(b, ring)) and np.all(in_covered_region(b, cov))
    r = region_probes(b, "ring", n=300, rng=np.random.default_rng(0))
    assert len(r) == 300 and np.all(in_ring(b, r))


def test_save_load_round_trip(tmp_path):
    b = point_bundle([[0.0, 1.0], [0.3, 0.2]], eps=0.4, sigma=0.2, jump_points=[[1.0, 1.0]])
    b = thin_safe_sets(b.with_(ring_z=build_ring(b, 50, seed=0)), 0.3)
    save_bundle(b, tmp_path / "a")
    back = load_bundle(tmp_path / "a")
    for f in ("flow_z", "flow_u", "flow_t", "jump_z", "ring_z", "flow_radius", "safe_flow_mask", "safe_jump_mask"):
        np.testing.assert_array_equal(getattr(back, f), getattr(b, f))
    save_bundle(back, tmp_path / "b")
    for name in ("flow.csv", "jump.csv", "ring.csv", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_load_missing_dataset(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_bundle(tmp_path / "nothing")


def test_geometry_validation():
    with pytest.raises(ValueError):
        Geometry(0.0, 0.1, 0.1)
    with pytest.raises(ValueError):
        Geometry(0.1, 0.1, 0.1, eps_bar=-1.0)
