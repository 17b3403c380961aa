"""End-to-end pipelines: expert data, barrier training, verification and step-count sweeps.

Two plants are wired up: the compass-gait walker (noise and hip-mass sweeps)
and the planar reset integrator used as a small fully verifiable example.
Everything is driven by an :class:`~rhcbf.config.ExperimentConfig` and is
deterministic given its seeds.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .config import ExperimentConfig
from .datasets import (DatasetBundle, Geometry, build_ring, collect_expert, epsilon_net_radius, region_probes,
                       thin_safe_sets)
from .filters import batch_flow_filter
from .hybrid import HybridSystem, UniformBall
from .net import BarrierNet
from .toys import approach_expert, reset_integrator_system
from .train import Hyperparams, TrainingTrace, train
from .verify import VerificationReport, verify
from .walker import (FELL, energy_expert, flow_affine, in_walker_domain, swing_initial_conditions,
                     passive_energy_reference, simulate_batch, walker_system)

GRID_HEADER = ["controller", "delta_c", "m_h", "seed", "ic", "theta_swing", "dtheta_swing", "steps", "status"]
AGG_HEADER = ["controller", "delta_c", "m_h", "mean_steps", "seed_std", "n"]


# --------------------------------------------------------------------------
# plants


def energy_reference(cfg: ExperimentConfig) -> float:
    if cfg.expert.e_ref is not None:
        return float(cfg.expert.e_ref)
    return passive_energy_reference(cfg.plant.walker_params())


def make_plant(cfg: ExperimentConfig, delta_c: float, truth_m_h: Optional[float] = None) -> HybridSystem:
    """Plant model with flow error bound ``delta_c`` (estimate uses the configured hip mass)."""
    if cfg.plant.kind == "walker":
        truth = cfg.plant.walker_params(truth_m_h) if truth_m_h is not None else None
        return walker_system(cfg.plant.walker_params(), delta_c=delta_c, truth_params=truth, gains=cfg.expert.gains())
    return reset_integrator_system(delta_c=delta_c, delta_d=cfg.plant.delta_d, x_reset=cfg.plant.x_reset,
                                   shrink=cfg.plant.shrink)


def domain_predicate(cfg: ExperimentConfig) -> Callable:
    if cfg.plant.kind == "walker":
        params = cfg.plant.walker_params()

        def dom(Z):
            return in_walker_domain(params, Z)

        dom.vectorized = True
        return dom
    sys = make_plant(cfg, 0.0)
    return sys.in_domain


# --------------------------------------------------------------------------
# data


def toy_initial_conditions(cfg: ExperimentConfig) -> np.ndarray:
    """Grid over a stadium: a rectangle capped on the left by a half disk."""
    d = cfg.data
    x_max = cfg.plant.x_reset - 0.049
    r = d.ic_cap_radius
    xs = np.arange(d.ic_x0, x_max + 1e-3, d.ic_spacing)
    ys = np.arange(-r, r + 1e-3, d.ic_spacing)
    P = np.array([[x, y] for x in xs for y in ys])
    cx = d.ic_x0 + r
    keep = (P[:, 0] >= cx) | ((P[:, 0] - cx) ** 2 + P[:, 1] ** 2 <= r * r + 1e-9)
    return P[keep]


def walker_initial_conditions(cfg: ExperimentConfig) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.data.seed, 1]))
    return swing_initial_conditions(cfg.data.n_ic, cfg.data.ic_halfwidth, rng=rng, uniform=True)


def _collect_walker(cfg: ExperimentConfig) -> DatasetBundle:
    d = cfg.data
    params = cfg.plant.walker_params()
    e_ref = energy_reference(cfg)
    gains = cfg.expert.gains()
    stride = int(round(d.sample_dt / d.step))
    if stride < 1:
        raise ValueError("data.sample_dt must be at least one integrator step")
    ics = walker_initial_conditions(cfg)
    res = simulate_batch(params, ics, lambda Z: energy_expert(params, Z, e_ref, gains), noise_radius=d.collect_delta,
                         rng=np.random.default_rng(np.random.SeedSequence([d.seed, 2])), max_steps=d.max_steps,
                         t_max=d.t_max, step=d.step, sample_every=stride)
    fs, js = res.flow_samples, res.jump_samples
    # drop what a walker recorded after its last completed step if it then fell
    fell = res.status == FELL
    kf = ~(fell[fs["walker"]] & (fs["j"] >= res.steps[fs["walker"]]))
    sys = make_plant(cfg, d.collect_delta)
    meta = {"seed": d.seed, "n_ic": int(len(ics)), "e_ref": e_ref, "fell": int(fell.sum()),
            "truncated_after_fall": int((~kf).sum()), "sample_dt": d.sample_dt, "ring_in_domain": True}
    return DatasetBundle(4, 2, 0, fs["z"][kf], fs["u"][kf], fs["t"][kf], js["z"], np.zeros((len(js["z"]), 0)), js["t"],
                         Geometry(d.eps_c, d.eps_d, d.sigma), flow_set=sys.flow_set, jump_set=sys.jump_set,
                         meta=meta, domain=domain_predicate(cfg))


def _collect_toy(cfg: ExperimentConfig) -> DatasetBundle:
    d, x = cfg.data, cfg.expert
    sys = make_plant(cfg, d.collect_delta)
    expert = approach_expert(x_target=x.x_target, gain=x.gain, gain_y=x.gain_y)
    return collect_expert(sys, expert, toy_initial_conditions(cfg), Geometry(d.eps_c, d.eps_d, d.sigma), UniformBall(),
                          sample_dt=d.sample_dt, horizon=(d.t_max, d.max_steps), step=d.step, seed=d.seed,
                          ring_in_domain=True)


def add_ring(cfg: ExperimentConfig, bundle: DatasetBundle) -> DatasetBundle:
    """Ring samples (grid or rejection sampled), the covering radius estimate and safe-set thinning."""
    d = cfg.data
    if d.ring_resolution > 0:
        ring = region_probes(bundle, "ring", resolution=d.ring_resolution)
    else:
        ring = build_ring(bundle, d.ring_n_target, rng=np.random.default_rng(np.random.SeedSequence([d.seed, 3])))
    bundle = bundle.with_(ring_z=ring)
    return thin_safe_sets(bundle, d.standoff)


def collect(cfg: ExperimentConfig) -> DatasetBundle:
    bundle = _collect_walker(cfg) if cfg.plant.kind == "walker" else _collect_toy(cfg)
    return add_ring(cfg, bundle)


def attach_sets(cfg: ExperimentConfig, bundle: DatasetBundle) -> DatasetBundle:
    """Re-attach the plant's set predicates to a bundle read back from disk."""
    sys = make_plant(cfg, 0.0)
    return bundle.with_(flow_set=sys.flow_set, jump_set=sys.jump_set, domain=domain_predicate(cfg))


# --------------------------------------------------------------------------
# training and verification


def train_model(cfg: ExperimentConfig, bundle: DatasetBundle, delta_c: float, hp: Optional[Hyperparams] = None,
                callback=None):
    """Train one barrier; returns ``(net, trace)`` with the least-violating iterate."""
    hp = cfg.train if hp is None else hp
    sys = make_plant(cfg, delta_c)
    _, trace, best, _ = train(sys, bundle, hp, callback=callback)
    best.metadata.update({"delta_c": float(delta_c)})
    return best, trace


def covering_radius(bundle: DatasetBundle, resolution: Optional[float] = None, n: Optional[int] = None, rng=None) -> float:
    """Covering radius of the ring samples over a finer grid (or ``n`` random probes) of the ring."""
    probes = region_probes(bundle, "ring", resolution=resolution, n=n, rng=rng)
    return epsilon_net_radius(bundle.ring_z, probes)


def verify_model(cfg: ExperimentConfig, bundle: DatasetBundle, net: BarrierNet, delta_c: float,
                 probe_resolution: float = 0.005, n_probes: int = 20_000) -> VerificationReport:
    """Check the sufficient conditions.

    Up to three state dimensions the ring and covered region are probed on
    grids; above that the probes are random, so the covering radius is only a
    lower estimate and the probe checks are spot checks.
    """
    sys = make_plant(cfg, delta_c)
    if bundle.n_z <= 3:
        eps_bar = covering_radius(bundle, probe_resolution)
        ring_probes = region_probes(bundle, "ring", resolution=eps_bar / 2)
        covered = region_probes(bundle, "covered", resolution=eps_bar / 2, thinned=True)
    else:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.train.seed, 11]))
        eps_bar = covering_radius(bundle, n=n_probes, rng=rng)
        ring_probes = region_probes(bundle, "ring", n=n_probes, rng=rng)
        covered = region_probes(bundle, "covered", n=n_probes, rng=rng, thinned=True)
    return verify(net, sys, bundle, cfg.train, ring_probes=ring_probes, covered_probes=covered, eps_bar=eps_bar,
                  seed=cfg.train.seed)


# --------------------------------------------------------------------------
# sweeps


def walker_controller(kind: str, cfg: ExperimentConfig, nets: dict, e_ref: float):
    """Batched control law ``Z -> U`` (``None`` for zero actuation)."""
    params = cfg.plant.walker_params()
    gains = cfg.expert.gains()
    box = gains.box

    def expert(Z):
        return energy_expert(params, Z, e_ref, gains)

    if kind == "zero":
        return None
    if kind == "energy":
        return expert
    if kind not in nets:
        raise KeyError(f"controller {kind!r} needs a trained checkpoint")
    net = nets[kind]
    delta = float(cfg.models[kind])
    kappa = cfg.train.alpha_gain

    def filtered(Z):
        h, g = net.value_and_grad(Z)
        F, G = flow_affine(params, Z)
        U, _, _ = batch_flow_filter(h, g, F, G, delta, expert(Z), box.lower, box.upper, kappa)
        return U

    return filtered


def sweep_conditions(cfg: ExperimentConfig):
    """``(delta_c, true hip mass or None)`` pairs in sweep order."""
    s = cfg.sweep
    if s.masses:
        return [(float(d), float(m)) for m in s.masses for d in s.deltas]
    return [(float(d), None) for d in s.deltas]


@dataclass
class SweepResult:
    grid: list  # rows matching GRID_HEADER
    aggregate: list  # rows matching AGG_HEADER


def run_sweep(cfg: ExperimentConfig, nets: dict, progress: Optional[Callable[[str], None]] = None) -> SweepResult:
    """Step counts for every (controller, condition, seed, initial condition).

    All controllers see the same noise stream for a given (condition, seed).
    """
    if cfg.plant.kind != "walker":
        raise ValueError("step-count sweeps are defined for the walker")
    s = cfg.sweep
    params = cfg.plant.walker_params()
    e_ref = energy_reference(cfg)
    ics = swing_initial_conditions(s.n_grid, s.ic_halfwidth)
    rows = []
    for kind in s.controllers:
        ctrl = walker_controller(kind, cfg, nets, e_ref)
        for ci, (delta, m_h) in enumerate(sweep_conditions(cfg)):
            truth = cfg.plant.walker_params(m_h) if m_h is not None else None
            for seed in s.seeds:
                rng = np.random.default_rng(np.random.SeedSequence([int(seed), ci, 7]))
                res = simulate_batch(params, ics, ctrl, noise_radius=delta, rng=rng, max_steps=s.max_steps,
                                     t_max=s.t_max, step=s.step, truth_params=truth)
                mh = params.m_h if m_h is None else m_h
                for i, z in enumerate(ics):
                    rows.append([kind, delta, mh, int(seed), i, float(z[1]), float(z[3]), int(res.steps[i]),
                                 int(res.status[i])])
                if progress is not None:
                    progress(f"{kind} delta={delta} m_h={mh} seed={seed}: mean steps {res.steps.mean():.3f}")
    return SweepResult(rows, aggregate(rows))


def aggregate(grid_rows) -> list:
    """Mean steps per (controller, delta, m_h) plus the spread of the per-seed means."""
    groups: dict = {}
    for r in grid_rows:
        groups.setdefault((r[0], r[1], r[2]), {}).setdefault(r[3], []).append(r[7])
    out = []
    for (kind, delta, mh), by_seed in groups.items():
        seed_means = np.array([np.mean(v) for v in by_seed.values()])
        n = sum(len(v) for v in by_seed.values())
        out.append([kind, delta, mh, float(np.mean(seed_means)), float(np.std(seed_means)), n])
    return out


def mean_steps(agg_rows, kind: str, delta: float, m_h: Optional[float] = None) -> float:
    for r in agg_rows:
        if r[0] == kind and abs(r[1] - delta) < 1e-12 and (m_h is None or abs(r[2] - m_h) < 1e-12):
            return r[3]
    raise KeyError((kind, delta, m_h))


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_rows(path, header, rows, config_hash: Optional[str] = None) -> None:
    with Path(path).open("w", newline="") as fh:
        if config_hash is not None:
            fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def read_rows(path):
    """Rows of a CSV written by :func:`write_rows`; returns ``(header, rows, config_hash)``."""
    lines = Path(path).read_text().splitlines()
    h = None
    if lines and lines[0].startswith("# config_hash="):
        h = lines[0].split("=", 1)[1]
        lines = lines[1:]
    rows = list(csv.reader(lines))
    if not rows:
        raise ValueError(f"{path} is empty")
    return rows[0], rows[1:], h


def trace_summary(trace: TrainingTrace) -> dict:
    return {"epochs": max(len(trace.rows) - 1, 0), "final_violations": trace.final_violations()}
