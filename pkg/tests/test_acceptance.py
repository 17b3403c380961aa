"""End-to-end acceptance checks, one test per criterion.

Each test appends a one-line PASS/FAIL verdict to ``VERDICTS``; the
conftest hook prints them at the end of the session.  The experiment
pipelines go through the command-line entry point so the determinism check
compares the files a user would get.
"""
import json
import math
from pathlib import Path

import numpy as np
import pytest

from rhcbf import experiments as ex
from rhcbf.cli import EXIT_OK, EXIT_VERIFY, main
from rhcbf.config import load_config
from rhcbf.filters import closed_loop_batch
from rhcbf.hybrid import integrate_flow, simulate
from rhcbf.net import BarrierNet
from rhcbf.toys import QuadraticBarrier
from rhcbf.walker import (
    LIMIT_CYCLE_STATE,
    WalkerParams,
    count_steps,
    impact_map,
    kinetic_energy,
    mechanical_energy,
    walker_system,
)
from tests.test_hybrid import decay_error, no_input, scalar_system
from tests.test_walker import pre_impact_states

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
VERDICTS: list = []


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    VERDICTS.append(line)
    print(line)


# --------------------------------------------------------------------------
# pipelines, each run at most twice per session


_RUNS: dict = {}


def pipeline(name: str, run: int, root: Path) -> Path:
    key = (name, run)
    if key not in _RUNS:
        out = root / f"{name}_{run}"
        base = ["--config", str(CONFIGS / f"{name}.toml"), "--out", str(out)]
        assert main(["collect", *base]) == EXIT_OK
        assert main(["train", *base]) == EXIT_OK
        code = main(["verify", *base])
        assert code in (EXIT_OK, EXIT_VERIFY)
        if load_config(CONFIGS / f"{name}.toml").sweep.controllers:
            assert main(["sweep", *base]) == EXIT_OK
        _RUNS[key] = out
    return _RUNS[key]


@pytest.fixture(scope="session")
def runs_root(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


def csv_files(out: Path) -> dict:
    return {str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*.csv"))}


def agg_means(out: Path) -> dict:
    _, rows, _ = ex.read_rows(out / "sweep" / "aggregate.csv")
    return {(r[0], float(r[1]), float(r[2])): float(r[3]) for r in rows}


# --------------------------------------------------------------------------
# 1. differentiation


def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def _fd_param(net, f, step=1e-5):
    theta = net.get_flat()
    g = np.empty_like(theta)
    probe = net.copy()
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = step
        probe.set_flat(theta + e)
        up = f(probe)
        probe.set_flat(theta - e)
        g[i] = (up - f(probe)) / (2 * step)
    return g


def test_criterion_1_differentiation():
    rng = np.random.default_rng(0)
    worst = 0.0
    for k in range(100):
        dims = (int(rng.integers(1, 5)),) + tuple(int(d) for d in rng.integers(2, 9, size=rng.integers(1, 3))) + (1,)
        net = BarrierNet.init(dims, seed=k)
        z = rng.normal(size=dims[0])
        v = rng.normal(size=dims[0])
        g_fd = np.array([(net.forward(z + e) - net.forward(z - e)) / 2e-5 for e in 1e-5 * np.eye(dims[0])])
        worst = max(worst, _rel(net.grad_z(z), g_fd))
        worst = max(worst, _rel(net.param_grad(z[None, :], c_h=1.0), _fd_param(net, lambda n: n.forward(z))))
        worst = max(worst, _rel(net.param_grad(z[None, :], v=v[None, :]),
                                _fd_param(net, lambda n: float(n.grad_z(z) @ v))))
    ok = worst <= 1e-4
    verdict(1, ok, f"max relative error {worst:.2e} over 100 probes (tol 1e-4)")
    assert ok


# --------------------------------------------------------------------------
# 2. integrator


def test_criterion_2_integrator():
    endpoint = decay_error(1e-3)
    sys = scalar_system(lambda z: np.ones(1), guard=lambda z: 1.0 - z[0])
    res = integrate_flow(sys, [0.0], 0.0, 0, no_input, t_max=5.0)
    guard = abs(sys.guard(res.exit_state))
    ratio = decay_error(0.1) / decay_error(0.05)
    ok = endpoint <= 1e-6 and res.exit == "guard_hit" and guard <= 1e-8 and ratio >= 12
    verdict(2, ok, f"endpoint error {endpoint:.1e}, |guard| {guard:.1e}, step-halving ratio {ratio:.2f}")
    assert ok


# --------------------------------------------------------------------------
# 3. invariance with a closed-form barrier


def test_criterion_3_analytic_invariance():
    rng = np.random.default_rng(0)
    P = rng.uniform(-1, 1, (5000, 2))
    Z0 = P[1 - np.sum(P * P, axis=1) >= 0.05][:200]
    assert len(Z0) == 200

    def affine(Z):
        return np.zeros_like(Z), np.broadcast_to(np.eye(2), (len(Z), 2, 2))

    def outward(Z, t):
        return np.clip(2.0 * Z + 0.5 * np.column_stack([np.cos(3 * t), np.sin(3 * t)]), -1, 1)

    res = closed_loop_batch(QuadraticBarrier(), affine, 0.05, outward, Z0, -np.ones(2), np.ones(2),
                            disturbance="worst", t_max=10.0, step=1e-3)
    ok = res.n_negative == 0
    verdict(3, ok, f"{res.n_negative} h<0 events over 200 ICs x 10 s, min h {res.min_h.min():.4f}")
    assert ok


# --------------------------------------------------------------------------
# 4. toy learning and verification


@pytest.mark.slow
def test_criterion_4_toy_learning(runs_root):
    out = pipeline("toy", 0, runs_root)
    ck = json.loads((out / "models" / "robust.json").read_text())
    rep = json.loads((out / "verify" / "robust.json").read_text())
    viol = ck["metadata"]["best_violations"]
    pr = rep["probes"]
    ok = (viol == 0 and rep["prop1"]["ok"] and rep["prop2"]["ok"] and rep["prop3"]["ok"]
          and pr["ring_max_h"] < 0 and pr["covered_min_h"] >= 0)
    verdict(4, ok, f"violations {viol}, props {rep['prop1']['ok']}/{rep['prop2']['ok']}/{rep['prop3']['ok']}, "
                   f"ring max h {pr['ring_max_h']:.4f}, covered min h {pr['covered_min_h']:.4f}, "
                   f"eps_bar {rep['numbers']['eps_bar']:.4f}")
    assert ok


# --------------------------------------------------------------------------
# 5. walker sanity


def test_criterion_5_walker_sanity():
    p = WalkerParams()
    sys = walker_system(p)
    arc = simulate(sys, LIMIT_CYCLE_STATE, (lambda z, t: np.zeros(2), None), horizon=(30.0, 10), step=1e-3)
    steps = count_steps(arc)
    Z = pre_impact_states(1000, seed=5)
    gain = float(np.max(kinetic_energy(p, impact_map(p, Z)) - kinetic_energy(p, Z)))
    drift = max(float(np.abs(np.diff(mechanical_energy(p, s.z))).max()) for s in arc.segments)
    ok = steps >= 10 and gain <= 1e-12 and drift <= 1e-5
    verdict(5, ok, f"passive steps {steps}, max impact KE change {gain:.2e}, max energy drift per step {drift:.1e}")
    assert ok


# --------------------------------------------------------------------------
# 6. noise sweep ordering


@pytest.mark.slow
def test_criterion_6_noise_ordering(runs_root):
    out = pipeline("noise", 0, runs_root)
    m = agg_means(out)
    cfg = load_config(CONFIGS / "noise.toml")
    mh = cfg.plant.m_h
    s = lambda k, d: m[(k, d, mh)]  # noqa: E731
    checks = [s("robust", d) >= s("nonrobust", d) for d in (0.3, 0.4)]
    checks += [s("nonrobust", d) >= s("energy", d) for d in (0.2, 0.3, 0.4)]
    checks += [s("zero", d) < min(s(k, d) for k in ("robust", "nonrobust", "energy"))
               for d in cfg.sweep.deltas if d > 0]
    ok = all(checks)
    table = ", ".join(f"dc={d:g}: " + "/".join(f"{s(k, d):.2f}" for k in ("robust", "nonrobust", "energy", "zero"))
                      for d in cfg.sweep.deltas)
    verdict(6, ok, f"mean steps robust/nonrobust/energy/zero {table}")
    assert ok


# --------------------------------------------------------------------------
# 7. hip-mass ordering


@pytest.mark.slow
def test_criterion_7_hipmass_ordering(runs_root):
    out = pipeline("hipmass", 0, runs_root)
    m = agg_means(out)
    cfg = load_config(CONFIGS / "hipmass.toml")
    pairs = [(mh, m[("robust", 0.0, mh)], m[("energy", 0.0, mh)]) for mh in cfg.sweep.masses]
    ok = all(r >= e for _, r, e in pairs)
    verdict(7, ok, "robust/energy " + ", ".join(f"mH={mh:g}: {r:.2f}/{e:.2f}" for mh, r, e in pairs))
    assert ok


# --------------------------------------------------------------------------
# 8. determinism


@pytest.mark.slow
def test_criterion_8_determinism(runs_root):
    differing, n = [], 0
    for name in ("toy", "noise", "hipmass"):
        a, b = csv_files(pipeline(name, 0, runs_root)), csv_files(pipeline(name, 1, runs_root))
        n += len(a)
        if a.keys() != b.keys():
            differing.append(f"{name}: file sets differ")
        differing += [f"{name}/{k}" for k in a if k in b and a[k] != b[k]]
    ok = not differing and n > 0
    verdict(8, ok, f"{n} CSV files compared across two runs" + (f"; differing: {differing}" if differing else ""))
    assert ok
