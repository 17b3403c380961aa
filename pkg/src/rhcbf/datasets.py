"""Expert data sets, ball covers around them, the boundary ring and probe sets.

The data-covered region is the union of balls around the flow samples
(intersected with the flow set, open) and around the jump samples
(intersected with the jump set, closed).  The ring is a shell of thickness
``sigma`` just outside that union; the barrier is trained negative there.
"""
from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.spatial import cKDTree

from .hybrid import HybridSystem, simulate

log = logging.getLogger(__name__)


class EmptyDatasetError(RuntimeError):
    pass


class GeometryError(RuntimeError):
    pass


@dataclass(frozen=True)
class FlowSample:
    z: np.ndarray
    u_c: np.ndarray
    t: float


@dataclass(frozen=True)
class JumpSample:
    z: np.ndarray
    u_d: np.ndarray
    t: float


@dataclass(frozen=True)
class Geometry:
    eps_c: float
    eps_d: float
    sigma: float
    eps_bar: Optional[float] = None  # set post hoc from the ring

    def __post_init__(self):
        for name in ("eps_c", "eps_d", "sigma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.eps_bar is not None and not self.eps_bar > 0:
            raise ValueError("eps_bar must be positive")


class BallCover:
    """Union of balls ``B(c_i, r_i)``; open or closed."""

    def __init__(self, centers, radii, open_balls: bool):
        self.centers = np.asarray(centers, dtype=float)
        n = self.centers.shape[0]
        self.radii = np.broadcast_to(np.asarray(radii, dtype=float), (n,)).copy()
        self.open = open_balls
        self.tree = cKDTree(self.centers) if n else None
        self.r_max = float(self.radii.max()) if n else 0.0
        self.uniform = bool(n == 0 or np.all(self.radii == self.radii[0]))

    def __len__(self):
        return self.centers.shape[0]

    def gap(self, Z, k: int = 32) -> np.ndarray:
        """``min_i |z - c_i| - r_i`` (negative inside).

        Exact for equal radii; otherwise taken over the ``k`` nearest centers.
        """
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        if self.tree is None:
            return np.full(Z.shape[0], np.inf)
        if self.uniform:
            d, _ = self.tree.query(Z)
            return d - self.radii[0]
        k = min(k, len(self))
        d, i = self.tree.query(Z, k=k)
        d, i = d.reshape(Z.shape[0], -1), i.reshape(Z.shape[0], -1)
        return np.min(d - self.radii[i], axis=1)

    def contains(self, Z) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        if self.tree is None:
            return np.zeros(Z.shape[0], dtype=bool)
        if self.uniform:
            d, _ = self.tree.query(Z)
            r = self.radii[0]
            return d < r if self.open else d <= r
        out = np.zeros(Z.shape[0], dtype=bool)
        for b, idx in enumerate(self.tree.query_ball_point(Z, self.r_max)):
            if idx:
                d = np.linalg.norm(self.centers[idx] - Z[b], axis=1)
                r = self.radii[idx]
                out[b] = bool(np.any(d < r) if self.open else np.any(d <= r))
        return out


@dataclass
class DatasetBundle:
    n_z: int
    m_c: int
    m_d: int
    flow_z: np.ndarray
    flow_u: np.ndarray
    flow_t: np.ndarray
    jump_z: np.ndarray
    jump_u: np.ndarray
    jump_t: np.ndarray
    geometry: Geometry
    ring_z: Optional[np.ndarray] = None
    flow_radius: Optional[np.ndarray] = None  # per-sample eps_c after shrinking
    jump_radius: Optional[np.ndarray] = None
    safe_flow_mask: Optional[np.ndarray] = None  # thinned safe subsets
    safe_jump_mask: Optional[np.ndarray] = None
    flow_set: Callable = field(default=lambda z: True, repr=False)
    jump_set: Callable = field(default=lambda z: True, repr=False)
    meta: dict = field(default_factory=dict)
    domain: Optional[Callable] = field(default=None, repr=False)  # ring restricted to it when set

    def __post_init__(self):
        self.flow_z = np.asarray(self.flow_z, dtype=float).reshape(-1, self.n_z)
        self.flow_u = np.asarray(self.flow_u, dtype=float).reshape(self.flow_z.shape[0], self.m_c)
        self.flow_t = np.asarray(self.flow_t, dtype=float).reshape(-1)
        self.jump_z = np.asarray(self.jump_z, dtype=float).reshape(-1, self.n_z)
        self.jump_u = np.asarray(self.jump_u, dtype=float).reshape(self.jump_z.shape[0], self.m_d)
        self.jump_t = np.asarray(self.jump_t, dtype=float).reshape(-1)
        if self.ring_z is None:
            self.ring_z = np.zeros((0, self.n_z))
        self.ring_z = np.asarray(self.ring_z, dtype=float).reshape(-1, self.n_z)
        if self.flow_radius is None:
            self.flow_radius = np.full(self.n_flow, self.geometry.eps_c)
        if self.jump_radius is None:
            self.jump_radius = np.full(self.n_jump, self.geometry.eps_d)
        if self.safe_flow_mask is None:
            self.safe_flow_mask = np.ones(self.n_flow, dtype=bool)
        if self.safe_jump_mask is None:
            self.safe_jump_mask = np.ones(self.n_jump, dtype=bool)
        self._covers = {}

    @property
    def n_flow(self) -> int:
        return self.flow_z.shape[0]

    @property
    def n_jump(self) -> int:
        return self.jump_z.shape[0]

    @property
    def n_ring(self) -> int:
        return self.ring_z.shape[0]

    def flow_samples(self):
        return [FlowSample(z, u, t) for z, u, t in zip(self.flow_z, self.flow_u, self.flow_t)]

    def jump_samples(self):
        return [JumpSample(z, u, t) for z, u, t in zip(self.jump_z, self.jump_u, self.jump_t)]

    def safe_points(self):
        """Thinned safe states (flow part, jump part)."""
        return self.flow_z[self.safe_flow_mask], self.jump_z[self.safe_jump_mask]

    def cover(self, which: str, thinned: bool = False) -> BallCover:
        key = (which, thinned)
        if key not in self._covers:
            if which == "flow":
                m = self.safe_flow_mask if thinned else slice(None)
                self._covers[key] = BallCover(self.flow_z[m], self.flow_radius[m], open_balls=True)
            elif which == "jump":
                m = self.safe_jump_mask if thinned else slice(None)
                self._covers[key] = BallCover(self.jump_z[m], self.jump_radius[m], open_balls=False)
            else:
                raise ValueError(f"which must be 'flow' or 'jump', got {which!r}")
        return self._covers[key]

    def with_(self, **kw) -> "DatasetBundle":
        return replace(self, **kw)


def cover_contains(bundle: DatasetBundle, z, which: str = "flow", thinned: bool = False):
    """Membership in the covered flow region (open) or jump region (closed).

    Accepts one state or a batch; returns a bool or a bool array.
    """
    Z = np.asarray(z, dtype=float)
    single = Z.ndim == 1
    Z = np.atleast_2d(Z)
    inside = bundle.cover(which, thinned).contains(Z)
    member = bundle.flow_set if which == "flow" else bundle.jump_set
    for i in np.flatnonzero(inside):
        inside[i] = bool(member(Z[i]))
    return bool(inside[0]) if single else inside


def in_covered_region(bundle: DatasetBundle, Z, thinned: bool = False) -> np.ndarray:
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    return cover_contains(bundle, Z, "flow", thinned) | cover_contains(bundle, Z, "jump", thinned)


def gap_to_cover(bundle: DatasetBundle, Z) -> np.ndarray:
    """Distance proxy to the covered region: gap to the ball union (no set clipping)."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    return np.minimum(bundle.cover("flow").gap(Z), bundle.cover("jump").gap(Z))


def in_ring(bundle: DatasetBundle, Z) -> np.ndarray:
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    out = (~in_covered_region(bundle, Z)) & (gap_to_cover(bundle, Z) <= bundle.geometry.sigma)
    if bundle.domain is not None:
        idx = np.flatnonzero(out)
        if getattr(bundle.domain, "vectorized", False):
            out[idx] = np.asarray(bundle.domain(Z[idx]), dtype=bool)
        else:
            for i in idx:
                out[i] = bool(bundle.domain(Z[i]))
    return out


# --------------------------------------------------------------------------
# collection


def _sample_indices(n_states: int, stride: int):
    # the last stored state of a segment is an event or terminal state
    return range(0, max(n_states - 1, 0), stride)


def collect_expert(
    sys: HybridSystem,
    expert,
    initial_conditions,
    geometry: Geometry,
    disturbance=None,
    sample_dt: float = 0.05,
    horizon=(10.0, 20),
    step: float = 1e-3,
    seed: int = 0,
    safe_interior: Optional[Callable] = None,
    drop_after_failure: bool = True,
    ring_in_domain: bool = False,
) -> DatasetBundle:
    """Simulate the expert from each initial condition and sample the arcs.

    Flow samples are taken every ``sample_dt`` along each flow segment; a jump
    sample is every pre-jump state.  Each arc uses its own child random stream
    so the result does not depend on evaluation order.  Samples failing
    ``safe_interior`` are dropped and counted.  Arcs ending in a failure keep
    only samples up to their last jump.  With ``ring_in_domain`` the ring is
    later restricted to the hybrid domain (flow set or jump set), since no
    solution can reach states outside it.
    """
    stride = int(round(sample_dt / step))
    if stride < 1 or abs(stride * step - sample_dt) > 1e-9:
        raise ValueError("sample_dt must be a positive multiple of the integrator step")
    ics = np.atleast_2d(np.asarray(initial_conditions, dtype=float))
    children = np.random.SeedSequence(seed).spawn(len(ics))
    fz, fu, ft, jz, ju, jt = [], [], [], [], [], []
    excluded = 0
    truncated = 0
    for z0, ss in zip(ics, children):
        arc = simulate(sys, z0, expert, disturbance, horizon=horizon, step=step, rng=np.random.default_rng(ss))
        keep_j = arc.n_jumps if arc.termination == "fell" and drop_after_failure else None
        for seg in arc.segments:
            if keep_j is not None and seg.j >= keep_j:
                truncated += len(_sample_indices(len(seg), stride))
                continue
            for k in _sample_indices(len(seg), stride):
                fz.append(seg.z[k]), fu.append(seg.u[k]), ft.append(seg.t[k])
        for jp in arc.jumps:
            jz.append(jp.z_before), ju.append(jp.u), jt.append(jp.t)
    fz = np.array(fz).reshape(len(fz), sys.n_z)
    jz = np.array(jz).reshape(len(jz), sys.n_z)
    fu = np.array(fu).reshape(len(fu), sys.m_c)
    ju = np.array(ju).reshape(len(ju), sys.m_d)
    ft, jt = np.array(ft), np.array(jt)
    if safe_interior is not None:
        kf = np.array([bool(safe_interior(z)) for z in fz], dtype=bool)
        kj = np.array([bool(safe_interior(z)) for z in jz], dtype=bool)
        excluded = int((~kf).sum() + (~kj).sum())
        if excluded:
            warnings.warn(f"{excluded} samples outside the safe set interior were dropped")
        fz, fu, ft = fz[kf], fu[kf], ft[kf]
        jz, ju, jt = jz[kj], ju[kj], jt[kj]
    if fz.shape[0] + jz.shape[0] == 0:
        raise EmptyDatasetError("no samples survived collection")
    meta = {"seed": seed, "n_ic": int(len(ics)), "excluded": excluded, "truncated_after_fall": truncated, "sample_dt": sample_dt}
    meta["ring_in_domain"] = ring_in_domain
    return DatasetBundle(sys.n_z, sys.m_c, sys.m_d, fz, fu, ft, jz, ju, jt, geometry,
                         flow_set=sys.flow_set, jump_set=sys.jump_set, meta=meta,
                         domain=sys.in_domain if ring_in_domain else None)


def shrink_to_safe_set(bundle: DatasetBundle, distance_to_unsafe: Callable, margin: float = 1e-3, eps_min: float = 1e-3) -> DatasetBundle:
    """Shrink per-sample radii so every ball stays inside the safe set.

    ``distance_to_unsafe(Z) -> (N,)`` is the distance to the safe set boundary
    (non-positive outside).  Samples whose radius would drop to ``eps_min`` or
    below are dropped.
    """
    def fix(Z, r):
        d = np.asarray(distance_to_unsafe(Z), dtype=float).reshape(-1) if len(Z) else np.zeros(0)
        r = np.minimum(r, d - margin)
        return r, r > eps_min

    rf, kf = fix(bundle.flow_z, bundle.flow_radius)
    rj, kj = fix(bundle.jump_z, bundle.jump_radius)
    meta = dict(bundle.meta, shrunk=int((rf < bundle.flow_radius[...]).sum() + (rj < bundle.jump_radius).sum()),
                dropped_by_shrink=int((~kf).sum() + (~kj).sum()))
    return bundle.with_(
        flow_z=bundle.flow_z[kf], flow_u=bundle.flow_u[kf], flow_t=bundle.flow_t[kf], flow_radius=rf[kf],
        safe_flow_mask=bundle.safe_flow_mask[kf],
        jump_z=bundle.jump_z[kj], jump_u=bundle.jump_u[kj], jump_t=bundle.jump_t[kj], jump_radius=rj[kj],
        safe_jump_mask=bundle.safe_jump_mask[kj], meta=meta,
    )


# --------------------------------------------------------------------------
# ring, nets, thinning


def _unit_directions(rng, n, dim):
    d = rng.standard_normal((n, dim))
    nrm = np.linalg.norm(d, axis=1, keepdims=True)
    nrm[nrm == 0] = 1.0
    return d / nrm


def build_ring(bundle: DatasetBundle, n_target: int, rng=None, seed: int = 0, batch: int = 20_000,
               max_proposals: int = 1_000_000) -> np.ndarray:
    """Rejection-sample ``n_target`` states from the ring around the covered region.

    A proposal picks a data point, a radius in ``(r_i, r_i + sigma]`` and a
    uniform direction; it is kept when it lies outside the covered region and
    within ``sigma`` of the ball union.
    """
    if n_target < 1:
        raise ValueError("n_target must be >= 1")
    rng = np.random.default_rng(seed) if rng is None else rng
    centers = np.vstack([bundle.flow_z, bundle.jump_z])
    radii = np.concatenate([bundle.flow_radius, bundle.jump_radius])
    if centers.shape[0] == 0:
        raise EmptyDatasetError("cannot build a ring around an empty data set")
    sigma = bundle.geometry.sigma
    kept, n_kept, proposed = [], 0, 0
    while n_kept < n_target:
        if proposed >= max_proposals:
            raise GeometryError(f"ring acceptance too low: {n_kept} of {proposed} proposals")
        i = rng.integers(0, centers.shape[0], size=batch)
        r = radii[i] + sigma * (1.0 - rng.random(batch))  # (r_i, r_i + sigma]
        P = centers[i] + r[:, None] * _unit_directions(rng, batch, bundle.n_z)
        ok = in_ring(bundle, P)
        proposed += batch
        if proposed >= 1_000_000 and n_kept + ok.sum() < 1e-4 * proposed:
            raise GeometryError("ring acceptance rate below 1e-4; sigma too small for the cover overlap")
        kept.append(P[ok])
        n_kept += int(ok.sum())
    return np.vstack(kept)[:n_target]


def epsilon_net_radius(points, probes) -> float:
    """Largest distance from any probe to its nearest point (empirical covering radius)."""
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    if probes.size == 0:
        raise ValueError("probe set is empty")
    points = np.asarray(points, dtype=float).reshape(-1, probes.shape[1])
    if points.shape[0] == 0:
        return float("inf")
    d, _ = cKDTree(points).query(probes)
    return float(d.max())


def thin_safe_sets(bundle: DatasetBundle, standoff: float) -> DatasetBundle:
    """Mark as safe only the samples farther than ``standoff`` from every ring sample."""
    if standoff < 0:
        raise ValueError("standoff must be non-negative")
    if standoff == 0 or bundle.n_ring == 0:
        return bundle.with_(safe_flow_mask=np.ones(bundle.n_flow, bool), safe_jump_mask=np.ones(bundle.n_jump, bool),
                            meta=dict(bundle.meta, standoff=standoff))
    tree = cKDTree(bundle.ring_z)
    kf = tree.query(bundle.flow_z)[0] > standoff if bundle.n_flow else np.zeros(0, bool)
    kj = tree.query(bundle.jump_z)[0] > standoff if bundle.n_jump else np.zeros(0, bool)
    if not kf.any() and not kj.any():
        warnings.warn("thinning removed every safe sample")
    return bundle.with_(safe_flow_mask=kf, safe_jump_mask=kj, meta=dict(bundle.meta, standoff=standoff))


# --------------------------------------------------------------------------
# probes


def _bbox(bundle, pad):
    pts = np.vstack([bundle.flow_z, bundle.jump_z, bundle.ring_z])
    return pts.min(axis=0) - pad, pts.max(axis=0) + pad


def grid_points(lo, hi, resolution: float) -> np.ndarray:
    axes = [np.arange(a, b + 0.5 * resolution, resolution) for a, b in zip(lo, hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def region_probes(bundle: DatasetBundle, region: str, resolution: Optional[float] = None, n: Optional[int] = None,
                  rng=None, thinned: bool = False, chunk: int = 200_000) -> np.ndarray:
    """Dense probes of the ring (``"ring"``) or covered region (``"covered"``).

    With ``resolution`` a grid over the padded bounding box is filtered by
    membership (practical in low dimension); otherwise ``n`` uniform samples
    are drawn inside the balls around the data and filtered.
    """
    if region not in ("ring", "covered"):
        raise ValueError("region must be 'ring' or 'covered'")
    member = (lambda P: in_ring(bundle, P)) if region == "ring" else (lambda P: in_covered_region(bundle, P, thinned))
    if resolution is not None:
        lo, hi = _bbox(bundle, bundle.geometry.sigma + max(bundle.geometry.eps_c, bundle.geometry.eps_d))
        lo = np.floor(lo / resolution) * resolution
        G = grid_points(lo, hi, resolution)
        out = [G[i : i + chunk][member(G[i : i + chunk])] for i in range(0, len(G), chunk)]
        return np.vstack(out) if out else np.zeros((0, bundle.n_z))
    if n is None:
        raise ValueError("give either resolution or n")
    rng = np.random.default_rng(0) if rng is None else rng
    if thinned and region == "covered":
        centers = np.vstack([bundle.flow_z[bundle.safe_flow_mask], bundle.jump_z[bundle.safe_jump_mask]])
        radii = np.concatenate([bundle.flow_radius[bundle.safe_flow_mask], bundle.jump_radius[bundle.safe_jump_mask]])
    else:
        centers = np.vstack([bundle.flow_z, bundle.jump_z])
        radii = np.concatenate([bundle.flow_radius, bundle.jump_radius])
    if region == "ring":
        radii = radii + bundle.geometry.sigma
    kept, total = [], 0
    for _ in range(1000):
        i = rng.integers(0, centers.shape[0], size=chunk)
        r = radii[i] * rng.random(chunk) ** (1.0 / bundle.n_z)
        P = centers[i] + r[:, None] * _unit_directions(rng, chunk, bundle.n_z)
        P = P[member(P)]
        kept.append(P)
        total += len(P)
        if total >= n:
            break
    return np.vstack(kept)[:n]


# --------------------------------------------------------------------------
# serialization


def _write_kind(path: Path, kind: str, Z, U, T, R):
    n, m = Z.shape[1], U.shape[1]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "t"] + [f"z_{i + 1}" for i in range(n)] + [f"u_{i + 1}" for i in range(m)] + ["radius"])
        for z, u, t, r in zip(Z, U, T, R):
            w.writerow([kind, repr(float(t))] + [repr(float(x)) for x in z] + [repr(float(x)) for x in u] + [repr(float(r))])


def _read_kind(path: Path, n: int, m: int):
    with path.open() as fh:
        rows = list(csv.reader(fh))[1:]
    if not rows:
        return np.zeros((0, n)), np.zeros((0, m)), np.zeros(0), np.zeros(0)
    A = np.array([[float(x) for x in r[1:]] for r in rows]).reshape(len(rows), -1)
    return A[:, 1 : 1 + n], A[:, 1 + n : 1 + n + m], A[:, 0], A[:, 1 + n + m]


def save_bundle(bundle: DatasetBundle, directory, extra_meta: Optional[dict] = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _write_kind(d / "flow.csv", "flow", bundle.flow_z, bundle.flow_u, bundle.flow_t, bundle.flow_radius)
    _write_kind(d / "jump.csv", "jump", bundle.jump_z, bundle.jump_u, bundle.jump_t, bundle.jump_radius)
    ring_t = np.zeros(bundle.n_ring)
    _write_kind(d / "ring.csv", "ring", bundle.ring_z, np.zeros((bundle.n_ring, 0)), ring_t, np.zeros(bundle.n_ring))
    g = bundle.geometry
    manifest = {
        "n_z": bundle.n_z,
        "m_c": bundle.m_c,
        "m_d": bundle.m_d,
        "geometry": {"eps_c": g.eps_c, "eps_d": g.eps_d, "sigma": g.sigma, "eps_bar": g.eps_bar},
        "counts": {"flow": bundle.n_flow, "jump": bundle.n_jump, "ring": bundle.n_ring,
                   "safe_flow": int(bundle.safe_flow_mask.sum()), "safe_jump": int(bundle.safe_jump_mask.sum())},
        "thinned_out_flow": np.flatnonzero(~bundle.safe_flow_mask).tolist(),
        "thinned_out_jump": np.flatnonzero(~bundle.safe_jump_mask).tolist(),
        "meta": bundle.meta,
    }
    if extra_meta:
        manifest.update(extra_meta)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_bundle(directory, flow_set=None, jump_set=None, domain=None) -> DatasetBundle:
    d = Path(directory)
    if not (d / "manifest.json").exists():
        raise FileNotFoundError(f"no dataset manifest in {d}")
    man = json.loads((d / "manifest.json").read_text())
    n, m_c, m_d = man["n_z"], man["m_c"], man["m_d"]
    fz, fu, ft, fr = _read_kind(d / "flow.csv", n, m_c)
    jz, ju, jt, jr = _read_kind(d / "jump.csv", n, m_d)
    rz, _, _, _ = _read_kind(d / "ring.csv", n, 0)
    g = man["geometry"]
    sf = np.ones(len(fz), bool)
    sf[man["thinned_out_flow"]] = False
    sj = np.ones(len(jz), bool)
    sj[man["thinned_out_jump"]] = False
    kw = {}
    if flow_set is not None:
        kw["flow_set"] = flow_set
    if jump_set is not None:
        kw["jump_set"] = jump_set
    if domain is not None:
        kw["domain"] = domain
    return DatasetBundle(n, m_c, m_d, fz, fu, ft, jz, ju, jt, Geometry(**g), rz, fr, jr, sf, sj, meta=man["meta"], **kw)
