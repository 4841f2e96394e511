"""Pseudo-energy landscapes, attractor search and symmetry breaking.

Works on :class:`~hopmixer.dynamics.HierarchicalNet` instances through their
adiabatic reduction (:class:`~hopmixer.dynamics.VisibleFlow`), whose energy is
the block pseudo energy. Landscapes need a ``2 x 1`` visible grid so the
energy can be tabulated over the plane.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage

from . import lagrangians as lg
from .blocks import block_energy
from .dynamics import EnergyTrace, HierarchicalNet, VisibleFlow, _rms, integrate
from .errors import DimensionError
from .numerics import make_rng

LANDSCAPE_EPS = 1e-3
CLUSTER_RADIUS = 1e-3
DEFAULT_BREAK_SCALE = 0.1


# ---------------------------------------------------------------------------
# network helpers
# ---------------------------------------------------------------------------

def break_symmetry(net: HierarchicalNet, rng, scale: float = DEFAULT_BREAK_SCALE) -> HierarchicalNet:
    """Copy of ``net`` with Gaussian symmetry-breaking terms added.

    Entries have standard deviation ``scale`` times the RMS of the matching
    symmetric coupling. ``scale == 0`` returns a symmetric copy.
    """
    if scale < 0:
        raise ValueError("scale must be non-negative")
    if scale == 0:
        return replace(net, asym_vs=None, asym_vc=None)
    asym_vs = scale * _rms(net.xi_sv) * rng.standard_normal((net.N_vs, net.N_s))
    asym_vc = scale * _rms(net.xi_cv) * rng.standard_normal((net.N_vc, net.N_c))
    return replace(net, asym_vs=asym_vs, asym_vc=asym_vc)


def lab_net(
    rng,
    n_tokens: int = 2,
    n_channels: int = 1,
    d_token: int = 8,
    d_channel: int = 8,
    scale: float = 0.7,
    break_scale: float = 0.0,
    activation: str = "gelu",
    eps: float = LANDSCAPE_EPS,
    decay: float = 1.0,
) -> HierarchicalNet:
    """Random symmetric network, optionally broken, used by the lab experiments.

    The symmetric couplings are drawn first so that equal seeds give the same
    symmetric part for every ``break_scale``.
    """
    act = lg.from_name(activation)
    net = HierarchicalNet.random(
        rng, n_tokens, n_channels, d_token, d_channel, scale=scale,
        L_s=act, L_c=act, L_v=lg.CenteredNorm(eps), decay=decay,
    )
    return break_symmetry(net, rng, break_scale) if break_scale > 0 else net


# ---------------------------------------------------------------------------
# landscapes
# ---------------------------------------------------------------------------

@dataclass
class LandscapeGrid:
    """Pseudo energy on a regular grid; ``values[i, j] = E(x1[i], x2[j])``."""

    x1_range: tuple[float, float, int]
    x2_range: tuple[float, float, int]
    values: np.ndarray
    eps: float = LANDSCAPE_EPS

    def __post_init__(self):
        shape = (int(self.x1_range[2]), int(self.x2_range[2]))
        if self.values.shape != shape:
            raise DimensionError(f"values must have shape {shape}, got {self.values.shape}")

    @property
    def x1(self) -> np.ndarray:
        lo, hi, n = self.x1_range
        return np.linspace(lo, hi, int(n))

    @property
    def x2(self) -> np.ndarray:
        lo, hi, n = self.x2_range
        return np.linspace(lo, hi, int(n))

    def points(self) -> np.ndarray:
        """All grid points as an ``(n1 * n2, 2)`` array, row-major in ``(i, j)``."""
        g1, g2 = np.meshgrid(self.x1, self.x2, indexing="ij")
        return np.stack([g1.ravel(), g2.ravel()], axis=1)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x1", "x2", "E"])
            for (a, b), e in zip(self.points(), self.values.ravel()):
                w.writerow([repr(float(a)), repr(float(b)), repr(float(e))])


def _landscape_net(net: HierarchicalNet, eps: float | None) -> HierarchicalNet:
    if (net.N_vs, net.N_vc) != (2, 1):
        raise DimensionError(f"landscapes need a 2 x 1 visible grid, got {net.N_vs} x {net.N_vc}")
    if eps is None:
        eps = getattr(net.L_v, "eps", LANDSCAPE_EPS)
    if not eps > 0:
        raise ValueError("landscape eps must be positive")
    return replace(net, L_v=lg.CenteredNorm(eps))


def pseudo_energy(net: HierarchicalNet, points) -> np.ndarray:
    """Pseudo energy at each row ``(x1, x2)`` of ``points`` for a 2 x 1 visible grid."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DimensionError(f"points must have shape (m, 2), got {pts.shape}")
    block = net.to_block()
    return np.asarray(block_energy(pts[:, :, None], block))


def sample_landscape(
    net: HierarchicalNet,
    x1_range: tuple[float, float, int] = (-3.0, 3.0, 201),
    x2_range: tuple[float, float, int] | None = None,
    eps: float | None = LANDSCAPE_EPS,
) -> LandscapeGrid:
    """Tabulate the pseudo energy of a 2 x 1 visible grid.

    ``eps`` replaces the visible regularizer (``None`` keeps the network's).
    """
    x2_range = x1_range if x2_range is None else x2_range
    for r in (x1_range, x2_range):
        if int(r[2]) < 1 or not r[1] >= r[0]:
            raise ValueError(f"bad grid range {r}")
    net = _landscape_net(net, eps)
    grid = LandscapeGrid(tuple(x1_range), tuple(x2_range), np.zeros((int(x1_range[2]), int(x2_range[2]))), net.L_v.eps)
    grid.values = pseudo_energy(net, grid.points()).reshape(grid.values.shape)
    return grid


REFLECTIONS = {
    # mirror about the line x1 + x2 = 0
    "anti": lambda p: -p[:, ::-1],
    # mirror about the line x1 = x2
    "swap": lambda p: p[:, ::-1],
}


def mirror_discrepancy(net: HierarchicalNet, grid: LandscapeGrid, reflection: str = "anti") -> float:
    """Max ``|E(x) - E(R x)|`` over the grid, with ``R x`` evaluated directly."""
    try:
        reflect = REFLECTIONS[reflection]
    except KeyError:
        raise ValueError(f"unknown reflection {reflection!r}; choose from {sorted(REFLECTIONS)}") from None
    net = _landscape_net(net, grid.eps)
    mirrored = pseudo_energy(net, reflect(grid.points()))
    return float(np.max(np.abs(grid.values.ravel() - mirrored)))


# ---------------------------------------------------------------------------
# attractors
# ---------------------------------------------------------------------------

@dataclass
class Attractor:
    state: np.ndarray
    count: int
    energy: float
    speed: float
    spread_along: float
    spread_transverse: float

    def to_dict(self) -> dict:
        return {
            "state": [float(v) for v in self.state.ravel()],
            "shape": list(self.state.shape),
            "count": int(self.count),
            "energy": float(self.energy),
            "speed": float(self.speed),
            "spread_along": float(self.spread_along),
            "spread_transverse": float(self.spread_transverse),
        }


@dataclass
class AttractorSet:
    attractors: list[Attractor]
    endpoints: np.ndarray
    labels: np.ndarray
    radius: float = CLUSTER_RADIUS
    converged: bool = True

    @property
    def n_clusters(self) -> int:
        return len(self.attractors)

    @property
    def min_distance(self) -> float:
        """Smallest distance between two cluster centroids (``inf`` for one cluster)."""
        cs = [a.state.ravel() for a in self.attractors]
        d = [np.linalg.norm(a - b) for i, a in enumerate(cs) for b in cs[i + 1:]]
        return float(min(d)) if d else float("inf")

    @property
    def zero_mode_valley(self) -> bool:
        """Some multi-member cluster is stretched along the all-ones direction."""
        return any(
            a.count > 1 and a.spread_along > 10.0 * a.spread_transverse
            for a in self.attractors
        )

    @property
    def isolated(self) -> bool:
        """Every multi-member cluster has comparable spreads in both directions."""
        multi = [a for a in self.attractors if a.count > 1]
        return all(
            max(a.spread_along, a.spread_transverse) <= 3.0 * min(a.spread_along, a.spread_transverse)
            for a in multi
        )

    def to_dict(self) -> dict:
        return {
            "n_clusters": self.n_clusters,
            "radius": self.radius,
            "min_distance": self.min_distance if self.n_clusters > 1 else None,
            "zero_mode_valley": self.zero_mode_valley,
            "converged": self.converged,
            "attractors": [a.to_dict() for a in self.attractors],
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def cluster_endpoints(points, radius: float = CLUSTER_RADIUS) -> np.ndarray:
    """Single-linkage labels, numbered by first appearance."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) == 1:
        return np.zeros(1, dtype=int)
    raw = fcluster(linkage(pts, method="single"), t=radius, criterion="distance")
    order = {}
    for r in raw:
        order.setdefault(r, len(order))
    return np.array([order[r] for r in raw], dtype=int)


def _spreads(members: np.ndarray, centroid: np.ndarray) -> tuple[float, float]:
    ones = np.ones(members.shape[1]) / np.sqrt(members.shape[1])
    dev = members - centroid
    along = dev @ ones
    trans = dev - np.outer(along, ones)
    return float(np.max(np.abs(along))), float(np.max(np.linalg.norm(trans, axis=1)))


def find_attractors(
    net: HierarchicalNet,
    n_inits: int,
    rng,
    init_scale: float = 3.0,
    dt: float = 1e-2,
    steps: int = 20000,
    method: str = "rk4",
    tol: float = 1e-10,
    radius: float = CLUSTER_RADIUS,
) -> AttractorSet:
    """Relax the reduced visible flow from uniform random inits and cluster the endpoints."""
    if n_inits < 2:
        raise ValueError("n_inits must be at least 2")
    flow = VisibleFlow(net)
    shape = (net.N_vs, net.N_vc)
    ends, converged = [], True
    for _ in range(n_inits):
        x0 = rng.uniform(-init_scale, init_scale, size=shape)
        tr = integrate(flow, x0, dt=dt, steps=steps, method=method, tol=tol,
                       stop_when_converged=True, record_energy=False)
        converged &= tr.converged
        ends.append(tr.final_state.ravel())
    ends = np.array(ends)
    labels = cluster_endpoints(ends, radius)
    attractors = []
    for k in range(labels.max() + 1):
        members = ends[labels == k]
        c = members.mean(axis=0)
        along, trans = _spreads(members, c)
        attractors.append(Attractor(
            state=c.reshape(shape),
            count=len(members),
            energy=float(flow.energy_vec(c)),
            speed=float(np.linalg.norm(flow.velocity(c))),
            spread_along=along,
            spread_transverse=trans,
        ))
    return AttractorSet(attractors, ends, labels, radius, bool(converged))


# ---------------------------------------------------------------------------
# energy traces
# ---------------------------------------------------------------------------

def energy_over_time(
    net: HierarchicalNet,
    n_trajectories: int,
    rng,
    init_scale: float = 1.0,
    dt: float = 1e-2,
    steps: int = 2000,
    method: str = "rk4",
) -> list[EnergyTrace]:
    """Pseudo-energy traces of the reduced visible flow from Gaussian inits."""
    if n_trajectories < 1:
        raise ValueError("n_trajectories must be positive")
    flow = VisibleFlow(net)
    shape = (net.N_vs, net.N_vc)
    return [
        integrate(flow, init_scale * rng.standard_normal(shape), dt=dt, steps=steps, method=method)
        for _ in range(n_trajectories)
    ]


@dataclass
class AscentWitness:
    seed: int
    trajectory: int
    increase: float
    searched: list[int] = field(default_factory=list)


def find_ascent_witness(
    make_net,
    seeds,
    threshold: float = 1e-4,
    n_trajectories: int = 5,
    **kwargs,
) -> AscentWitness | None:
    """First seed whose network shows a single-step energy increase above ``threshold``.

    ``make_net(rng)`` builds the network; the same generator then draws the
    initial states.
    """
    searched = []
    for seed in seeds:
        rng = make_rng(seed)
        traces = energy_over_time(make_net(rng), n_trajectories, rng, **kwargs)
        searched.append(int(seed))
        for i, tr in enumerate(traces):
            if tr.max_energy_increase > threshold:
                return AscentWitness(int(seed), i, tr.max_energy_increase, searched)
    return None
