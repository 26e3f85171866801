"""Trajectory containers, map matching, downsampling, splits and partitions."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import kernels
from .errors import (InvalidRatioError, InvalidRatiosError, LengthMismatchError,
                     MalformedRowError, NoCandidatesError, NoRouteError,
                     TooFewTrajectoriesError, UnknownEdgeError)
from .roadnet import GridSpec, MapMatchedPoint, RoadNetwork

_GRID_TOL = 1e-6


class GridToken(NamedTuple):
    x: int
    y: int
    tid: int


@dataclass(frozen=True, eq=False)
class RawTrajectory:
    x: np.ndarray
    y: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        for name in ("x", "y", "t"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if not (len(self.x) == len(self.y) == len(self.t)):
            raise LengthMismatchError("x, y, t must have equal length")
        if len(self.t) == 0:
            raise LengthMismatchError("raw trajectory is empty")
        if np.any(np.diff(self.t) <= 0):
            raise ValueError("raw timestamps must be strictly increasing")

    def __len__(self):
        return len(self.t)

    def __eq__(self, other):
        return (isinstance(other, RawTrajectory) and np.array_equal(self.x, other.x)
                and np.array_equal(self.y, other.y) and np.array_equal(self.t, other.t))


@dataclass(frozen=True, eq=False)
class MapMatchedTrajectory:
    """Points on the regular grid t0, t0 + eps, ... (one per step)."""

    edges: np.ndarray
    ratios: np.ndarray
    t0: float
    epsilon: float

    def __post_init__(self):
        object.__setattr__(self, "edges", np.asarray(self.edges, dtype=np.int64))
        object.__setattr__(self, "ratios", np.asarray(self.ratios, dtype=np.float64))
        if self.edges.shape != self.ratios.shape or self.edges.ndim != 1:
            raise LengthMismatchError("edges and ratios must be 1-d and aligned")
        if np.any(self.ratios < 0) or np.any(self.ratios > 1):
            raise InvalidRatioError("moving ratio outside [0, 1]")
        if not self.epsilon > 0:
            raise ValueError("sampling interval must be positive")

    def __len__(self):
        return len(self.edges)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.epsilon * np.arange(len(self.edges))

    @property
    def points(self) -> list[MapMatchedPoint]:
        return [MapMatchedPoint(int(e), float(r), float(t))
                for e, r, t in zip(self.edges, self.ratios, self.times)]

    def __eq__(self, other):
        return (isinstance(other, MapMatchedTrajectory) and self.t0 == other.t0
                and self.epsilon == other.epsilon and np.array_equal(self.edges, other.edges)
                and np.array_equal(self.ratios, other.ratios))


@dataclass(frozen=True, eq=False)
class IncompleteTrajectory:
    """Observed subset of an eps-grid; ``index`` holds grid positions."""

    index: np.ndarray
    edges: np.ndarray
    ratios: np.ndarray
    t0: float
    epsilon: float
    n_grid: int

    def __post_init__(self):
        object.__setattr__(self, "index", np.asarray(self.index, dtype=np.int64))
        object.__setattr__(self, "edges", np.asarray(self.edges, dtype=np.int64))
        object.__setattr__(self, "ratios", np.asarray(self.ratios, dtype=np.float64))
        n = len(self.index)
        if n == 0 or len(self.edges) != n or len(self.ratios) != n:
            raise LengthMismatchError("observed arrays must be non-empty and aligned")
        if self.index[0] != 0 or self.index[-1] != self.n_grid - 1 or np.any(np.diff(self.index) <= 0):
            raise ValueError("observed grid indices must increase and include both endpoints")

    def __len__(self):
        return len(self.index)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.epsilon * self.index

    @property
    def t_end(self) -> float:
        return self.t0 + self.epsilon * (self.n_grid - 1)

    @property
    def points(self) -> list[MapMatchedPoint]:
        return [MapMatchedPoint(int(e), float(r), float(t))
                for e, r, t in zip(self.edges, self.ratios, self.times)]

    def __eq__(self, other):
        return (isinstance(other, IncompleteTrajectory) and self.t0 == other.t0
                and self.epsilon == other.epsilon and self.n_grid == other.n_grid
                and np.array_equal(self.index, other.index)
                and np.array_equal(self.edges, other.edges)
                and np.array_equal(self.ratios, other.ratios))

    @classmethod
    def from_points(cls, points: Sequence[MapMatchedPoint], epsilon: float) -> "IncompleteTrajectory":
        """Build from observed points whose timestamps sit on an eps-grid."""
        t0 = points[0].t
        steps = [(p.t - t0) / epsilon for p in points]
        idx = [int(round(s)) for s in steps]
        if any(abs(s - i) > _GRID_TOL for s, i in zip(steps, idx)):
            raise ValueError("observed timestamps are not on the sampling grid")
        return cls(idx, [p.edge for p in points], [p.r for p in points], t0, epsilon, idx[-1] + 1)


@dataclass(frozen=True)
class TrajPair:
    icp: IncompleteTrajectory
    truth: MapMatchedTrajectory


@dataclass
class ClientDataset:
    client_id: int
    train: list = field(default_factory=list)
    valid: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def all_pairs(self) -> list:
        return self.train + self.valid + self.test


# --------------------------------------------------------------------------
# map matching
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MatchParams:
    sigma: float = 10.0
    beta: float = 5.0
    radius: float = 50.0
    epsilon: float = 15.0


def match_candidates(net: RoadNetwork, raw: RawTrajectory, radius: float):
    """Per raw point: candidate edge ids (ascending), distances and ratios."""
    if not radius > 0:
        raise ValueError("candidate radius must be positive")
    dist, ratio = net.project(raw.x, raw.y)
    out = []
    for i in range(len(raw)):
        cand = np.flatnonzero(dist[i] <= radius)
        if cand.size == 0:
            raise NoCandidatesError(f"point {i} has no edge within {radius} m")
        out.append((cand, dist[i, cand], ratio[i, cand]))
    return out


def viterbi_states(net: RoadNetwork, raw: RawTrajectory, params: MatchParams = MatchParams()):
    """Most probable (edge, ratio) per raw point and its joint log-score."""
    cands = match_candidates(net, raw, params.radius)
    n = len(raw)
    width = max(len(c[0]) for c in cands)
    emission = np.full((n, width), -np.inf)
    for i, (_, d, _) in enumerate(cands):
        emission[i, :len(d)] = -(d * d) / (2.0 * params.sigma ** 2)
    transition = np.full((max(n - 1, 0), width, width), -np.inf)
    for i in range(n - 1):
        straight = math.hypot(raw.x[i + 1] - raw.x[i], raw.y[i + 1] - raw.y[i])
        ea, _, ra = cands[i]
        eb, _, rb = cands[i + 1]
        for a in range(len(ea)):
            pa = MapMatchedPoint(int(ea[a]), float(ra[a]), 0.0)
            for b in range(len(eb)):
                route = net.directed_rn_distance(pa, MapMatchedPoint(int(eb[b]), float(rb[b]), 0.0))
                if math.isfinite(route):
                    transition[i, a, b] = -abs(route - straight) / params.beta
    path, score = kernels.viterbi(emission, transition)
    if not math.isfinite(score):
        raise NoRouteError("no connected candidate sequence exists")
    states = [(int(cands[i][0][k]), float(cands[i][2][k])) for i, k in enumerate(path)]
    return states, float(score)


def _locate(net: RoadNetwork, route: list[int], start_r: float, travelled: float):
    """(edge, r) after moving ``travelled`` meters along ``route`` from start_r."""
    lengths = net.edge_length
    offset = start_r * lengths[route[0]] + travelled
    for k, e in enumerate(route):
        length = lengths[e]
        if offset <= length or k == len(route) - 1:
            r = offset / length if length > 0 else 0.0
            return e, min(max(r, 0.0), 1.0)
        offset -= length
    raise AssertionError("unreachable")


def hmm_map_match(net: RoadNetwork, raw: RawTrajectory,
                  params: MatchParams = MatchParams()) -> MapMatchedTrajectory:
    """Viterbi match, then resample onto the eps-grid along the matched route."""
    states, _ = viterbi_states(net, raw, params)
    eps = params.epsilon
    t0 = float(raw.t[0])
    k_max = int(math.floor((raw.t[-1] - t0) / eps + 1e-9))
    edges, ratios = [], []
    seg = 0
    route = None
    for k in range(k_max + 1):
        t = t0 + k * eps
        while seg < len(raw) - 2 and t > raw.t[seg + 1]:
            seg += 1
            route = None
        if len(raw) == 1:
            edges.append(states[0][0])
            ratios.append(states[0][1])
            continue
        a = MapMatchedPoint(states[seg][0], states[seg][1], raw.t[seg])
        b = MapMatchedPoint(states[seg + 1][0], states[seg + 1][1], raw.t[seg + 1])
        if route is None:
            route = net.route(a, b)
            total = net.directed_rn_distance(a, b)
        frac = (t - raw.t[seg]) / (raw.t[seg + 1] - raw.t[seg])
        e, r = _locate(net, route, a.r, total * min(max(frac, 0.0), 1.0))
        edges.append(e)
        ratios.append(r)
    return MapMatchedTrajectory(edges, ratios, t0, eps)


# --------------------------------------------------------------------------
# sampling, tokens, splits
# --------------------------------------------------------------------------

def downsample(traj: MapMatchedTrajectory, keep_ratio: float, seed: int) -> IncompleteTrajectory:
    if not 0 < keep_ratio <= 1:
        raise InvalidRatioError(f"keep ratio must be in (0, 1], got {keep_ratio}")
    n = len(traj)
    if n < 2:
        raise LengthMismatchError("need at least two points to downsample")
    rng = np.random.default_rng(seed)
    keep = np.ones(n, dtype=bool)
    keep[1:-1] = rng.random(n - 2) < keep_ratio
    idx = np.flatnonzero(keep)
    return IncompleteTrajectory(idx, traj.edges[idx], traj.ratios[idx], traj.t0, traj.epsilon, n)


def time_id(t: float, t0: float, epsilon: float) -> int:
    return int(math.floor((t - t0) / epsilon + 1e-9))


def to_grid_sequence(traj: IncompleteTrajectory, net: RoadNetwork, grid: GridSpec) -> list[GridToken]:
    xy = net.positions(traj.edges, traj.ratios)
    return [GridToken(*grid.cell_of(x, y), time_id(t, traj.t0, traj.epsilon))
            for (x, y), t in zip(xy, traj.times)]


def split_dataset(pairs: list, ratios=(0.7, 0.2, 0.1), seed: int = 0):
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidRatiosError(f"split ratios must be three non-negatives summing to 1, got {ratios}")
    if not pairs:
        raise TooFewTrajectoriesError("nothing to split")
    n = len(pairs)
    order = np.random.default_rng(seed).permutation(n)
    n_valid = int(math.floor(n * ratios[1]))
    n_test = int(math.floor(n * ratios[2]))
    n_train = n - n_valid - n_test
    items = [pairs[i] for i in order]
    return items[:n_train], items[n_train:n_train + n_valid], items[n_train + n_valid:]


def partition_clients(pairs: list, n_clients: int, mode: str = "iid", seed: int = 0,
                      net: RoadNetwork | None = None, ratios=(0.7, 0.2, 0.1)) -> list[ClientDataset]:
    """Distribute pairs over clients, then split each client's share.

    ``spatial`` orders trajectories by the angle of their start point around
    the network centroid and cuts that circular order into ``n_clients``
    contiguous sectors of (near) equal size.
    """
    if n_clients < 1 or len(pairs) < n_clients:
        raise TooFewTrajectoriesError(f"{len(pairs)} trajectories cannot feed {n_clients} clients")
    rng = np.random.default_rng(seed)
    if mode == "iid":
        perm = rng.permutation(len(pairs))
        shares = [[pairs[i] for i in perm[c::n_clients]] for c in range(n_clients)]
    elif mode == "spatial":
        if net is None:
            raise ValueError("spatial partitioning needs the road network")
        cx, cy = net.centroid()
        start = net.positions([p.truth.edges[0] for p in pairs], [p.truth.ratios[0] for p in pairs])
        angle = np.mod(np.arctan2(start[:, 1] - cy, start[:, 0] - cx), 2 * np.pi)
        order = np.argsort(angle, kind="stable")
        bounds = np.linspace(0, len(pairs), n_clients + 1).round().astype(int)
        shares = [[pairs[i] for i in order[bounds[c]:bounds[c + 1]]] for c in range(n_clients)]
    else:
        raise ValueError(f"unknown partition mode {mode!r}")
    clients = []
    for c, share in enumerate(shares):
        train, valid, test = split_dataset(share, ratios, seed=int(rng.integers(2**31)))
        if not train:
            raise TooFewTrajectoriesError(f"client {c} received no training data")
        clients.append(ClientDataset(c, train, valid, test))
    return clients


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------

def generate_synthetic_trajectories(net: RoadNetwork, count: int, length: int,
                                    epsilon: float, seed: int) -> list[MapMatchedTrajectory]:
    """Constant-speed random walks over directed edges, sampled every eps.

    At each node the next edge is drawn uniformly among outgoing edges,
    excluding the immediate U-turn unless it is the only way out.
    """
    if length < 2:
        raise LengthMismatchError("trajectory length must be at least 2")
    rng = np.random.default_rng(seed)
    out = []
    lengths = net.edge_length
    for _ in range(count):
        edge = int(rng.integers(net.n_edges))
        pos = float(rng.random()) * lengths[edge]
        speed = float(rng.uniform(5.0, 15.0))
        edges, ratios = [edge], [pos / lengths[edge]]
        for _ in range(length - 1):
            pos += speed * epsilon
            while pos > lengths[edge]:
                pos -= lengths[edge]
                nxt = net.out_edges(int(net.edge_dst[edge]))
                back = nxt[net.edge_dst[nxt] == net.edge_src[edge]]
                options = np.setdiff1d(nxt, back) if len(nxt) > len(back) else nxt
                edge = int(options[rng.integers(len(options))])
            edges.append(edge)
            ratios.append(min(pos / lengths[edge], 1.0))
        out.append(MapMatchedTrajectory(edges, ratios, 0.0, float(epsilon)))
    return out


def make_pairs(trajs: list[MapMatchedTrajectory], keep_ratio: float, seed: int) -> list[TrajPair]:
    rng = np.random.default_rng(seed)
    return [TrajPair(downsample(t, keep_ratio, int(rng.integers(2**31))), t) for t in trajs]


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------

MATCHED_HEADER = ["traj_id", "t", "edge", "r"]
RAW_HEADER = ["traj_id", "t", "x", "y"]


def _rows(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        for row in reader:
            if row:
                yield reader.line_num, row
    return header


def write_matched_csv(path, trajs: Sequence) -> None:
    """Write matched or incomplete trajectories; floats use round-trip repr."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MATCHED_HEADER)
        for i, tr in enumerate(trajs):
            for e, r, t in zip(tr.edges, tr.ratios, tr.times):
                w.writerow([i, repr(float(t)), int(e), repr(float(r))])


def write_raw_csv(path, trajs: Sequence[RawTrajectory]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RAW_HEADER)
        for i, tr in enumerate(trajs):
            for x, y, t in zip(tr.x, tr.y, tr.t):
                w.writerow([i, repr(float(t)), repr(float(x)), repr(float(y))])


def _grouped(path, kinds):
    groups: dict[str, list] = {}
    if Path(path).stat().st_size == 0:
        return groups
    for line, row in _rows(path):
        if len(row) != 4:
            raise MalformedRowError(line, f"expected 4 columns, got {len(row)}")
        try:
            vals = [kind(v) for kind, v in zip(kinds, row[1:])]
        except ValueError as exc:
            raise MalformedRowError(line, str(exc)) from None
        groups.setdefault(row[0], []).append((line, vals))
    return groups


def read_matched_csv(path, epsilon: float | None = None) -> list[MapMatchedTrajectory]:
    """Read complete matched trajectories; eps is inferred when not given."""
    out = []
    for rows in _grouped(path, (float, int, float)).values():
        ts = [v[0] for _, v in rows]
        eps = epsilon if epsilon is not None else (ts[1] - ts[0] if len(ts) > 1 else 1.0)
        for k, (line, (t, _, r)) in enumerate(rows):
            if abs(t - (ts[0] + k * eps)) > _GRID_TOL * max(1.0, abs(t)):
                raise MalformedRowError(line, "timestamps are not evenly spaced")
            if not 0 <= r <= 1:
                raise MalformedRowError(line, f"moving ratio {r} outside [0, 1]")
        out.append(MapMatchedTrajectory([v[1] for _, v in rows], [v[2] for _, v in rows], ts[0], eps))
    return out


def read_incomplete_csv(path, epsilon: float) -> list[IncompleteTrajectory]:
    out = []
    for rows in _grouped(path, (float, int, float)).values():
        try:
            pts = [MapMatchedPoint(e, r, t) for _, (t, e, r) in rows]
            out.append(IncompleteTrajectory.from_points(pts, epsilon))
        except ValueError as exc:
            raise MalformedRowError(rows[0][0], str(exc)) from None
    return out


def read_raw_csv(path) -> list[RawTrajectory]:
    out = []
    for rows in _grouped(path, (float, float, float)).values():
        vals = np.array([v for _, v in rows])
        try:
            out.append(RawTrajectory(vals[:, 1], vals[:, 2], vals[:, 0]))
        except ValueError as exc:
            raise MalformedRowError(rows[0][0], str(exc)) from None
    return out


def validate_on_network(net: RoadNetwork, traj) -> None:
    if len(traj.edges) and (traj.edges.min() < 0 or traj.edges.max() >= net.n_edges):
        raise UnknownEdgeError("trajectory references an edge outside the network")
