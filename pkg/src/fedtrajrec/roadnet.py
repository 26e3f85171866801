"""Directed road network with planar geometry (meters)."""
from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import (InvalidDimensionError, OutOfExtentError, UnknownEdgeError,
                     UnknownNodeError)

EARTH_RADIUS_M = 6371008.8

# Returned by rn_distance when neither direction is reachable.
DISCONNECTED = math.inf


@dataclass(frozen=True)
class MapMatchedPoint:
    edge: int
    r: float
    t: float


@dataclass(frozen=True)
class GridSpec:
    origin_x: float
    origin_y: float
    cell_size: float
    rows: int
    cols: int

    def __post_init__(self):
        if not self.cell_size > 0:
            raise InvalidDimensionError("cell size must be positive")
        if self.rows < 1 or self.cols < 1:
            raise InvalidDimensionError("grid needs at least one row and column")

    @classmethod
    def covering(cls, net: "RoadNetwork", cell_size: float) -> "GridSpec":
        """Smallest grid anchored at the network's lower-left corner that contains it."""
        x0, y0, x1, y1 = net.bounds()
        cols = max(1, math.ceil((x1 - x0) / cell_size))
        rows = max(1, math.ceil((y1 - y0) / cell_size))
        return cls(float(x0), float(y0), float(cell_size), rows, cols)

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        fx = (x - self.origin_x) / self.cell_size
        fy = (y - self.origin_y) / self.cell_size
        if not (0.0 <= fx <= self.cols and 0.0 <= fy <= self.rows):
            raise OutOfExtentError(f"({x}, {y}) lies outside the grid extent")
        return min(int(math.floor(fx)), self.cols - 1), min(int(math.floor(fy)), self.rows - 1)

    def to_dict(self) -> dict:
        return {"origin": [self.origin_x, self.origin_y], "cell_size": self.cell_size,
                "rows": self.rows, "cols": self.cols}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(float(d["origin"][0]), float(d["origin"][1]), float(d["cell_size"]),
                   int(d["rows"]), int(d["cols"]))


def cell_of(grid: GridSpec, coord) -> tuple[int, int]:
    return grid.cell_of(coord[0], coord[1])


class RoadNetwork:
    """Immutable directed graph; node and edge ids are dense array indices.

    The only mutable state is the per-source shortest-path memo, which is
    guarded by a lock so one network can be shared between threads.
    """

    def __init__(self, node_xy, edge_nodes):
        xy = np.asarray(node_xy, dtype=np.float64).reshape(-1, 2)
        ends = np.asarray(edge_nodes, dtype=np.int64).reshape(-1, 2)
        if len(xy) == 0:
            raise InvalidDimensionError("network has no nodes")
        if ends.size and (ends.min() < 0 or ends.max() >= len(xy)):
            raise UnknownNodeError("edge references a node that does not exist")
        self.node_x = np.ascontiguousarray(xy[:, 0])
        self.node_y = np.ascontiguousarray(xy[:, 1])
        self.edge_src = np.ascontiguousarray(ends[:, 0])
        self.edge_dst = np.ascontiguousarray(ends[:, 1])
        self.ax = self.node_x[self.edge_src]
        self.ay = self.node_y[self.edge_src]
        self.bx = self.node_x[self.edge_dst]
        self.by = self.node_y[self.edge_dst]
        self.edge_length = np.hypot(self.bx - self.ax, self.by - self.ay)
        for arr in (self.node_x, self.node_y, self.edge_src, self.edge_dst,
                    self.ax, self.ay, self.bx, self.by, self.edge_length):
            arr.flags.writeable = False

        order = np.argsort(self.edge_src, kind="stable")
        self._csr_edge = np.ascontiguousarray(order.astype(np.int64))
        self._csr_head = np.ascontiguousarray(self.edge_dst[order])
        self._csr_w = np.ascontiguousarray(self.edge_length[order])
        counts = np.bincount(self.edge_src, minlength=self.n_nodes)
        self._indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

        self._memo: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._lock = threading.Lock()

    # -- basic accessors ---------------------------------------------------
    @property
    def n_nodes(self) -> int:
        return len(self.node_x)

    @property
    def n_edges(self) -> int:
        return len(self.edge_src)

    def out_edges(self, node: int) -> np.ndarray:
        self._check_node(node)
        return self._csr_edge[self._indptr[node]:self._indptr[node + 1]]

    def bounds(self) -> tuple[float, float, float, float]:
        return (float(self.node_x.min()), float(self.node_y.min()),
                float(self.node_x.max()), float(self.node_y.max()))

    def centroid(self) -> tuple[float, float]:
        return float(self.node_x.mean()), float(self.node_y.mean())

    def _check_node(self, node):
        if not 0 <= node < self.n_nodes:
            raise UnknownNodeError(f"node {node} does not exist")

    def _check_edge(self, edge):
        if not 0 <= edge < self.n_edges:
            raise UnknownEdgeError(f"edge {edge} does not exist")

    # -- geometry ----------------------------------------------------------
    def point_position(self, p: MapMatchedPoint) -> tuple[float, float]:
        self._check_edge(p.edge)
        e = p.edge
        return (self.ax[e] + p.r * (self.bx[e] - self.ax[e]),
                self.ay[e] + p.r * (self.by[e] - self.ay[e]))

    def positions(self, edges, ratios) -> np.ndarray:
        """Vectorised point_position; returns an (n, 2) array."""
        e = np.asarray(edges, dtype=np.int64)
        r = np.asarray(ratios, dtype=np.float64)
        if e.size and (e.min() < 0 or e.max() >= self.n_edges):
            raise UnknownEdgeError("edge id out of range")
        return np.stack([self.ax[e] + r * (self.bx[e] - self.ax[e]),
                         self.ay[e] + r * (self.by[e] - self.ay[e])], axis=-1)

    def project(self, xs, ys) -> tuple[np.ndarray, np.ndarray]:
        """Distance and projection ratio from each point to every edge, (M, L)."""
        xs = np.ascontiguousarray(np.atleast_1d(xs), dtype=np.float64)
        ys = np.ascontiguousarray(np.atleast_1d(ys), dtype=np.float64)
        return kernels.segment_distances(xs, ys, self.ax, self.ay, self.bx, self.by)

    # -- shortest paths ----------------------------------------------------
    def _tree(self, source: int):
        self._check_node(source)
        with self._lock:
            hit = self._memo.get(source)
        if hit is None:
            hit = kernels.dijkstra(self._indptr, self._csr_head, self._csr_w,
                                   self._csr_edge, np.int64(source))
            with self._lock:
                self._memo.setdefault(source, hit)
        return hit

    def shortest_path_distance(self, source: int, target: int) -> float:
        """Directed shortest-path length; ``math.inf`` when unreachable."""
        self._check_node(target)
        return float(self._tree(source)[0][target])

    def shortest_path_edges(self, source: int, target: int) -> list[int] | None:
        self._check_node(target)
        dist, pred = self._tree(source)
        if not np.isfinite(dist[target]):
            return None
        path = []
        node = target
        while node != source:
            e = int(pred[node])
            path.append(e)
            node = int(self.edge_src[e])
        path.reverse()
        return path

    def directed_rn_distance(self, a: MapMatchedPoint, b: MapMatchedPoint) -> float:
        self._check_edge(a.edge)
        self._check_edge(b.edge)
        if a.edge == b.edge and a.r <= b.r:
            return (b.r - a.r) * float(self.edge_length[a.edge])
        gap = self.shortest_path_distance(int(self.edge_dst[a.edge]), int(self.edge_src[b.edge]))
        if math.isinf(gap):
            return math.inf
        return ((1.0 - a.r) * float(self.edge_length[a.edge]) + gap
                + b.r * float(self.edge_length[b.edge]))

    def rn_distance(self, a: MapMatchedPoint, b: MapMatchedPoint) -> float:
        """Network distance, the shorter of the two directions.

        Returns ``DISCONNECTED`` when neither direction has a path.
        """
        return min(self.directed_rn_distance(a, b), self.directed_rn_distance(b, a))

    def route(self, a: MapMatchedPoint, b: MapMatchedPoint) -> list[int] | None:
        """Edge sequence travelled from a to b, both end edges included."""
        if a.edge == b.edge and a.r <= b.r:
            return [a.edge]
        mid = self.shortest_path_edges(int(self.edge_dst[a.edge]), int(self.edge_src[b.edge]))
        if mid is None:
            return None
        return [a.edge] + mid + [b.edge]

    # -- serialisation -----------------------------------------------------
    def to_json_dict(self) -> dict:
        return {
            "nodes": [[i, float(x), float(y)] for i, (x, y) in enumerate(zip(self.node_x, self.node_y))],
            "edges": [[i, int(u), int(v)] for i, (u, v) in enumerate(zip(self.edge_src, self.edge_dst))],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "RoadNetwork":
        nodes = sorted(d["nodes"], key=lambda n: n[0])
        edges = sorted(d["edges"], key=lambda e: e[0])
        if [n[0] for n in nodes] != list(range(len(nodes))):
            raise InvalidDimensionError("node ids must be dense and unique from 0")
        if [e[0] for e in edges] != list(range(len(edges))):
            raise InvalidDimensionError("edge ids must be dense and unique from 0")
        return cls([[n[1], n[2]] for n in nodes], [[e[1], e[2]] for e in edges])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict()))

    @classmethod
    def load(cls, path) -> "RoadNetwork":
        return cls.from_json_dict(json.loads(Path(path).read_text()))


def generate_grid_network(rows: int, cols: int, spacing: float, seed: int = 0) -> RoadNetwork:
    """Bidirectional lattice, node id = row * cols + col.

    ``seed`` is accepted for interface symmetry with the other generators;
    the lattice is fully determined by its dimensions.
    """
    if rows < 2 or cols < 1:
        raise InvalidDimensionError(f"lattice needs rows >= 2 and cols >= 1, got {rows}x{cols}")
    if not spacing > 0:
        raise InvalidDimensionError("spacing must be positive")
    xy = [[c * spacing, r * spacing] for r in range(rows) for c in range(cols)]
    edges = []
    for r in range(rows):
        for c in range(cols):
            u = r * cols + c
            if c + 1 < cols:
                edges += [[u, u + 1], [u + 1, u]]
            if r + 1 < rows:
                edges += [[u, u + cols], [u + cols, u]]
    return RoadNetwork(xy, edges)


def project_equirectangular(lon, lat, ref_lat: float | None = None):
    """Project degrees to local planar meters around ``ref_lat``.

    The reference latitude defaults to the mean of ``lat``; x grows east and
    y grows north, both measured from (0 deg lon, ``ref_lat``).
    """
    lon = np.asarray(lon, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    if ref_lat is None:
        ref_lat = float(lat.mean())
    x = np.radians(lon) * EARTH_RADIUS_M * math.cos(math.radians(ref_lat))
    y = np.radians(lat - ref_lat) * EARTH_RADIUS_M
    return x, y
