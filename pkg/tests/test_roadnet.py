import math

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_network
from fedtrajrec.errors import InvalidDimensionError, OutOfExtentError, UnknownEdgeError, UnknownNodeError
from fedtrajrec.roadnet import (DISCONNECTED, GridSpec, MapMatchedPoint, RoadNetwork,
                                generate_grid_network, project_equirectangular)


def P(e, r):
    return MapMatchedPoint(e, r, 0.0)


class TestGenerateGrid:
    def test_two_by_two(self):
        net = generate_grid_network(2, 2, 100, 7)
        assert net.n_nodes == 4 and net.n_edges == 8
        assert np.allclose(net.edge_length, 100.0)

    def test_line(self):
        net = generate_grid_network(3, 1, 50, 0)
        assert net.n_nodes == 3 and net.n_edges == 4

    def test_rows_one_rejected(self):
        with pytest.raises(InvalidDimensionError):
            generate_grid_network(1, 4, 100, 0)

    def test_every_neighbour_pair_bidirectional(self):
        net = generate_grid_network(4, 5, 30, 0)
        pairs = set(zip(net.edge_src.tolist(), net.edge_dst.tolist()))
        assert all((v, u) in pairs for u, v in pairs)

    def test_deterministic(self):
        a, b = generate_grid_network(4, 4, 10, 3), generate_grid_network(4, 4, 10, 3)
        assert a.to_json_dict() == b.to_json_dict()

    def test_lengths_match_geometry(self):
        net = generate_grid_network(5, 3, 37.5, 0)
        d = np.hypot(net.bx - net.ax, net.by - net.ay)
        assert np.allclose(net.edge_length, d, rtol=1e-6)


class TestPointPosition:
    def setup_method(self):
        self.net = RoadNetwork([(0, 0), (100, 0)], [(0, 1)])

    def test_midpoint(self):
        assert self.net.point_position(P(0, 0.5)) == (50.0, 0.0)

    def test_endpoints(self):
        assert self.net.point_position(P(0, 0.0)) == (0.0, 0.0)
        assert self.net.point_position(P(0, 1.0)) == (100.0, 0.0)

    def test_unknown_edge(self):
        with pytest.raises(UnknownEdgeError):
            self.net.point_position(P(3, 0.5))

    @given(st.integers(0, 2**31), st.floats(0, 1))
    def test_on_segment(self, seed, r):
        net = random_network(np.random.default_rng(seed), 8)
        e = seed % net.n_edges
        x, y = net.point_position(P(e, r))
        d, _ = net.project([x], [y])
        assert d[0, e] < 1e-9 * max(1.0, net.edge_length[e])


class TestShortestPath:
    def test_line(self, line_forward):
        assert line_forward.shortest_path_distance(0, 2) == 200.0
        assert line_forward.shortest_path_distance(0, 0) == 0.0
        assert math.isinf(line_forward.shortest_path_distance(2, 0))

    def test_unknown_node(self, line_forward):
        with pytest.raises(UnknownNodeError):
            line_forward.shortest_path_distance(0, 9)

    def test_against_networkx(self):
        rng = np.random.default_rng(11)
        for _ in range(30):
            net = random_network(rng)
            g = nx.DiGraph()
            g.add_nodes_from(range(net.n_nodes))
            for e in range(net.n_edges):
                u, v, w = int(net.edge_src[e]), int(net.edge_dst[e]), float(net.edge_length[e])
                if not g.has_edge(u, v) or g[u][v]["weight"] > w:
                    g.add_edge(u, v, weight=w)
            src = int(rng.integers(net.n_nodes))
            ref = nx.single_source_dijkstra_path_length(g, src)
            for t in range(net.n_nodes):
                got = net.shortest_path_distance(src, t)
                if t in ref:
                    assert got == pytest.approx(ref[t], rel=1e-9, abs=1e-9)
                else:
                    assert math.isinf(got)

    def test_path_edges_sum_to_distance(self):
        net = generate_grid_network(4, 4, 100, 0)
        path = net.shortest_path_edges(0, 15)
        assert sum(net.edge_length[e] for e in path) == pytest.approx(600.0)
        assert net.edge_src[path[0]] == 0 and net.edge_dst[path[-1]] == 15


def augmented_rn_distance(net: RoadNetwork, a: MapMatchedPoint, b: MapMatchedPoint) -> float:
    """Brute force: split the host edges at both points, run Dijkstra both ways."""
    g = nx.DiGraph()
    g.add_nodes_from(range(net.n_nodes))

    def add(u, v, w):
        if not g.has_edge(u, v) or g[u][v]["weight"] > w:
            g.add_edge(u, v, weight=w)

    cuts: dict[int, list] = {}
    for name, p in (("A", a), ("B", b)):
        cuts.setdefault(p.edge, []).append((p.r, name))
    for e in range(net.n_edges):
        u, v, L = int(net.edge_src[e]), int(net.edge_dst[e]), float(net.edge_length[e])
        if e not in cuts:
            add(u, v, L)
            continue
        prev, prev_r = u, 0.0
        for r, name in sorted(cuts[e]):
            add(prev, name, (r - prev_r) * L)
            prev, prev_r = name, r
        add(prev, v, (1.0 - prev_r) * L)
    best = math.inf
    for s, t in (("A", "B"), ("B", "A")):
        try:
            best = min(best, nx.dijkstra_path_length(g, s, t))
        except nx.NetworkXNoPath:
            pass
    return best


class TestRnDistance:
    def test_same_edge(self):
        net = RoadNetwork([(0, 0), (100, 0)], [(0, 1)])
        assert net.rn_distance(P(0, 0.2), P(0, 0.7)) == pytest.approx(50.0)

    def test_adjacent_midpoints(self):
        # A(0,0)-B(100,0)-C(200,0) bidirectional; midpoints of A->B and B->C
        net = RoadNetwork([(0, 0), (100, 0), (200, 0)], [(0, 1), (1, 0), (1, 2), (2, 1)])
        assert net.rn_distance(P(0, 0.5), P(2, 0.5)) == pytest.approx(100.0)
        assert augmented_rn_distance(net, P(0, 0.5), P(2, 0.5)) == pytest.approx(100.0)

    def test_identity(self, lattice):
        assert lattice.rn_distance(P(3, 0.4), P(3, 0.4)) == 0.0

    def test_disconnected_sentinel(self):
        net = RoadNetwork([(0, 0), (100, 0), (500, 0), (600, 0)], [(0, 1), (2, 3)])
        assert net.rn_distance(P(0, 0.5), P(1, 0.5)) == DISCONNECTED

    def test_oracle_random_networks(self):
        rng = np.random.default_rng(2024)
        for _ in range(100):
            net = random_network(rng, 25)
            for _ in range(3):
                a = P(int(rng.integers(net.n_edges)), float(rng.random()))
                b = P(int(rng.integers(net.n_edges)), float(rng.random()))
                got, ref = net.rn_distance(a, b), augmented_rn_distance(net, a, b)
                if math.isinf(ref):
                    assert math.isinf(got)
                else:
                    assert got == pytest.approx(ref, rel=1e-6, abs=1e-9)

    @given(st.integers(0, 2**31), st.floats(0, 1), st.floats(0, 1))
    def test_symmetric_non_negative(self, seed, r1, r2):
        rng = np.random.default_rng(seed)
        net = generate_grid_network(3, 4, 50, 0)
        a = P(int(rng.integers(net.n_edges)), r1)
        b = P(int(rng.integers(net.n_edges)), r2)
        d = net.rn_distance(a, b)
        assert d >= 0 and d == net.rn_distance(b, a)
        assert net.rn_distance(a, a) == 0.0


class TestGrid:
    def test_floor(self):
        g = GridSpec(0.0, 0.0, 50.0, 10, 10)
        assert g.cell_of(120, 30) == (2, 0)
        assert g.cell_of(0, 0) == (0, 0)

    def test_max_extent_clamps(self):
        g = GridSpec(0.0, 0.0, 50.0, 2, 2)
        assert g.cell_of(100.0, 100.0) == (1, 1)

    def test_out_of_extent(self):
        g = GridSpec(0.0, 0.0, 50.0, 2, 2)
        with pytest.raises(OutOfExtentError):
            g.cell_of(150, 10)
        with pytest.raises(OutOfExtentError):
            g.cell_of(-0.1, 10)

    def test_covering_contains_network(self):
        net = generate_grid_network(5, 7, 33.0, 0)
        g = GridSpec.covering(net, 20.0)
        for x, y in zip(net.node_x, net.node_y):
            c = g.cell_of(x, y)
            assert 0 <= c[0] < g.cols and 0 <= c[1] < g.rows

    @given(st.floats(0, 200, allow_nan=False), st.floats(0, 150, allow_nan=False))
    def test_partition(self, x, y):
        g = GridSpec(0.0, 0.0, 25.0, 6, 8)
        cx, cy = g.cell_of(x, y)
        lo_x, lo_y = cx * 25.0, cy * 25.0
        assert lo_x <= x and lo_y <= y
        assert x < lo_x + 25.0 or cx == g.cols - 1
        assert y < lo_y + 25.0 or cy == g.rows - 1

    def test_dict_round_trip(self):
        g = GridSpec(1.5, -2.0, 50.0, 3, 4)
        assert GridSpec.from_dict(g.to_dict()) == g


class TestSerialisation:
    def test_json_round_trip(self, tmp_path):
        net = generate_grid_network(3, 4, 25.0, 0)
        net.save(tmp_path / "n.json")
        back = RoadNetwork.load(tmp_path / "n.json")
        assert back.to_json_dict() == net.to_json_dict()
        assert np.array_equal(back.edge_length, net.edge_length)

    def test_sparse_ids_rejected(self):
        with pytest.raises(InvalidDimensionError):
            RoadNetwork.from_json_dict({"nodes": [[0, 0, 0], [2, 1, 1]], "edges": []})

    def test_immutable(self, lattice):
        with pytest.raises(ValueError):
            lattice.edge_length[0] = 1.0


def test_equirectangular_projection():
    x, y = project_equirectangular(np.array([116.0, 116.001]), np.array([40.0, 40.0]), ref_lat=40.0)
    assert x[1] - x[0] == pytest.approx(6371008.8 * math.radians(0.001) * math.cos(math.radians(40)), rel=1e-3)
    assert y[0] == y[1]
