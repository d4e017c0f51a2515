"""Disk transport, intersection frames, and connection graphs."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morseflow.blocks import build_block
from morseflow.connections import (ConnectionGraph, EmbeddedDisk,
                                   IntersectionResult, ShootingEvidence,
                                   build_intersection_frame, compare_graphs,
                                   connection_graph, find_connection,
                                   graph_to_dict, reparametrize_over_tangent,
                                   to_dot, transport_disk)
from morseflow.dynamics import Potential, toy_1d, toy_2d
from morseflow.equilibria import Equilibrium, find_equilibria
from morseflow.errors import (AmbiguousMatching, GridMismatch,
                              InsufficientSamples, LipschitzUnreachable,
                              NoEntry, NotTransversal)
from morseflow.kernels import KernelPair, exp_kernel, zero_kernel


@pytest.fixture(scope="module")
def pair_1d():
    A = exp_kernel(1.0)
    return KernelPair(A, exp_kernel(2.0, s_max=A.s_max), sample_density=1000)


@pytest.fixture(scope="module")
def pair_2d():
    A = exp_kernel(1.0, dim=2)
    return KernelPair(A, exp_kernel(2.0, dim=2, s_max=A.s_max),
                      sample_density=1000)


@pytest.fixture(scope="module")
def t1_graph(pair_1d):
    return connection_graph(toy_1d(), pair_1d, 0.0)


@pytest.fixture(scope="module")
def t2_graph0(pair_2d):
    return connection_graph(toy_2d(), pair_2d, 0.0)


def _node_at(g, pt):
    return int(np.argmin([np.linalg.norm(e.point - np.asarray(pt, float))
                          for e in g.nodes]))


def _edge(g, src_pt, tgt_pt):
    i, j = _node_at(g, src_pt), _node_at(g, tgt_pt)
    for a, b, ev in g.edges:
        if (a, b) == (i, j):
            return ev
    raise AssertionError(f"edge {src_pt}->{tgt_pt} not in graph")


def _eps_context(pair, eps, wanted):
    P = toy_2d()
    eqs = find_equilibria(P, pair, eps, 1.6)
    out = {}
    for pt in wanted:
        e = min(eqs, key=lambda q: np.linalg.norm(q.point - np.asarray(pt)))
        blk = build_block(e, P, pair, eps=eps,
                         others=[o for o in eqs if o is not e])
        out[pt] = (e, blk)
    return out


@pytest.fixture(scope="module")
def ctx_1em3(pair_2d):
    return _eps_context(pair_2d, 1e-3, [(0, 0), (1, 1), (1, 0)])


@pytest.fixture(scope="module")
def ctx_5em4(pair_2d):
    return _eps_context(pair_2d, 5e-4, [(0, 0), (1, 1)])


def _parabola_disk(r=0.5, n=81):
    t = np.linspace(-r, r, n)
    pts = np.stack([t, t**2], axis=-1)
    frames = np.tile(np.array([[1.0], [0.0]]), (n, 1, 1))
    return EmbeddedDisk(params=t[:, None], points=pts, frames=frames,
                        lip_estimate=math.nan)


def _linear_context():
    def F(x):
        return 0.5 * x[0] ** 2 - x[1] ** 2

    P = Potential(F=F, grad_F=lambda x: np.array([x[0], -2.0 * x[1]]),
                  hess_F=lambda x: np.diag([1.0, -2.0]),
                  third_deriv_bound=0.0, dissipativity=(10.0, 0.5),
                  quad_bound=(0.1, 50.0), dim=2)
    A = exp_kernel(1.0, dim=2)
    pair = KernelPair(A, zero_kernel(2, s_max=A.s_max), sample_density=1000)
    return P, pair


class TestEmbeddedDisk:
    def test_rank_deficient_frame_rejected(self):
        d = EmbeddedDisk(params=np.zeros((1, 1)), points=np.zeros((1, 2)),
                         frames=np.zeros((1, 2, 1)), lip_estimate=0.0)
        with pytest.raises(ValueError):
            d.validate()

    def test_transport_time_must_fit_grid(self):
        P, pair = _linear_context()
        d = EmbeddedDisk(params=np.zeros((1, 1)),
                         points=np.array([[0.1, 0.0]]),
                         frames=np.array([[[1.0], [0.0]]]),
                         lip_estimate=0.0, potential=P, kernels=pair)
        with pytest.raises(ValueError):
            transport_disk(d, 0.0, 0.015, 0.01)

    def test_transport_checks_eta_grid(self):
        P, pair = _linear_context()
        d = EmbeddedDisk(params=np.zeros((1, 1)),
                         points=np.array([[0.1, 0.0]]),
                         frames=np.array([[[1.0], [0.0]]]),
                         lip_estimate=0.0, etas=np.zeros((1, 3, 2)),
                         eta_grid=np.array([0.0, 0.02, 0.04]),
                         potential=P, kernels=pair)
        with pytest.raises(GridMismatch):
            transport_disk(d, 0.0, 0.1, 0.01)


class TestReparametrize:
    def test_affine_disk_is_exact(self):
        t = np.linspace(-1, 1, 41)
        pts = np.stack([t, 2.0 * t], axis=-1)
        tang = np.array([[1.0], [2.0]]) / math.sqrt(5)
        disk = EmbeddedDisk(params=t[:, None], points=pts,
                            frames=np.tile(tang, (41, 1, 1)),
                            lip_estimate=0.0)
        h = reparametrize_over_tangent(disk, tang, np.zeros(2), 0.5)
        assert h.lip_estimate == 0.0
        assert np.max(np.abs(h.values_y)) <= 1e-12

    def test_quadratic_slope_oracle(self):
        frame = np.array([[1.0], [0.0]])
        h = reparametrize_over_tangent(_parabola_disk(), frame,
                                       np.zeros(2), 2.0)
        # graph of x^2 has max slope 2r over |x| <= r
        assert h.lip_estimate == pytest.approx(2.0 * h._delta1, rel=0.05)
        assert h._delta2 <= h.lip_estimate * h._delta1

    def test_lipschitz_target_shrinks_radius(self):
        frame = np.array([[1.0], [0.0]])
        h = reparametrize_over_tangent(_parabola_disk(), frame,
                                       np.zeros(2), 0.1)
        assert h._delta1 <= 0.05
        assert h.lip_estimate <= 0.1

    def test_unreachable_target(self):
        frame = np.array([[1.0], [0.0]])
        with pytest.raises(LipschitzUnreachable):
            reparametrize_over_tangent(_parabola_disk(), frame,
                                       np.zeros(2), 1e-9)

    def test_too_few_samples(self):
        t = np.array([-0.01, 0.01])
        disk = EmbeddedDisk(params=t[:, None],
                            points=np.stack([t, t**2], axis=-1),
                            frames=np.tile(np.array([[1.0], [0.0]]),
                                           (2, 1, 1)),
                            lip_estimate=0.0)
        with pytest.raises(InsufficientSamples):
            reparametrize_over_tangent(disk, np.array([[1.0], [0.0]]),
                                       np.zeros(2), 2.0)

    @given(st.floats(min_value=-math.pi, max_value=math.pi))
    @settings(max_examples=25, deadline=None)
    def test_rotation_equivariance(self, th):
        # reparameterizing a rotated disk over the rotated tangent must
        # reproduce the unrotated graph exactly
        R = np.array([[math.cos(th), -math.sin(th)],
                      [math.sin(th), math.cos(th)]])
        plain = _parabola_disk(n=61)
        frame = np.array([[1.0], [0.0]])
        normal = np.array([[0.0], [1.0]])
        h0 = reparametrize_over_tangent(plain, frame, np.zeros(2), 2.0,
                                        normal_frame=normal)
        rot = EmbeddedDisk(params=plain.params, points=plain.points @ R.T,
                           frames=np.tile(R @ frame, (61, 1, 1)),
                           lip_estimate=math.nan)
        h1 = reparametrize_over_tangent(rot, R @ frame, np.zeros(2), 2.0,
                                        normal_frame=R @ normal)
        assert np.max(np.abs(h1.values_y - h0.values_y)) <= 1e-9
        assert h1.lip_estimate == pytest.approx(h0.lip_estimate, abs=1e-9)


class TestTransport:
    def test_zero_time_is_identity(self):
        P, pair = _linear_context()
        d = EmbeddedDisk(params=np.zeros((1, 1)),
                         points=np.array([[0.1, 0.0]]),
                         frames=np.array([[[1.0], [0.0]]]),
                         lip_estimate=0.0, potential=P, kernels=pair)
        assert transport_disk(d, 0.0, 0.0, 0.01) is d

    def test_linear_flow_scales_tangent(self):
        P, pair = _linear_context()
        s = np.linspace(-0.3, 0.3, 11)
        d = EmbeddedDisk(params=s[:, None],
                         points=np.stack([s, np.zeros(11)], axis=-1),
                         frames=np.tile(np.array([[1.0], [0.0]]),
                                        (11, 1, 1)),
                         lip_estimate=0.0, potential=P, kernels=pair)
        moved = transport_disk(d, 0.0, 1.0, 0.01)
        assert np.max(np.abs(moved.points[:, 0] - s * math.e)) <= 1e-8
        assert np.max(np.abs(moved.points[:, 1])) <= 1e-12
        # frames stay rank one along e1 after re-orthonormalization
        for i in range(11):
            assert abs(abs(moved.frames[i, 0, 0]) - 1.0) <= 1e-12
            assert abs(moved.frames[i, 1, 0]) <= 1e-12


class TestIntersectionFrame:
    def test_parallel_planes_fail(self):
        plane = np.hstack([np.eye(3)[:, :1], np.eye(3)[:, 1:2]])

        def mk(zval):
            return EmbeddedDisk(params=np.zeros((1, 2)),
                                points=np.array([[0.0, 0.0, zval]]),
                                frames=plane[None, :, :], lip_estimate=0.0)

        with pytest.raises(NotTransversal):
            build_intersection_frame(mk(0.0), mk(1.0), np.zeros(3))

    def test_low_index_sum_fails(self):
        line = EmbeddedDisk(params=np.zeros((1, 1)), points=np.zeros((1, 2)),
                            frames=np.array([[[1.0], [0.0]]]),
                            lip_estimate=0.0)
        with pytest.raises(NotTransversal):
            build_intersection_frame(line, line, np.zeros(2))

    def test_t1_frames_are_the_line(self, t1_graph):
        for _, _, ev in t1_graph.edges:
            assert ev.frame.dims == (0, 1, 0)
            assert abs(abs(ev.frame.M_frame[0, 0]) - 1.0) <= 1e-12

    def test_t2_source_saddle_dims(self, t2_graph0):
        ev = _edge(t2_graph0, (0, 0), (1, 0))
        assert ev.frame.dims == (1, 1, 0)
        # the common direction is the connecting orbit, here the x axis
        common = ev.frame.M_frame[:, 1]
        assert abs(common @ np.array([1.0, 0.0])) >= 0.999
        k1 = ev.frame.M_frame[:, 0]
        assert abs(k1 @ common) <= 1e-9
        assert ev.frame.margin == pytest.approx(math.pi / 2)

    def test_t2_class_dims(self, t2_graph0):
        assert _edge(t2_graph0, (0, 0), (1, 1)).frame.dims == (0, 2, 0)
        assert _edge(t2_graph0, (1, 0), (1, 1)).frame.dims == (0, 1, 1)


class TestShooting1D:
    def test_edges_and_evidence(self, t1_graph):
        g = t1_graph
        src = _node_at(g, [0.0])
        left, right = _node_at(g, [-1.0]), _node_at(g, [1.0])
        assert g.edge_set == {(src, left), (src, right)}
        assert g.failures == {}
        ev = _edge(g, [0.0], [1.0])
        assert 0.8 <= ev.point[0] <= 1.0  # inside the sink block
        assert ev.landing_gap == 0.0
        assert ev.lyapunov_gap > 0.0
        assert ev.t_flight > 0.0

    def test_reverse_direction_has_no_entry(self, t1_graph, pair_1d):
        P = toy_1d()
        eqs = find_equilibria(P, pair_1d, 0.0, 1.6)
        sink = min(eqs, key=lambda e: abs(e.point[0] - 1.0))
        origin = min(eqs, key=lambda e: abs(e.point[0]))
        bs = build_block(sink, P, pair_1d, eps=0.0,
                         others=[e for e in eqs if e is not sink])
        bo = build_block(origin, P, pair_1d, eps=0.0,
                         others=[e for e in eqs if e is not origin])
        with pytest.raises(NoEntry):
            find_connection(sink, origin, 0.0, potential=P, kernels=pair_1d,
                            block_i=bs, block_j=bo)


class TestGraph2D:
    def test_sixteen_edges(self, t2_graph0):
        g = t2_graph0
        source = (0, 0)
        saddles = [(1, 0), (-1, 0), (0, 1), (0, -1)]
        sinks = [(1, 1), (1, -1), (-1, 1), (-1, -1)]
        expected = set()
        for t in saddles + sinks:
            expected.add((_node_at(g, source), _node_at(g, t)))
        for sx, sy in saddles:
            for tgt in sinks:
                if (sx and tgt[0] == sx) or (sy and tgt[1] == sy):
                    expected.add((_node_at(g, (sx, sy)), _node_at(g, tgt)))
        assert len(expected) == 16
        assert g.edge_set == expected
        g.validate()

    def test_landing_gaps_tiny(self, t2_graph0):
        for _, _, ev in t2_graph0.edges:
            assert ev.landing_gap <= 1e-6
            assert 1.0 < ev.t_flight < 8.0

    def test_failures_are_nonadjacent_saddle_sink(self, t2_graph0):
        g = t2_graph0
        assert len(g.failures) == 8
        for (i, j), reason in g.failures.items():
            assert reason.startswith("NoEntry")
            assert g.nodes[i].unstable_dim == 1
            assert g.nodes[j].unstable_dim == 0

    def test_lyapunov_strictly_ordered(self, t2_graph0):
        g = t2_graph0
        for i, j, _ in g.edges:
            assert g.lyapunov[i] > g.lyapunov[j]

    def test_closure_contains_chained_pairs(self, t2_graph0):
        g = t2_graph0
        clo = g.closure()
        assert g.edge_set <= clo
        assert len(clo) == 16  # no new pairs beyond the direct edges


class TestSeededConnections:
    def test_eps_requires_seed(self, ctx_1em3, pair_2d):
        (src, bi) = ctx_1em3[(0, 0)]
        (tgt, bj) = ctx_1em3[(1, 1)]
        with pytest.raises(ValueError):
            find_connection(src, tgt, 1e-3, potential=toy_2d(),
                            kernels=pair_2d, block_i=bi, block_j=bj)

    def test_source_sink_drift_is_linear(self, t2_graph0, ctx_1em3,
                                         ctx_5em4, pair_2d):
        seed = _edge(t2_graph0, (0, 0), (1, 1))
        P = toy_2d()
        pts = {}
        for eps, ctx in ((1e-3, ctx_1em3), (5e-4, ctx_5em4)):
            (src, bi) = ctx[(0, 0)]
            (tgt, bj) = ctx[(1, 1)]
            res = find_connection(src, tgt, eps, seed, potential=P,
                                  kernels=pair_2d, block_i=bi, block_j=bj)
            assert isinstance(res, IntersectionResult)
            assert res.contraction_factor < 1.0
            assert 0.0 < res.eta_norm < bj.R
            pts[eps] = res.point
        d1 = np.linalg.norm(pts[1e-3] - seed.point)
        d2 = np.linalg.norm(pts[5e-4] - seed.point)
        assert d1 > 1e-6  # the intersection genuinely moves
        assert 1.7 <= d1 / d2 <= 2.3  # halving eps halves the drift

    def test_source_saddle_composed_iteration(self, t2_graph0, ctx_1em3,
                                              pair_2d):
        seed = _edge(t2_graph0, (0, 0), (1, 0))
        (src, bi) = ctx_1em3[(0, 0)]
        (tgt, bj) = ctx_1em3[(1, 0)]
        res = find_connection(src, tgt, 1e-3, seed, potential=toy_2d(),
                              kernels=pair_2d, block_i=bi, block_j=bj)
        assert res.iterations >= 2
        assert res.contraction_factor < 1.0
        assert 0.0 < res.eta_norm < bj.R
        # the x-axis connection is symmetry-pinned: no transverse drift
        assert abs(res.point[1]) <= 1e-8
        assert abs(res.point[0] - seed.point[0]) <= 1e-6


class TestCompare:
    def test_graph_equals_itself(self, t2_graph0):
        rep = compare_graphs(t2_graph0, t2_graph0)
        assert rep.isomorphic
        assert rep.edges_equal
        assert rep.closures_equal is None
        assert all(d == 0.0 for d in rep.point_drifts.values())

    def test_missing_chain_covered_edge(self, t2_graph0):
        g = t2_graph0
        drop = (_node_at(g, (0, 0)), _node_at(g, (1, 1)))
        trimmed = ConnectionGraph(
            nodes=g.nodes, eps=0.0, lyapunov=g.lyapunov,
            edges=[e for e in g.edges if (e[0], e[1]) != drop])
        rep = compare_graphs(g, trimmed)
        assert not rep.isomorphic
        assert rep.missing_edges == [drop]
        assert rep.extra_edges == []
        # source -> saddle -> sink still connects them through the chain
        assert rep.closures_equal is True

    def test_missing_terminal_edge_breaks_closure(self, t2_graph0):
        g = t2_graph0
        drop = (_node_at(g, (1, 0)), _node_at(g, (1, 1)))
        trimmed = ConnectionGraph(
            nodes=g.nodes, eps=0.0, lyapunov=g.lyapunov,
            edges=[e for e in g.edges if (e[0], e[1]) != drop])
        rep = compare_graphs(g, trimmed)
        assert rep.missing_edges == [drop]
        assert rep.closures_equal is False

    def test_ambiguous_matching(self):
        def eq_at(pt):
            return Equilibrium(point=np.asarray(pt, float), eps=0.0,
                              jacobian=np.eye(2), spectrum=np.ones(2),
                              dims=(1, 0, 1, 0), residual=0.0)

        ref = ConnectionGraph(nodes=[eq_at((0, 0))], edges=[], eps=0.0)
        other = ConnectionGraph(nodes=[eq_at((0.01, 0)), eq_at((0, 0.01))],
                                edges=[], eps=1e-3)
        with pytest.raises(AmbiguousMatching):
            compare_graphs(ref, other, matching_radius=1.0)

    def test_unmatched_node_reported(self, t1_graph):
        g = t1_graph
        smaller = ConnectionGraph(nodes=g.nodes[:2],
                                  edges=[(i, j, ev) for i, j, ev in g.edges
                                         if i < 2 and j < 2],
                                  eps=0.0, lyapunov=g.lyapunov[:2])
        rep = compare_graphs(g, smaller)
        assert rep.unmatched_ref == [2]
        assert not rep.isomorphic

    def test_self_edge_rejected(self, t1_graph):
        bad = ConnectionGraph(nodes=t1_graph.nodes,
                              edges=[(0, 0, None)], eps=0.0)
        with pytest.raises(ValueError):
            bad.validate()

    @given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)),
                    max_size=12))
    @settings(max_examples=60, deadline=None)
    def test_closure_is_idempotent(self, raw):
        edges = [(i, j, None) for i, j in raw if i != j]
        g = ConnectionGraph(nodes=[None] * 6, edges=edges, eps=0.0)
        clo = g.closure()
        again = ConnectionGraph(nodes=[None] * 6, eps=0.0,
                                edges=[(i, j, None) for i, j in clo])
        assert again.closure() == clo


class TestSerialization:
    def test_dot_output(self, t1_graph):
        dot = to_dot(t1_graph)
        assert dot.startswith("digraph")
        assert dot.count("->") == len(t1_graph.edges)
        assert "u=1" in dot

    def test_dict_output(self, t2_graph0):
        d = graph_to_dict(t2_graph0)
        assert d["eps"] == 0.0
        assert len(d["nodes"]) == 9
        assert len(d["edges"]) == 16
        assert len(d["failures"]) == 8
        for row in d["edges"]:
            assert row["type"] == "shooting"
            assert len(row["point"]) == 2
