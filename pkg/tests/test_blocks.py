"""Isolating-block construction, verification, and cone certificates."""

import math

import numpy as np
import pytest

import morseflow.blocks as blocks
from morseflow.blocks import (ConeForm, IsolatingBlock, budget_terms,
                              build_block, build_frame, cone_certificate,
                              memory_radius, parameterized_cone_budget,
                              verify_cone_dynamic, verify_isolation)
from morseflow.dynamics import toy_1d, toy_2d
from morseflow.equilibria import find_equilibria
from morseflow.errors import (EpsTooLarge, IllConditioned, NoCoercivity,
                              NonHyperbolic)
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
def nomem_1d():
    A = exp_kernel(1.0)
    return KernelPair(A, zero_kernel(1, s_max=A.s_max), sample_density=1000)


@pytest.fixture(scope="module")
def eqs_1d(pair_1d):
    return find_equilibria(toy_1d(), pair_1d, 0.0, 1.6)


@pytest.fixture(scope="module")
def eqs_2d(pair_2d):
    return find_equilibria(toy_2d(), pair_2d, 0.0, 1.6)


def _by_udim(eqs, u):
    return [e for e in eqs if e.unstable_dim == u]


class TestBuildFrame:
    def test_triangular_example(self):
        J = np.array([[1.0, 5.0], [0.0, -2.0]])
        fr = build_frame(J, kappa=0.01)
        # unstable eigenvalue leads, residue well under the budget
        assert np.allclose(np.diag(fr.jordan), [1.0, -2.0], atol=1e-12)
        off = fr.jordan - np.diag(np.diag(fr.jordan))
        assert np.max(np.abs(off)) <= 0.01
        assert fr.dims == (1, 0, 1, 0)

    def test_frame_consistency(self):
        J = np.array([[1.0, 5.0], [0.0, -2.0]])
        fr = build_frame(J)
        assert np.linalg.norm(fr.T @ fr.T_inv - np.eye(2), 2) <= 1e-10
        assert np.linalg.norm(fr.T @ fr.jordan @ fr.T_inv - J, 2) <= 1e-8

    def test_complex_pair_block(self):
        J = np.array([[-1.0, 2.0], [-2.0, -1.0]])
        fr = build_frame(J)
        assert fr.dims == (0, 0, 0, 1)
        assert np.allclose(fr.jordan, [[-1.0, 2.0], [-2.0, -1.0]], atol=1e-9)

    def test_mixed_spectrum_ordering(self):
        # assembled stable-real / complex-unstable / real-unstable, shuffled
        J = np.zeros((4, 4))
        J[0, 0] = -1.0
        J[1:3, 1:3] = [[0.5, 3.0], [-3.0, 0.5]]
        J[3, 3] = 2.0
        fr = build_frame(J)
        assert fr.dims == (1, 1, 1, 0)
        want = np.zeros((4, 4))
        want[0, 0] = 2.0
        want[1:3, 1:3] = [[0.5, 3.0], [-3.0, 0.5]]
        want[3, 3] = -1.0
        assert np.allclose(fr.jordan, want, atol=1e-9)

    def test_similarity_transported_matrix(self):
        rng = np.random.default_rng(0)
        S = np.eye(3) + 0.3 * rng.standard_normal((3, 3))
        J = S @ np.diag([2.0, -1.0, -3.0]) @ np.linalg.inv(S)
        fr = build_frame(J, kappa=0.05)
        mask = ~np.eye(3, dtype=bool)
        assert np.max(np.abs(fr.jordan[mask])) <= 0.05
        assert np.allclose(sorted(np.diag(fr.jordan)), [-3.0, -1.0, 2.0],
                           atol=1e-9)
        assert np.linalg.norm(fr.T @ fr.jordan @ fr.T_inv - J, 2) <= 1e-8

    def test_defective_raises(self):
        with pytest.raises(IllConditioned):
            build_frame(np.array([[1.0, 1.0], [0.0, 1.0]]))

    def test_nonhyperbolic_raises(self):
        with pytest.raises(NonHyperbolic):
            build_frame(np.diag([1e-9, -1.0]))


class TestIsolation:
    def test_sink_block_certifies(self, pair_1d, eqs_1d):
        P = toy_1d()
        sink = [e for e in eqs_1d if e.point[0] > 0.5][0]
        blkB = build_block(sink, P, pair_1d, eps=0.0, delta=0.05)
        rep = blkB.margins
        assert rep.certified
        assert rep.entry > 0.0 and rep.memory > 0.0
        assert rep.exit == math.inf  # a sink has no exit faces
        assert rep.g_bound == 0.0

    def test_huge_delta_fails(self, pair_1d, eqs_1d):
        P = toy_1d()
        sink = [e for e in eqs_1d if e.point[0] > 0.5][0]
        fr = build_frame(sink.jacobian)
        blkB = IsolatingBlock(center=sink, frame=fr, delta=1.5, R=0.0,
                              dims=fr.dims)
        blkB.R = memory_radius(blkB, 0.0, P, pair_1d.constants)
        rep = verify_isolation(blkB, 0.0, P, pair_1d)
        assert not rep.certified
        assert rep.entry <= 0.0

    def test_t2_saddle_with_coupling(self, pair_2d, eqs_2d):
        P = toy_2d()
        saddle = _by_udim(eqs_2d, 1)[0]
        blkB = build_block(saddle, P, pair_2d, eps=1e-3, others=eqs_2d)
        assert blkB.margins.certified
        assert blkB.margins.g_bound > 0.0
        # both an exit and an entry face with positive slack
        assert blkB.margins.exit > 0.0 and blkB.margins.entry > 0.0

    def test_delta_search_starts_at_gap_fraction(self, pair_2d, eqs_2d):
        P = toy_2d()
        src = _by_udim(eqs_2d, 2)[0]
        blkB = build_block(src, P, pair_2d, eps=0.0, others=eqs_2d)
        # nearest neighbor is at distance 1, no halving needed
        assert abs(blkB.delta - 0.2) < 1e-12
        assert blkB.margins.certified

    def test_shrinking_preserves_certificate(self, pair_2d, eqs_2d):
        P = toy_2d()
        saddle = _by_udim(eqs_2d, 1)[0]
        big = build_block(saddle, P, pair_2d, eps=0.0, others=eqs_2d)
        small = build_block(saddle, P, pair_2d, eps=0.0,
                            delta=big.delta / 2.0)
        assert big.margins.certified and small.margins.certified

    def test_eps_slack_is_zero_slack_minus_g(self, pair_2d, eqs_2d):
        P = toy_2d()
        saddle = _by_udim(eqs_2d, 1)[0]
        blkB = build_block(saddle, P, pair_2d, eps=0.0, others=eqs_2d)
        rep0 = verify_isolation(blkB, 0.0, P, pair_2d, seed=11)
        rep1 = verify_isolation(blkB, 1e-3, P, pair_2d, seed=11)
        assert rep0.g_bound == 0.0 and rep1.g_bound > 0.0
        for k, v in rep0.per_face.items():
            assert rep1.per_face[k] == v - rep1.g_bound

    def test_verification_is_deterministic(self, pair_2d, eqs_2d):
        P = toy_2d()
        saddle = _by_udim(eqs_2d, 1)[0]
        blkB = build_block(saddle, P, pair_2d, eps=0.0, others=eqs_2d)
        a = verify_isolation(blkB, 1e-3, P, pair_2d, seed=4)
        b = verify_isolation(blkB, 1e-3, P, pair_2d, seed=4)
        assert a.per_face == b.per_face


class TestMemoryRadius:
    def test_eps_guard(self, pair_1d, eqs_1d):
        P = toy_1d()
        sink = [e for e in eqs_1d if e.point[0] > 0.5][0]
        fr = build_frame(sink.jacobian)
        blkB = IsolatingBlock(center=sink, frame=fr, delta=0.05, R=0.0,
                              dims=fr.dims)
        kc = pair_1d.constants
        bound = kc.C_A_safe / (2.0 * kc.D_A * kc.D_M)
        assert memory_radius(blkB, 0.99 * bound, P, kc) > 0.0
        with pytest.raises(EpsTooLarge):
            memory_radius(blkB, 1.01 * bound, P, kc)

    def test_sample_density_stability(self, pair_2d, eqs_2d, monkeypatch):
        P = toy_2d()
        src = _by_udim(eqs_2d, 2)[0]
        blkB = build_block(src, P, pair_2d, eps=0.0, others=eqs_2d)
        r1 = memory_radius(blkB, 0.0, P, pair_2d.constants)
        monkeypatch.setattr(blocks, "SUP_SAMPLES", 5120)
        r2 = memory_radius(blkB, 0.0, P, pair_2d.constants)
        assert abs(r2 - r1) <= 0.01 * r1


class TestConeCertificate:
    def test_sink_1d_value(self, pair_1d, eqs_1d):
        P = toy_1d()
        sink = [e for e in eqs_1d if e.point[0] > 0.5][0]
        blkB = build_block(sink, P, pair_1d, eps=0.0, delta=0.05)
        G, B, pos = cone_certificate(blkB, 0.0, 0.1, P, pair_1d.constants)
        # min of 2(3x^2 - 1) over [0.95, 1.05]
        assert abs(G - 2.0 * (3.0 * 0.95 ** 2 - 1.0)) < 0.02 * G
        assert B[0, 0] == G and pos

    def test_weight_threshold(self, pair_1d, eqs_1d):
        P = toy_1d()
        sink = [e for e in eqs_1d if e.point[0] > 0.5][0]
        blkB = build_block(sink, P, pair_1d, eps=0.0, delta=0.05)
        kc = pair_1d.constants
        G, _, _ = cone_certificate(blkB, 0.0, 0.1, P, kc)
        norm_df = 3.0 * 1.05 ** 2 - 1.0  # |Df| peaks at the outer corner
        e_max = kc.C_A_safe * G / (kc.D_A ** 2 * norm_df ** 2)
        _, _, pos_lo = cone_certificate(blkB, 0.0, 0.5 * e_max, P, kc)
        _, _, pos_hi = cone_certificate(blkB, 0.0, 2.0 * e_max, P, kc)
        assert pos_lo and not pos_hi

    def test_noncoercive_raises(self, pair_1d, eqs_1d):
        # a sink box wide enough to reach the inflection of the field
        P = toy_1d()
        sink = [e for e in eqs_1d if e.point[0] > 0.5][0]
        fr = build_frame(sink.jacobian)
        blkB = IsolatingBlock(center=sink, frame=fr, delta=0.45, R=1.0,
                              dims=fr.dims)
        with pytest.raises(NoCoercivity):
            cone_certificate(blkB, 0.0, 0.1, P, pair_1d.constants)

    def test_form_value_signs(self):
        form = ConeForm(Q=np.diag([1.0, -1.0]), E=0.5, G=1.0, L_param=2.0,
                        Delta=0.1)
        assert form.value(np.array([1.0, 0.0]), 0.0) == 1.0
        assert form.value(np.array([0.0, 1.0]), 0.0) == -1.0
        assert form.value(np.array([0.0, 0.0]), 1.0, deps=1.0) == 1.5


class TestParameterizedBudget:
    def test_matches_grid_scan(self, pair_2d, eqs_2d):
        P = toy_2d()
        src = _by_udim(eqs_2d, 2)[0]
        blkB = build_block(src, P, pair_2d, eps=0.0, others=eqs_2d)
        kc = pair_2d.constants
        delta = blkB.delta

        # independent scan oracle on dense meshes
        C_A = 0.9 * kc.C_A
        D_A, D_M, int_M = kc.D_A, kc.D_M, kc.int_norm_M
        ax = np.linspace(-delta, delta, 61)
        pts = np.stack(np.meshgrid(ax, ax), axis=-1).reshape(-1, 2)
        G = math.inf
        ndf = 0.0
        for y in pts:
            Df = P.hess_F(y)  # frame is the identity at the origin
            S = Df.T @ np.eye(2) + np.eye(2) @ Df
            G = min(G, float(np.linalg.eigvalsh(S)[0]))
            ndf = max(ndf, float(np.linalg.norm(Df, 2)))
        e_max = C_A * G / (D_A ** 2 * ndf ** 2)
        ax2 = np.linspace(-2 * delta, 2 * delta, 121)
        pts2 = np.stack(np.meshgrid(ax2, ax2), axis=-1).reshape(-1, 2)
        sup_f = max(float(np.linalg.norm(P.grad_F(y))) for y in pts2)
        R = 1.1 * 2.0 * D_A * sup_f / C_A
        sup_x = max(float(np.linalg.norm(y)) for y in pts)
        R_bar = int_M * sup_x + D_M * R
        L0_scan = max((4.0 * R_bar / G) ** 2,
                      (8.0 * math.sqrt(e_max) * D_A * R_bar / C_A) ** 2,
                      100.0 * e_max * D_A ** 2 * R_bar ** 2 / (C_A * G),
                      100.0 * R_bar ** 2 / (C_A * G))
        E = e_max / 100.0
        D_scan = min(C_A / (8.0 * D_A * D_M),
                     math.sqrt(E * C_A * G / (100.0 * D_M ** 2)),
                     math.sqrt(C_A * G / (100.0 * E * D_A ** 2 * int_M ** 2)))

        L0, Delta = parameterized_cone_budget(blkB, E, kc, P)
        assert abs(L0 - L0_scan) <= 0.05 * L0_scan
        assert abs(Delta - D_scan) <= 0.05 * D_scan
        assert abs(blkB.R - R) <= 0.05 * R

    def test_q_norm_scaling_of_terms(self, pair_2d):
        kc = pair_2d.constants
        t1 = budget_terms(1.5, 2.0, 0.7, kc, norm_Q=1.0)
        t2 = budget_terms(1.5, 2.0, 0.7, kc, norm_Q=2.0)
        assert t2[3] == pytest.approx(4.0 * t1[3], rel=1e-12)
        assert t2[1] == pytest.approx(t1[1], rel=1e-12)
        assert t2[0] == pytest.approx(8.0 * t1[0], rel=1e-12)
        assert t2[2] == pytest.approx(2.0 * t1[2], rel=1e-12)

    def test_weight_budget_guard(self, pair_2d, eqs_2d):
        P = toy_2d()
        src = _by_udim(eqs_2d, 2)[0]
        blkB = build_block(src, P, pair_2d, eps=0.0, others=eqs_2d)
        kc = pair_2d.constants
        G, _, e_max = blocks._cone_field_data(blkB, kc, P, 1.0)
        with pytest.raises(NoCoercivity):
            parameterized_cone_budget(blkB, e_max / 50.0, kc, P)

    def test_zero_memory_degenerates(self, nomem_1d, eqs_1d):
        P = toy_1d()
        sink = [e for e in eqs_1d if e.point[0] > 0.5][0]
        # re-solve in the zero-memory pair so the context matches
        eqs = find_equilibria(P, nomem_1d, 0.0, 1.6)
        sink = [e for e in eqs if e.point[0] > 0.5][0]
        blkB = build_block(sink, P, nomem_1d, eps=0.0, delta=0.05)
        kc = nomem_1d.constants
        _, _, e_max = blocks._cone_field_data(blkB, kc, P, 1.0)
        L0, Delta = parameterized_cone_budget(blkB, e_max / 200.0, kc, P)
        assert L0 == 0.0
        assert Delta == math.inf


class TestDynamicCone:
    def test_source_pairs_stay_in_cone(self, pair_2d, eqs_2d):
        P = toy_2d()
        src = _by_udim(eqs_2d, 2)[0]
        blkB = build_block(src, P, pair_2d, eps=0.0, others=eqs_2d)
        kc = pair_2d.constants
        _, _, e_max = blocks._cone_field_data(blkB, kc, P, 1.0)
        E = e_max / 100.0
        L0, Delta = parameterized_cone_budget(blkB, E, kc, P)
        worst = verify_cone_dynamic(blkB, (0.0, Delta / 2.0), E, L0,
                                    n_pairs=20, t_span=1.0, seed=3)
        assert worst > -1e-8

    def test_sink_pairs_stay_in_cone(self, pair_2d, eqs_2d):
        P = toy_2d()
        snk = _by_udim(eqs_2d, 0)[0]
        blkB = build_block(snk, P, pair_2d, eps=0.0, others=eqs_2d)
        kc = pair_2d.constants
        _, _, e_max = blocks._cone_field_data(blkB, kc, P, 1.0)
        E = e_max / 100.0
        L0, Delta = parameterized_cone_budget(blkB, E, kc, P)
        worst = verify_cone_dynamic(blkB, (0.0, Delta / 2.0), E, L0,
                                    n_pairs=10, t_span=1.0, seed=5)
        assert worst > -1e-8

    def test_equal_eps_sink_has_no_boundary(self, pair_2d, eqs_2d):
        P = toy_2d()
        snk = _by_udim(eqs_2d, 0)[0]
        blkB = build_block(snk, P, pair_2d, eps=0.0, others=eqs_2d)
        kc = pair_2d.constants
        _, _, e_max = blocks._cone_field_data(blkB, kc, P, 1.0)
        E = e_max / 100.0
        L0, _ = parameterized_cone_budget(blkB, E, kc, P)
        assert verify_cone_dynamic(blkB, (0.0, 0.0), E, L0,
                                   n_pairs=5, t_span=0.5) == 0.0
