import dataclasses

import numpy as np
import pytest

from nlosloc import em_distributed as emd
from nlosloc import model
from nlosloc.errors import DisconnectedTopology


class FixedRng:
    """Deterministic stand-in for edge sampling."""

    def __init__(self, value=0):
        self.value = value

    def integers(self, n):
        return self.value % n


def make_problem(seed, sigma=8.0, eta0=np.deg2rad(7.0), support_points=3, n_nodes=5):
    sc = model.make_random_scenario(seed=seed, sigma=sigma, eta0=eta0,
                                    support_points=support_points, n_nodes=n_nodes)
    ms = model.synthesize_measurements(sc, seed=seed + 1)
    return sc, sc.problem(ms)


class TestStepSchedule:
    def test_lambda_values(self):
        sch = emd.StepSchedule(1.0, 0.7)
        assert sch.lambda_at(1) == 1.0
        assert sch.lambda_at(10) == pytest.approx(10 ** -0.7)

    def test_clamped_to_unit(self):
        assert emd.StepSchedule(5.0, 0.9).lambda_at(1) == 1.0

    def test_exponent_range_enforced(self):
        with pytest.raises(ValueError):
            emd.StepSchedule(1.0, 0.5)
        with pytest.raises(ValueError):
            emd.StepSchedule(1.0, 1.1)
        emd.StepSchedule(1.0, 1.0)  # boundary allowed

    def test_summability_structure(self):
        lam = emd.StepSchedule(1.0, 0.7).lambdas(100000)
        assert lam.sum() > 80.0          # diverging partial sums
        assert (lam**2).sum() < 6.0      # square-summable


class TestTopology:
    def test_complete_edges(self):
        t = emd.Topology.complete((2, 3, 4))
        assert set(t.edges) == {(2, 3), (2, 4), (3, 4)}

    def test_connectivity(self):
        t = emd.Topology(node_ids=(2, 3, 4, 5), edges=((2, 3), (4, 5)))
        assert not t.is_connected()
        assert emd.Topology.ring((2, 3, 4, 5)).is_connected()
        assert emd.Topology.star((2, 3, 4, 5)).is_connected()

    def test_disconnected_rejected_by_sampler(self):
        t = emd.Topology(node_ids=(2, 3, 4, 5), edges=((2, 3), (4, 5)))
        with pytest.raises(DisconnectedTopology):
            emd.sample_pairwise_matrix(t, FixedRng())


class TestPairwiseMatrix:
    def test_single_edge_shape(self):
        topo = emd.Topology.complete((2, 3, 4))
        # edges sorted: (2,3), (2,4), (3,4); pick (2,3)
        w = emd.sample_pairwise_matrix(topo, FixedRng(0))
        np.testing.assert_allclose(w, [[0.5, 0.5, 0], [0.5, 0.5, 0], [0, 0, 1]])

    def test_row_sums_exact(self):
        topo = emd.Topology.complete((2, 3, 4, 5))
        rng = np.random.default_rng(0)
        for _ in range(200):
            w = emd.sample_pairwise_matrix(topo, rng)
            np.testing.assert_array_equal(w.sum(axis=1), np.ones(4))

    def test_expected_column_sums(self):
        topo = emd.Topology.complete((2, 3, 4))
        rng = np.random.default_rng(1)
        acc = np.zeros(3)
        n = 10000
        for _ in range(n):
            acc += emd.sample_pairwise_matrix(topo, rng).sum(axis=0)
        np.testing.assert_allclose(acc / n, np.ones(3), atol=1e-12)


class TestWeightValidation:
    def test_complete_contracts(self):
        rep = emd.validate_weight_assumptions(emd.Topology.complete((2, 3, 4)),
                                              n_samples=2000)
        assert rep.row_ok and rep.col_expect_ok and rep.rho_ok
        assert rep.rho < 1.0

    def test_identity_no_contraction(self):
        rep = emd.validate_weight_assumptions(emd.Topology.complete((2, 3, 4)),
                                              scheme="identity", n_samples=1000)
        assert rep.rho == pytest.approx(1.0)
        assert not rep.rho_ok

    def test_star_contracts(self):
        rep = emd.validate_weight_assumptions(emd.Topology.star((2, 3, 4, 5, 6)),
                                              n_samples=2000)
        assert rep.rho < 1.0


class TestLocalESterp:
    def test_lambda_one_jumps_to_target(self):
        sc, prob = make_problem(70)
        st = emd.initialize_states(prob, seed=1)[0]
        st = dataclasses.replace(st, s=np.zeros(6) - 0.5, t=np.zeros(2) + 0.3)
        new, w = emd.local_e_step(st, prob, 1.0)
        sbar, tbar = emd.statistic_targets(st, prob, weights=w)
        from nlosloc import _kernels as K

        K.project_s_inplace(sbar)
        np.testing.assert_allclose(new.s, sbar, atol=1e-12)
        np.testing.assert_allclose(new.t, tbar, atol=1e-12)

    def test_lambda_zero_keeps_state(self):
        sc, prob = make_problem(71)
        st = emd.initialize_states(prob, seed=1)[0]
        new, _ = emd.local_e_step(st, prob, 0.0)
        np.testing.assert_allclose(new.s, st.s)
        np.testing.assert_allclose(new.t, st.t)

    def test_lambda_half_is_midpoint(self):
        sc, prob = make_problem(72)
        st = emd.initialize_states(prob, seed=1)[0]
        sbar, tbar = emd.statistic_targets(st, prob)
        new, _ = emd.local_e_step(st, prob, 0.5)
        # target is NSD so the midpoint stays NSD: projection a no-op
        np.testing.assert_allclose(new.s, 0.5 * (st.s + sbar), atol=1e-10)
        np.testing.assert_allclose(new.t, 0.5 * (st.t + tbar), atol=1e-10)

    def test_lambda_range_enforced(self):
        sc, prob = make_problem(73)
        st = emd.initialize_states(prob, seed=1)[0]
        with pytest.raises(ValueError):
            emd.local_e_step(st, prob, 1.5)

    def test_statistic_invariants_along_run(self):
        sc, prob = make_problem(74)
        states = emd.initialize_states(prob, seed=2)
        sch = emd.StepSchedule(1.0, 0.7)
        rng = np.random.default_rng(3)
        topo = emd.Topology.complete(tuple(st.node_id for st in states))
        for n in range(1, 15):
            stepped = []
            weights = []
            for st in states:
                ns, w = emd.local_e_step(st, prob, sch.lambda_at(n))
                stepped.append(ns)
                weights.append(w)
            w_mat = emd.sample_pairwise_matrix(topo, rng)
            states = emd.gossip_round(stepped, w_mat)
            for st in states:
                u = st.s[:4].reshape(2, 2, order="F")
                assert np.allclose(u, u.T, atol=1e-10)
                assert np.linalg.eigvalsh((u + u.T) / 2).max() <= 1e-8
            states = [emd.local_m_step(states[i], prob, weights[i])
                      for i in range(len(states))]


class TestGossip:
    def test_identity_matrix_no_change(self):
        sc, prob = make_problem(75)
        states = emd.initialize_states(prob, seed=1)
        out = emd.gossip_round(states, np.eye(len(states)))
        for a, b in zip(states, out):
            np.testing.assert_array_equal(a.s, b.s)
            np.testing.assert_array_equal(a.t, b.t)

    def test_pair_equalizes(self):
        sc, prob = make_problem(76)
        states = emd.initialize_states(prob, seed=1)
        m = len(states)
        w = np.eye(m)
        w[0, 0] = w[1, 1] = 0.5
        w[0, 1] = w[1, 0] = 0.5
        out = emd.gossip_round(states, w)
        np.testing.assert_array_equal(out[0].s, out[1].s)
        np.testing.assert_array_equal(out[0].t, out[1].t)

    def test_conservation_exact(self):
        sc, prob = make_problem(77)
        states = emd.initialize_states(prob, seed=1)
        topo = emd.Topology.complete(tuple(st.node_id for st in states))
        rng = np.random.default_rng(5)
        for _ in range(50):
            before = np.sum([st.s for st in states], axis=0)
            states = emd.gossip_round(states, emd.sample_pairwise_matrix(topo, rng))
            after = np.sum([st.s for st in states], axis=0)
            np.testing.assert_allclose(after, before,
                                       rtol=1e-12, atol=1e-12 * np.abs(before).max())

    def test_contraction_matches_rho(self):
        # gossip-only rounds shrink the disagreement second moment at rate <= rho
        topo = emd.Topology.complete((2, 3, 4, 5))
        rep = emd.validate_weight_assumptions(topo, n_samples=1000)
        rng = np.random.default_rng(6)
        m = 4
        ratios = []
        for _ in range(400):
            x = rng.normal(size=(m, 6))
            x_perp = x - x.mean(axis=0)
            before = np.sum(x_perp**2)
            w = emd.sample_pairwise_matrix(topo, rng)
            y = w @ x
            y_perp = y - y.mean(axis=0)
            ratios.append(np.sum(y_perp**2) / before)
        mean_ratio = np.mean(ratios)
        se = np.std(ratios) / np.sqrt(len(ratios))
        assert mean_ratio <= rep.rho + 3 * se

    def test_bad_matrix_rejected(self):
        sc, prob = make_problem(78)
        states = emd.initialize_states(prob, seed=1)
        w = np.full((len(states), len(states)), 0.3)
        with pytest.raises(ValueError):
            emd.gossip_round(states, w)


class TestLocalMStep:
    def test_quadratic_hand_case(self):
        sc, prob = make_problem(79, support_points=1)
        st = emd.initialize_states(prob, seed=1)[0]
        # put the quadratic's max on the node's own AOA ray so it is feasible:
        # U = -I and V = -q* give argmax q* for s = [Vec(U); -2V]
        nd = prob.nodes[1]
        target_q = nd.position + 50.0 * np.array(
            [np.cos(st.theta_i), np.sin(st.theta_i)])
        s = np.concatenate([(-np.eye(2)).reshape(4, order="F"), 2.0 * target_q])
        st = dataclasses.replace(st, s=s)
        w = emd.posterior_at(st, prob)
        out = emd.local_m_step(st, prob, w)
        np.testing.assert_allclose(out.q, target_q, atol=1e-8)

    def test_thetas_in_boxes(self):
        sc, prob = make_problem(80)
        states = emd.initialize_states(prob, seed=3)
        for st in states:
            new, w = emd.local_e_step(st, prob, 1.0)
            out = emd.local_m_step(new, prob, w)
            assert abs(out.theta1 - prob.meas.ref_aoa) <= prob.eta0 + 1e-12
            i = list(nd.id for nd in prob.nodes).index(st.node_id)
            assert abs(out.theta_i - prob.meas.aoa[i]) <= prob.eta0 + 1e-12


class TestDisagreement:
    def _mk_state(self, q, theta1=0.5, theta_i=1.0, nid=2):
        return emd.NodeState(node_id=nid, s=np.zeros(6), t=np.zeros(2),
                             q=np.asarray(q, dtype=float),
                             theta1=theta1, theta_i=theta_i)

    def test_identical_zero(self):
        states = [self._mk_state([1, 2]), self._mk_state([1, 2], nid=3)]
        assert emd.disagreement(states, 100.0) == 0.0

    def test_q_offset_345(self):
        states = [self._mk_state([0, 0]), self._mk_state([3, 4], nid=3)]
        assert emd.disagreement(states, 500.0) == pytest.approx(5.0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(7)
        states = [self._mk_state(rng.uniform(-10, 10, 2),
                                 theta1=rng.uniform(0, 2 * np.pi), nid=2 + i)
                  for i in range(6)]
        mpr = 37.0
        got = emd.disagreement(states, mpr)
        worst = 0.0
        from nlosloc.angles import wrap_pi

        for i in range(6):
            for j in range(6):
                dq = states[i].q - states[j].q
                dth = mpr * wrap_pi(states[i].theta1 - states[j].theta1)
                worst = max(worst, np.sqrt(dq @ dq + dth**2))
        assert got == pytest.approx(worst)

    def test_per_node_aoa_excluded(self):
        states = [self._mk_state([1, 2], theta_i=0.1),
                  self._mk_state([1, 2], theta_i=2.9, nid=3)]
        assert emd.disagreement(states, 500.0) == 0.0


class TestRunDistributed:
    def test_zero_noise_consensus_to_truth(self):
        sc, prob = make_problem(81, sigma=0.0, eta0=0.0, support_points=1)
        res = emd.run_distributed(prob, schedule=emd.StepSchedule(1.0, 0.7), seed=4)
        assert res.converged
        for i in range(len(res.node_ids)):
            assert np.linalg.norm(res.trajectories[res.iterations, i, :2] - sc.target) < 0.1
        assert res.final_disagreement < 1e-2

    def test_deterministic(self):
        sc, prob = make_problem(82)
        opts = emd.DistEMOptions(max_iter=60)
        a = emd.run_distributed(prob, opts=opts, seed=11)
        b = emd.run_distributed(prob, opts=opts, seed=11)
        np.testing.assert_array_equal(a.trajectories, b.trajectories)
        np.testing.assert_array_equal(a.disagreement_trace, b.disagreement_trace)

    def test_kernel_matches_reference_loop(self):
        sc, prob = make_problem(83)
        opts = emd.DistEMOptions(max_iter=10, consensus_tol=0.0, movement_tol=0.0)
        rk = emd.run_distributed(prob, opts=opts, seed=5)
        rr = emd.run_distributed_reference(prob, opts=opts, seed=5)
        np.testing.assert_allclose(rk.trajectories, rr.trajectories,
                                   rtol=1e-7, atol=1e-7)
        np.testing.assert_allclose(rk.disagreement_trace, rr.disagreement_trace,
                                   rtol=1e-6, atol=1e-7)

    def test_divergence_guard(self):
        sc, prob = make_problem(84)
        # absurd TDOA magnitudes push estimates far out
        bad_meas = dataclasses.replace(prob.meas, tdoa=prob.meas.tdoa + 1e7)
        bad = dataclasses.replace(prob, meas=bad_meas)
        res = emd.run_distributed(bad, opts=emd.DistEMOptions(max_iter=300), seed=1)
        assert not res.converged
        assert res.iterations < 300

    def test_matrix_file_gossip(self):
        sc, prob = make_problem(85)
        m = len(prob.nodes) - 1
        w = np.full((m, m), 1.0 / m)
        opts = emd.DistEMOptions(max_iter=60, gossip="matrix-file", gossip_matrix=w)
        res = emd.run_distributed(prob, opts=opts, seed=2)
        assert res.iterations >= 1
        # uniform averaging every round: statistics agree across nodes
        s_all = np.array([st.s for st in res.states])
        assert np.abs(s_all - s_all.mean(axis=0)).max() < 1e-9

    def test_topology_mismatch_rejected(self):
        sc, prob = make_problem(86)
        topo = emd.Topology.complete((99, 100))
        with pytest.raises(ValueError):
            emd.run_distributed(prob, topology=topo)
