import numpy as np
import pytest

from nlosloc import _kernels as K
from nlosloc import em_centralized as emc
from nlosloc import likelihood as lk
from nlosloc import model
from nlosloc.likelihood import ParamEstimate, observed_loglik_K


def make_problem(seed, sigma=8.0, eta0=np.deg2rad(7.0), support_points=3, n_nodes=4):
    sc = model.make_random_scenario(seed=seed, sigma=sigma, eta0=eta0,
                                    support_points=support_points, n_nodes=n_nodes)
    ms = model.synthesize_measurements(sc, seed=seed + 1)
    return sc, sc.problem(ms)


class TestEStep:
    def test_singleton_support_all_mass(self):
        sc, prob = make_problem(50, support_points=1)
        x = ParamEstimate(q=sc.target, theta=prob.meas.aoa.copy())
        w = emc.e_step(x, prob)
        for nd in prob.nodes[1:]:
            np.testing.assert_allclose(w[nd.id], [1.0])

    def test_symmetric_two_angles_split_evenly(self):
        # equal residual magnitudes and both wedges feasible: weights (0.5, 0.5)
        p_i = np.array([0.0, 0.0])
        p1 = np.array([300.0, 0.0])
        q = np.array([80.0, 60.0])
        theta_i = 0.9
        g_a, g_b = 0.68, 0.76
        assert model.wedge_contains(q, p_i, theta_i, g_a)
        assert model.wedge_contains(q, p_i, theta_i, g_b)
        gamma1, theta1 = 0.3, 0.35
        gi_a = model.steering_vector(theta_i, g_a)
        gi_b = model.steering_vector(theta_i, g_b)
        g1 = model.steering_vector(theta1, gamma1)
        da = gi_a @ (q - p_i) - g1 @ (q - p1)
        db = gi_b @ (q - p_i) - g1 @ (q - p1)
        d_mid = 0.5 * (da + db)
        nodes = (
            model.Node(id=1, position=p1, sigma=5.0, is_reference=True),
            model.Node(id=2, position=p_i, sigma=5.0),
        )
        meas = model.MeasurementSet(
            node_ids=(1, 2), tdoa=np.array([d_mid]),
            aoa=np.array([theta1, theta_i]),
            ref_position=p1, ref_gamma=gamma1, ref_aoa=theta1,
        )
        prob = model.Problem(
            nodes=nodes, meas=meas,
            supports=(model.ScattererSupport.listed([g_a, g_b]),),
            eta0=np.deg2rad(5.0),
        )
        w = emc.e_step(ParamEstimate(q=q, theta=meas.aoa), prob)
        np.testing.assert_allclose(w[2], [0.5, 0.5], atol=1e-12)

    def test_matches_public_posterior(self):
        sc, prob = make_problem(51, support_points=4)
        x = ParamEstimate(q=sc.target + [7.0, -4.0], theta=prob.meas.aoa.copy())
        w = emc.e_step(x, prob)
        for k, nd in enumerate(prob.nodes[1:]):
            want = lk.scatterer_posterior(
                prob.meas.tdoa[k], x.q, x.theta[0], x.theta[k + 1], prob.supports[k],
                p_i=nd.position, sigma_i=nd.sigma,
                p1=prob.nodes[0].position, gamma1=prob.meas.ref_gamma)
            np.testing.assert_allclose(w[nd.id], want, rtol=1e-9, atol=1e-12)


class TestMStep:
    def test_fixed_point_at_truth(self):
        sc, prob = make_problem(52, sigma=0.0, eta0=0.0, support_points=1)
        x_true = ParamEstimate(q=sc.target, theta=sc.theta_true)
        w = emc.e_step(x_true, prob)
        x_new = emc.m_step(w, prob, x_true)
        np.testing.assert_allclose(x_new.q, sc.target, atol=1e-8)
        np.testing.assert_allclose(x_new.theta, sc.theta_true, atol=1e-8)

    def test_q_update_matches_grid_oracle(self):
        sc, prob = make_problem(53, support_points=3)
        x = ParamEstimate(q=sc.target + [15.0, 10.0], theta=prob.meas.aoa.copy())
        w = emc.e_step(x, prob)
        packed = K.pack_problem(prob)
        p, sigma, d_tilde, aoa_i, p1, gamma1, aoa1, eta0, sup_ang, sup_logpri, sup_cnt = packed
        w_arr = emc._weights_array(w, prob, sup_ang.shape)
        theta = np.asarray(x.theta, dtype=float)
        u00, u10, u11, vx, vy = K._aggregate_uv(
            p, sigma, d_tilde, p1, gamma1, sup_ang, sup_cnt, theta, w_arr)
        det = u00 * u11 - u10**2
        q_solve = np.array([(u11 * vx - u10 * vy) / det, (u00 * vy - u10 * vx) / det])
        # 400 x 400 grid oracle on the aggregate quadratic
        span = 400.0
        gx = np.linspace(q_solve[0] - span, q_solve[0] + span, 400)
        gy = np.linspace(q_solve[1] - span, q_solve[1] + span, 400)
        xx, yy = np.meshgrid(gx, gy, indexing="ij")
        vals = u00 * xx**2 + 2 * u10 * xx * yy + u11 * yy**2 - 2 * (vx * xx + vy * yy)
        best = np.unravel_index(np.argmax(vals), vals.shape)
        grid_step = gx[1] - gx[0]
        assert abs(gx[best[0]] - q_solve[0]) <= grid_step
        assert abs(gy[best[1]] - q_solve[1]) <= grid_step

    def test_thetas_stay_in_boxes(self):
        sc, prob = make_problem(54)
        x = emc.initial_guess(prob)
        w = emc.e_step(x, prob)
        x_new = emc.m_step(w, prob, x)
        lo = prob.meas.aoa - prob.eta0
        hi = prob.meas.aoa + prob.eta0
        assert np.all(x_new.theta >= lo - 1e-12) and np.all(x_new.theta <= hi + 1e-12)


class TestRun:
    def test_noiseless_recovery(self):
        sc, prob = make_problem(55, sigma=0.0, eta0=0.0, support_points=1)
        res = emc.run(prob)
        assert res.converged
        assert np.linalg.norm(res.x_hat.q - sc.target) < 1e-3

    def test_trace_monotone_on_random_seeds(self):
        for seed in range(20):
            sc, prob = make_problem(100 + seed)
            res = emc.run(prob, opts=emc.EMOptions(max_iter=30, max_cycles=2))
            diffs = np.diff(res.loglik_trace)
            finite = np.isfinite(res.loglik_trace[:-1])
            assert np.all(diffs[finite] >= -1e-9), f"seed {seed}: trace decreased"

    def test_same_basin_same_answer(self):
        sc, prob = make_problem(56, sigma=3.0)
        x_a = ParamEstimate(q=sc.target + [2.0, 1.0], theta=prob.meas.aoa.copy())
        x_b = ParamEstimate(q=sc.target + [-1.5, 2.5], theta=prob.meas.aoa.copy())
        res_a = emc.run(prob, x0=x_a)
        res_b = emc.run(prob, x0=x_b)
        assert np.linalg.norm(res_a.x_hat.q - res_b.x_hat.q) < 1e-4

    def test_trace_recorded_each_iteration(self):
        sc, prob = make_problem(57)
        res = emc.run(prob, opts=emc.EMOptions(max_iter=10, max_cycles=1))
        assert len(res.loglik_trace) == res.iterations + 1


class TestMultiStart:
    def test_single_start_equals_run(self):
        sc, prob = make_problem(58)
        res_ms = emc.multi_start(prob, n_starts=1, seed=0)
        res_run = emc.run(prob, x0=emc.initial_guess(prob))
        np.testing.assert_allclose(res_ms.x_hat.q, res_run.x_hat.q)
        assert res_ms.restarts_used == 1

    def test_best_of_individual_starts(self):
        sc, prob = make_problem(59)
        opts = emc.EMOptions(max_iter=40, max_cycles=2)
        best = emc.multi_start(prob, n_starts=4, seed=7, opts=opts)
        from nlosloc.model import substream, _PURPOSE_INIT

        finals = []
        for k in range(4):
            rng = substream(7, k, _PURPOSE_INIT) if k > 0 else None
            res = emc.run(prob, x0=emc.initial_guess(prob, rng), opts=opts)
            finals.append(res.final_loglik)
        assert best.final_loglik >= max(finals) - 1e-12

    def test_unique_best_with_known_reference(self):
        sc, prob = make_problem(60, sigma=1.0, support_points=3)
        a = emc.multi_start(prob, n_starts=8, seed=1)
        b = emc.multi_start(prob, n_starts=8, seed=1)
        np.testing.assert_array_equal(a.x_hat.q, b.x_hat.q)

    def test_nstarts_validation(self):
        sc, prob = make_problem(61)
        with pytest.raises(ValueError):
            emc.multi_start(prob, n_starts=0)
