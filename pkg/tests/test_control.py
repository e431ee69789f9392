import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smstk.control import (
    ReferenceTrajectory,
    SmcGains,
    closed_loop_simulate,
    control_torque,
    lyapunov_check,
    reduced_dynamics,
    saturation,
    sliding_surface,
)
from smstk.dynamics import coriolis_vector, get_engine, inertia_blocks, _pack
from smstk.errors import ControllerDivergenceError
from smstk.kinematics import forward_kinematics
from smstk.model import BodyParams, SmsModel
from smstk.planner import PlannerConfig, plan_trajectory

from conftest import random_state


@pytest.fixture(scope="module")
def short_plan(model, init_state):
    cfg = PlannerConfig(horizon=4.0, seed=3)
    return plan_trajectory(model, init_state, np.array([1.05, 0.07, 0.0]), cfg)


def heavy_base_model(model, factor):
    base = BodyParams(mass=model.base.mass * factor,
                      inertia=model.base.inertia * factor, dims=model.base.dims)
    return SmsModel(base=base, links=model.links, joint_axes=model.joint_axes,
                    mount_offset=model.mount_offset,
                    link_com_offset=model.link_com_offset,
                    link_tip_offset=model.link_tip_offset)


class TestReducedDynamics:
    def test_immovable_base_limit(self, model, init_state):
        heavy = heavy_base_model(model, 1e9)
        cache = forward_kinematics(heavy, init_state)
        blocks = inertia_blocks(heavy, cache)
        H = blocks.assemble()
        bias = coriolis_vector(heavy, init_state)
        H_q, _ = reduced_dynamics(H, bias)
        assert np.linalg.norm(H_q - blocks.H_m) <= 1e-6 * np.linalg.norm(blocks.H_m)

    def test_positive_definite_and_symmetric(self, model):
        rng = np.random.default_rng(60)
        for _ in range(100):
            st_ = random_state(rng)
            H = inertia_blocks(model, forward_kinematics(model, st_)).assemble()
            H_q, _ = reduced_dynamics(H, coriolis_vector(model, st_))
            assert abs(H_q - H_q.T).max() <= 1e-10
            assert np.linalg.eigvalsh(H_q).min() > 0.0

    def test_definitional_formula(self, model, init_state):
        H = inertia_blocks(model, forward_kinematics(model, init_state)).assemble()
        bias = coriolis_vector(model, init_state)
        H_q, C_q = reduced_dynamics(H, bias)
        M_bb, M_bm = H[:6, :6], H[:6, 6:]
        direct = H[6:, 6:] - M_bm.T @ np.linalg.inv(M_bb) @ M_bm
        assert abs(H_q - direct).max() <= 1e-12
        direct_c = bias[6:] - M_bm.T @ np.linalg.inv(M_bb) @ bias[:6]
        assert abs(C_q - direct_c).max() <= 1e-12

    def test_reduced_dynamics_predicts_joint_accel(self, model):
        """H_q qdd + C_q = tau_q on the free-floating full dynamics."""
        from smstk.dynamics import forward_dynamics
        rng = np.random.default_rng(61)
        for _ in range(20):
            st_ = random_state(rng)
            tau_q = rng.normal(size=model.n)
            tau = np.concatenate([np.zeros(6), tau_q])
            acc = forward_dynamics(model, st_, tau)
            H = inertia_blocks(model, forward_kinematics(model, st_)).assemble()
            H_q, C_q = reduced_dynamics(H, coriolis_vector(model, st_))
            assert np.allclose(H_q @ acc[6:] + C_q, tau_q, atol=1e-9)


class TestSlidingSurface:
    def test_zero_errors(self):
        assert np.array_equal(sliding_surface(np.zeros(3), np.zeros(3), np.eye(3)),
                              np.zeros(3))

    def test_table_gain_value(self):
        s = sliding_surface(np.array([0.1, 0.0, 0.0]), np.zeros(3), np.diag([10.0] * 3))
        assert np.allclose(s, [1.0, 0.0, 0.0])

    def test_linearity(self):
        rng = np.random.default_rng(62)
        G = np.diag([10.0, 10.0, 10.0])
        a, b, c, d = rng.normal(size=(4, 3))
        lhs = sliding_surface(a + c, b + d, G)
        rhs = sliding_surface(a, b, G) + sliding_surface(c, d, G)
        assert np.allclose(lhs, rhs, atol=1e-14)


class TestSaturation:
    def test_saturates_above_layer(self):
        assert saturation(np.array([0.04]), 0.02)[0] == 1.0

    def test_linear_inside_layer(self):
        assert saturation(np.array([0.01]), 0.02)[0] == 0.5

    @given(st.lists(st.floats(-10, 10), min_size=3, max_size=3))
    @settings(max_examples=100, deadline=None)
    def test_odd_symmetry_and_bounds(self, vals):
        x = np.asarray(vals)
        y = saturation(x, 0.02)
        assert np.all(np.abs(y) <= 1.0)
        assert np.allclose(saturation(-x, 0.02), -y)


class TestControlTorque:
    def test_pure_feedforward_at_zero_error(self, model, init_state):
        eng = get_engine(model)
        H, bias, _ = eng.terms(_pack(init_state))
        gains = SmcGains()
        qdd_ref = np.array([0.2, -0.1, 0.05])
        tau, clamped, s = control_torque(H, bias, np.zeros(3), np.zeros(3),
                                         qdd_ref, gains)
        from smstk.control import reduced_dynamics as rd
        H_q, C_q = rd(H, bias)
        assert np.allclose(tau, H_q @ qdd_ref + C_q, atol=1e-14)
        assert not clamped.any() and np.allclose(s, 0.0)

    def test_clamping(self, model, init_state):
        eng = get_engine(model)
        H, bias, _ = eng.terms(_pack(init_state))
        gains = SmcGains()
        tau, clamped, _ = control_torque(H, bias, np.zeros(3), np.zeros(3),
                                         np.array([1e4, -1e4, 1e4]), gains)
        assert np.all(np.abs(tau) <= gains.tau_max)
        assert clamped.all()


class TestClosedLoop:
    def test_nominal_tracking_tight(self, model, short_plan):
        gains = SmcGains()
        log = closed_loop_simulate(model, short_plan, gains)
        assert np.linalg.norm(log.q_e, axis=1).max() <= 1e-3
        assert np.all(np.abs(log.tau) <= gains.tau_max + 1e-12)
        assert log.momentum_residual <= 1e-7
        assert len(log.t) == int(np.floor(short_plan.t[-1] / gains.dt_ctrl)) + 1

    def test_zero_commanded_base_wrench_conserves_momentum(self, model, short_plan):
        log = closed_loop_simulate(model, short_plan, SmcGains())
        assert log.h_l_norm.max() <= 1e-7
        assert log.h_a_norm.max() <= 1e-7

    def test_divergence_guard(self, model, short_plan):
        bad = SmcGains(Gamma=np.diag([10.0] * 3), K_s=np.diag([0.001] * 3))
        with pytest.raises(ControllerDivergenceError):
            closed_loop_simulate(model, short_plan, bad,
                                 q0_offset=np.array([1.2, 0.0, 0.0]))

    def test_reference_matches_plan_knots(self, model, short_plan):
        ref = ReferenceTrajectory(short_plan)
        q, qd, _ = ref.sample(short_plan.t[:-1])
        assert np.allclose(q, short_plan.q[:-1], atol=1e-12)
        assert np.allclose(qd, short_plan.qd[:-1], atol=1e-12)


class TestLyapunov:
    def test_zero_error_run_is_vacuous(self, model, short_plan):
        gains = SmcGains()
        log = closed_loop_simulate(model, short_plan, gains)
        rep = lyapunov_check(log, gains)
        assert rep.vr_outside_steps == 0
        assert rep.vr_fraction_ok == 1.0
        assert abs(log.V_r).max() < 1e-6
        assert rep.passed

    def test_reaching_probe_decreases_vr(self, model, short_plan):
        gains = SmcGains()
        log = closed_loop_simulate(model, short_plan, gains,
                                   q0_offset=np.full(3, 0.004))
        rep = lyapunov_check(log, gains)
        assert rep.vr_outside_steps > 100
        assert rep.vr_fraction_ok >= 0.99

    def test_sliding_probe_decay_rate(self, model, short_plan):
        gains = SmcGains()
        qe0 = np.full(3, 0.01)
        log = closed_loop_simulate(model, short_plan, gains,
                                   q0_offset=qe0, qd0_offset=-gains.Gamma @ qe0)
        rep = lyapunov_check(log, gains)
        expected = 2.0 * np.linalg.eigvalsh(gains.Gamma).min()
        assert rep.vs_rate is not None
        assert abs(rep.vs_rate - expected) <= 0.2 * expected
