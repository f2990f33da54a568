import numpy as np
import pytest

from dqlab.plant import (
    InverterParams,
    OperatingPoint,
    applied_voltage,
    current_controller,
    equilibrium_state,
    inverter_rhs,
    pll_rhs,
    power_controller,
    terminal_power,
)
from dqlab.simcore import OMEGA0, rk4_step, rotate

P = InverterParams()
OP = OperatingPoint()


class TestPLL:
    def test_locked_at_nominal(self):
        dd, dxi, f = pll_rhs(0.0, 0.0, 0.0, P.K_p_pll, P.K_i_pll)
        assert f == pytest.approx(60.0)
        assert dd == 0.0 and dxi == 0.0

    def test_integrator_ramp_rate(self):
        # K_i,pll * v_q = 700 * 0.01 = 7/s
        _, dxi, _ = pll_rhs(0.01, 0.0, 0.0, P.K_p_pll, P.K_i_pll)
        assert dxi == pytest.approx(7.0)

    def test_tracks_frequency_step(self):
        # rotate the input voltage at +0.5 Hz; the type-2 loop must settle
        # on 60.5 Hz with zero angle error
        df = 0.5
        V = 1.01

        def rhs(t, s):
            ang = 2 * np.pi * df * t
            v = np.array([V * np.cos(ang), V * np.sin(ang)])
            v_q = rotate(v, s[0])[1]
            dd, dxi, _ = pll_rhs(v_q, s[0], s[1], P.K_p_pll, P.K_i_pll)
            return np.array([dd, dxi])

        s = np.zeros(2)
        dt = 1e-4
        n = int(4.0 / dt)
        for k in range(n):
            s = rk4_step(rhs, k * dt, s, dt)
        t_end = n * dt
        v = np.array([V * np.cos(2 * np.pi * df * t_end),
                      V * np.sin(2 * np.pi * df * t_end)])
        v_q = rotate(v, s[0])[1]
        _, _, f = pll_rhs(v_q, s[0], s[1], P.K_p_pll, P.K_i_pll)
        assert f == pytest.approx(60.5, abs=1e-4)
        assert abs(v_q) < 1e-4


class TestPowerController:
    def test_equilibrium_has_no_drive(self):
        i_dref, i_qref, de_p, de_q = power_controller(
            OP.P, OP.Q, 60.0, OP.P_ref, OP.Q_ref, 0.9, -0.1, P)
        assert de_p == 0.0 and de_q == 0.0
        assert i_dref == pytest.approx(0.9)
        assert i_qref == pytest.approx(0.1)

    def test_droop_contribution(self):
        # 1% frequency drop adds K_drp * 0.01 = 0.2 to the power error
        i_dref, _, de_p, _ = power_controller(
            OP.P_ref, OP.Q_ref, 59.4, OP.P_ref, OP.Q_ref, 0.0, 0.0, P)
        assert i_dref == pytest.approx(P.K_p_p * 0.2)
        assert de_p == pytest.approx(P.K_i_p * 0.2)

    def test_reference_step_settles_in_closed_loop(self):
        from dqlab.model import SystemModel, settle, simulate

        op2 = OperatingPoint(P=0.975, Q=0.2, P_ref=OP.P_ref + 0.1, Q_ref=OP.Q_ref)
        model = SystemModel(op=op2)
        snap = settle(SystemModel(), max_time=20.0)
        # restart the settled state against the stepped reference
        trace, _, _ = simulate(model, snap.state, 3.0, snap.config)
        assert trace["p"][-1] == pytest.approx(OP.P_ref + 0.1, abs=1e-5)


class TestCurrentController:
    def test_zero_error_output_is_feedforward(self):
        i = np.array([0.5, -0.2])
        v = np.array([1.0, 0.05])
        u_d, u_q, dxi_d, dxi_q = current_controller(
            i, i, v, 0.0, 0.0, OMEGA0, P)
        assert u_d == pytest.approx(v[0] - P.L * i[1])
        assert u_q == pytest.approx(v[1] + P.L * i[0])
        assert dxi_d == 0.0 and dxi_q == 0.0

    def test_proportional_gain(self):
        i = np.zeros(2)
        i_ref = np.array([0.1, 0.0])
        u_d, _, _, _ = current_controller(i, i_ref, np.zeros(2), 0.0, 0.0,
                                          OMEGA0, P)
        assert u_d == pytest.approx(P.K_p_i * 0.1)


def branch_dc_admittance():
    """Closed-form 2x2 inverse of Z = [[R_L, -L], [L, R_L]]."""
    Z = np.array([[P.R_L, -P.L], [P.L, P.R_L]])
    return np.linalg.inv(Z)


class TestInverterRHS:
    def test_equilibrium_derivatives_vanish(self):
        x = equilibrium_state(P, OP)
        v = np.array([OP.V_t, 0.0])
        dx = inverter_rhs(x, v, P, OP.P_ref, OP.Q_ref)
        assert np.abs(dx).max() < 1e-9

    def test_frozen_branch_dc_admittance_matches_closed_form(self):
        # steady branch equation: 0 = e - R_L i + L J i  =>  i = Y e
        Y = branch_dc_admittance()
        assert Y[0, 0] == pytest.approx(0.0667, abs=2e-4)
        assert Y[0, 1] == pytest.approx(6.666, abs=1e-3)
        scale = OMEGA0 / P.L

        def branch(i, e):
            return scale * np.array([e[0] - P.R_L * i[0] + P.L * i[1],
                                     e[1] - P.R_L * i[1] - P.L * i[0]])

        rng = np.random.default_rng(3)
        for _ in range(5):
            e = rng.normal(size=2)
            i = Y @ e
            assert np.abs(branch(i, e)).max() < 1e-9

    def test_operating_point_power(self):
        # 195 MW / 40 MVAr on the 200 MVA base
        x = equilibrium_state(P, OP)
        p, q = terminal_power(np.array([1.01, 0.0]), x[0:2])
        assert p == pytest.approx(0.975, abs=1e-12)
        assert q == pytest.approx(0.2, abs=1e-12)

    def test_power_balance_identity(self):
        # u.i = v.i + R_L |i|^2 + d/dt (0.5 (L/w0) |i|^2) at any state
        rng = np.random.default_rng(11)
        for _ in range(10):
            x = equilibrium_state(P, OP) + 0.1 * rng.normal(size=8)
            v = np.array([1.01, 0.0]) + 0.05 * rng.normal(size=2)
            u, _, _ = applied_voltage(x, v, P, OP.P_ref, OP.Q_ref)
            dx = inverter_rhs(x, v, P, OP.P_ref, OP.Q_ref)
            i = x[0:2]
            di = dx[0:2]
            lhs = u @ i
            rhs = v @ i + P.R_L * (i @ i) + (P.L / OMEGA0) * (i @ di)
            assert lhs == pytest.approx(rhs, abs=1e-9)

    def test_frame_consistency_of_power(self):
        # P, Q computed from PLL-frame quantities match the grid frame
        x = equilibrium_state(P, OP, v_angle=0.3)
        v = 1.01 * np.array([np.cos(0.3), np.sin(0.3)])
        i = x[0:2]
        p_g, q_g = terminal_power(v, i)
        v_p = rotate(v, x[6])
        i_p = rotate(i, x[6])
        p_p, q_p = terminal_power(v_p, i_p)
        assert abs(v_p[1]) < 1e-12  # PLL locked
        assert p_p == pytest.approx(p_g, abs=1e-12)
        assert q_p == pytest.approx(q_g, abs=1e-12)


class TestParams:
    def test_table_defaults(self):
        assert (P.L, P.R_L) == (0.15, 0.0015)
        assert (P.K_p_i, P.K_i_i) == (0.5, 20.0)
        assert (P.K_p_pll, P.K_i_pll) == (20.0, 700.0)
        assert (P.K_p_p, P.K_i_p) == (0.5, 20.0)
        assert (P.K_p_q, P.K_i_q) == (0.5, 20.0)
        assert P.K_drp == 20.0
        assert (P.f_hz, P.s_base_mva, P.v_base_kv) == (60.0, 200.0, 120.0)

    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            InverterParams(L=0.0)
        with pytest.raises(ValueError):
            InverterParams(K_i_pll=-1.0)

    def test_operating_point_defaults(self):
        assert (OP.V_t, OP.P, OP.Q) == (1.01, 0.975, 0.2)
