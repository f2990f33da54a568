import numpy as np
import pytest

from dqlab import _kernels as ker
from dqlab.model import SystemModel, rhs_py, run_injected, settle, simulate
from dqlab.network import InjectionSpec, scr_to_impedance, solve_operating_point
from dqlab.plant import OperatingPoint, equilibrium_state, inverter_rhs
from dqlab.probe import probe_rhs
from dqlab.simcore import SimConfig, SimulationError, SteadyStateTimeout


@pytest.fixture(scope="module")
def snapshot():
    return settle(SystemModel(), max_time=20.0)


class TestKernelParity:
    def test_compiled_matches_python(self):
        # kernel and .py_func must agree bit-for-bit on the same inputs
        model = SystemModel(grid=solve_operating_point(
            *scr_to_impedance(3.0, 6.0), OperatingPoint()))
        spec = InjectionSpec(kind="shunt-current", axis="q", freq=7.0,
                             magnitude=0.02, t_start=0.1, duration=2.0)
        P = model.pack(spec)
        rng = np.random.default_rng(0)
        x0 = model.initial_state().x
        for _ in range(5):
            x = x0 + 0.05 * rng.normal(size=12)
            t = rng.uniform(0.0, 2.0)
            d_jit = np.empty(12)
            d_py = np.empty(12)
            ker._derivs(t, x, P, d_jit)
            ker._derivs.py_func(t, x, P, d_py)
            np.testing.assert_allclose(d_jit, d_py, rtol=1e-13, atol=1e-16)

    def test_plant_block_matches_reference_rhs(self):
        # with no grid and no injection the first 8 rows of the kernel are
        # exactly the standalone inverter right-hand side
        model = SystemModel()
        rng = np.random.default_rng(1)
        x0 = model.initial_state().x
        for _ in range(5):
            x = x0 + 0.1 * rng.normal(size=12)
            dx = rhs_py(5.0, x.copy(), model.pack())
            v_t = model.grid.v_g_dq  # infinite bus pins the terminal
            ref = inverter_rhs(x[:8], v_t, model.inverter,
                               model.op.P_ref, model.op.Q_ref)
            np.testing.assert_allclose(dx[:8], ref, rtol=1e-10, atol=1e-12)

    def test_probe_block_matches_reference_rhs(self):
        model = SystemModel()
        rng = np.random.default_rng(2)
        x0 = model.initial_state().x
        for _ in range(5):
            x = x0 + 0.1 * rng.normal(size=12)
            dx = rhs_py(5.0, x.copy(), model.pack())
            ds, _, _ = probe_rhs(model.grid.v_g_dq, x[8:], model.probe, 5.0)
            np.testing.assert_allclose(dx[8:], ds, rtol=1e-10, atol=1e-12)

    def test_terminal_solve_satisfies_both_branch_equations(self):
        # v_t must make the line-current derivative implied by the grid side
        # equal the inverter-side current derivative (the DAE condition)
        op = OperatingPoint()
        grid = solve_operating_point(*scr_to_impedance(2.5, 6.0), op)
        model = SystemModel(op=op, grid=grid)
        P = model.pack()
        rng = np.random.default_rng(3)
        x0 = model.initial_state().x
        for _ in range(5):
            x = x0 + 0.05 * rng.normal(size=12)
            vd, vq = ker._terminal_voltage.py_func(8.0, x, P)
            h_d, h_q, _, _ = ker._chain.py_func(8.0, x, P, vd, vq)
            assert vd == pytest.approx(h_d, abs=1e-12)
            assert vq == pytest.approx(h_q, abs=1e-12)


class TestSnapshot:
    def test_settled_operating_point(self, snapshot):
        trace, _, _ = simulate(snapshot.params, snapshot.state, 0.05,
                               snapshot.config)
        assert trace["p"][-1] == pytest.approx(0.975, abs=1e-6)
        assert trace["q"][-1] == pytest.approx(0.2, abs=1e-6)
        assert trace["f_pll"][-1] == pytest.approx(60.0, abs=1e-9)

    def test_restore_stays_within_tolerance(self, snapshot):
        trace, _, _ = simulate(snapshot.params, snapshot.state, 1.0,
                               snapshot.config)
        for name in ("v_d", "v_q", "i_d", "i_q", "dtheta_filtered"):
            assert np.ptp(trace[name]) < snapshot.tol

    def test_deterministic_replay_is_bit_identical(self, snapshot):
        spec = InjectionSpec(freq=10.0, magnitude=0.01, duration=1.5)
        t1, _ = run_injected(snapshot, spec)
        t2, _ = run_injected(snapshot, spec)
        for name in t1.channels:
            np.testing.assert_array_equal(t1[name], t2[name])

    def test_cold_and_warm_settles_agree(self):
        cold = settle(SystemModel(), warm=False, max_time=30.0)
        warm = settle(SystemModel(), warm=True, max_time=30.0)
        np.testing.assert_allclose(cold.state.x[:8], warm.state.x[:8],
                                   atol=1e-6)
        np.testing.assert_allclose(
            warm.state.x[:8],
            equilibrium_state(SystemModel().inverter, SystemModel().op),
            atol=1e-9)

    def test_unstable_point_times_out(self):
        op = OperatingPoint()
        grid = solve_operating_point(*scr_to_impedance(1.05, 6.0), op)
        model = SystemModel(op=op, grid=grid)
        with pytest.raises((SteadyStateTimeout, SimulationError)):
            settle(model, sim=SimConfig(dt=5e-6, record_decimation=20),
                   max_time=5.0)


class TestRunDrivers:
    def test_injected_trace_is_zero_based(self, snapshot):
        spec = InjectionSpec(freq=20.0, magnitude=0.01, duration=1.0)
        trace, diverged = run_injected(snapshot, spec)
        assert not diverged
        assert trace.t[0] == 0.0
        assert trace.fs == pytest.approx(snapshot.config.fs)

    def test_series_injection_moves_terminal(self, snapshot):
        spec = InjectionSpec(freq=20.0, magnitude=0.05, duration=1.0)
        trace, _ = run_injected(snapshot, spec)
        sl = trace.t > 0.2
        assert np.ptp(trace["v_d"][sl]) > 0.08  # ~2x magnitude swing
