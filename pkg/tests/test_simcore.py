import numpy as np
import pytest

from dqlab.simcore import (
    SimConfig,
    SimState,
    SimulationError,
    SteadyStateTimeout,
    Trace,
    inverse_park,
    park,
    rk4_step,
    run_until_steady,
    step,
)


def transform_matrix(theta):
    """Independent construction of the abc->dq map (row-by-row cosines)."""
    angles = [theta, theta - 2 * np.pi / 3, theta + 2 * np.pi / 3]
    return (2.0 / 3.0) * np.array([[np.cos(a) for a in angles],
                                   [-np.sin(a) for a in angles]])


class TestPark:
    @pytest.mark.parametrize("theta", [0.0, 0.3, np.pi / 4, np.pi / 2, 2.7, -1.2])
    def test_cosine_triple_aligns_to_d(self, theta):
        abc = [np.cos(theta), np.cos(theta - 2 * np.pi / 3),
               np.cos(theta + 2 * np.pi / 3)]
        assert park(abc, theta) == pytest.approx([1.0, 0.0], abs=1e-12)

    def test_zero_maps_to_zero(self):
        assert park([0.0, 0.0, 0.0], 1.234) == pytest.approx([0.0, 0.0])

    @pytest.mark.parametrize("theta", [0.0, np.pi / 4, np.pi / 2])
    def test_sine_triple_is_negative_q(self, theta):
        abc = np.array([np.sin(theta), np.sin(theta - 2 * np.pi / 3),
                        np.sin(theta + 2 * np.pi / 3)])
        expected = transform_matrix(theta) @ abc
        got = park(abc, theta)
        assert got == pytest.approx(expected, abs=1e-12)
        assert got == pytest.approx([0.0, -1.0], abs=1e-12)

    def test_round_trip_on_balanced_signals(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            dq = rng.normal(size=2)
            theta = rng.uniform(-10, 10)
            abc = inverse_park(dq, theta)
            assert abs(sum(abc)) < 1e-12  # zero sequence free
            assert park(abc, theta) == pytest.approx(dq, abs=1e-12)


class TestRK4:
    def test_constant_state(self):
        x = rk4_step(lambda t, x: np.zeros_like(x), 0.0, np.array([3.0]), 0.05)
        assert x[0] == 3.0

    def test_exponential_against_closed_form(self):
        x = rk4_step(lambda t, x: -x, 0.0, np.array([1.0]), 0.01)
        assert abs(x[0] - np.exp(-0.01)) < 1e-10

    def test_rotation_energy_drift(self):
        # omega*dt = 0.02: fourth-order growth keeps 1e5 steps below 1e-6
        w = 2 * np.pi * 60.0
        dt = 0.02 / w
        x = np.array([1.0, 0.0])

        def rhs(t, x):
            return np.array([-w * x[1], w * x[0]])

        for _ in range(100_000):
            x = rk4_step(rhs, 0.0, x, dt)
        assert abs(x @ x - 1.0) < 1e-6

    def test_order_of_convergence(self):
        def err(dt):
            n = int(round(0.5 / dt))
            x = np.array([1.0])
            for k in range(n):
                x = rk4_step(lambda t, x: -x, k * dt, x, dt)
            return abs(x[0] - np.exp(-0.5))

        e1, e2 = err(0.01), err(0.005)
        assert e1 / e2 >= 2 ** 4 * 0.9


class TestStep:
    def test_advances_time(self):
        st = SimState(t=1.0, x=np.array([2.0]))
        out = step(st, lambda t, x: -x, 0.1)
        assert out.t == pytest.approx(1.1)
        assert out.x[0] == pytest.approx(2.0 * np.exp(-0.1), abs=1e-6)

    def test_nonfinite_derivative_names_slice(self):
        st = SimState(t=0.0, x=np.zeros(4),
                      slices={"plant": slice(0, 2), "probe": slice(2, 4)})

        def bad(t, x):
            d = np.zeros_like(x)
            d[2] = np.nan
            return d

        with pytest.raises(SimulationError, match="probe"):
            step(st, bad, 0.1)


class TestSimState:
    def test_slices_must_cover_exactly(self):
        with pytest.raises(ValueError, match="cover"):
            SimState(t=0.0, x=np.zeros(3), slices={"a": slice(0, 2)})
        with pytest.raises(ValueError, match="cover"):
            SimState(t=0.0, x=np.zeros(3),
                     slices={"a": slice(0, 2), "b": slice(1, 3)})

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            SimState(t=0.0, x=np.array([1.0, np.inf]))

    def test_state_is_frozen(self):
        st = SimState(t=0.0, x=np.array([1.0]))
        with pytest.raises(ValueError):
            st.x[0] = 2.0


class TestRunUntilSteady:
    def test_first_order_settle(self):
        st = SimState(t=0.0, x=np.array([0.0]))
        snap = run_until_steady(
            st, lambda t, x: -10.0 * (x - 1.0),
            outputs=lambda t, x: {"x": x[0]},
            window=0.5, tol=1e-6, dt=1e-3, max_time=10.0)
        assert snap.state.x[0] == pytest.approx(1.0, abs=1e-5)

    def test_unreachable_tolerance_times_out(self):
        # marginally damped oscillator keeps ringing above the tolerance
        w = 20.0

        def rhs(t, x):
            return np.array([-0.01 * x[0] - w * x[1], w * x[0]])

        st = SimState(t=0.0, x=np.array([1.0, 0.0]))
        with pytest.raises(SteadyStateTimeout):
            run_until_steady(st, rhs, outputs=lambda t, x: {"x": x[0]},
                             window=0.5, tol=1e-6, dt=1e-3, max_time=3.0)


class TestTrace:
    def make(self):
        t = np.arange(10) / 100.0
        return Trace(t=t, channels={"v_d": np.sin(t), "i_d": np.cos(t)},
                     fs=100.0)

    def test_csv_round_trip(self, tmp_path):
        tr = self.make()
        path = tmp_path / "trace.csv"
        tr.to_csv(path)
        header = path.read_text().splitlines()[0]
        assert header == "t,v_d,i_d"
        back = Trace.from_csv(path)
        np.testing.assert_array_equal(back["v_d"], tr["v_d"])
        np.testing.assert_array_equal(back.t, tr.t)

    def test_window(self):
        tr = self.make()
        w = tr.window(2, 5)
        assert len(w) == 5
        assert w.t[0] == tr.t[2]
        with pytest.raises(ValueError):
            tr.window(8, 5)

    def test_mismatched_channel_length_rejected(self):
        with pytest.raises(ValueError):
            Trace(t=np.arange(3.0), channels={"a": np.zeros(2)}, fs=1.0)


class TestSimConfig:
    def test_fs(self):
        cfg = SimConfig(dt=50e-6, t_end=1.0, record_decimation=10)
        assert cfg.fs == pytest.approx(2000.0)

    @pytest.mark.parametrize("kw", [dict(dt=0.0), dict(t_end=0.0),
                                    dict(record_decimation=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SimConfig(**{"dt": 50e-6, "t_end": 1.0, "record_decimation": 1, **kw})
