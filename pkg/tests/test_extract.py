import numpy as np
import pytest

from dqlab.extract import (
    AdmittanceTable,
    CoherenceError,
    ConditioningError,
    PhasorSample,
    TABLE_HEADER,
    admittance_direct,
    admittance_two_injections,
    build_table,
    extract_phasor,
    single_bin,
    table_errors,
)
from dqlab.simcore import OMEGA0, Trace


def make_trace(fs, n, **channels):
    t = np.arange(n) / fs
    base = {k: np.zeros(n) for k in
            ("v_d", "v_q", "i_d", "i_q", "dtheta_filtered")}
    base.update(channels)
    return Trace(t=t, channels=base, fs=fs)


def branch_admittance(R, L, f):
    """Closed-form 2x2 admittance of a series R-L branch at f Hz."""
    w = 2 * np.pi * f
    Z = np.array([[R + 1j * w * L / OMEGA0, -L], [L, R + 1j * w * L / OMEGA0]])
    return np.linalg.inv(Z)


class TestSingleBin:
    def test_coherent_cosine_amplitude_and_phase(self):
        fs, f, n = 2000.0, 10.0, 2000
        t = np.arange(n) / fs
        x = 0.05 * np.cos(2 * np.pi * f * t)
        val = single_bin(x, fs, f)
        assert abs(val) == pytest.approx(0.05, rel=1e-12)
        assert np.angle(val) == pytest.approx(0.0, abs=1e-12)

    def test_zero_signal(self):
        assert single_bin(np.zeros(1000), 2000.0, 10.0) == 0.0

    def test_off_bin_rejected(self):
        with pytest.raises(CoherenceError):
            single_bin(np.zeros(1000), 2000.0, 10.5)

    def test_sine_phase(self):
        fs, f, n = 2000.0, 10.0, 2000
        t = np.arange(n) / fs
        val = single_bin(np.sin(2 * np.pi * f * t), fs, f)
        assert val == pytest.approx(-1j, abs=1e-12)


class TestExtractPhasor:
    def test_correction_identity_when_dtheta_zero(self):
        fs, f, n = 2000.0, 10.0, 2000
        t = np.arange(n) / fs
        tr = make_trace(fs, n, v_d=0.03 * np.cos(2 * np.pi * f * t))
        on = extract_phasor(tr, f, apply_correction=True)
        off = extract_phasor(tr, f, apply_correction=False)
        assert on == off
        assert on.v_d == pytest.approx(0.03, rel=1e-12)

    def test_correction_undoes_frame_rotation(self):
        # rotate grid-frame signals into a wobbling measurement frame and
        # check the correction recovers the grid-frame phasor
        fs, f, n = 2000.0, 10.0, 4000
        t = np.arange(n) / fs
        vd = 1.0 + 0.02 * np.cos(2 * np.pi * f * t)
        vq = 0.01 * np.sin(2 * np.pi * f * t)
        dth = 0.05 * np.cos(2 * np.pi * f * t + 0.3)
        c, s = np.cos(dth), np.sin(dth)
        tr = make_trace(fs, n,
                        v_d=c * vd + s * vq, v_q=-s * vd + c * vq,
                        dtheta_filtered=dth)
        got = extract_phasor(tr, f)
        assert got.v_d == pytest.approx(0.02, rel=1e-9)
        assert got.v_q == pytest.approx(-0.01j, rel=1e-9)


class TestTwoInjections:
    def test_identity_voltage_matrix(self):
        pd = PhasorSample(freq=5.0, v_d=1, v_q=0, i_d=2, i_q=0)
        pq = PhasorSample(freq=5.0, v_d=0, v_q=1, i_d=0, i_q=3)
        Y = admittance_two_injections(pd, pq)
        np.testing.assert_allclose(Y, np.diag([2.0, 3.0]))

    def test_recovers_passive_branch(self):
        # synthetic coherent traces of an R-L branch under two orthogonal
        # voltage drives; closed-form admittance is the oracle
        R, L = 0.05, 0.4
        fs, f, n = 4000.0, 8.0, 4000
        t = np.arange(n) / fs
        Y = branch_admittance(R, L, f)
        samples = []
        for axis in (0, 1):
            v_ph = np.zeros(2, dtype=complex)
            v_ph[axis] = 0.01
            i_ph = Y @ v_ph
            ch = {}
            for name, ph in (("v_d", v_ph[0]), ("v_q", v_ph[1]),
                             ("i_d", i_ph[0]), ("i_q", i_ph[1])):
                ch[name] = np.real(ph * np.exp(2j * np.pi * f * t))
            samples.append(extract_phasor(make_trace(fs, n, **ch), f))
        got = admittance_two_injections(*samples)
        assert np.abs(got - Y).max() < 1e-9

    def test_ill_conditioned_rejected(self):
        pd = PhasorSample(freq=5.0, v_d=1.0, v_q=0.5, i_d=1, i_q=0)
        pq = PhasorSample(freq=5.0, v_d=1.0 + 1e-9, v_q=0.5, i_d=0, i_q=1)
        with pytest.raises(ConditioningError, match="5"):
            admittance_two_injections(pd, pq)

    def test_frequency_mismatch_rejected(self):
        pd = PhasorSample(freq=5.0, v_d=1, v_q=0, i_d=1, i_q=0)
        pq = PhasorSample(freq=6.0, v_d=0, v_q=1, i_d=0, i_q=1)
        with pytest.raises(ValueError):
            admittance_two_injections(pd, pq)


class TestDirect:
    def test_simple_ratio(self):
        s = PhasorSample(freq=5.0, v_d=0.01, v_q=1e-7, i_d=0.02, i_q=0.004)
        col = admittance_direct(s, "d")
        assert col[0] == pytest.approx(2.0)
        assert col[1] == pytest.approx(0.4)

    def test_cross_axis_violation(self):
        s = PhasorSample(freq=5.0, v_d=0.01, v_q=0.005, i_d=0.02, i_q=0.0)
        with pytest.raises(ValueError, match="two_injections"):
            admittance_direct(s, "d")

    def test_matches_two_injection_on_branch(self):
        R, L = 0.05, 0.4
        f = 8.0
        Y = branch_admittance(R, L, f)
        v1 = np.array([0.01, 0.0])
        i1 = Y @ v1
        s = PhasorSample(freq=f, v_d=v1[0], v_q=v1[1], i_d=i1[0], i_q=i1[1])
        col = admittance_direct(s, "d")
        np.testing.assert_allclose(col, Y[:, 0], rtol=1e-12)


class TestBuildTable:
    def test_empty_input(self):
        table = build_table([])
        assert len(table) == 0

    def test_missing_axis_listed(self):
        fs, f, n = 2000.0, 10.0, 2000

        class R:
            def __init__(self, axis):
                from dqlab.network import InjectionSpec
                self.spec = InjectionSpec(freq=f, axis=axis, magnitude=0.01,
                                          duration=1.0)
                t = np.arange(n) / fs
                self.trace = make_trace(fs, n,
                                        v_d=0.01 * np.cos(2 * np.pi * f * t))

        with pytest.raises(ValueError, match="10"):
            build_table([R("d")])


class TestTableCSV:
    def make_table(self):
        rng = np.random.default_rng(9)
        freqs = np.array([1.0, 5.0, 20.0])
        Y = rng.normal(size=(3, 2, 2)) + 1j * rng.normal(size=(3, 2, 2))
        return AdmittanceTable(freqs=freqs, Y=Y, meta={"kind": "test"})

    def test_round_trip_exact(self, tmp_path):
        table = self.make_table()
        path = tmp_path / "table.csv"
        table.to_csv(path)
        assert path.read_text().splitlines()[0] == TABLE_HEADER
        back = AdmittanceTable.from_csv(path)
        np.testing.assert_array_equal(back.freqs, table.freqs)
        np.testing.assert_array_equal(back.Y, table.Y)

    def test_empty_round_trip(self, tmp_path):
        table = AdmittanceTable(freqs=np.empty(0), Y=np.empty((0, 2, 2)))
        path = tmp_path / "empty.csv"
        table.to_csv(path)
        back = AdmittanceTable.from_csv(path)
        assert len(back) == 0

    def test_validation(self):
        with pytest.raises(ValueError):
            AdmittanceTable(freqs=np.array([2.0, 1.0]),
                            Y=np.zeros((2, 2, 2), dtype=complex))


class TestTableErrors:
    def test_zero_error(self):
        t = TestTableCSV().make_table()
        errs = table_errors(t, t.Y.copy())
        assert errs["frobenius"].max() == 0.0
        assert errs["element"].max() == 0.0

    def test_relative_scaling(self):
        freqs = np.array([1.0])
        Y_ref = np.array([[[1.0 + 0j, 0.0], [0.0, 1.0]]])
        Y_meas = Y_ref * 1.01
        t = AdmittanceTable(freqs=freqs, Y=Y_meas)
        errs = table_errors(t, Y_ref)
        assert errs["frobenius"][0] == pytest.approx(0.01, rel=1e-9)
