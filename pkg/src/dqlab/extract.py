"""Phasor extraction at injected frequencies and admittance assembly.

Extraction is a single-bin coherent correlation (one DFT bin with a
rectangular window, exact because the sweep plans bin-aligned frequencies):
the bin value of a coherent cosine of amplitude A is A at phase 0. The
recorded measurement-frame channels are rotated back to the grid frame
sample-by-sample with the stored filtered angle before correlation.

The default admittance estimator solves Y = I V^-1 from the d-axis and
q-axis injection pair, which removes the grid's influence because both V
and I are terminal quantities; the single-injection ratio estimator is kept
as a diagnostic for stiff-source voltage injection.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .probe import apply_pll_correction

TABLE_HEADER = ("freq_hz,Re_Ydd,Im_Ydd,Re_Ydq,Im_Ydq,"
                "Re_Yqd,Im_Yqd,Re_Yqq,Im_Yqq")


class CoherenceError(ValueError):
    """Requested frequency is not on an FFT bin of the trace."""


class ConditioningError(RuntimeError):
    """The two-injection voltage matrix is too close to singular."""


@dataclass(frozen=True)
class PhasorSample:
    """Complex Fourier coefficients at one injected frequency (p.u.)."""

    freq: float
    v_d: complex
    v_q: complex
    i_d: complex
    i_q: complex

    def __post_init__(self):
        vals = (self.v_d, self.v_q, self.i_d, self.i_q)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("phasor values must be finite")


@dataclass
class AdmittanceTable:
    """Per-frequency 2x2 complex admittance samples, p.u.

    Y[k] is [[Y_dd, Y_dq], [Y_qd, Y_qq]] at freqs[k]; frequencies strictly
    increasing.
    """

    freqs: np.ndarray
    Y: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.freqs = np.asarray(self.freqs, dtype=float)
        self.Y = np.asarray(self.Y, dtype=complex)
        if self.Y.shape != (self.freqs.size, 2, 2):
            raise ValueError("Y must have shape (n_freqs, 2, 2)")
        if self.freqs.size and np.any(np.diff(self.freqs) <= 0):
            raise ValueError("frequencies must be strictly increasing")
        if self.freqs.size and not np.all(np.isfinite(self.Y)):
            raise ValueError("admittance entries must be finite")

    def __len__(self) -> int:
        return self.freqs.size

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fp:
            fp.write(TABLE_HEADER + "\n")
            if not len(self):
                return
            cols = [self.freqs]
            for r in range(2):
                for c in range(2):
                    cols.append(self.Y[:, r, c].real)
                    cols.append(self.Y[:, r, c].imag)
            buf = io.StringIO()
            np.savetxt(buf, np.column_stack(cols), fmt="%.17g", delimiter=",")
            fp.write(buf.getvalue())

    @staticmethod
    def from_csv(path, meta: dict | None = None) -> "AdmittanceTable":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if data.size == 0:
            return AdmittanceTable(freqs=np.empty(0),
                                   Y=np.empty((0, 2, 2)), meta=meta or {})
        freqs = data[:, 0]
        Y = np.empty((freqs.size, 2, 2), dtype=complex)
        k = 1
        for r in range(2):
            for c in range(2):
                Y[:, r, c] = data[:, k] + 1j * data[:, k + 1]
                k += 2
        return AdmittanceTable(freqs=freqs, Y=Y, meta=meta or {})


def single_bin(x: np.ndarray, fs: float, freq: float, rtol: float = 1e-6) -> complex:
    """One coherent DFT bin, scaled so a cosine of amplitude A returns A."""
    x = np.asarray(x, dtype=float)
    n = x.size
    k_float = freq * n / fs
    k = round(k_float)
    if abs(k_float - k) > rtol * max(1.0, abs(k_float)) or k <= 0:
        raise CoherenceError(
            f"{freq} Hz is not a positive bin of an {n}-sample window at "
            f"fs={fs} Hz (k={k_float:.6f}); plan frequencies coherently")
    phase = np.exp(-2j * np.pi * k * np.arange(n) / n)
    return 2.0 * np.dot(x, phase) / n


def extract_phasor(trace, freq: float, apply_correction: bool = True) -> PhasorSample:
    """PLL-corrected complex bin values of the four measured channels.

    The recorded dtheta_filtered rotates the measured dq samples back to the
    grid frame before the correlation; with dtheta identically zero the
    correction is the identity.
    """
    dtheta = trace["dtheta_filtered"] if apply_correction else 0.0
    v_d, v_q = apply_pll_correction(trace["v_d"], trace["v_q"], dtheta)
    i_d, i_q = apply_pll_correction(trace["i_d"], trace["i_q"], dtheta)
    fs = trace.fs
    return PhasorSample(
        freq=freq,
        v_d=single_bin(v_d, fs, freq),
        v_q=single_bin(v_q, fs, freq),
        i_d=single_bin(i_d, fs, freq),
        i_q=single_bin(i_q, fs, freq),
    )


def admittance_two_injections(pair_d: PhasorSample, pair_q: PhasorSample,
                              cond_threshold: float = 1e6) -> np.ndarray:
    """Y = I V^-1 from two independent injections at one frequency.

    Grid influence cancels because V and I are both measured at the inverter
    terminal. Raises ConditioningError when the two injections excited
    nearly identical voltage directions.
    """
    if pair_d.freq != pair_q.freq:
        raise ValueError("samples must share a frequency")
    V = np.array([[pair_d.v_d, pair_q.v_d], [pair_d.v_q, pair_q.v_q]])
    I = np.array([[pair_d.i_d, pair_q.i_d], [pair_d.i_q, pair_q.i_q]])
    cond = np.linalg.cond(V)
    if not np.isfinite(cond) or cond > cond_threshold:
        raise ConditioningError(
            f"voltage matrix condition number {cond:.3g} exceeds "
            f"{cond_threshold:g} at {pair_d.freq} Hz")
    return I @ np.linalg.inv(V)


def admittance_direct(sample: PhasorSample, axis: str,
                      cross_limit: float = 0.01) -> np.ndarray:
    """One column of Y from a single stiff-source injection.

    Valid only when the non-driven voltage component is negligible (infinite
    bus, series-voltage injection); otherwise directs the caller to the
    two-injection estimator.
    """
    if axis == "d":
        driven, cross = sample.v_d, sample.v_q
    elif axis == "q":
        driven, cross = sample.v_q, sample.v_d
    else:
        raise ValueError("axis must be 'd' or 'q'")
    if abs(cross) > cross_limit * abs(driven):
        raise ValueError(
            f"cross-axis voltage {abs(cross):.3g} exceeds {cross_limit:.0%} of "
            f"driven axis {abs(driven):.3g} at {sample.freq} Hz; use "
            "admittance_two_injections")
    return np.array([sample.i_d / driven, sample.i_q / driven])


def build_table(results, apply_correction: bool = True,
                cond_threshold: float = 1e6, meta: dict | None = None) -> AdmittanceTable:
    """Assemble the 2x2 table from a full set of paired-axis run results.

    `results` holds objects with .spec (freq, axis) and .trace; every
    frequency needs both axis runs.
    """
    by_freq: dict[float, dict[str, object]] = {}
    for r in results:
        by_freq.setdefault(r.spec.freq, {})[r.spec.axis] = r
    incomplete = sorted(f for f, d in by_freq.items() if len(d) != 2)
    if incomplete:
        raise ValueError(f"missing axis partner at frequencies {incomplete}")
    freqs = np.array(sorted(by_freq))
    Y = np.empty((freqs.size, 2, 2), dtype=complex)
    for k, f in enumerate(freqs):
        pd = extract_phasor(by_freq[f]["d"].trace, f, apply_correction)
        pq = extract_phasor(by_freq[f]["q"].trace, f, apply_correction)
        Y[k] = admittance_two_injections(pd, pq, cond_threshold)
    meta = dict(meta or {})
    meta.setdefault("correction", apply_correction)
    return AdmittanceTable(freqs=freqs, Y=Y, meta=meta)


def table_errors(meas: AdmittanceTable, ref_Y: np.ndarray) -> dict:
    """Per-frequency error measures of a table against reference matrices.

    ref_Y has shape (n, 2, 2) sampled at meas.freqs. Returns Frobenius
    relative errors and per-element relative errors (elements normalized by
    max(|element|, 2% of the Frobenius norm) so near-zero entries do not
    blow up the ratio).
    """
    ref_Y = np.asarray(ref_Y, dtype=complex)
    if ref_Y.shape != meas.Y.shape:
        raise ValueError("reference shape mismatch")
    diff = meas.Y - ref_Y
    ref_f = np.linalg.norm(ref_Y, axis=(1, 2))
    frob = np.linalg.norm(diff, axis=(1, 2)) / ref_f
    floor = 0.02 * ref_f[:, None, None]
    denom = np.maximum(np.abs(ref_Y), floor)
    elem = np.abs(diff) / denom
    return {"frobenius": frob, "element": elem}
