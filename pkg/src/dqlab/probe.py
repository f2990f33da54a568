"""Measurement device: a dedicated PLL supplying the dq reference frame.

The probe tracks the terminal voltage. Its PI output is integrated and
high-pass filtered to give dtheta_filtered, the angle of the measurement
frame relative to the grid frame at perturbation frequencies; a startup
switch holds the integrator/filter input at zero until the initialization
transients have subsided. Recorded voltages and currents are expressed in
the probe frame and can be rotated back to the grid frame sample-by-sample
with apply_pll_correction.

State layout (4 states):
    0 d_m        probe PLL angle minus grid angle, rad
    1 xi_m       probe PI integrator, rad/s
    2 theta_int  integral of the PI output, rad
    3 x_hpf      high-pass filter state, rad
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .simcore import OMEGA0

N_PROBE_STATES = 4

PROBE_STATE_NAMES = ("d_m", "xi_m", "theta_int", "x_hpf")

HIGH_BANDWIDTH = "high-bandwidth"
LOW_BANDWIDTH = "low-bandwidth"

# Legacy loop gains of the fast measurement PLL (per-unit v_q input).
HIGH_BW_GAINS = (20.0, 700.0)


@dataclass(frozen=True)
class MeasurementPLLConfig:
    """Probe loop gains plus the filtered-angle chain settings.

    hpf_corner must sit below the lowest injected frequency; the residual
    rotation error left after correction scales with hpf_corner/f, so the
    default sits two decades below the 1 Hz floor of the standard sweep
    (the startup switch makes such a slow filter practical). switch_release
    is an absolute time in the settle run; it must not precede the decay of
    the startup transients.
    """

    K_p: float = HIGH_BW_GAINS[0]
    K_i: float = HIGH_BW_GAINS[1]
    variant: str = HIGH_BANDWIDTH
    hpf_corner: float = 0.01
    switch_release: float = 2.0

    def __post_init__(self):
        if self.K_p < 0.0 or self.K_i <= 0.0:
            raise ValueError("probe gains must be positive")
        if self.hpf_corner <= 0.0:
            raise ValueError("hpf_corner must be positive")
        if self.variant not in (HIGH_BANDWIDTH, LOW_BANDWIDTH):
            raise ValueError(f"unknown variant {self.variant!r}")

    @staticmethod
    def low_bandwidth(bandwidth_hz: float = 0.5, **kw) -> "MeasurementPLLConfig":
        K_p, K_i = design_pll_gains(bandwidth_hz)
        return MeasurementPLLConfig(K_p=K_p, K_i=K_i, variant=LOW_BANDWIDTH, **kw)


def probe_rhs(v_t: np.ndarray, s: np.ndarray, cfg: MeasurementPLLConfig, t: float):
    """Probe-state derivatives plus (theta_m relative angle, dtheta_filtered).

    v_t is the grid-frame terminal voltage. While t < switch_release the
    input of the integrator/filter chain is held at zero.
    """
    d_m, xi_m, theta_int, x_hpf = s
    c, si = np.cos(d_m), np.sin(d_m)
    v_mq = -si * v_t[0] + c * v_t[1]
    pi_out = cfg.K_p * v_mq + xi_m
    gate = 1.0 if t >= cfg.switch_release else 0.0
    w_c = 2.0 * np.pi * cfg.hpf_corner
    ds = np.array([
        pi_out,
        cfg.K_i * v_mq,
        gate * pi_out,
        w_c * (theta_int - x_hpf),
    ])
    dtheta_filtered = theta_int - x_hpf
    return ds, d_m, dtheta_filtered


def apply_pll_correction(x_md, x_mq, dtheta):
    """Rotate probe-frame samples back to the grid frame.

    Inverse of [[cos, sin], [-sin, cos]] applied elementwise:
    X_d = cos(dtheta) X_md - sin(dtheta) X_mq,
    X_q = sin(dtheta) X_md + cos(dtheta) X_mq.
    Accepts scalars or equal-length arrays.
    """
    c = np.cos(dtheta)
    s = np.sin(dtheta)
    return c * x_md - s * x_mq, s * x_md + c * x_mq


def pll_closed_loop(K_p: float, K_i: float, f_hz, v_amp: float = 1.0):
    """Closed-loop angle-tracking response T(j2*pi*f) of the SRF-PLL loop.

    T(s) = v (K_p s + K_i) / (s^2 + v K_p s + v K_i): the transfer from the
    input-voltage angle to the tracked angle at input amplitude v_amp.
    """
    s = 2j * np.pi * np.asarray(f_hz, dtype=float)
    return v_amp * (K_p * s + K_i) / (s * s + v_amp * K_p * s + v_amp * K_i)


def measure_bandwidth(K_p: float, K_i: float, v_amp: float = 1.0) -> float:
    """-3 dB point (Hz) of the closed-loop response, found numerically."""
    target = 1.0 / np.sqrt(2.0)

    def gain_err(logf):
        return abs(pll_closed_loop(K_p, K_i, 10.0 ** logf, v_amp)) - target

    # |T| is 1 at dc and rolls off; bracket the crossing over a wide span
    lo, hi = -4.0, 6.0
    if gain_err(lo) < 0 or gain_err(hi) > 0:
        raise ValueError("no -3 dB crossing in [1e-4, 1e6] Hz")
    sol = optimize.brentq(gain_err, lo, hi, xtol=1e-12)
    return 10.0 ** sol


def design_pll_gains(target_bandwidth_hz: float) -> tuple[float, float]:
    """Loop gains for a unity-damped loop with the given -3 dB bandwidth.

    With damping 1 the closed loop (including its PI zero) crosses -3 dB at
    omega_n * sqrt(3 + sqrt(10)); gains assume unity input amplitude.
    Verified to land within 5% by measure_bandwidth.
    """
    if target_bandwidth_hz <= 0.0:
        raise ValueError("target bandwidth must be positive")
    r = np.sqrt(3.0 + np.sqrt(10.0))
    w_n = 2.0 * np.pi * target_bandwidth_hz / r
    K_p = 2.0 * w_n
    K_i = w_n * w_n
    measured = measure_bandwidth(K_p, K_i)
    if abs(measured - target_bandwidth_hz) > 0.05 * target_bandwidth_hz:
        raise AssertionError(
            f"designed bandwidth {measured:.4g} Hz misses target "
            f"{target_bandwidth_hz:.4g} Hz by more than 5%")
    return K_p, K_i
