"""Thevenin grid, SCR parameterization, injection elements, two-bus solve.

The grid is an ideal voltage source behind a series R-L impedance. A
series-voltage injection source sits in the line; a shunt-current injection
source sits at the inverter terminal node. (R_g, L_g) = (0, 0) is an exact
infinite bus: the terminal-voltage path is then purely algebraic and no line
state is needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .simcore import OMEGA0
from .plant import OperatingPoint

SERIES_VOLTAGE = "series-voltage"
SHUNT_CURRENT = "shunt-current"


@dataclass(frozen=True)
class GridParams:
    """Series grid impedance (p.u.) and the source phasor behind it."""

    R_g: float = 0.0
    L_g: float = 0.0
    v_g_mag: float = 1.01
    v_g_angle: float = 0.0
    omega0: float = OMEGA0

    def __post_init__(self):
        if self.R_g < 0.0 or self.L_g < 0.0:
            raise ValueError("grid impedance must be non-negative")

    @property
    def is_infinite_bus(self) -> bool:
        return self.R_g == 0.0 and self.L_g == 0.0

    @property
    def v_g_dq(self) -> np.ndarray:
        return np.array([
            self.v_g_mag * np.cos(self.v_g_angle),
            self.v_g_mag * np.sin(self.v_g_angle),
        ])


@dataclass(frozen=True)
class InjectionSpec:
    """One perturbation experiment: a single-frequency dq-axis sinusoid.

    The waveform ramps in over one cycle (raised cosine) and is referenced to
    the measurement PLL's frame. Duration must cover at least 10 cycles of
    the injected frequency.
    """

    kind: str = SERIES_VOLTAGE
    axis: str = "d"
    freq: float = 10.0
    magnitude: float = 0.01
    t_start: float = 0.0
    duration: float = 1.0
    phase: float = 0.0

    def __post_init__(self):
        if self.kind not in (SERIES_VOLTAGE, SHUNT_CURRENT):
            raise ValueError(f"unknown injection kind {self.kind!r}")
        if self.axis not in ("d", "q"):
            raise ValueError(f"axis must be 'd' or 'q', got {self.axis!r}")
        if self.freq <= 0.0:
            raise ValueError("freq must be positive")
        if self.magnitude <= 0.0:
            raise ValueError("magnitude must be positive")
        if self.duration * self.freq < 10.0:
            raise ValueError("duration must cover at least 10 cycles")


def scr_to_impedance(scr: float, x_over_r: float) -> tuple[float, float]:
    """Map (SCR, X/R) to series (R_g, L_g) in p.u.

    |Z| = 1/SCR; R = |Z|/sqrt(1+(X/R)^2); L is the p.u. reactance at nominal
    frequency. scr = inf gives the exact infinite bus (0, 0).
    """
    if scr <= 0.0 or x_over_r <= 0.0:
        raise ValueError("scr and x_over_r must be positive")
    if np.isinf(scr):
        return 0.0, 0.0
    z = 1.0 / scr
    r = z / np.sqrt(1.0 + x_over_r * x_over_r)
    return r, r * x_over_r


def impedance_to_scr(R_g: float, L_g: float) -> tuple[float, float]:
    """Inverse of scr_to_impedance."""
    z = np.hypot(R_g, L_g)
    if z == 0.0:
        return np.inf, np.nan
    if R_g == 0.0:
        return 1.0 / z, np.inf
    return 1.0 / z, L_g / R_g


class InfeasibleOperatingPoint(RuntimeError):
    pass


def solve_operating_point(R_g: float, L_g: float, op: OperatingPoint) -> GridParams:
    """Grid source phasor that places the terminal at V_t /_ 0 with (P, Q).

    Two-bus phasor flow with the inverter current positive toward the grid:
    v_g = V_t - (R_g + jX_g) * conj(S)/conj(v_t). Closed form; the residual
    of the returned solution is checked below 1e-10.
    """
    if op.V_t <= 0.0:
        raise InfeasibleOperatingPoint("terminal voltage must be positive")
    v_t = complex(op.V_t, 0.0)
    i = (op.P - 1j * op.Q) / v_t.conjugate()
    v_g = v_t - complex(R_g, L_g) * i
    grid = GridParams(R_g=R_g, L_g=L_g,
                      v_g_mag=abs(v_g), v_g_angle=float(np.angle(v_g)))
    resid = operating_point_residual(grid, op)
    if resid > 1e-10:
        raise InfeasibleOperatingPoint(
            f"two-bus solve residual {resid:.3e} exceeds 1e-10")
    return grid


def operating_point_residual(grid: GridParams, op: OperatingPoint) -> float:
    """Norm of the phasor power-flow residual for a candidate grid source."""
    v_t = complex(op.V_t, 0.0)
    i = (op.P - 1j * op.Q) / v_t.conjugate()
    v_g = complex(*grid.v_g_dq)
    mismatch = v_t - complex(grid.R_g, grid.L_g) * i - v_g
    return abs(mismatch)


def solve_operating_point_newton(R_g: float, L_g: float, op: OperatingPoint,
                                 v0=(1.0, 0.0)) -> GridParams:
    """Independent two-bus solve: Newton on (P, Q) mismatch over v_g.

    Kept as a cross-check for the closed-form path (and used by tests).
    """
    z = complex(R_g, L_g)

    def mismatch(vg):
        v_g = complex(vg[0], vg[1])
        if z == 0:
            # infinite bus: terminal is pinned to the source, power flows freely
            return [v_g.real - op.V_t, v_g.imag]
        i = (complex(op.V_t, 0.0) - v_g) / z
        s = complex(op.V_t, 0.0) * i.conjugate()
        return [s.real - op.P, s.imag - op.Q]

    sol = optimize.root(mismatch, list(v0), method="hybr", tol=1e-13)
    if not sol.success:
        raise InfeasibleOperatingPoint(f"Newton solve failed: {sol.message}")
    v_g = complex(sol.x[0], sol.x[1])
    return GridParams(R_g=R_g, L_g=L_g,
                      v_g_mag=abs(v_g), v_g_angle=float(np.angle(v_g)))


def grid_rhs(i_line: np.ndarray, v_t: np.ndarray, grid: GridParams,
             v_inj=(0.0, 0.0)) -> np.ndarray:
    """Series-branch current dynamics in the rotating frame.

    (L_g/omega0) di/dt = v_t - v_inj - v_g - R_g i + L_g [i_q, -i_d].
    Requires L_g > 0; an L_g = 0 branch has no state and the terminal
    voltage is handled algebraically by the circuit assembly.
    """
    if grid.L_g <= 0.0:
        raise ValueError("grid_rhs needs L_g > 0; L_g = 0 is algebraic")
    v_g = grid.v_g_dq
    scale = grid.omega0 / grid.L_g
    did = scale * (v_t[0] - v_inj[0] - v_g[0] - grid.R_g * i_line[0] + grid.L_g * i_line[1])
    diq = scale * (v_t[1] - v_inj[1] - v_g[1] - grid.R_g * i_line[1] - grid.L_g * i_line[0])
    return np.array([did, diq])


def injection_waveform(spec: InjectionSpec, t: float) -> tuple[float, float]:
    """Scalar injected waveform and its time derivative at time t.

    Raised-cosine ramp over the first cycle; zero outside [t_start,
    t_start + duration].
    """
    tau = t - spec.t_start
    if tau < 0.0 or tau > spec.duration:
        return 0.0, 0.0
    w = 2.0 * np.pi * spec.freq
    t_ramp = 1.0 / spec.freq
    c = np.cos(w * tau + spec.phase)
    s = np.sin(w * tau + spec.phase)
    if tau < t_ramp:
        env = 0.5 * (1.0 - np.cos(np.pi * tau / t_ramp))
        denv = 0.5 * (np.pi / t_ramp) * np.sin(np.pi * tau / t_ramp)
    else:
        env, denv = 1.0, 0.0
    val = spec.magnitude * env * c
    dval = spec.magnitude * (denv * c - env * w * s)
    return val, dval
