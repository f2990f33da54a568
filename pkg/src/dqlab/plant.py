"""Average-model grid-following inverter.

Current control with voltage feedforward and dq decoupling, P/Q control with
frequency droop, and a synchronous-reference-frame PLL. All quantities are
per-unit in the synchronously rotating grid frame; PLL and control-frame
angles are stored relative to the grid frame so the model is autonomous
(time-invariant), which is what the linearization oracle requires.

State layout (8 states):
    0 i_d      coupling-inductor current, grid frame
    1 i_q
    2 xi_id    current-PI integrators (PLL frame)
    3 xi_iq
    4 xi_p     active-power PI integrator
    5 xi_q     reactive-power PI integrator
    6 d_pll    PLL angle minus grid angle, rad
    7 xi_pll   PLL PI integrator, rad/s
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .simcore import OMEGA0, rotate, rotate_back

N_PLANT_STATES = 8

PLANT_STATE_NAMES = (
    "i_d", "i_q", "xi_id", "xi_iq", "xi_p", "xi_q", "d_pll", "xi_pll",
)


@dataclass(frozen=True)
class InverterParams:
    """Electrical and control parameters; defaults are the studied unit."""

    f_hz: float = 60.0
    s_base_mva: float = 200.0
    v_base_kv: float = 120.0
    L: float = 0.15        # coupling inductor, p.u.
    R_L: float = 0.0015    # coupling resistance, p.u.
    K_p_i: float = 0.5     # current controller P
    K_i_i: float = 20.0    # current controller I
    K_p_pll: float = 20.0  # PLL P
    K_i_pll: float = 700.0 # PLL I
    K_p_p: float = 0.5     # active power P
    K_i_p: float = 20.0    # active power I
    K_p_q: float = 0.5     # reactive power P
    K_i_q: float = 20.0    # reactive power I
    K_drp: float = 20.0    # frequency-active power droop (per-unit frequency)

    def __post_init__(self):
        if self.L <= 0.0:
            raise ValueError("L must be positive")
        for name in ("K_p_i", "K_i_i", "K_p_pll", "K_i_pll",
                     "K_p_p", "K_i_p", "K_p_q", "K_i_q", "K_drp"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def omega0(self) -> float:
        return 2.0 * np.pi * self.f_hz


@dataclass(frozen=True)
class OperatingPoint:
    """Terminal conditions and controller references, per-unit.

    Defaults correspond to 195 MW / 40 MVAr on the 200 MVA base at a
    terminal voltage of 1.01 p.u.
    """

    V_t: float = 1.01
    P: float = 0.975
    Q: float = 0.2
    P_ref: float = 0.975
    Q_ref: float = 0.2


def pll_rhs(v_q: float, d_pll: float, xi_pll: float, K_p_pll: float, K_i_pll: float):
    """SRF-PLL update: returns (d d_pll/dt, d xi_pll/dt, f_pll in Hz).

    omega_pll = omega0 + K_p*v_q + xi; the stored angle is relative to the
    grid frame, so its rate is omega_pll - omega0.
    """
    omega_pll = OMEGA0 + K_p_pll * v_q + xi_pll
    return omega_pll - OMEGA0, K_i_pll * v_q, omega_pll / (2.0 * np.pi)


def power_controller(P, Q, f_pll, P_ref, Q_ref, xi_p, xi_q, p: InverterParams):
    """Power loops with frequency droop.

    e_p = P_ref + K_drp*(60 - f_pll)/60 - P, e_q = Q_ref - Q.
    i_qref carries a minus sign so positive Q_ref raises injected Q
    (Q = v_q*i_d - v_d*i_q with current positive out of the inverter).
    """
    e_p = P_ref + p.K_drp * (p.f_hz - f_pll) / p.f_hz - P
    e_q = Q_ref - Q
    i_dref = p.K_p_p * e_p + xi_p
    i_qref = -(p.K_p_q * e_q + xi_q)
    return i_dref, i_qref, p.K_i_p * e_p, p.K_i_q * e_q


def current_controller(i_pll, i_ref, v_pll, xi_id, xi_iq, omega_pll, p: InverterParams):
    """Current PI with full voltage feedforward and +/- omega*L decoupling.

    All inputs are PLL-frame quantities. Returns (u_dref, u_qref,
    d xi_id/dt, d xi_iq/dt).
    """
    e_d = i_ref[0] - i_pll[0]
    e_q = i_ref[1] - i_pll[1]
    w = omega_pll / OMEGA0
    u_dref = v_pll[0] + p.K_p_i * e_d + xi_id - w * p.L * i_pll[1]
    u_qref = v_pll[1] + p.K_p_i * e_q + xi_iq + w * p.L * i_pll[0]
    return u_dref, u_qref, p.K_i_i * e_d, p.K_i_i * e_q


def applied_voltage(x: np.ndarray, v_t: np.ndarray, p: InverterParams,
                    P_ref: float, Q_ref: float):
    """Full controller chain: terminal voltage -> inverter applied voltage.

    Returns (u in grid frame, controller-integrator derivatives (4,),
    omega_pll). Algebraic: the average switching model applies u_dqref
    rotated from the PLL frame to the grid frame with no delay.
    """
    i = x[0:2]
    d_pll = x[6]
    v_pll = rotate(v_t, d_pll)
    i_pll = rotate(i, d_pll)
    P = v_t[0] * i[0] + v_t[1] * i[1]
    Q = v_t[1] * i[0] - v_t[0] * i[1]
    omega_pll = OMEGA0 + p.K_p_pll * v_pll[1] + x[7]
    f_pll = omega_pll / (2.0 * np.pi)
    i_dref, i_qref, dxi_p, dxi_q = power_controller(
        P, Q, f_pll, P_ref, Q_ref, x[4], x[5], p)
    u_dref, u_qref, dxi_id, dxi_iq = current_controller(
        i_pll, (i_dref, i_qref), v_pll, x[2], x[3], omega_pll, p)
    u = rotate_back(np.array([u_dref, u_qref]), d_pll)
    return u, np.array([dxi_id, dxi_iq, dxi_p, dxi_q]), omega_pll


def inverter_rhs(x: np.ndarray, v_t: np.ndarray, p: InverterParams,
                 P_ref: float, Q_ref: float) -> np.ndarray:
    """State derivatives of the inverter alone, terminal voltage as input.

    Branch dynamics in the grid frame:
        (L/omega0) di_d/dt = u_d - v_d - R_L i_d + L i_q
        (L/omega0) di_q/dt = u_q - v_q - R_L i_q - L i_d
    """
    u, dxi, omega_pll = applied_voltage(x, v_t, p, P_ref, Q_ref)
    i = x[0:2]
    scale = OMEGA0 / p.L
    di_d = scale * (u[0] - v_t[0] - p.R_L * i[0] + p.L * i[1])
    di_q = scale * (u[1] - v_t[1] - p.R_L * i[1] - p.L * i[0])
    v_pll_q = rotate(v_t, x[6])[1]
    return np.array([
        di_d, di_q,
        dxi[0], dxi[1], dxi[2], dxi[3],
        omega_pll - OMEGA0,
        p.K_i_pll * v_pll_q,
    ])


def terminal_power(v_t, i) -> tuple[float, float]:
    """P = v.i, Q = v_q i_d - v_d i_q (current positive out of inverter)."""
    return (v_t[0] * i[0] + v_t[1] * i[1],
            v_t[1] * i[0] - v_t[0] * i[1])


def equilibrium_state(p: InverterParams, op: OperatingPoint,
                      v_angle: float = 0.0) -> np.ndarray:
    """Closed-form plant equilibrium for a terminal voltage op.V_t at v_angle.

    With the PLL locked (v_q = 0 in its frame) the current-PI integrators
    carry exactly the resistive drop and the power integrators carry the
    current references.
    """
    V = op.V_t
    i_d = (op.P * np.cos(v_angle) + op.Q * np.sin(v_angle)) / V
    i_q = (op.P * np.sin(v_angle) - op.Q * np.cos(v_angle)) / V
    i = np.array([i_d, i_q])
    i_pll = rotate(i, v_angle)
    return np.array([
        i_d, i_q,
        p.R_L * i_pll[0], p.R_L * i_pll[1],
        i_pll[0], -i_pll[1],
        v_angle, 0.0,
    ])
