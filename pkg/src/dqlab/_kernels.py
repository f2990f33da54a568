"""Compiled inner loop of the circuit simulation.

The full system (inverter + Thevenin grid + measurement probe + injection
sources) is integrated here with a fixed-step RK4. The terminal voltage is
an algebraic variable: with ideal sources and two series R-L branches it is
the solution of a 2x2 linear system at every stage evaluation. The
controller chain is affine in the terminal voltage, so the solve is exact
(three evaluations of the chain build the affine map).

State vector (12):
    0 i_d, 1 i_q          inverter branch current, grid frame
    2 xi_id, 3 xi_iq      current-PI integrators
    4 xi_p, 5 xi_q        power-PI integrators
    6 d_pll, 7 xi_pll     inverter PLL (angle rel. grid frame, integrator)
    8 d_m, 9 xi_m         probe PLL
    10 theta_int, 11 x_hpf  filtered-angle chain

Everything is packed into flat float64 arrays so numba can compile the loop;
the readable reference implementations live in plant.py / network.py /
probe.py and are checked against this kernel by the test suite.
"""

from __future__ import annotations

import numpy as np
from numba import njit

N_STATES = 12

# --- parameter vector layout -------------------------------------------------
P_OMEGA0 = 0
P_L = 1
P_RL = 2
P_KPI = 3
P_KII = 4
P_KPPLL = 5
P_KIPLL = 6
P_KPP = 7
P_KIP = 8
P_KPQ = 9
P_KIQ = 10
P_KDRP = 11
P_F0 = 12
P_PREF = 13
P_QREF = 14
P_RG = 15
P_LG = 16
P_VGD = 17
P_VGQ = 18
P_PROBE_KP = 19
P_PROBE_KI = 20
P_HPF_WC = 21
P_SWITCH_RELEASE = 22
P_INJ_KIND = 23      # 0 none, 1 series voltage, 2 shunt current
P_INJ_AXIS = 24      # 0 d, 1 q
P_INJ_FREQ = 25
P_INJ_MAG = 26
P_INJ_T0 = 27
P_INJ_DUR = 28
P_INJ_PHASE = 29
P_SW_T = 30          # grid-switch time (stability probe); inf = never
P_RG2 = 31
P_LG2 = 32
P_VGD2 = 33
P_VGQ2 = 34
N_PARAMS = 35

# --- recorded channel layout --------------------------------------------------
REC_CHANNELS = (
    "v_d", "v_q", "i_d", "i_q", "dtheta_filtered",
    "v_d_grid", "v_q_grid", "i_d_grid", "i_q_grid", "p", "q", "f_pll",
)
N_REC = len(REC_CHANNELS)


@njit(cache=True, nogil=True)
def _waveform(P, t):
    """Injected scalar and its derivative (raised-cosine one-cycle ramp)."""
    tau = t - P[P_INJ_T0]
    if tau < 0.0 or tau > P[P_INJ_DUR] or P[P_INJ_KIND] == 0.0:
        return 0.0, 0.0
    w = 2.0 * np.pi * P[P_INJ_FREQ]
    t_ramp = 1.0 / P[P_INJ_FREQ]
    arg = w * tau + P[P_INJ_PHASE]
    c = np.cos(arg)
    s = np.sin(arg)
    if tau < t_ramp:
        env = 0.5 * (1.0 - np.cos(np.pi * tau / t_ramp))
        denv = 0.5 * (np.pi / t_ramp) * np.sin(np.pi * tau / t_ramp)
    else:
        env = 1.0
        denv = 0.0
    mag = P[P_INJ_MAG]
    return mag * env * c, mag * (denv * c - env * w * s)


@njit(cache=True, nogil=True)
def _grid_at(P, t):
    """Active grid parameters, honouring the impedance-switch event."""
    if t >= P[P_SW_T]:
        return P[P_RG2], P[P_LG2], P[P_VGD2], P[P_VGQ2]
    return P[P_RG], P[P_LG], P[P_VGD], P[P_VGQ]


@njit(cache=True, nogil=True)
def _chain(t, x, P, vd, vq):
    """Controller chain + branch dynamics for a candidate terminal voltage.

    Returns (h_d, h_q, di_d, di_q) where h is the grid-side expression the
    true terminal voltage must equal, and di is the inverter-current
    derivative. Affine in (vd, vq).
    """
    w0 = P[P_OMEGA0]
    L = P[P_L]
    RL = P[P_RL]
    Rg, Lg, vgd, vgq = _grid_at(P, t)

    i_d = x[0]
    i_q = x[1]

    # probe PLL rate (needed for the injected-current derivative)
    d_m = x[8]
    c_m = np.cos(d_m)
    s_m = np.sin(d_m)
    v_mq = -s_m * vd + c_m * vq
    pi_out = P[P_PROBE_KP] * v_mq + x[9]

    # injection, synthesized on the probe's dq axes and rotated to grid frame
    val, dval = _waveform(P, t)
    v_inj_d = 0.0
    v_inj_q = 0.0
    i_inj_d = 0.0
    i_inj_q = 0.0
    di_inj_d = 0.0
    di_inj_q = 0.0
    if P[P_INJ_KIND] == 1.0:
        if P[P_INJ_AXIS] == 0.0:
            v_inj_d = c_m * val
            v_inj_q = s_m * val
        else:
            v_inj_d = -s_m * val
            v_inj_q = c_m * val
    elif P[P_INJ_KIND] == 2.0:
        if P[P_INJ_AXIS] == 0.0:
            i_inj_d = c_m * val
            i_inj_q = s_m * val
            di_inj_d = c_m * dval
            di_inj_q = s_m * dval
        else:
            i_inj_d = -s_m * val
            i_inj_q = c_m * val
            di_inj_d = -s_m * dval
            di_inj_q = c_m * dval
        # frame rotation rate contributes d/dt[R(-d_m)] = pi_out * K R(-d_m)
        di_inj_d += pi_out * (-i_inj_q)
        di_inj_q += pi_out * (i_inj_d)

    # inverter PLL and control frame
    d_pll = x[6]
    c_p = np.cos(d_pll)
    s_p = np.sin(d_pll)
    v_pd = c_p * vd + s_p * vq
    v_pq = -s_p * vd + c_p * vq
    omega_pll = w0 + P[P_KPPLL] * v_pq + x[7]
    f_pll = omega_pll / (2.0 * np.pi)

    p_inst = vd * i_d + vq * i_q
    q_inst = vq * i_d - vd * i_q

    e_p = P[P_PREF] + P[P_KDRP] * (P[P_F0] - f_pll) / P[P_F0] - p_inst
    e_q = P[P_QREF] - q_inst
    i_dref = P[P_KPP] * e_p + x[4]
    i_qref = -(P[P_KPQ] * e_q + x[5])

    i_pd = c_p * i_d + s_p * i_q
    i_pq = -s_p * i_d + c_p * i_q
    e_id = i_dref - i_pd
    e_iq = i_qref - i_pq
    w_rel = omega_pll / w0
    u_pd = v_pd + P[P_KPI] * e_id + x[2] - w_rel * L * i_pq
    u_pq = v_pq + P[P_KPI] * e_iq + x[3] + w_rel * L * i_pd

    u_d = c_p * u_pd - s_p * u_pq
    u_q = s_p * u_pd + c_p * u_pq

    # combined-loop branch dynamics (series L + Lg, single current state)
    Ls = L + Lg
    Rs = RL + Rg
    di_d = (w0 / Ls) * (u_d - v_inj_d - vgd - Rs * i_d + Ls * i_q
                        - Rg * i_inj_d + Lg * i_inj_q - (Lg / w0) * di_inj_d)
    di_q = (w0 / Ls) * (u_q - v_inj_q - vgq - Rs * i_q - Ls * i_d
                        - Rg * i_inj_q - Lg * i_inj_d - (Lg / w0) * di_inj_q)

    # grid-side terminal voltage expression
    il_d = i_d + i_inj_d
    il_q = i_q + i_inj_q
    h_d = vgd + v_inj_d + Rg * il_d - Lg * il_q + (Lg / w0) * (di_d + di_inj_d)
    h_q = vgq + v_inj_q + Rg * il_q + Lg * il_d + (Lg / w0) * (di_q + di_inj_q)
    return h_d, h_q, di_d, di_q


@njit(cache=True, nogil=True)
def _terminal_voltage(t, x, P):
    """Solve the affine consistency condition v = h(v) for the terminal node."""
    h0d, h0q, _, _ = _chain(t, x, P, 0.0, 0.0)
    had, haq, _, _ = _chain(t, x, P, 1.0, 0.0)
    hbd, hbq, _, _ = _chain(t, x, P, 0.0, 1.0)
    a11 = 1.0 - (had - h0d)
    a12 = -(hbd - h0d)
    a21 = -(haq - h0q)
    a22 = 1.0 - (hbq - h0q)
    det = a11 * a22 - a12 * a21
    vd = (a22 * h0d - a12 * h0q) / det
    vq = (-a21 * h0d + a11 * h0q) / det
    return vd, vq


@njit(cache=True, nogil=True)
def _derivs(t, x, P, dx):
    """Full state derivative; fills dx and returns the terminal voltage."""
    vd, vq = _terminal_voltage(t, x, P)
    w0 = P[P_OMEGA0]
    _, _, di_d, di_q = _chain(t, x, P, vd, vq)

    d_pll = x[6]
    c_p = np.cos(d_pll)
    s_p = np.sin(d_pll)
    v_pd = c_p * vd + s_p * vq
    v_pq = -s_p * vd + c_p * vq
    omega_pll = w0 + P[P_KPPLL] * v_pq + x[7]
    f_pll = omega_pll / (2.0 * np.pi)

    i_d = x[0]
    i_q = x[1]
    p_inst = vd * i_d + vq * i_q
    q_inst = vq * i_d - vd * i_q
    e_p = P[P_PREF] + P[P_KDRP] * (P[P_F0] - f_pll) / P[P_F0] - p_inst
    e_q = P[P_QREF] - q_inst
    i_dref = P[P_KPP] * e_p + x[4]
    i_qref = -(P[P_KPQ] * e_q + x[5])
    i_pd = c_p * i_d + s_p * i_q
    i_pq = -s_p * i_d + c_p * i_q

    # probe chain
    d_m = x[8]
    c_m = np.cos(d_m)
    s_m = np.sin(d_m)
    v_mq = -s_m * vd + c_m * vq
    pi_out = P[P_PROBE_KP] * v_mq + x[9]
    gate = 1.0 if t >= P[P_SWITCH_RELEASE] else 0.0

    dx[0] = di_d
    dx[1] = di_q
    dx[2] = P[P_KII] * (i_dref - i_pd)
    dx[3] = P[P_KII] * (i_qref - i_pq)
    dx[4] = P[P_KIP] * e_p
    dx[5] = P[P_KIQ] * e_q
    dx[6] = omega_pll - w0
    dx[7] = P[P_KIPLL] * v_pq
    dx[8] = pi_out
    dx[9] = P[P_PROBE_KI] * v_mq
    dx[10] = gate * pi_out
    dx[11] = P[P_HPF_WC] * (x[10] - x[11])
    return vd, vq


@njit(cache=True, nogil=True)
def _record(t, x, P, out, row):
    """Fill one row of recorded channels (see REC_CHANNELS)."""
    vd, vq = _terminal_voltage(t, x, P)
    d_m = x[8]
    c_m = np.cos(d_m)
    s_m = np.sin(d_m)
    i_d = x[0]
    i_q = x[1]
    out[row, 0] = c_m * vd + s_m * vq
    out[row, 1] = -s_m * vd + c_m * vq
    out[row, 2] = c_m * i_d + s_m * i_q
    out[row, 3] = -s_m * i_d + c_m * i_q
    out[row, 4] = x[10] - x[11]
    out[row, 5] = vd
    out[row, 6] = vq
    out[row, 7] = i_d
    out[row, 8] = i_q
    out[row, 9] = vd * i_d + vq * i_q
    out[row, 10] = vq * i_d - vd * i_q
    d_pll = x[6]
    v_pq = -np.sin(d_pll) * vd + np.cos(d_pll) * vq
    out[row, 11] = (P[P_OMEGA0] + P[P_KPPLL] * v_pq + x[7]) / (2.0 * np.pi)


@njit(cache=True, nogil=True)
def run(t0, x, P, dt, n_steps, rec_every, t_out, rec_out):
    """Integrate n_steps of RK4 from (t0, x); record every rec_every steps.

    Returns (status, n_recorded): status 0 = ok, 1 = non-finite state
    (trajectory diverged; the recorded prefix is still valid). x is updated
    in place to the final state.
    """
    k1 = np.empty(N_STATES)
    k2 = np.empty(N_STATES)
    k3 = np.empty(N_STATES)
    k4 = np.empty(N_STATES)
    xs = np.empty(N_STATES)
    n_rec = 0
    for k in range(n_steps + 1):
        t = t0 + k * dt
        if k % rec_every == 0:
            ok = True
            for j in range(N_STATES):
                if not np.isfinite(x[j]) or abs(x[j]) > 1e9:
                    ok = False
            if not ok:
                return 1, n_rec
            t_out[n_rec] = t
            _record(t, x, P, rec_out, n_rec)
            n_rec += 1
        if k == n_steps:
            break
        _derivs(t, x, P, k1)
        for j in range(N_STATES):
            xs[j] = x[j] + 0.5 * dt * k1[j]
        _derivs(t + 0.5 * dt, xs, P, k2)
        for j in range(N_STATES):
            xs[j] = x[j] + 0.5 * dt * k2[j]
        _derivs(t + 0.5 * dt, xs, P, k3)
        for j in range(N_STATES):
            xs[j] = x[j] + dt * k3[j]
        _derivs(t + dt, xs, P, k4)
        for j in range(N_STATES):
            x[j] += (dt / 6.0) * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
    return 0, n_rec
