"""Assembled inverter + grid + probe circuit and its run drivers.

This module owns the packed parameter layout, warm/cold initial states,
steady-state settling with snapshot capture, and injected/free runs that
return Traces. The physics lives in the compiled kernel; a pure-python
reference of the same right-hand side is provided for linearization and for
kernel parity tests.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import _kernels as ker
from .plant import InverterParams, OperatingPoint, equilibrium_state
from .network import GridParams, InjectionSpec, SERIES_VOLTAGE, SHUNT_CURRENT
from .probe import MeasurementPLLConfig
from .simcore import (
    SimConfig,
    SimState,
    Snapshot,
    Trace,
    SimulationError,
    SteadyStateTimeout,
    peak_to_peak_settled,
)

STATE_NAMES = (
    "i_d", "i_q", "xi_id", "xi_iq", "xi_p", "xi_q", "d_pll", "xi_pll",
    "d_m", "xi_m", "theta_int", "x_hpf",
)
STATE_SLICES = {"plant": slice(0, 8), "probe": slice(8, 12)}

# channels run_until_steady watches; dtheta settles with the rest
MONITORED = ("v_d", "v_q", "i_d", "i_q", "p", "q", "f_pll", "dtheta_filtered")


@dataclass(frozen=True)
class GridSwitch:
    """Impedance re-dispatch event for time-domain stability probes."""

    t_switch: float
    grid: GridParams


@dataclass(frozen=True)
class SystemModel:
    """Immutable description of one experiment's circuit."""

    inverter: InverterParams = InverterParams()
    op: OperatingPoint = OperatingPoint()
    grid: GridParams = GridParams()
    probe: MeasurementPLLConfig = MeasurementPLLConfig()

    def pack(self, injection: InjectionSpec | None = None,
             switch: GridSwitch | None = None) -> np.ndarray:
        p = self.inverter
        P = np.zeros(ker.N_PARAMS)
        P[ker.P_OMEGA0] = p.omega0
        P[ker.P_L] = p.L
        P[ker.P_RL] = p.R_L
        P[ker.P_KPI] = p.K_p_i
        P[ker.P_KII] = p.K_i_i
        P[ker.P_KPPLL] = p.K_p_pll
        P[ker.P_KIPLL] = p.K_i_pll
        P[ker.P_KPP] = p.K_p_p
        P[ker.P_KIP] = p.K_i_p
        P[ker.P_KPQ] = p.K_p_q
        P[ker.P_KIQ] = p.K_i_q
        P[ker.P_KDRP] = p.K_drp
        P[ker.P_F0] = p.f_hz
        P[ker.P_PREF] = self.op.P_ref
        P[ker.P_QREF] = self.op.Q_ref
        P[ker.P_RG] = self.grid.R_g
        P[ker.P_LG] = self.grid.L_g
        P[ker.P_VGD], P[ker.P_VGQ] = self.grid.v_g_dq
        P[ker.P_PROBE_KP] = self.probe.K_p
        P[ker.P_PROBE_KI] = self.probe.K_i
        P[ker.P_HPF_WC] = 2.0 * np.pi * self.probe.hpf_corner
        P[ker.P_SWITCH_RELEASE] = self.probe.switch_release
        if injection is None:
            P[ker.P_INJ_KIND] = 0.0
            P[ker.P_INJ_DUR] = 0.0
        else:
            P[ker.P_INJ_KIND] = 1.0 if injection.kind == SERIES_VOLTAGE else 2.0
            P[ker.P_INJ_AXIS] = 0.0 if injection.axis == "d" else 1.0
            P[ker.P_INJ_FREQ] = injection.freq
            P[ker.P_INJ_MAG] = injection.magnitude
            P[ker.P_INJ_T0] = injection.t_start
            P[ker.P_INJ_DUR] = injection.duration
            P[ker.P_INJ_PHASE] = injection.phase
        if switch is None:
            P[ker.P_SW_T] = np.inf
        else:
            P[ker.P_SW_T] = switch.t_switch
            P[ker.P_RG2] = switch.grid.R_g
            P[ker.P_LG2] = switch.grid.L_g
            P[ker.P_VGD2], P[ker.P_VGQ2] = switch.grid.v_g_dq
        return P

    def initial_state(self, warm: bool = True) -> SimState:
        """Warm start seeds the closed-form plant equilibrium, probe locked."""
        x = np.zeros(ker.N_STATES)
        if warm:
            x[0:8] = equilibrium_state(self.inverter, self.op)
        return SimState(t=0.0, x=x, slices=STATE_SLICES, names=STATE_NAMES)

    # -- pure-python reference of the kernel right-hand side --------------

    def rhs_reference(self, t: float, x: np.ndarray,
                      injection: InjectionSpec | None = None) -> np.ndarray:
        """Readable twin of the compiled kernel; used by parity tests."""
        P = self.pack(injection)
        return rhs_py(t, np.asarray(x, float), P)

    def terminal_voltage_reference(self, t, x, injection=None) -> np.ndarray:
        P = self.pack(injection)
        return np.array(ker._terminal_voltage.py_func(t, np.asarray(x, float), P))


def rhs_py(t: float, x: np.ndarray, P: np.ndarray) -> np.ndarray:
    """Uncompiled full-system right-hand side (same packed layout)."""
    dx = np.empty(ker.N_STATES)
    ker._derivs.py_func(t, x, P, dx)
    return dx


def _make_trace(t_arr, rec, n_rec, fs) -> Trace:
    channels = {
        name: rec[:n_rec, j].copy() for j, name in enumerate(ker.REC_CHANNELS)
    }
    return Trace(t=t_arr[:n_rec].copy(), channels=channels, fs=fs)


def simulate(model: SystemModel, state: SimState, duration: float,
             sim: SimConfig, injection: InjectionSpec | None = None,
             switch: GridSwitch | None = None,
             allow_divergence: bool = False) -> tuple[Trace, SimState, bool]:
    """Integrate for `duration`; returns (trace, final state, diverged)."""
    P = model.pack(injection, switch)
    n_steps = int(round(duration / sim.dt))
    rec_every = sim.record_decimation
    n_rec_max = n_steps // rec_every + 1
    t_out = np.empty(n_rec_max)
    rec = np.empty((n_rec_max, ker.N_REC))
    x = state.x.copy()
    status, n_rec = ker.run(state.t, x, P, sim.dt, n_steps, rec_every, t_out, rec)
    diverged = status != 0
    if diverged and not allow_divergence:
        i_bad = int(np.flatnonzero(~np.isfinite(x))[0]) if not np.all(
            np.isfinite(x)) else 0
        raise SimulationError(
            f"simulation diverged near t={t_out[max(n_rec - 1, 0)]:g} "
            f"(state {state.name_of(i_bad)!r})")
    trace = _make_trace(t_out, rec, n_rec, sim.fs)
    if diverged:
        final = state  # final x is non-finite; keep the restore point
    else:
        final = replace(state, t=state.t + n_steps * sim.dt, x=x)
    return trace, final, diverged


def settle(model: SystemModel, sim: SimConfig | None = None,
           warm: bool = True, tol: float = 1e-5, window: float = 0.5,
           max_time: float = 60.0) -> Snapshot:
    """Run to steady state and freeze a restartable snapshot.

    The trailing-window criterion is evaluated on every monitored channel;
    the probe switch is released at probe.switch_release inside this run, so
    captured snapshots always carry a released, settled filtered-angle chain.
    """
    sim = sim or SimConfig()
    state = model.initial_state(warm=warm)
    chunk = max(window, 0.25)
    t_hist: list[np.ndarray] = []
    c_hist: dict[str, list[np.ndarray]] = {k: [] for k in MONITORED}
    t_min = model.probe.switch_release + window
    while state.t < max_time:
        trace, state, _ = simulate(model, state, chunk, sim)
        t_hist.append(trace.t)
        for k in MONITORED:
            c_hist[k].append(trace[k])
        if state.t < t_min:
            continue
        t_all = np.concatenate(t_hist)
        keep = t_all >= t_all[-1] - 1.5 * window
        chans = {
            k: np.concatenate(v)[keep] for k, v in c_hist.items()
        }
        if peak_to_peak_settled(t_all[keep], chans, window, tol):
            return Snapshot(state=state, config=sim, params=model,
                            tol=tol, window=window)
    raise SteadyStateTimeout(
        f"no steady state within {max_time:g} s (tol={tol:g}); the operating "
        "point is likely small-signal unstable")


def run_injected(snapshot: Snapshot, injection: InjectionSpec,
                 duration: float | None = None,
                 allow_divergence: bool = False) -> tuple[Trace, bool]:
    """Restore a snapshot and run one perturbation experiment.

    The returned trace has time zero-based at the restore instant and the
    injection start offset accordingly.
    """
    model: SystemModel = snapshot.params
    sim = snapshot.config
    inj_abs = replace(injection, t_start=snapshot.state.t + injection.t_start)
    dur = duration if duration is not None else injection.t_start + injection.duration
    trace, _, diverged = simulate(model, snapshot.state, dur, sim,
                                  injection=inj_abs,
                                  allow_divergence=allow_divergence)
    trace.t = trace.t - snapshot.state.t
    return trace, diverged


def run_free(snapshot: Snapshot, duration: float,
             switch: GridSwitch | None = None,
             allow_divergence: bool = True) -> tuple[Trace, bool]:
    """Restore and run without injection (optionally with a grid switch)."""
    model: SystemModel = snapshot.params
    sw = None
    if switch is not None:
        sw = GridSwitch(t_switch=snapshot.state.t + switch.t_switch,
                        grid=switch.grid)
    trace, _, diverged = simulate(model, snapshot.state, duration,
                                  snapshot.config, switch=sw,
                                  allow_divergence=allow_divergence)
    trace.t = trace.t - snapshot.state.t
    return trace, diverged
