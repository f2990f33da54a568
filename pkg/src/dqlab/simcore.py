"""Fixed-step time-domain simulation kernel.

Provides the reference-frame transforms, the explicit 4th-order one-step
integrator, steady-state detection with snapshot capture, and the Trace
container used by every downstream stage.

Conventions used throughout the package:

* per-unit on S_base = 200 MVA, V_base = 120 kV (LL RMS), time in seconds,
  omega0 = 2*pi*60 rad/s;
* amplitude-invariant Park transform with the d axis aligned to cos(theta):
  (cos, cos-120, cos+120) -> (1, 0) and (sin, sin-120, sin+120) -> (0, -1).
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

import numpy as np

OMEGA0 = 2.0 * np.pi * 60.0
S_BASE_MVA = 200.0
V_BASE_KV = 120.0
# RMS base current, kA (about 0.962 kA for 200 MVA / 120 kV)
I_BASE_KA = S_BASE_MVA / (np.sqrt(3.0) * V_BASE_KV)


class SimulationError(RuntimeError):
    """Raised when an integration produces non-finite state."""


class SteadyStateTimeout(RuntimeError):
    """Raised when run_until_steady does not converge within max_time."""


@dataclass(frozen=True)
class SimConfig:
    """Fixed-step integration settings.

    fs = 1 / (dt * record_decimation) is the sampling rate every recorded
    trace (and therefore the extraction stage) sees.
    """

    dt: float = 50e-6
    t_end: float = 1.0
    record_decimation: int = 10

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if self.t_end < self.dt:
            raise ValueError("t_end must be at least one step")
        if self.record_decimation < 1:
            raise ValueError("record_decimation must be >= 1")

    @property
    def fs(self) -> float:
        return 1.0 / (self.dt * self.record_decimation)


@dataclass(frozen=True)
class SimState:
    """Full continuous state at an instant, with named slices per subsystem."""

    t: float
    x: np.ndarray
    slices: dict[str, slice] = field(default_factory=dict)
    names: tuple[str, ...] = ()

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise ValueError("SimState requires finite entries")
        covered = np.zeros(x.size, dtype=int)
        for sl in self.slices.values():
            covered[sl] += 1
        if self.slices and not np.all(covered == 1):
            raise ValueError("state slices must cover x exactly, no overlap")
        x = x.copy()
        x.flags.writeable = False
        object.__setattr__(self, "x", x)

    def name_of(self, i: int) -> str:
        if self.names and i < len(self.names):
            return self.names[i]
        for key, sl in self.slices.items():
            if sl.start <= i < sl.stop:
                return f"{key}[{i - sl.start}]"
        return f"x[{i}]"


@dataclass(frozen=True)
class Snapshot:
    """Frozen SimState plus everything needed to reproduce it.

    Restoring a snapshot and stepping with zero injection keeps all recorded
    channels inside the steady-state tolerance it was captured with.
    """

    state: SimState
    config: SimConfig
    params: object
    tol: float
    window: float


@dataclass
class Trace:
    """Uniformly sampled named channels.

    All electrical channels are per-unit; dtheta_filtered is radians.
    """

    t: np.ndarray
    channels: dict[str, np.ndarray]
    fs: float

    def __post_init__(self):
        n = self.t.size
        for name, ch in self.channels.items():
            if ch.size != n:
                raise ValueError(f"channel {name!r} length {ch.size} != {n}")

    def __len__(self) -> int:
        return self.t.size

    def __getitem__(self, name: str) -> np.ndarray:
        return self.channels[name]

    def window(self, i0: int, n: int) -> "Trace":
        """Sub-trace of n samples starting at index i0."""
        if i0 < 0 or i0 + n > len(self):
            raise ValueError("window out of range")
        return Trace(
            t=self.t[i0 : i0 + n],
            channels={k: v[i0 : i0 + n] for k, v in self.channels.items()},
            fs=self.fs,
        )

    def to_csv(self, path) -> None:
        """CSV export: t first, then channels, 17 significant digits."""
        names = list(self.channels)
        cols = [self.t] + [self.channels[k] for k in names]
        with open(path, "w", newline="") as fp:
            fp.write(",".join(["t"] + names) + "\n")
            buf = io.StringIO()
            np.savetxt(buf, np.column_stack(cols), fmt="%.17g", delimiter=",")
            fp.write(buf.getvalue())

    @staticmethod
    def from_csv(path) -> "Trace":
        with open(path, "r") as fp:
            header = fp.readline().strip().split(",")
            data = np.loadtxt(fp, delimiter=",", ndmin=2)
        t = data[:, 0]
        if t.size > 1:
            fs = 1.0 / np.mean(np.diff(t))
        else:
            fs = float("nan")
        channels = {name: data[:, j + 1] for j, name in enumerate(header[1:])}
        return Trace(t=t, channels=channels, fs=fs)


def park(abc, theta: float) -> np.ndarray:
    """Amplitude-invariant abc -> dq, d axis on cos(theta).

    A balanced cosine triple maps to (1, 0); the quadrature (sine) triple
    maps to (0, -1).
    """
    a, b, c = abc
    two_thirds = 2.0 / 3.0
    th_b = theta - 2.0 * np.pi / 3.0
    th_c = theta + 2.0 * np.pi / 3.0
    d = two_thirds * (np.cos(theta) * a + np.cos(th_b) * b + np.cos(th_c) * c)
    q = -two_thirds * (np.sin(theta) * a + np.sin(th_b) * b + np.sin(th_c) * c)
    return np.array([d, q])


def inverse_park(dq, theta: float) -> np.ndarray:
    """dq -> abc for a zero-sequence-free signal; inverse of park()."""
    d, q = dq
    th_b = theta - 2.0 * np.pi / 3.0
    th_c = theta + 2.0 * np.pi / 3.0
    return np.array(
        [
            d * np.cos(theta) - q * np.sin(theta),
            d * np.cos(th_b) - q * np.sin(th_b),
            d * np.cos(th_c) - q * np.sin(th_c),
        ]
    )


def rotate(xy, angle: float) -> np.ndarray:
    """Frame rotation [[cos, sin], [-sin, cos]] @ xy.

    Maps grid-frame components into a frame leading by `angle` (the same
    matrix a PLL at angle theta_grid + angle applies to measurements).
    """
    c, s = np.cos(angle), np.sin(angle)
    return np.array([c * xy[0] + s * xy[1], -s * xy[0] + c * xy[1]])


def rotate_back(xy, angle: float) -> np.ndarray:
    """Inverse of rotate(): local-frame components back to the grid frame."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([c * xy[0] - s * xy[1], s * xy[0] + c * xy[1]])


def rk4_step(rhs, t: float, x: np.ndarray, dt: float) -> np.ndarray:
    """One classic Runge-Kutta step; local truncation error O(dt^5)."""
    k1 = rhs(t, x)
    k2 = rhs(t + 0.5 * dt, x + 0.5 * dt * k1)
    k3 = rhs(t + 0.5 * dt, x + 0.5 * dt * k2)
    k4 = rhs(t + dt, x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step(state: SimState, rhs, dt: float) -> SimState:
    """Advance a SimState by one RK4 step.

    Aborts with a diagnostic naming the offending state slice if the
    derivative or the result is non-finite.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    d0 = np.asarray(rhs(state.t, state.x), dtype=float)
    bad = np.flatnonzero(~np.isfinite(d0))
    if bad.size:
        raise SimulationError(
            f"non-finite derivative at t={state.t:g} in state "
            f"{state.name_of(int(bad[0]))!r}"
        )
    x1 = rk4_step(rhs, state.t, state.x, dt)
    bad = np.flatnonzero(~np.isfinite(x1))
    if bad.size:
        raise SimulationError(
            f"non-finite state after step at t={state.t + dt:g} in "
            f"{state.name_of(int(bad[0]))!r}"
        )
    return replace(state, t=state.t + dt, x=x1)


def peak_to_peak_settled(t: np.ndarray, channels: dict, window: float, tol: float) -> bool:
    """True when every channel's peak-to-peak over the trailing window < tol."""
    if t.size < 2 or t[-1] - t[0] < window:
        return False
    i0 = np.searchsorted(t, t[-1] - window)
    for ch in channels.values():
        seg = ch[i0:]
        if seg.max() - seg.min() >= tol:
            return False
    return True


def run_until_steady(
    state: SimState,
    rhs,
    outputs,
    window: float = 0.5,
    tol: float = 1e-5,
    dt: float = 50e-6,
    max_time: float = 60.0,
    record_decimation: int = 10,
):
    """Integrate until every monitored channel is flat, then freeze a Snapshot.

    `outputs(t, x)` returns a dict of monitored channel values. Raises
    SteadyStateTimeout if the trailing-window criterion is not met within
    max_time of simulated time (the usual cause: the operating point is
    small-signal unstable, or tol sits below residual ripple).
    """
    t = state.t
    x = state.x.copy()
    t_hist: list[float] = []
    hist: dict[str, list[float]] = {}
    n_steps = int(round(max_time / dt))
    check_every = max(1, int(round(window / (4 * dt * record_decimation))))
    n_rec = 0
    for k in range(n_steps + 1):
        if k % record_decimation == 0:
            vals = outputs(t, x)
            if not hist:
                hist = {name: [] for name in vals}
            t_hist.append(t)
            for name, v in vals.items():
                hist[name].append(float(v))
            n_rec += 1
            if n_rec % check_every == 0:
                arr_t = np.array(t_hist)
                arrs = {n_: np.array(v) for n_, v in hist.items()}
                if peak_to_peak_settled(arr_t, arrs, window, tol):
                    final = SimState(t=t, x=x, slices=state.slices, names=state.names)
                    return Snapshot(
                        state=final,
                        config=SimConfig(dt=dt, t_end=t, record_decimation=record_decimation),
                        params=None,
                        tol=tol,
                        window=window,
                    )
        x = rk4_step(rhs, t, x, dt)
        if not np.all(np.isfinite(x)):
            raise SimulationError(f"state diverged at t={t:g} during settle run")
        t = state.t + (k + 1) * dt
    raise SteadyStateTimeout(
        f"no steady state within {max_time:g}s (window={window:g}, tol={tol:g}); "
        "operating point may be unstable or tol below residual ripple"
    )
