"""Experiment orchestration: coherent frequency planning and batch runs.

Each planned frequency is adjusted onto an exact FFT bin of its own analysis
window (f = k fs / N with k whole cycles in N samples), the window covering
at least min_cycles of the injected frequency. Every frequency is run twice
from the same steady snapshot, once per dq axis; a settle margin of at least
two cycles (plus the one-cycle ramp) is discarded before the analysis
window.
"""

from __future__ import annotations

import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .model import run_injected
from .network import InjectionSpec, SERIES_VOLTAGE
from .simcore import Snapshot, Trace

MANIFEST_HEADER = "freq_hz,axis,kind,magnitude_pu,n_samples,status"


@dataclass(frozen=True)
class PlanEntry:
    freq: float
    n_samples: int          # analysis-window length at fs
    n_cycles: int           # whole injected cycles inside the window
    intermod_flag: bool     # within a bin of f +/- 60 Hz products


@dataclass(frozen=True)
class SweepPlan:
    entries: tuple[PlanEntry, ...]
    fs: float
    min_cycles: int
    magnitude: float
    kind: str

    @property
    def frequencies(self) -> np.ndarray:
        return np.array([e.freq for e in self.entries])


@dataclass(frozen=True)
class RunResult:
    """One executed injection: its spec and the analysis-window trace."""

    spec: InjectionSpec
    trace: Trace
    status: str = "ok"


def plan_frequencies(f_min: float, f_max: float, n_points: int, fs: float,
                     min_cycles: int = 10, magnitude: float = 0.01,
                     kind: str = SERIES_VOLTAGE) -> SweepPlan:
    """Log-spaced targets snapped to exactly-representable bin frequencies.

    Raises when fs cannot resolve f_max (needs fs > 2 f_max). Entries whose
    frequency sits within one bin of the 60/120 Hz intermodulation products
    are flagged in metadata but kept.
    """
    if not (f_min >= 1.0 and f_max <= 200.0 and f_min < f_max):
        raise ValueError("frequency range must satisfy 1 <= f_min < f_max <= 200")
    if fs <= 2.0 * f_max:
        raise ValueError(f"fs={fs} Hz cannot resolve {f_max} Hz (need fs > 2*f_max)")
    if min_cycles < 10:
        raise ValueError("min_cycles must be at least 10")
    targets = np.geomspace(f_min, f_max, n_points)
    entries: list[PlanEntry] = []
    seen = set()
    for f_t in targets:
        n = int(np.ceil(min_cycles * fs / f_t))
        k = max(min_cycles, int(round(f_t * n / fs)))
        f = k * fs / n
        if f in seen:
            continue
        seen.add(f)
        df = fs / n
        flag = any(abs(f - fm) <= df for fm in (60.0, 120.0))
        entries.append(PlanEntry(freq=f, n_samples=n, n_cycles=k,
                                 intermod_flag=flag))
    entries.sort(key=lambda e: e.freq)
    return SweepPlan(entries=tuple(entries), fs=fs, min_cycles=min_cycles,
                     magnitude=magnitude, kind=kind)


def _injection_for(entry: PlanEntry, plan: SweepPlan, axis: str,
                   settle_cycles: float, settle_min: float,
                   phase: float = 0.0) -> tuple[InjectionSpec, float, int]:
    """Build the InjectionSpec and locate the analysis window.

    Returns (spec, window_start_time, start_sample_index). The injection
    starts at t = 0 of the run; one ramp cycle plus the settle margin are
    discarded; the window start is aligned to the recording grid.
    """
    f = entry.freq
    dt_rec = 1.0 / plan.fs
    t_margin = (1.0 + settle_cycles) / f
    t_margin = max(t_margin, settle_min + 1.0 / f)
    i0 = int(np.ceil(t_margin / dt_rec))
    t_window = entry.n_samples * dt_rec
    duration = (i0 + entry.n_samples + 2) * dt_rec
    spec = InjectionSpec(kind=plan.kind, axis=axis, freq=f,
                         magnitude=plan.magnitude, t_start=0.0,
                         duration=duration, phase=phase)
    return spec, i0 * dt_rec, i0


def run_one(snapshot: Snapshot, entry: PlanEntry, plan: SweepPlan, axis: str,
            settle_cycles: float = 2.0, settle_min: float = 1.0,
            noise_amp: float = 0.0, noise_seed: int = 0,
            phase: float = 0.0) -> RunResult:
    """Execute a single injection and keep only the analysis window."""
    spec, _, i0 = _injection_for(entry, plan, axis, settle_cycles,
                                 settle_min, phase)
    trace, diverged = run_injected(snapshot, spec, allow_divergence=True)
    if diverged or len(trace) < i0 + entry.n_samples:
        return RunResult(spec=spec, trace=trace, status="diverged")
    window = trace.window(i0, entry.n_samples)
    if noise_amp > 0.0:
        rng = np.random.default_rng(
            np.random.SeedSequence([noise_seed, int(round(entry.freq * 1e6)),
                                    0 if axis == "d" else 1]))
        for name in ("v_d", "v_q", "i_d", "i_q"):
            window.channels[name] = window.channels[name] + \
                noise_amp * rng.standard_normal(entry.n_samples)
    return RunResult(spec=spec, trace=window)


def execute_pair(snapshot: Snapshot, entry: PlanEntry, plan: SweepPlan,
                 **kw) -> tuple[RunResult, RunResult]:
    """The d-axis and q-axis runs for one frequency, from the same snapshot."""
    return (run_one(snapshot, entry, plan, "d", **kw),
            run_one(snapshot, entry, plan, "q", **kw))


def run_sweep(snapshot: Snapshot, plan: SweepPlan, jobs: int = 1,
              **kw) -> list[RunResult]:
    """Execute the whole plan; results ordered by (frequency, axis).

    Runs are independent restorations of the same immutable snapshot, so a
    bounded thread pool executes them; the compiled stepper releases the
    GIL. Serial and parallel execution produce identical results.
    """
    tasks = [(entry, axis) for entry in plan.entries for axis in ("d", "q")]
    if jobs <= 1:
        results = [run_one(snapshot, entry, plan, axis, **kw)
                   for entry, axis in tasks]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_one, snapshot, entry, plan, axis, **kw)
                       for entry, axis in tasks]
            results = [f.result() for f in futures]
    results.sort(key=lambda r: (r.spec.freq, r.spec.axis))
    return results


def write_manifest(results, path) -> None:
    with open(path, "w", newline="") as fp:
        fp.write(MANIFEST_HEADER + "\n")
        for r in results:
            fp.write(f"{r.spec.freq:.17g},{r.spec.axis},{r.spec.kind},"
                     f"{r.spec.magnitude:.17g},{len(r.trace)},{r.status}\n")


def harmonic_ratio_db(trace: Trace, freq: float, channel: str = "i_d") -> float:
    """Level of the injected line over its strongest neighbour bins, in dB.

    Used to confirm the injection is visible (pilot checks) and to flag
    nonlinearity: a large injection raises the 2f harmonic bin.
    """
    from .extract import single_bin

    x = trace[channel]
    n = x.size
    k = int(round(freq * n / trace.fs))
    main = abs(single_bin(x, trace.fs, freq))
    neighbours = []
    for kk in (k - 2, k - 1, k + 1, k + 2):
        if 0 < kk != k:
            neighbours.append(abs(single_bin(x, trace.fs, kk * trace.fs / n)))
    return 20.0 * np.log10(main / max(max(neighbours), 1e-300))
