"""Command-line surface.

Commands: simulate, sweep, extract-fit, validate, stability. All numeric
artifacts are CSV with fixed schemas; the rational model is a plain-text
pole-residue file. Exit codes: 0 success, 1 validation failure,
2 configuration error, 3 runtime/divergence error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .analytic import oracle_admittance
from .config import ConfigError, ExperimentConfig, load_config
from .extract import AdmittanceTable, build_table, table_errors
from .model import settle
from .simcore import SimulationError, SteadyStateTimeout, Trace
from .stability import (
    boundary_scr,
    grid_impedance_ss,
    close_loop,
    scr_sweep,
    timedomain_stability_probe,
    write_eigenvalues,
    write_verdicts,
)
from .sweep import RunResult, plan_frequencies, run_sweep, write_manifest
from .vfit import auto_order_fit, load_model, realize_state_space, save_model
from .network import InjectionSpec, scr_to_impedance

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _load(args) -> ExperimentConfig:
    if args.config is None:
        return ExperimentConfig()
    return load_config(args.config)


def _settled_snapshot(cfg: ExperimentConfig):
    model = cfg.system_model()
    return settle(model, sim=cfg.sim, tol=cfg.settle.tol,
                  window=cfg.settle.window, max_time=cfg.settle.max_time)


def cmd_simulate(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    snap = _settled_snapshot(cfg)
    from .model import run_free
    trace, diverged = run_free(snap, args.duration)
    trace.to_csv(out / "simulate.csv")
    print(f"wrote {out / 'simulate.csv'} ({len(trace)} samples)"
          + (" [diverged]" if diverged else ""))
    return EXIT_RUNTIME if diverged else EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    plan = plan_frequencies(cfg.sweep.f_min, cfg.sweep.f_max,
                            cfg.sweep.n_points, cfg.sim.fs,
                            min_cycles=cfg.sweep.min_cycles,
                            magnitude=cfg.sweep.magnitude,
                            kind=cfg.sweep.kind)
    if not plan.entries:
        write_manifest([], out / "manifest.csv")
        print("empty frequency plan; nothing to run")
        return EXIT_OK
    snap = _settled_snapshot(cfg)
    results = run_sweep(snap, plan, jobs=args.jobs,
                        settle_cycles=cfg.sweep.settle_cycles,
                        settle_min=cfg.sweep.settle_min,
                        noise_amp=cfg.noise.amplitude,
                        noise_seed=cfg.noise.seed)
    write_manifest(results, out / "manifest.csv")
    for k, r in enumerate(results):
        r.trace.to_csv(out / f"run{k:03d}_{r.spec.axis}.csv")
    n_bad = sum(r.status != "ok" for r in results)
    print(f"completed {len(results)} runs ({n_bad} failed) -> {out}")
    return EXIT_RUNTIME if n_bad else EXIT_OK


def _read_run_store(out: Path) -> list[RunResult]:
    manifest = (out / "manifest.csv").read_text().strip().splitlines()[1:]
    results = []
    for k, line in enumerate(manifest):
        freq_s, axis, kind, mag_s, n_s, status = line.split(",")
        trace = Trace.from_csv(out / f"run{k:03d}_{axis}.csv")
        spec = InjectionSpec(kind=kind, axis=axis, freq=float(freq_s),
                             magnitude=float(mag_s), duration=1e9)
        results.append(RunResult(spec=spec, trace=trace, status=status))
    return results


def cmd_extract_fit(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    results = _read_run_store(out)
    ok = [r for r in results if r.status == "ok"]
    table = build_table(ok, apply_correction=cfg.probe.correction,
                        meta={"kind": cfg.sweep.kind,
                              "magnitude": cfg.sweep.magnitude})
    table.to_csv(out / "admittance.csv")
    model, report = auto_order_fit(table, rms_target=cfg.fit.rms_target,
                                   max_poles=cfg.fit.max_poles,
                                   n_iterations=cfg.fit.n_iterations)
    save_model(model, out / "model.txt")
    with open(out / "fit_report.txt", "w") as fp:
        fp.write("n_poles,fit_rms\n")
        for n, r in zip(report.orders, report.rms):
            fp.write(f"{n},{r:.17g}\n")
        fp.write(f"selected {report.selected}\n")
        fp.write(f"underfit {report.underfit}\n")
    print(f"table: {len(table)} frequencies -> {out / 'admittance.csv'}")
    print(f"fit: {report.selected} poles, rms {model.fit_rms:.3e}"
          + (" [UNDERFIT]" if report.underfit else ""))
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    table = AdmittanceTable.from_csv(out / "admittance.csv")
    eq, Y = oracle_admittance(cfg.inverter, cfg.op)
    ref = Y.response(table.freqs)
    errs = table_errors(table, ref)
    with open(out / "validation.csv", "w") as fp:
        fp.write("freq_hz,frobenius_rel,e_dd,e_dq,e_qd,e_qq\n")
        for k in range(len(table)):
            e = errs["element"][k]
            fp.write(f"{table.freqs[k]:.17g},{errs['frobenius'][k]:.17g},"
                     f"{e[0, 0]:.17g},{e[0, 1]:.17g},{e[1, 0]:.17g},{e[1, 1]:.17g}\n")
    fe = errs["frobenius"]
    ee = errs["element"]
    print(f"frobenius error: max {fe.max():.3%} mean {fe.mean():.3%}")
    v = cfg.validate
    breaches = (np.any(fe > v.tol_frobenius)
                or np.any(ee[:, 0, 0] > v.tol_element)
                or np.any(ee[:, 0, 1] > v.tol_element)
                or np.any(ee[:, 1, 1] > v.tol_element)
                or np.any(ee[:, 1, 0] > v.tol_element_qd))
    if breaches:
        print("validation FAILED against tolerance")
        return EXIT_VALIDATION
    print("validation passed")
    return EXIT_OK


def cmd_stability(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = load_model(args.model or out / "model.txt")
    ss = realize_state_space(model)
    st = cfg.stability
    n = int(round((st.scr_max - st.scr_min) / st.scr_step)) + 1
    scrs = np.round(st.scr_min + st.scr_step * np.arange(n), 12)
    verdicts = scr_sweep(ss, scrs, st.x_over_r)
    write_verdicts(verdicts, out / "verdicts.csv")
    for v in verdicts:
        write_eigenvalues(v, out / f"eigs_scr_{v.scr:g}.csv")
    pair = boundary_scr(verdicts)
    if pair is None:
        print("no stability boundary inside the SCR grid")
    else:
        print(f"stability boundary between SCR {pair[0]:g} (unstable) "
              f"and {pair[1]:g} (stable)")
    if args.timedomain and pair is not None:
        lo, hi = pair
        for scr_b, label in ((hi, "stable"), (lo, "unstable")):
            res = timedomain_stability_probe(
                cfg.op, hi, scr_b, st.x_over_r,
                model_kw={"inverter": cfg.inverter,
                          "probe": cfg.probe_config()})
            print(f"time-domain probe {hi:g} -> {scr_b:g} ({label}): "
                  f"diverged={res['diverged']} growth_rate={res['growth_rate']:.4g}/s")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="dqlab",
        description="dq-frame admittance identification and stability lab")
    ap.add_argument("--config", help="experiment config file (key = value)")
    ap.add_argument("--out", default="out", help="artifact directory")
    ap.add_argument("--jobs", type=int, default=1, help="parallel runs")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("simulate", help="settle and record a free run")
    p.add_argument("--duration", type=float, default=2.0)
    p.set_defaults(fn=cmd_simulate)
    p = sub.add_parser("sweep", help="run the injection sweep")
    p.set_defaults(fn=cmd_sweep)
    p = sub.add_parser("extract-fit", help="build the admittance table and fit")
    p.set_defaults(fn=cmd_extract_fit)
    p = sub.add_parser("validate", help="compare the table against the oracle")
    p.set_defaults(fn=cmd_validate)
    p = sub.add_parser("stability", help="SCR sweep on a fitted model")
    p.add_argument("--model", help="model file (default <out>/model.txt)")
    p.add_argument("--timedomain", action="store_true",
                   help="run time-domain probes at the boundary")
    p.set_defaults(fn=cmd_stability)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationError, SteadyStateTimeout) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
