"""Experiment configuration: line-oriented `key = value` with dotted prefixes.

Example::

    # grid strength
    grid.scr = 4.0
    grid.x_over_r = 6.0
    sweep.f_min = 1.0
    sweep.n_points = 40
    probe.variant = low-bandwidth

Unknown keys are rejected; values are typed by the field they configure; all
module invariants are enforced when the config is materialized.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .network import GridParams, SERIES_VOLTAGE, SHUNT_CURRENT, scr_to_impedance, solve_operating_point
from .plant import InverterParams, OperatingPoint
from .probe import MeasurementPLLConfig, HIGH_BANDWIDTH, LOW_BANDWIDTH, design_pll_gains
from .simcore import SimConfig, V_BASE_KV, I_BASE_KA
from .model import SystemModel


class ConfigError(ValueError):
    pass


# peak phase-neutral voltage / peak line current bases for unit conversion
V_PEAK_BASE_KV = V_BASE_KV * np.sqrt(2.0 / 3.0)
I_PEAK_BASE_KA = I_BASE_KA * np.sqrt(2.0)


@dataclass
class SweepSpec:
    f_min: float = 1.0
    f_max: float = 200.0
    n_points: int = 40
    magnitude: float = 0.01
    kind: str = SERIES_VOLTAGE
    min_cycles: int = 10
    settle_cycles: float = 2.0
    settle_min: float = 1.0


@dataclass
class ProbeSpec:
    variant: str = HIGH_BANDWIDTH
    bandwidth_hz: float = 0.5        # used by the low-bandwidth variant
    hpf_corner: float = 0.01
    switch_release: float = 2.0
    correction: bool = True


@dataclass
class GridSpec:
    scr: float = np.inf
    x_over_r: float = 6.0
    R_g: float | None = None
    L_g: float | None = None


@dataclass
class FitSpec:
    rms_target: float = 1e-3
    max_poles: int = 20
    n_iterations: int = 8


@dataclass
class StabilitySpec:
    scr_min: float = 1.3
    scr_max: float = 4.0
    scr_step: float = 0.1
    x_over_r: float = 6.0


@dataclass
class NoiseSpec:
    amplitude: float = 0.0
    seed: int = 0


@dataclass
class SettleSpec:
    tol: float = 1e-5
    window: float = 0.5
    max_time: float = 60.0


@dataclass
class ValidateSpec:
    tol_frobenius: float = 0.02
    tol_element: float = 0.02
    tol_element_qd: float = 0.10


@dataclass
class ExperimentConfig:
    inverter: InverterParams = field(default_factory=InverterParams)
    op: OperatingPoint = field(default_factory=OperatingPoint)
    grid: GridSpec = field(default_factory=GridSpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    sim: SimConfig = field(default_factory=lambda: SimConfig(dt=50e-6, t_end=1.0,
                                                             record_decimation=10))
    probe: ProbeSpec = field(default_factory=ProbeSpec)
    fit: FitSpec = field(default_factory=FitSpec)
    stability: StabilitySpec = field(default_factory=StabilitySpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    settle: SettleSpec = field(default_factory=SettleSpec)
    validate: ValidateSpec = field(default_factory=ValidateSpec)

    def grid_params(self) -> GridParams:
        """Materialize the grid, re-solving the source for the terminal op."""
        if self.grid.R_g is not None or self.grid.L_g is not None:
            if self.grid.R_g is None or self.grid.L_g is None:
                raise ConfigError("grid.R_g and grid.L_g must be given together")
            R_g, L_g = self.grid.R_g, self.grid.L_g
        else:
            R_g, L_g = scr_to_impedance(self.grid.scr, self.grid.x_over_r)
        return solve_operating_point(R_g, L_g, self.op)

    def probe_config(self) -> MeasurementPLLConfig:
        if self.probe.variant == LOW_BANDWIDTH:
            K_p, K_i = design_pll_gains(self.probe.bandwidth_hz)
            return MeasurementPLLConfig(
                K_p=K_p, K_i=K_i, variant=LOW_BANDWIDTH,
                hpf_corner=self.probe.hpf_corner,
                switch_release=self.probe.switch_release)
        return MeasurementPLLConfig(
            hpf_corner=self.probe.hpf_corner,
            switch_release=self.probe.switch_release)

    def system_model(self) -> SystemModel:
        return SystemModel(inverter=self.inverter, op=self.op,
                           grid=self.grid_params(), probe=self.probe_config())


# maps a dotted section name to (attribute on ExperimentConfig, dataclass)
_SECTIONS = {
    "inverter": ("inverter", InverterParams),
    "op": ("op", OperatingPoint),
    "grid": ("grid", GridSpec),
    "sweep": ("sweep", SweepSpec),
    "sim": ("sim", SimConfig),
    "probe": ("probe", ProbeSpec),
    "fit": ("fit", FitSpec),
    "stability": ("stability", StabilitySpec),
    "noise": ("noise", NoiseSpec),
    "settle": ("settle", SettleSpec),
    "validate": ("validate", ValidateSpec),
}

# friendly aliases for unit-carrying sweep magnitudes
_MAGNITUDE_ALIASES = {"magnitude_pu": 1.0, "magnitude_kv": None, "magnitude_ka": None}


def _parse_value(field_type, raw: str, key: str):
    raw = raw.strip()
    if field_type is bool or field_type == "bool":
        low = raw.lower()
        if low in ("1", "true", "on", "yes"):
            return True
        if low in ("0", "false", "off", "no"):
            return False
        raise ConfigError(f"{key}: cannot parse {raw!r} as a boolean")
    if field_type is int or field_type == "int":
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: cannot parse {raw!r} as an integer") from exc
    if field_type is str or field_type == "str":
        return raw
    try:
        if raw.lower() in ("inf", "infinity"):
            return np.inf
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as a number") from exc


def parse_config_text(text: str) -> ExperimentConfig:
    """Parse `key = value` lines into a validated ExperimentConfig."""
    overrides: dict[str, dict[str, object]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if "." not in key:
            raise ConfigError(f"line {lineno}: key {key!r} needs a section prefix")
        section, name = key.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"line {lineno}: unknown section {section!r}")
        attr, cls = _SECTIONS[section]
        fields = {f.name: f for f in dataclasses.fields(cls)}
        if section == "sweep" and name in _MAGNITUDE_ALIASES:
            value = _parse_value(float, raw, key)
            if name == "magnitude_kv":
                value = value / V_PEAK_BASE_KV
            elif name == "magnitude_ka":
                value = value / I_PEAK_BASE_KA
            overrides.setdefault(section, {})["magnitude"] = value
            continue
        if name not in fields:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        ftype = fields[name].type
        if isinstance(ftype, str):
            ftype = ftype.split("|")[0].strip()
        value = _parse_value(ftype, raw, key)
        overrides.setdefault(section, {})[name] = value

    cfg_kwargs = {}
    for section, (attr, cls) in _SECTIONS.items():
        kw = overrides.get(section, {})
        try:
            cfg_kwargs[attr] = cls(**kw) if kw else None
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"section {section!r}: {exc}") from exc
    cfg = ExperimentConfig(**{k: v for k, v in cfg_kwargs.items() if v is not None})
    _cross_validate(cfg)
    return cfg


def _cross_validate(cfg: ExperimentConfig) -> None:
    if cfg.probe.hpf_corner >= cfg.sweep.f_min:
        raise ConfigError(
            f"probe.hpf_corner ({cfg.probe.hpf_corner}) must sit below the "
            f"lowest injected frequency ({cfg.sweep.f_min})")
    if cfg.sweep.kind not in (SERIES_VOLTAGE, SHUNT_CURRENT):
        raise ConfigError(f"unknown sweep.kind {cfg.sweep.kind!r}")
    if cfg.sim.fs <= 2.0 * cfg.sweep.f_max:
        raise ConfigError(
            f"recorded sampling rate {cfg.sim.fs:g} Hz cannot resolve "
            f"sweep.f_max = {cfg.sweep.f_max:g} Hz")


def load_config(path) -> ExperimentConfig:
    with open(path) as fp:
        return parse_config_text(fp.read())
