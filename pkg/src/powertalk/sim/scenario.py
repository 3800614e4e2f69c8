"""Scenario files: YAML with unit-suffixed keys, validated eagerly.

A scenario names a grid, power-talk parameters, an optional application
(``dispatch`` or ``secctl``), an optional ``ber`` section, timed events and a
seed. ``load_scenario`` checks every invariant up front and reports the
offending key path; ``dump_scenario`` writes the canonical echo (defaults
filled in, keys in schema order) which loads back to the same scenario.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from powertalk.dispatch import DispatchConfig
from powertalk.errors import PowerTalkError, ScenarioError
from powertalk.grid import BusLoad, Converter, GridSpec, Line, Mode
from powertalk.mac import LoadChange
from powertalk.phy import PowerTalkParams
from powertalk.secctl import Gains, Jammer, JammerSwitch, TimelineConfig, WirelessSpec

SHIPPED = ("eq1", "fig5b", "fig6")


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class LoadModel(_Model):
    d_cp_watts: float = Field(0.0, ge=0)
    d_cc_watts: float = Field(0.0, ge=0)
    d_ca_watts: float = Field(0.0, ge=0)

    def build(self) -> BusLoad:
        return BusLoad(self.d_cp_watts, self.d_cc_watts, self.d_ca_watts)


class LineModel(_Model):
    bus_a: int = Field(ge=0)
    bus_b: int = Field(ge=0)
    resistance_ohms: float = Field(gt=0)

    @model_validator(mode="after")
    def _ends(self):
        if self.bus_a == self.bus_b:
            raise ValueError(f"line connects bus {self.bus_a} to itself")
        return self


class ConverterModel(_Model):
    bus: int = Field(ge=0)
    mode: Literal["VSC", "CSC"] = "VSC"
    reference_voltage_volts: float = Field(48.0, gt=0)
    virtual_resistance_ohms: float = Field(0.2, gt=0)
    p_max_watts: float = Field(0.0, ge=0)
    incremental_cost: float = Field(1.0, gt=0)
    x_min_volts: float = Field(0.0, ge=0)
    x_max_volts: float = math.inf
    r_d_min_ohms: float = Field(0.0, ge=0)
    r_d_max_ohms: float = math.inf
    csc_power_watts: Optional[float] = None

    @model_validator(mode="after")
    def _limits(self):
        if self.x_min_volts > self.x_max_volts:
            raise ValueError("x_min_volts exceeds x_max_volts")
        if self.mode == "VSC" and not self.x_min_volts <= self.reference_voltage_volts <= self.x_max_volts:
            raise ValueError("reference_voltage_volts lies outside [x_min_volts, x_max_volts]")
        if self.mode == "VSC" and not self.r_d_min_ohms <= self.virtual_resistance_ohms <= self.r_d_max_ohms:
            raise ValueError("virtual_resistance_ohms lies outside [r_d_min_ohms, r_d_max_ohms]")
        return self


class GridModel(_Model):
    rated_voltage_volts: float = Field(gt=0)
    buses: list[LoadModel] = Field(min_length=1)
    lines: list[LineModel] = []
    converters: list[ConverterModel] = Field(min_length=1)

    @model_validator(mode="after")
    def _indices(self):
        n = len(self.buses)
        for k, line in enumerate(self.lines):
            for end in (line.bus_a, line.bus_b):
                if end >= n:
                    raise ValueError(f"lines[{k}] references bus {end}; only {n} buses exist")
        for k, conv in enumerate(self.converters):
            if conv.bus >= n:
                raise ValueError(f"converters[{k}] references bus {conv.bus}; only {n} buses exist")
        if not any(c.mode == "VSC" for c in self.converters):
            raise ValueError("at least one converter must be in VSC mode")
        return self

    def build(self) -> GridSpec:
        convs = tuple(
            Converter(
                bus=c.bus,
                mode=Mode(c.mode),
                reference_voltage=c.reference_voltage_volts,
                virtual_resistance=c.virtual_resistance_ohms,
                p_max=c.p_max_watts,
                incremental_cost=c.incremental_cost,
                x_min=c.x_min_volts,
                x_max=c.x_max_volts,
                r_d_min=c.r_d_min_ohms,
                r_d_max=c.r_d_max_ohms,
                csc_power=c.csc_power_watts,
            )
            for c in self.converters
        )
        lines = tuple(Line(l.bus_a, l.bus_b, l.resistance_ohms) for l in self.lines)
        return GridSpec(self.rated_voltage_volts, tuple(b.build() for b in self.buses), lines, convs)


class PowerTalkModel(_Model):
    gamma_volts: float = Field(0.25, ge=0)
    slot_duration_s: float = Field(5e-3, gt=0)
    sampling_frequency_hz: float = Field(50e3, gt=0)
    noise_sigma_volts: float = Field(0.05, ge=0)
    bits_per_payload: int = Field(4, ge=1)
    crc_enabled: bool = False
    max_retries: int = Field(3, ge=0)
    baseline_slots: int = Field(20, ge=1)

    def build(self) -> PowerTalkParams:
        return PowerTalkParams(
            gamma=self.gamma_volts,
            slot_duration=self.slot_duration_s,
            sampling_frequency=self.sampling_frequency_hz,
            noise_sigma=self.noise_sigma_volts,
            bits_per_payload=self.bits_per_payload,
            crc_enabled=self.crc_enabled,
            max_retries=self.max_retries,
            baseline_slots=self.baseline_slots,
        )


class DispatchModel(_Model):
    demand_watts: float = Field(gt=0)
    capacity_range_watts: float = Field(gt=0)
    period_duration_s: float = Field(300.0, gt=0)
    penalty_cost: Optional[float] = None
    monte_carlo_runs: int = Field(500, ge=1)
    include_overhead: bool = True
    q_range: list[int] = Field([1, 2, 3, 4, 5, 6, 7, 8, 9, 10], min_length=1)
    gamma_range_volts: list[float] = Field([0.25], min_length=1)

    @field_validator("q_range")
    @classmethod
    def _q(cls, v):
        if any(q < 1 for q in v):
            raise ValueError("every Q must be >= 1")
        return v

    @field_validator("gamma_range_volts")
    @classmethod
    def _g(cls, v):
        if any(not g > 0 for g in v):
            raise ValueError("every gamma must be > 0")
        return v


class JammerModel(_Model):
    position_m: tuple[float, float]
    radius_m: float = Field(ge=0)
    active_from_s: Optional[float] = 0.0


class GainsModel(_Model):
    k_v: float = Field(0.05, gt=0)
    k_c: float = Field(0.05, gt=0)
    eps: float = Field(0.3, gt=0)


class SecCtlModel(_Model):
    positions_m: list[tuple[float, float]] = Field(min_length=1)
    comm_range_m: float = Field(gt=0)
    jammers: list[JammerModel] = []
    gains: GainsModel = GainsModel()
    step_s: float = Field(0.01, gt=0)
    duration_s: float = Field(16.0, gt=0)
    powertalk_period_s: float = Field(4.0, gt=0)
    powertalk_offset_s: float = Field(4.0, ge=0)
    initial_regulators: list[int] = Field(min_length=1)
    regulator_count: Optional[int] = Field(None, ge=1)
    capacity_range_watts: float = Field(1000.0, gt=0)

    @model_validator(mode="after")
    def _regs(self):
        n = len(self.positions_m)
        if len(set(self.initial_regulators)) != len(self.initial_regulators):
            raise ValueError("initial_regulators contains duplicates")
        for r in self.initial_regulators:
            if not 0 <= r < n:
                raise ValueError(f"initial_regulators references DER index {r}; only {n} DERs exist")
        if self.regulator_count is not None and self.regulator_count > n:
            raise ValueError("regulator_count exceeds the number of DERs")
        return self


class ApplicationModel(_Model):
    dispatch: Optional[DispatchModel] = None
    secctl: Optional[SecCtlModel] = None

    @model_validator(mode="after")
    def _one(self):
        if (self.dispatch is None) == (self.secctl is None):
            raise ValueError("exactly one of 'dispatch' or 'secctl' must be given")
        return self


class BerModel(_Model):
    transmitter: int = Field(0, ge=0)
    receiver_bus: int = Field(0, ge=0)
    trials: int = Field(100_000, ge=1)
    gamma_range_volts: list[float] = Field([0.02, 0.1, 1.0], min_length=1)


class LoadChangeEvent(_Model):
    kind: Literal["load_change"]
    time_s: float = Field(ge=0)
    bus: int = Field(ge=0)
    load: LoadModel


class JammerEvent(_Model):
    kind: Literal["jammer_on", "jammer_off"]
    time_s: float = Field(ge=0)
    index: int = Field(ge=0)


Event = Annotated[Union[LoadChangeEvent, JammerEvent], Field(discriminator="kind")]


class ScenarioModel(_Model):
    name: str = "scenario"
    seed: int = Field(0, ge=0, lt=2**64)
    grid: GridModel
    powertalk: PowerTalkModel = PowerTalkModel()
    application: Optional[ApplicationModel] = None
    ber: Optional[BerModel] = None
    events: list[Event] = []

    @model_validator(mode="after")
    def _cross(self):
        times = [e.time_s for e in self.events]
        if times != sorted(times):
            raise ValueError("events must be sorted by time_s")
        n_bus = len(self.grid.buses)
        jammers = self.application.secctl.jammers if self.application and self.application.secctl else []
        for k, ev in enumerate(self.events):
            if isinstance(ev, LoadChangeEvent) and ev.bus >= n_bus:
                raise ValueError(f"events[{k}] references bus {ev.bus}; only {n_bus} buses exist")
            if isinstance(ev, JammerEvent) and ev.index >= len(jammers):
                raise ValueError(f"events[{k}] references jammer {ev.index}; {len(jammers)} defined")
        if self.ber is not None:
            if self.ber.transmitter >= len(self.grid.converters):
                raise ValueError("ber.transmitter references a missing converter")
            if self.ber.receiver_bus >= n_bus:
                raise ValueError("ber.receiver_bus references a missing bus")
        if self.application and self.application.secctl:
            if len(self.application.secctl.positions_m) != len(self.grid.converters):
                raise ValueError("secctl.positions_m needs one position per converter")
        return self


@dataclass(frozen=True)
class Scenario:
    name: str
    seed: int
    grid: GridSpec
    powertalk: PowerTalkParams
    dispatch: DispatchConfig | None
    dispatch_q_range: tuple[int, ...]
    dispatch_gamma_range: tuple[float, ...]
    wireless: WirelessSpec | None
    timeline: TimelineConfig | None
    ber: BerModel | None
    events: tuple
    model: ScenarioModel


def _loc(err: dict) -> str:
    parts = []
    for p in err["loc"]:
        if isinstance(p, int):
            parts.append(f"[{p}]")
        elif p in ("load_change", "jammer_on", "jammer_off", "LoadChangeEvent", "JammerEvent"):
            continue
        else:
            parts.append(("." if parts else "") + str(p))
    return "".join(parts) or "<root>"


def _check_swing(model: ScenarioModel, grid: GridSpec) -> None:
    gammas = [model.powertalk.gamma_volts]
    app = model.application
    if app and app.dispatch:
        gammas += app.dispatch.gamma_range_volts
    if model.ber is not None:
        gammas += model.ber.gamma_range_volts
    gamma = max(gammas)
    for k, c in enumerate(grid.converters):
        if c.mode is not Mode.VSC and not (app and app.secctl):
            continue
        if c.reference_voltage - gamma < c.x_min or c.reference_voltage + gamma > c.x_max:
            raise ScenarioError(
                f"grid.converters[{k}]: reference {c.reference_voltage} V +/- gamma {gamma} V "
                f"leaves [{c.x_min}, {c.x_max}] V"
            )


def build_scenario(model: ScenarioModel) -> Scenario:
    try:
        grid = model.grid.build()
        params = model.powertalk.build()
    except PowerTalkError as err:
        raise ScenarioError(f"grid: {err}") from err
    _check_swing(model, grid)
    dispatch = wireless = timeline = None
    q_range: tuple[int, ...] = ()
    g_range: tuple[float, ...] = ()
    app = model.application
    if app and app.dispatch:
        d = app.dispatch
        costs = tuple(c.incremental_cost for c in grid.converters if c.mode is Mode.VSC)
        try:
            dispatch = DispatchConfig(
                costs=costs,
                demand=d.demand_watts,
                capacity_range=d.capacity_range_watts,
                period_duration=d.period_duration_s,
                penalty_cost=d.penalty_cost,
                monte_carlo_runs=d.monte_carlo_runs,
                include_overhead=d.include_overhead,
            )
        except PowerTalkError as err:
            raise ScenarioError(f"application.dispatch: {err}") from err
        q_range, g_range = tuple(d.q_range), tuple(d.gamma_range_volts)
    if app and app.secctl:
        s = app.secctl
        wireless = WirelessSpec(
            tuple(s.positions_m),
            s.comm_range_m,
            tuple(Jammer(tuple(j.position_m), j.radius_m, j.active_from_s) for j in s.jammers),
        )
        timeline = TimelineConfig(
            step=s.step_s,
            duration=s.duration_s,
            powertalk_period=s.powertalk_period_s,
            powertalk_offset=s.powertalk_offset_s,
            initial_regulators=tuple(s.initial_regulators),
            regulator_count=s.regulator_count,
            capacity_range=s.capacity_range_watts,
            gains=Gains(s.gains.k_v, s.gains.k_c, s.gains.eps),
        )
    events = []
    for ev in model.events:
        if isinstance(ev, LoadChangeEvent):
            events.append(LoadChange(ev.time_s, ev.bus, ev.load.build()))
        else:
            events.append(JammerSwitch(ev.time_s, ev.index, ev.kind == "jammer_on"))
    return Scenario(
        name=model.name,
        seed=model.seed,
        grid=grid,
        powertalk=params,
        dispatch=dispatch,
        dispatch_q_range=q_range,
        dispatch_gamma_range=g_range,
        wireless=wireless,
        timeline=timeline,
        ber=model.ber,
        events=tuple(events),
        model=model,
    )


def parse_scenario(data) -> Scenario:
    """Validate an already-parsed mapping."""
    if not isinstance(data, dict):
        raise ScenarioError("<root>: scenario must be a mapping")
    try:
        model = ScenarioModel.model_validate(data)
    except ValidationError as exc:
        msgs = [f"{_loc(e)}: {e['msg']}" for e in exc.errors()]
        raise ScenarioError("; ".join(msgs)) from None
    return build_scenario(model)


def shipped_path(name: str) -> Path:
    return Path(str(resources.files("powertalk.sim") / "scenarios" / f"{name}.yaml"))


def resolve(path_or_name) -> Path:
    """A file path, or the name of a shipped scenario."""
    p = Path(path_or_name)
    if p.exists():
        return p
    if str(path_or_name) in SHIPPED:
        return shipped_path(str(path_or_name))
    raise ScenarioError(f"scenario file not found: {path_or_name}")


def load_scenario(path) -> Scenario:
    path = resolve(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ScenarioError(f"{path}: parse error: {exc}") from None
    return parse_scenario(data)


def canonical_dict(scenario: Scenario) -> dict:
    return scenario.model.model_dump(mode="json")


def dump_scenario(scenario: Scenario) -> str:
    """Canonical YAML echo; infinite limits are written as .inf."""
    return yaml.safe_dump(_restore_inf(canonical_dict(scenario)), sort_keys=False, allow_unicode=False)


def _restore_inf(obj):
    # pydantic's json mode renders inf as None; put it back for YAML
    if isinstance(obj, dict):
        out = {}
        for k, v in obj.items():
            if v is None and k in ("x_max_volts", "r_d_max_ohms"):
                v = math.inf
            out[k] = _restore_inf(v)
        return out
    if isinstance(obj, list):
        return [_restore_inf(v) for v in obj]
    return obj
