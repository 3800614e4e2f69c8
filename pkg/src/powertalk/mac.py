"""Power-talk link layer: TDMA schedule, CRC-8 framing and session execution."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from powertalk.errors import InvalidArgumentError, InvalidParameterError, PowerTalkError
from powertalk.grid import BusLoad, GridSpec, Mode, solve_cached
from powertalk.phy import PowerTalkParams, apply_symbol, baseline_noise, detect_bit, observe_many
from powertalk.sim.rng import node_streams

CRC_BITS = 8
CRC_POLY = 0x07


@dataclass(frozen=True)
class TdmaSchedule:
    num_units: int
    bits_per_unit: int
    crc: bool
    slot_assignments: tuple[tuple[int, int], ...]

    @property
    def frame_length(self) -> int:
        return self.bits_per_unit + (CRC_BITS if self.crc else 0)

    @property
    def total_slots(self) -> int:
        return len(self.slot_assignments)

    def subphase(self, unit: int) -> range:
        length = self.frame_length
        return range(unit * length, (unit + 1) * length)


def build_schedule(num_units: int, bits_per_unit: int, crc: bool = False) -> TdmaSchedule:
    """Contiguous sub-phases in unit order; slot -> (unit, bit position in frame)."""
    if num_units < 1 or bits_per_unit < 1:
        raise InvalidParameterError("schedule needs at least one unit and one bit per unit")
    length = bits_per_unit + (CRC_BITS if crc else 0)
    slots = tuple((u, b) for u in range(num_units) for b in range(length))
    return TdmaSchedule(num_units, bits_per_unit, crc, slots)


def crc8(bits: Sequence[int]) -> int:
    """CRC-8, polynomial 0x07, init 0, MSB first, no reflection, no final XOR.

    Leading zero bits leave a zero register unchanged, so this equals the CRC
    of the bit string left-padded to whole bytes.
    """
    reg = 0
    for b in bits:
        feedback = ((reg >> 7) & 1) ^ (b & 1)
        reg = (reg << 1) & 0xFF
        if feedback:
            reg ^= CRC_POLY
    return reg


def int_to_bits(value: int, width: int) -> tuple[int, ...]:
    return tuple((value >> (width - 1 - k)) & 1 for k in range(width))


def bits_to_int(bits: Sequence[int]) -> int:
    value = 0
    for b in bits:
        value = (value << 1) | (b & 1)
    return value


@dataclass(frozen=True)
class Frame:
    payload_bits: tuple[int, ...]
    crc_bits: tuple[int, ...] | None = None

    @property
    def bits(self) -> tuple[int, ...]:
        return self.payload_bits + (self.crc_bits or ())


class CrcMismatch(PowerTalkError):
    """A received frame failed its CRC check."""

    kind = "crc-failure"

    def __init__(self, payload: tuple[int, ...]):
        super().__init__("CRC check failed")
        self.payload = payload


def encode_frame(payload: Sequence[int], crc: bool) -> Frame:
    bits = tuple(int(b) for b in payload)
    if any(b not in (0, 1) for b in bits):
        raise InvalidParameterError("payload must contain only 0/1 bits")
    return Frame(bits, int_to_bits(crc8(bits), CRC_BITS) if crc else None)


def decode_frame(bits: Sequence[int], crc: bool) -> tuple[int, ...]:
    """Strip and verify the CRC; raises CrcMismatch on failure."""
    bits = tuple(int(b) for b in bits)
    if not crc:
        return bits
    if len(bits) <= CRC_BITS:
        raise InvalidArgumentError("frame is not longer than its CRC")
    payload = bits[:-CRC_BITS]
    if crc8(bits) != 0:
        raise CrcMismatch(payload)
    return payload


@dataclass(frozen=True)
class LoadChange:
    time: float
    bus: int
    load: BusLoad

    def apply(self, grid: GridSpec) -> GridSpec:
        return grid.with_load(self.bus, self.load)


@dataclass
class SlotRecord:
    attempt: int
    slot: int
    time: float
    transmitter: int
    bit: int
    v: np.ndarray
    i_conv: np.ndarray
    observations: dict[int, float]
    decisions: dict[int, int]


@dataclass
class SessionReport:
    views: dict[int, dict[int, tuple[int, ...]]]
    energy_overhead_wh: float
    energy_overhead_by_tx: dict[int, float]
    retries: int
    aborted: bool
    crc_failures: list[tuple[int, int, int]] = field(default_factory=list)
    per_slot_log: list[SlotRecord] | None = None
    start_time: float = 0.0
    end_time: float = 0.0
    final_grid: GridSpec | None = None
    transmitters: tuple[int, ...] = ()
    receivers: tuple[int, ...] = ()
    baselines: dict[int, float] = field(default_factory=dict)


def _grid_at(grid: GridSpec, events: Sequence[LoadChange], applied: int, t_end: float):
    """Apply pending events that fall before ``t_end``; returns (grid, applied count)."""
    while applied < len(events) and events[applied].time < t_end:
        grid = events[applied].apply(grid)
        applied += 1
    return grid, applied


def run_session(
    grid: GridSpec,
    params: PowerTalkParams,
    payloads: Mapping[int, Sequence[int]] | Sequence[Sequence[int]],
    events: Sequence[LoadChange] = (),
    rng: np.random.Generator | None = None,
    *,
    receivers: Sequence[int] | None = None,
    start_time: float = 0.0,
    trace: bool = False,
) -> SessionReport:
    """Run one power-talk phase, retrying the whole phase on CRC failures.

    ``payloads`` maps transmitting converter index -> bits; a plain sequence is
    assigned to the grid's VSCs in index order. Event times are absolute and
    share the clock with ``start_time``; an event takes effect from the slot
    it falls in. Each attempt opens with ``params.baseline_slots`` silent slots
    in which every receiver measures its baseline.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if not isinstance(payloads, Mapping):
        vscs = [k for k, c in enumerate(grid.converters) if c.mode is Mode.VSC]
        if len(payloads) != len(vscs):
            raise InvalidArgumentError(f"{len(payloads)} payloads for {len(vscs)} VSCs")
        payloads = dict(zip(vscs, payloads))
    transmitters = tuple(payloads)
    lengths = {len(p) for p in payloads.values()}
    if len(lengths) != 1:
        raise InvalidArgumentError("all payloads must have the same length")
    q = lengths.pop()
    if q < 1:
        raise InvalidArgumentError("payloads must not be empty")
    receivers = tuple(transmitters if receivers is None else receivers)
    for k in transmitters + receivers:
        if not 0 <= k < len(grid.converters):
            raise InvalidArgumentError(f"converter index {k} out of range")

    schedule = build_schedule(len(transmitters), q, params.crc_enabled)
    frames = {tx: encode_frame(payloads[tx], params.crc_enabled).bits for tx in transmitters}
    streams = dict(zip(receivers, node_streams(rng, len(receivers))))
    events = sorted((e for e in events if e.time >= start_time), key=lambda e: e.time)
    ts = params.slot_duration

    clock = start_time
    applied = 0
    retries = 0
    aborted = False
    overhead = 0.0
    overhead_tx = {tx: 0.0 for tx in transmitters}
    failures: list[tuple[int, int, int]] = []
    log: list[SlotRecord] | None = [] if trace else None
    attempt = 0
    # (events applied, transmitter, bit) -> (steady state, deviation energy)
    symbol_cache: dict[tuple[int, int, int], tuple] = {}
    n_slots = schedule.total_slots
    bus_of = {r: grid.converters[r].bus for r in receivers}
    load_grid = grid
    while True:
        load_grid, applied = _grid_at(load_grid, events, applied, clock + ts)
        v_base = solve_cached(load_grid).v
        baselines = {r: float(v_base[bus_of[r]]) + baseline_noise(params, streams[r]) for r in receivers}
        # slot-average noise for every data slot, drawn per receiver and attempt
        noise = {r: observe_many(np.zeros(n_slots), params, streams[r]) for r in receivers}
        clock += ts * params.baseline_slots
        received = {r: {tx: [] for tx in transmitters if tx != r} for r in receivers}
        for slot, (unit, pos) in enumerate(schedule.slot_assignments):
            load_grid, applied = _grid_at(load_grid, events, applied, clock + ts)
            tx = transmitters[unit]
            bit = frames[tx][pos]
            key = (applied, tx, bit)
            if key not in symbol_cache:
                nominal = solve_cached(load_grid)
                state = solve_cached(apply_symbol(load_grid, tx, bit, params))
                energy = float(np.sum(np.abs(state.p_conv - nominal.p_conv))) * ts / 3600.0
                symbol_cache[key] = (state, energy)
            state, energy = symbol_cache[key]
            overhead += energy
            overhead_tx[tx] += energy
            obs: dict[int, float] = {}
            dec: dict[int, int] = {}
            for r in receivers:
                if r == tx:
                    continue  # half duplex
                obs[r] = float(state.v[bus_of[r]] + noise[r][slot])
                dec[r] = detect_bit(obs[r], baselines[r])
                received[r][tx].append(dec[r])
            if log is not None:
                log.append(
                    SlotRecord(attempt, slot, clock, tx, bit, state.v.copy(), state.i_conv.copy(), obs, dec)
                )
            clock += ts

        views: dict[int, dict[int, tuple[int, ...]]] = {}
        attempt_failed = False
        for r in receivers:
            view = {}
            for tx in transmitters:
                if tx == r:
                    view[tx] = tuple(payloads[tx])
                    continue
                try:
                    view[tx] = decode_frame(received[r][tx], params.crc_enabled)
                except CrcMismatch as err:
                    view[tx] = err.payload
                    failures.append((attempt, r, tx))
                    attempt_failed = True
            views[r] = view
        if not attempt_failed:
            break
        if retries >= params.max_retries:
            aborted = True
            break
        retries += 1
        attempt += 1

    final_grid, _ = _grid_at(load_grid, events, applied, clock)
    return SessionReport(
        views=views,
        energy_overhead_wh=overhead,
        energy_overhead_by_tx=overhead_tx,
        retries=retries,
        aborted=aborted,
        crc_failures=failures,
        per_slot_log=log,
        start_time=start_time,
        end_time=clock,
        final_grid=final_grid,
        transmitters=transmitters,
        receivers=receivers,
        baselines=baselines,
    )


def session_duration(params: PowerTalkParams, num_units: int, payload_bits: int) -> float:
    """Length of one error-free attempt, baseline window included."""
    schedule = build_schedule(num_units, payload_bits, params.crc_enabled)
    return (schedule.total_slots + params.baseline_slots) * params.slot_duration


def write_slot_trace(report: SessionReport, path, num_buses: int) -> None:
    """Per-slot CSV: true bus voltages, per-receiver observations and decisions."""
    if report.per_slot_log is None:
        raise InvalidArgumentError("session was run without trace=True")
    header = ["attempt", "slot", "t_seconds", "transmitter", "bit"]
    header += [f"v_bus_{n}" for n in range(num_buses)]
    header += [f"obs_{r}" for r in report.receivers]
    header += [f"decision_{r}" for r in report.receivers]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for rec in report.per_slot_log:
            row = [rec.attempt, rec.slot, repr(round(rec.time, 9)), rec.transmitter, rec.bit]
            row += [repr(float(x)) for x in rec.v]
            row += [repr(rec.observations[r]) if r in rec.observations else "" for r in report.receivers]
            row += [rec.decisions.get(r, "") for r in report.receivers]
            writer.writerow(row)
