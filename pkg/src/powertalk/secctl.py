"""Consensus secondary control over a jammable wireless network.

A subset of DERs (the regulators) runs in VSC mode and executes a
distributed secondary controller over short-range radio links; the rest run
as CSCs at full output. A jammer silences every DER inside its radius, which
can split the regulators' communication graph and leave power sharing
unbalanced. Periodic power-talk phases let every DER broadcast its neighbor
list and capacity over the bus, after which all DERs pick the same new,
connected regulator set.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from powertalk.dispatch import dequantize, quantize_capacity
from powertalk.errors import InvalidArgumentError, InvalidParameterError, SizeLimitError
from powertalk.grid import Converter, GridSpec, Mode, SteadyState, solve_steady_state
from powertalk.mac import LoadChange, SessionReport, bits_to_int, int_to_bits, run_session
from powertalk.phy import PowerTalkParams

log = logging.getLogger(__name__)

MAX_SELECTION_NODES = 16


@dataclass(frozen=True)
class Jammer:
    position: tuple[float, float]
    radius: float
    active_from: float | None = 0.0

    def __post_init__(self):
        if not self.radius >= 0:
            raise InvalidParameterError(f"jammer radius must be >= 0, got {self.radius!r}")


@dataclass(frozen=True)
class WirelessSpec:
    positions: tuple[tuple[float, float], ...]
    comm_range: float
    jammers: tuple[Jammer, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "positions", tuple(tuple(map(float, p)) for p in self.positions))
        object.__setattr__(self, "jammers", tuple(self.jammers))
        if not self.comm_range > 0:
            raise InvalidParameterError(f"comm_range must be > 0, got {self.comm_range!r}")

    def jammer_active(self, j: int, t: float, overrides: dict[int, bool] | None = None) -> bool:
        if overrides and j in overrides:
            return overrides[j]
        start = self.jammers[j].active_from
        return start is not None and t >= start


def jammed_nodes(spec: WirelessSpec, t: float, overrides: dict[int, bool] | None = None) -> set[int]:
    pos = np.asarray(spec.positions)
    out: set[int] = set()
    for j, jam in enumerate(spec.jammers):
        if spec.jammer_active(j, t, overrides):
            dist = np.hypot(*(pos - np.asarray(jam.position)).T)
            out.update(int(k) for k in np.flatnonzero(dist <= jam.radius))
    return out


def build_wireless_graph(
    spec: WirelessSpec, t: float = 0.0, overrides: dict[int, bool] | None = None
) -> np.ndarray:
    """Unit-disk adjacency at time ``t``; jammed nodes lose every link."""
    pos = np.asarray(spec.positions, dtype=float)
    diff = pos[:, None, :] - pos[None, :, :]
    adj = np.hypot(diff[..., 0], diff[..., 1]) <= spec.comm_range
    np.fill_diagonal(adj, False)
    for k in jammed_nodes(spec, t, overrides):
        adj[k, :] = False
        adj[:, k] = False
    return adj


def is_connected(adjacency: np.ndarray, subset: Sequence[int]) -> bool:
    """Breadth-first reachability inside the subgraph induced by ``subset``."""
    members = set(int(k) for k in subset)
    if not members:
        raise InvalidArgumentError("subset must not be empty")
    start = next(iter(members))
    seen = {start}
    queue = deque([start])
    while queue:
        k = queue.popleft()
        for m in members:
            if m not in seen and adjacency[k, m]:
                seen.add(m)
                queue.append(m)
    return len(seen) == len(members)


def components(adjacency: np.ndarray, subset: Sequence[int]) -> list[tuple[int, ...]]:
    remaining = sorted(int(k) for k in subset)
    out = []
    while remaining:
        comp = {remaining[0]}
        queue = deque([remaining[0]])
        while queue:
            k = queue.popleft()
            for m in remaining:
                if m not in comp and adjacency[k, m]:
                    comp.add(m)
                    queue.append(m)
        out.append(tuple(sorted(comp)))
        remaining = [k for k in remaining if k not in comp]
    return out


def select_regulators(adjacency: np.ndarray, capacities: Sequence[float], k: int) -> tuple[int, ...]:
    """Connected k-subset of maximum total capacity, or () if none exists.

    Nodes without any link are never chosen (unless the graph has a single
    node). Ties go to the lexicographically smallest index tuple.
    """
    n = len(capacities)
    if n > MAX_SELECTION_NODES:
        raise SizeLimitError(f"exhaustive selection is limited to {MAX_SELECTION_NODES} nodes, got {n}")
    if not 1 <= k <= n:
        raise InvalidParameterError(f"regulator count must be in 1..{n}, got {k}")
    adj = np.asarray(adjacency, dtype=bool)
    eligible = [i for i in range(n) if n == 1 or adj[i].any()]
    best: tuple[int, ...] = ()
    best_cap = -math.inf
    for combo in itertools.combinations(eligible, k):
        total = math.fsum(capacities[i] for i in combo)
        if total > best_cap and is_connected(adj, combo):
            best, best_cap = combo, total
    return best


@dataclass(frozen=True)
class Gains:
    k_v: float = 0.05
    k_c: float = 0.05
    eps: float = 0.3


@dataclass
class SecCtlState:
    regulators: tuple[int, ...]
    correction: dict[int, float]
    v_est: dict[int, float]
    v_prev: dict[int, float]
    gains: Gains = field(default_factory=Gains)


def per_unit_current(grid: GridSpec, i_conv: np.ndarray) -> np.ndarray:
    """Output current relative to the current at full capacity and rated voltage."""
    p_max = np.array([c.p_max for c in grid.converters])
    return np.asarray(i_conv) * grid.rated_voltage / p_max


def operating_grid(nominal: GridSpec, state: SecCtlState) -> GridSpec:
    """Regulators as VSCs at nominal reference plus correction, all others as CSCs."""
    convs = []
    for k, c in enumerate(nominal.converters):
        if k in state.correction:
            x = min(max(c.reference_voltage + state.correction[k], c.x_min), c.x_max)
            convs.append(replace(c, mode=Mode.VSC, reference_voltage=x))
        else:
            convs.append(replace(c, mode=Mode.CSC, reference_voltage=c.reference_voltage))
    return replace(nominal, converters=tuple(convs))


def init_state(
    nominal: GridSpec, regulators: Sequence[int], steady: SteadyState | None = None,
    corrections: dict[int, float] | None = None, gains: Gains = Gains(),
) -> SecCtlState:
    regs = tuple(sorted(int(k) for k in regulators))
    corr = {k: (corrections or {}).get(k, 0.0) for k in regs}
    state = SecCtlState(regs, corr, {}, {}, gains)
    if steady is None:
        steady = solve_steady_state(operating_grid(nominal, state))
    v = {k: float(steady.v[nominal.converters[k].bus]) for k in regs}
    state.v_est = dict(v)
    state.v_prev = dict(v)
    return state


def consensus_step(
    state: SecCtlState, adjacency: np.ndarray, nominal: GridSpec, measurements: SteadyState
) -> SecCtlState:
    """One synchronous round of the voltage observer and current-sharing regulator.

    v_est_i += eps * sum_j (v_est_j - v_est_i) + (v_i - v_prev_i)
    dx_i    += k_v * (x_R - v_est_i) + k_c * sum_j (ipu_j - ipu_i)

    Sums run over radio neighbors that are also regulators. ``measurements``
    is the steady state of ``operating_grid(nominal, state)``.
    """
    g = state.gains
    xr = nominal.rated_voltage
    regs = state.regulators
    ipu = per_unit_current(nominal, measurements.i_conv)
    v_est, corr, v_prev = {}, {}, {}
    for i in regs:
        conv = nominal.converters[i]
        v_i = float(measurements.v[conv.bus])
        nbrs = [j for j in regs if j != i and adjacency[i, j]]
        v_est[i] = (
            state.v_est[i]
            + g.eps * sum(state.v_est[j] - state.v_est[i] for j in nbrs)
            + (v_i - state.v_prev[i])
        )
        dx = state.correction[i] + g.k_v * (xr - state.v_est[i]) + g.k_c * sum(ipu[j] - ipu[i] for j in nbrs)
        lo, hi = conv.x_min - conv.reference_voltage, conv.x_max - conv.reference_voltage
        if not lo <= dx <= hi:
            log.debug("correction of converter %d clamped to [%g, %g]", i, lo, hi)
            dx = min(max(dx, lo), hi)
        corr[i] = dx
        v_prev[i] = v_i
    return SecCtlState(regs, corr, v_est, v_prev, g)


def run_consensus(
    nominal: GridSpec, adjacency: np.ndarray, regulators: Sequence[int], steps: int, gains: Gains = Gains()
) -> tuple[SecCtlState, SteadyState]:
    """Iterate consensus_step ``steps`` times from zero corrections."""
    state = init_state(nominal, regulators, gains=gains)
    steady = solve_steady_state(operating_grid(nominal, state))
    for _ in range(steps):
        state = consensus_step(state, adjacency, nominal, steady)
        steady = solve_steady_state(operating_grid(nominal, state))
    return state, steady


def bumpless_vsc(grid: GridSpec, steady: SteadyState) -> GridSpec:
    """Switch every converter to VSC mode without moving the operating point."""
    convs = []
    for k, c in enumerate(grid.converters):
        if c.mode is Mode.CSC:
            v = steady.v[c.bus]
            x = v + c.virtual_resistance * c.injection / v
            convs.append(replace(c, mode=Mode.VSC, reference_voltage=float(x)))
        else:
            convs.append(c)
    return replace(grid, converters=tuple(convs))


def encode_der_frame(neighbors: Sequence[bool], capacity: float, q: int, p_cap: float) -> tuple[int, ...]:
    """Neighbor bitmap (one bit per DER, DER 0 first) followed by the Q-bit capacity."""
    return tuple(int(bool(b)) for b in neighbors) + int_to_bits(quantize_capacity(capacity, q, p_cap), q)


def decode_der_view(view: dict[int, Sequence[int]], n: int, q: int, p_cap: float):
    """Adjacency (edge only if both ends report it) and capacities from one DER's view."""
    bitmaps = np.array([list(view[k][:n]) for k in range(n)], dtype=bool)
    adj = bitmaps & bitmaps.T
    np.fill_diagonal(adj, False)
    caps = [dequantize(bits_to_int(view[k][n:]), q, p_cap) for k in range(n)]
    return adj, caps


@dataclass
class ReconfigOutcome:
    regulators: tuple[int, ...]
    decided: tuple[int, ...]
    unanimous: bool
    aborted: bool
    detection: bool
    report: SessionReport


def reconfiguration_round(
    pt_grid: GridSpec,
    adjacency: np.ndarray,
    capacities: Sequence[float],
    params: PowerTalkParams,
    incumbent: Sequence[int],
    *,
    k: int | None = None,
    p_cap: float,
    rng: np.random.Generator,
    start_time: float = 0.0,
    events: Sequence[LoadChange] = (),
    trace: bool = False,
) -> ReconfigOutcome:
    """Broadcast neighbor lists and capacities by power talk, then reselect.

    ``pt_grid`` has every DER in VSC mode. Each DER runs select_regulators on
    its own decoded view; the incumbent set is kept if the session aborts,
    if decisions disagree, or if no connected set exists (the last case is
    reported as a detection).
    """
    n = len(pt_grid.converters)
    incumbent = tuple(sorted(incumbent))
    k = len(incumbent) if k is None else k
    q = params.bits_per_payload
    payloads = {i: encode_der_frame(adjacency[i], capacities[i], q, p_cap) for i in range(n)}
    report = run_session(pt_grid, params, payloads, events, rng, start_time=start_time, trace=trace)
    if report.aborted:
        log.warning("power-talk session aborted; keeping regulator set %s", incumbent)
        return ReconfigOutcome(incumbent, (), False, True, False, report)
    decisions = {}
    for i in range(n):
        adj_i, caps_i = decode_der_view(report.views[i], n, q, p_cap)
        decisions[i] = select_regulators(adj_i, caps_i, k)
    unanimous = len(set(decisions.values())) == 1
    if not unanimous:
        log.error("protocol failure: regulator decisions differ across DERs")
        return ReconfigOutcome(incumbent, (), False, False, False, report)
    decided = decisions[0]
    if not decided:
        log.warning("no connected set of %d regulators exists", k)
        return ReconfigOutcome(incumbent, (), True, False, True, report)
    return ReconfigOutcome(decided, decided, True, False, False, report)


@dataclass(frozen=True)
class JammerSwitch:
    time: float
    index: int
    active: bool


@dataclass(frozen=True)
class TimelineConfig:
    step: float = 0.01
    duration: float = 16.0
    powertalk_period: float = 4.0
    powertalk_offset: float = 4.0
    initial_regulators: tuple[int, ...] = ()
    regulator_count: int | None = None
    capacity_range: float = 1000.0
    gains: Gains = Gains()

    def __post_init__(self):
        if not (self.step > 0 and self.duration > 0 and self.powertalk_period > 0):
            raise InvalidParameterError("step, duration and powertalk_period must be > 0")
        if not self.initial_regulators:
            raise InvalidParameterError("initial_regulators must not be empty")


@dataclass
class TimelineTrace:
    der_ids: tuple[int, ...]
    times: list[float] = field(default_factory=list)
    currents: list[np.ndarray] = field(default_factory=list)
    voltages: list[np.ndarray] = field(default_factory=list)
    modes: list[tuple[str, ...]] = field(default_factory=list)
    regulators: list[tuple[int, ...]] = field(default_factory=list)
    phases: list[str] = field(default_factory=list)
    events: list[tuple[float, str]] = field(default_factory=list)
    reconfigurations: list[ReconfigOutcome] = field(default_factory=list)

    def append(self, t, currents, voltages, modes, regulators, phase):
        if self.times and not t > self.times[-1]:
            raise InvalidArgumentError("trace time must be strictly increasing")
        self.times.append(float(t))
        self.currents.append(np.asarray(currents, dtype=float))
        self.voltages.append(np.asarray(voltages, dtype=float))
        self.modes.append(tuple(modes))
        self.regulators.append(tuple(regulators))
        self.phases.append(phase)

    def index_at(self, t: float) -> int:
        """Index of the last sample at or before ``t``."""
        return max(0, int(np.searchsorted(self.times, t, side="right")) - 1)

    def to_csv(self, path) -> None:
        annotations: dict[int, list[str]] = {}
        for t, text in self.events:
            annotations.setdefault(self.index_at(t), []).append(text)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(
                ["t_seconds", "der_id", "mode", "i_out_amps", "v_bus_volts", "regulator_flag", "phase", "event"]
            )
            for s, t in enumerate(self.times):
                note = ";".join(annotations.get(s, []))
                for k, der in enumerate(self.der_ids):
                    writer.writerow(
                        [
                            f"{t:.6f}",
                            der,
                            self.modes[s][k],
                            repr(float(self.currents[s][k])),
                            repr(float(self.voltages[s][k])),
                            int(k in self.regulators[s]),
                            self.phases[s],
                            note,
                        ]
                    )


def run_timeline(
    nominal: GridSpec,
    wireless: WirelessSpec,
    params: PowerTalkParams,
    config: TimelineConfig,
    events: Sequence[LoadChange | JammerSwitch] = (),
    seed: int = 0,
) -> TimelineTrace:
    """Secondary control interleaved with periodic power-talk reconfiguration.

    Time advances in steps of ``config.step``. At each power-talk instant the
    corrections freeze, every DER temporarily becomes a VSC around its
    present operating point, the session runs slot by slot, and the decided
    regulator set takes over with bumpless corrections.
    """
    from powertalk.sim.rng import derive_substream

    n = len(nominal.converters)
    if len(wireless.positions) != n:
        raise InvalidArgumentError(f"{len(wireless.positions)} DER positions for {n} converters")
    k = config.regulator_count or len(config.initial_regulators)
    der_ids = tuple(range(1, n + 1))
    buses = [c.bus for c in nominal.converters]
    caps = [c.p_max for c in nominal.converters]
    trace = TimelineTrace(der_ids)
    pending = sorted(events, key=lambda e: e.time)
    jam_override: dict[int, bool] = {}

    dt = config.step
    total = int(round(config.duration / dt))
    state = init_state(nominal, config.initial_regulators, gains=config.gains)
    steady = solve_steady_state(operating_grid(nominal, state))
    next_pt = config.powertalk_offset
    pt_round = 0
    step = 0

    def modes_of(st):
        return tuple("VSC" if i in st.correction else "CSC" for i in range(n))

    def apply_events(upto: float):
        nonlocal nominal, pending
        changed = False
        while pending and pending[0].time <= upto + 1e-12:
            ev = pending.pop(0)
            if isinstance(ev, LoadChange):
                nominal = ev.apply(nominal)
                trace.events.append((ev.time, f"load_change bus={ev.bus}"))
                changed = True
            else:
                jam_override[ev.index] = ev.active
                trace.events.append((ev.time, f"jammer_{'on' if ev.active else 'off'} {ev.index}"))
        for j, jam in enumerate(wireless.jammers):
            if jam.active_from is not None and j not in jam_override and prev_t < jam.active_from <= upto:
                trace.events.append((jam.active_from, f"jammer_on {j}"))
        return changed

    prev_t = -math.inf
    while step < total:
        t = step * dt
        if apply_events(t):
            steady = solve_steady_state(operating_grid(nominal, state))
        prev_t = t
        if t + 1e-12 >= next_pt:
            # power-talk phase: corrections frozen, all DERs signal as VSCs
            adj = build_wireless_graph(wireless, t, jam_override)
            op_grid = operating_grid(nominal, state)
            pt_grid = bumpless_vsc(op_grid, steady)
            window_events = [e for e in pending if isinstance(e, LoadChange)]
            outcome = reconfiguration_round(
                pt_grid,
                adj,
                caps,
                params,
                state.regulators,
                k=k,
                p_cap=config.capacity_range,
                rng=derive_substream(seed, f"powertalk:{pt_round}"),
                start_time=t,
                events=window_events,
                trace=True,
            )
            pt_round += 1
            trace.reconfigurations.append(outcome)
            records = outcome.report.per_slot_log or []
            end = outcome.report.end_time
            all_vsc = ("VSC",) * n
            while step < total and step * dt < end - 1e-12:
                ts = step * dt
                rec = None
                for r in records:
                    if r.time <= ts + 1e-12:
                        rec = r
                    else:
                        break
                if rec is None:
                    cur, volt = steady.i_conv, steady.v[buses]
                else:
                    cur, volt = rec.i_conv, rec.v[buses]
                trace.append(ts, cur, volt, all_vsc, state.regulators, "powertalk")
                step += 1
            # loads that changed during the session stay changed
            apply_events(end)
            if outcome.detection:
                trace.events.append((end, "detection: no connected regulator set"))
            elif outcome.aborted:
                trace.events.append((end, "powertalk aborted"))
            elif not outcome.unanimous:
                trace.events.append((end, "protocol failure"))
            new_regs = outcome.regulators
            if new_regs != state.regulators:
                trace.events.append(
                    (end, "reconfigure " + "{" + ",".join(str(der_ids[i]) for i in new_regs) + "}")
                )
                keep = {i: state.correction[i] for i in new_regs if i in state.correction}
                for i in new_regs:
                    if i not in keep:
                        # bumpless: start from the reference it signaled around
                        c = pt_grid.converters[i]
                        keep[i] = c.reference_voltage - nominal.converters[i].reference_voltage
            else:
                keep = state.correction
            state = init_state(nominal, new_regs, corrections=keep, gains=config.gains)
            steady = solve_steady_state(operating_grid(nominal, state))
            while next_pt <= step * dt + 1e-12:
                next_pt += config.powertalk_period
            continue

        trace.append(t, steady.i_conv, steady.v[buses], modes_of(state), state.regulators, "secondary")
        adj = build_wireless_graph(wireless, t, jam_override)
        state = consensus_step(state, adj, nominal, steady)
        steady = solve_steady_state(operating_grid(nominal, state))
        step += 1
    return trace
