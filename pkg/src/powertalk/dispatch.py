"""Distributed optimal economic dispatch over power talk.

Units are indexed in merit order (strictly increasing incremental cost).
Before each dispatch period every unit broadcasts its floor-quantized
capacity in its TDMA sub-phase; unit u then produces what the demand leaves
after the capacities it decoded for the cheaper units. The cost of power
talk is the realized cost increase against perfect, free information, plus
the energy spent on the signaling deviations.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from powertalk.errors import InvalidParameterError, PowerTalkWarning
from powertalk.grid import GridSpec, Mode
from powertalk.mac import bits_to_int, int_to_bits, run_session
from powertalk.phy import PowerTalkParams
from powertalk.sim.rng import derive_substream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DispatchConfig:
    costs: tuple[float, ...]
    demand: float
    capacity_range: float
    period_duration: float = 300.0
    penalty_cost: float | None = None
    monte_carlo_runs: int = 500
    include_overhead: bool = True

    def __post_init__(self):
        object.__setattr__(self, "costs", tuple(float(c) for c in self.costs))
        if not self.costs:
            raise InvalidParameterError("costs must not be empty")
        if any(c <= 0 for c in self.costs):
            raise InvalidParameterError("costs must be > 0")
        if any(b <= a for a, b in zip(self.costs, self.costs[1:])):
            raise InvalidParameterError("costs must be strictly increasing with unit index")
        if not self.demand > 0:
            raise InvalidParameterError(f"demand must be > 0, got {self.demand!r}")
        if not self.capacity_range > 0:
            raise InvalidParameterError(f"capacity_range must be > 0, got {self.capacity_range!r}")
        if not self.period_duration > 0:
            raise InvalidParameterError("period_duration must be > 0")
        if self.monte_carlo_runs < 1:
            raise InvalidParameterError("monte_carlo_runs must be >= 1")
        if self.penalty_cost is None:
            object.__setattr__(self, "penalty_cost", 10.0 * self.costs[-1])
        if not self.penalty_cost > self.costs[-1]:
            raise InvalidParameterError("penalty_cost must exceed the most expensive unit's cost")

    @property
    def num_units(self) -> int:
        return len(self.costs)


@dataclass
class DispatchResult:
    setpoints: np.ndarray
    served: float
    unserved: float
    generation_cost_rate: float


def quantize_capacity(p: float, q: int, p_cap: float) -> int:
    """Floor quantizer: code = floor(p * 2**q / p_cap), saturating at 2**q - 1."""
    if q < 1:
        raise InvalidParameterError(f"q must be >= 1, got {q!r}")
    if not 0.0 <= p <= p_cap:
        log.warning("capacity %r outside [0, %r]; clamping", p, p_cap)
        p = min(max(p, 0.0), p_cap)
    return min(int(math.floor(p * 2**q / p_cap)), 2**q - 1)


def dequantize(code: int, q: int, p_cap: float) -> float:
    return code * p_cap / 2**q


def merit_order(capacities: Sequence[float], costs: Sequence[float], demand: float, penalty_cost: float = 0.0) -> DispatchResult:
    """Greedy fill in cost order; optimal for linear costs."""
    caps = np.asarray(capacities, dtype=float)
    setpoints = np.zeros_like(caps)
    remaining = max(0.0, float(demand))
    for u, cap in enumerate(caps):
        setpoints[u] = min(cap, remaining)
        remaining -= setpoints[u]
    unserved = max(0.0, demand - float(setpoints.sum()))
    rate = float(np.dot(setpoints, costs)) + penalty_cost * unserved
    return DispatchResult(setpoints, demand - unserved, unserved, rate)


def distributed_dispatch(
    views: dict[int, dict[int, Sequence[int]]],
    true_capacities: Sequence[float],
    config: DispatchConfig,
    q: int,
    units: Sequence[int] | None = None,
) -> DispatchResult:
    """Realize the dispatch each unit computes from its own decoded view.

    ``views[u][k]`` holds the bits unit u decoded for unit k (keys are the
    converter indices in ``units``, which are listed in merit order). Any
    production above demand is still paid for; shortfall is priced at the
    penalty cost.
    """
    units = list(range(len(true_capacities))) if units is None else list(units)
    caps = np.asarray(true_capacities, dtype=float)
    setpoints = np.zeros(len(units))
    for i, u in enumerate(units):
        believed = sum(
            dequantize(bits_to_int(views[u][units[k]]), q, config.capacity_range) for k in range(i)
        )
        setpoints[i] = min(caps[i], max(0.0, config.demand - believed))
    total = float(setpoints.sum())
    unserved = max(0.0, config.demand - total)
    rate = float(np.dot(setpoints, config.costs)) + config.penalty_cost * unserved
    return DispatchResult(setpoints, config.demand - unserved, unserved, rate)


@dataclass
class DeltaEstimate:
    q: int
    gamma: float
    delta_mean: float
    delta_stderr: float
    ber_estimate: float
    overhead_wh_mean: float
    runs_used: int
    deltas: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))


def _units(grid: GridSpec, config: DispatchConfig) -> list[int]:
    vscs = [k for k, c in enumerate(grid.converters) if c.mode is Mode.VSC]
    if len(vscs) != config.num_units:
        raise InvalidParameterError(
            f"dispatch config has {config.num_units} costs but the grid has {len(vscs)} VSCs"
        )
    return vscs


def delta_metric(
    grid: GridSpec, params: PowerTalkParams, config: DispatchConfig, seed: int = 0
) -> DeltaEstimate:
    """Monte Carlo estimate of the relative cost increase of power talk.

    Run i draws true capacities from the substream ``run:i/capacity`` (shared
    by every (Q, gamma) cell, so sweep cells are compared on common random
    numbers) and channel noise from ``run:i/q:Q/gamma:G/noise``.
    """
    units = _units(grid, config)
    q = params.bits_per_payload
    hours = config.period_duration / 3600.0
    deltas = []
    overheads = []
    bit_errors = 0
    bits_sent = 0
    for i in range(config.monte_carlo_runs):
        cap_rng = derive_substream(seed, f"run:{i}/capacity")
        caps = cap_rng.uniform(0.0, config.capacity_range, config.num_units)
        payloads = {
            u: int_to_bits(quantize_capacity(c, q, config.capacity_range), q) for u, c in zip(units, caps)
        }
        noise_rng = derive_substream(seed, f"run:{i}/q:{q}/gamma:{params.gamma!r}/noise")
        report = run_session(grid, params, payloads, rng=noise_rng)
        for r, view in report.views.items():
            for tx, bits in view.items():
                if tx != r:
                    bit_errors += sum(a != b for a, b in zip(bits, payloads[tx]))
                    bits_sent += q
        ideal = merit_order(caps, config.costs, config.demand, config.penalty_cost)
        realized = distributed_dispatch(report.views, caps, config, q, units)
        c_ideal = ideal.generation_cost_rate * hours
        if c_ideal == 0.0:
            warnings.warn(f"run {i}: zero ideal cost, excluded", PowerTalkWarning, stacklevel=2)
            continue
        c_pt = realized.generation_cost_rate * hours
        if config.include_overhead:
            c_pt += sum(
                report.energy_overhead_by_tx[u] * cost for u, cost in zip(units, config.costs)
            )
        deltas.append((c_pt - c_ideal) / c_ideal)
        overheads.append(report.energy_overhead_wh)
    arr = np.asarray(deltas)
    n = arr.size
    stderr = float(arr.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return DeltaEstimate(
        q=q,
        gamma=params.gamma,
        delta_mean=float(arr.mean()) if n else math.nan,
        delta_stderr=stderr,
        ber_estimate=bit_errors / bits_sent if bits_sent else 0.0,
        overhead_wh_mean=float(np.mean(overheads)) if overheads else 0.0,
        runs_used=n,
        deltas=arr,
    )


def sweep(
    q_range: Sequence[int],
    gamma_range: Sequence[float],
    grid: GridSpec,
    params: PowerTalkParams,
    config: DispatchConfig,
    seed: int = 0,
    progress=None,
) -> list[DeltaEstimate]:
    """delta_metric over the (Q, gamma) grid, ordered by Q then gamma."""
    from dataclasses import replace

    table = []
    for q in q_range:
        for gamma in gamma_range:
            cell = replace(params, bits_per_payload=int(q), gamma=float(gamma))
            table.append(delta_metric(grid, cell, config, seed))
            if progress is not None:
                progress(table[-1])
    return table


SWEEP_COLUMNS = ["Q", "gamma_volts", "delta_mean", "delta_stderr", "ber_estimate", "overhead_wh_mean"]


def write_sweep_csv(table: Sequence[DeltaEstimate], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_COLUMNS)
        for row in table:
            writer.writerow(
                [
                    row.q,
                    repr(row.gamma),
                    repr(row.delta_mean),
                    repr(row.delta_stderr),
                    repr(row.ber_estimate),
                    repr(row.overhead_wh_mean),
                ]
            )
