"""Multibus DC microgrid model and its steady-state solver.

Each bus carries an aggregate ZIP load (constant power, constant current,
constant resistance, all specified as watts drawn at rated voltage) and any
number of converters. A converter in VSC mode is a droop source: an ideal
voltage ``x`` behind a virtual resistance ``r_d``. A converter in CSC mode
injects a fixed power.

The steady state is the high-voltage root of the nodal KCL system, found by
damped Newton iteration started from flat rated voltage.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from powertalk.errors import (
    InvalidArgumentError,
    InvalidParameterError,
    NoSolutionError,
    VoltageCollapseError,
)


class Mode(str, enum.Enum):
    VSC = "VSC"
    CSC = "CSC"


@dataclass(frozen=True)
class BusLoad:
    d_cp: float = 0.0
    d_cc: float = 0.0
    d_ca: float = 0.0

    def __post_init__(self):
        for name in ("d_cp", "d_cc", "d_ca"):
            value = getattr(self, name)
            if not (value >= 0.0 and math.isfinite(value)):
                raise InvalidParameterError(f"{name} must be a finite value >= 0, got {value!r}")

    def resistance(self, rated_voltage: float) -> float | None:
        """Equivalent resistor of the constant-resistance part, or None if absent."""
        if self.d_ca == 0.0:
            return None
        return rated_voltage**2 / self.d_ca

    def consumed(self, v: float, rated_voltage: float) -> float:
        return v * v * self.d_ca / rated_voltage**2 + v * self.d_cc / rated_voltage + self.d_cp


@dataclass(frozen=True)
class Line:
    bus_a: int
    bus_b: int
    resistance: float

    def __post_init__(self):
        if self.bus_a == self.bus_b:
            raise InvalidParameterError(f"line connects bus {self.bus_a} to itself")
        if not self.resistance > 0.0:
            raise InvalidParameterError(f"line resistance must be > 0, got {self.resistance!r}")


@dataclass(frozen=True)
class Converter:
    bus: int
    mode: Mode = Mode.VSC
    reference_voltage: float = 48.0
    virtual_resistance: float = 0.2
    p_max: float = 0.0
    incremental_cost: float = 1.0
    x_min: float = 0.0
    x_max: float = math.inf
    r_d_min: float = 0.0
    r_d_max: float = math.inf
    # CSC injection; None means "inject p_max"
    csc_power: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.p_max < 0.0:
            raise InvalidParameterError(f"p_max must be >= 0, got {self.p_max!r}")
        if not self.incremental_cost > 0.0:
            raise InvalidParameterError(f"incremental_cost must be > 0, got {self.incremental_cost!r}")
        if self.x_min > self.x_max or self.r_d_min > self.r_d_max:
            raise InvalidParameterError("converter constraint bounds are inverted")
        if self.mode is Mode.VSC:
            if not self.virtual_resistance > 0.0:
                raise InvalidParameterError(
                    f"virtual_resistance must be > 0, got {self.virtual_resistance!r}"
                )
            if not self.r_d_min <= self.virtual_resistance <= self.r_d_max:
                raise InvalidParameterError(
                    f"virtual_resistance {self.virtual_resistance} outside "
                    f"[{self.r_d_min}, {self.r_d_max}]"
                )
            if not self.x_min <= self.reference_voltage <= self.x_max:
                raise InvalidParameterError(
                    f"reference_voltage {self.reference_voltage} outside [{self.x_min}, {self.x_max}]"
                )

    @property
    def injection(self) -> float:
        """Constant power injected in CSC mode."""
        return self.p_max if self.csc_power is None else self.csc_power


@dataclass(frozen=True)
class GridSpec:
    rated_voltage: float
    buses: tuple[BusLoad, ...]
    lines: tuple[Line, ...] = ()
    converters: tuple[Converter, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "lines", tuple(self.lines))
        object.__setattr__(self, "converters", tuple(self.converters))
        if not self.rated_voltage > 0.0:
            raise InvalidParameterError(f"rated_voltage must be > 0, got {self.rated_voltage!r}")
        n = len(self.buses)
        if n == 0:
            raise InvalidParameterError("grid has no buses")
        for k, line in enumerate(self.lines):
            if not (0 <= line.bus_a < n and 0 <= line.bus_b < n):
                raise InvalidParameterError(f"lines[{k}] references a bus outside 0..{n - 1}")
        for k, conv in enumerate(self.converters):
            if not 0 <= conv.bus < n:
                raise InvalidParameterError(f"converters[{k}] references bus {conv.bus} outside 0..{n - 1}")
        if not any(c.mode is Mode.VSC for c in self.converters):
            raise InvalidParameterError("grid needs at least one converter in VSC mode")
        if not self._connected():
            raise InvalidParameterError("bus graph is not connected")

    def _connected(self) -> bool:
        n = len(self.buses)
        adj: list[list[int]] = [[] for _ in range(n)]
        for line in self.lines:
            adj[line.bus_a].append(line.bus_b)
            adj[line.bus_b].append(line.bus_a)
        seen = {0}
        queue = deque([0])
        while queue:
            for m in adj[queue.popleft()]:
                if m not in seen:
                    seen.add(m)
                    queue.append(m)
        return len(seen) == n

    @property
    def num_buses(self) -> int:
        return len(self.buses)

    def with_converter(self, index: int, **changes) -> GridSpec:
        convs = list(self.converters)
        convs[index] = dataclasses.replace(convs[index], **changes)
        return dataclasses.replace(self, converters=tuple(convs))

    def with_load(self, bus: int, load: BusLoad) -> GridSpec:
        buses = list(self.buses)
        buses[bus] = load
        return dataclasses.replace(self, buses=tuple(buses))


@dataclass
class SteadyState:
    v: np.ndarray
    i_conv: np.ndarray
    p_conv: np.ndarray
    residual_norm: float
    iterations: int = field(default=0, compare=False)


def two_vsc_bus_voltage(R: float, x1: float, r_d1: float, x2: float, r_d2: float) -> float:
    """Bus voltage of one resistive load R fed by two droop sources."""
    for name, value in (("R", R), ("x1", x1), ("r_d1", r_d1), ("x2", x2), ("r_d2", r_d2)):
        if not value > 0.0:
            raise InvalidParameterError(f"{name} must be > 0, got {value!r}")
    return R * (r_d1 * x2 + r_d2 * x1) / (R * (r_d1 + r_d2) + r_d1 * r_d2)


class _Nodal:
    """Per-bus aggregates of a grid, laid out for the Newton iteration."""

    def __init__(self, grid: GridSpec):
        n = grid.num_buses
        xr = grid.rated_voltage
        self.g_vsc = np.zeros(n)
        self.i_src = np.zeros(n)
        p_inj = np.zeros(n)
        for conv in grid.converters:
            if conv.mode is Mode.VSC:
                self.g_vsc[conv.bus] += 1.0 / conv.virtual_resistance
                self.i_src[conv.bus] += conv.reference_voltage / conv.virtual_resistance
            else:
                p_inj[conv.bus] += conv.injection
        lap = np.zeros((n, n))
        for line in grid.lines:
            g = 1.0 / line.resistance
            a, b = line.bus_a, line.bus_b
            lap[a, a] += g
            lap[b, b] += g
            lap[a, b] -= g
            lap[b, a] -= g
        self.lap = lap
        self.g_load = np.array([b.d_ca for b in grid.buses]) / xr**2
        self.i_load = np.array([b.d_cc for b in grid.buses]) / xr
        # net constant power entering the bus: CSC injection minus CP demand
        self.p_net = p_inj - np.array([b.d_cp for b in grid.buses])
        self.y_diag = self.g_vsc + self.g_load + np.diag(lap)
        self.g_shunt = self.g_vsc + self.g_load

    def residual(self, v: np.ndarray) -> np.ndarray:
        return self.i_src - self.g_shunt * v - self.lap @ v - self.i_load + self.p_net / v

    def jacobian(self, v: np.ndarray) -> np.ndarray:
        jac = -self.lap.copy()
        jac[np.diag_indices_from(jac)] -= self.g_shunt + self.p_net / v**2
        return jac


def _residual_norm(nodal: _Nodal, f: np.ndarray, xr: float) -> float:
    # per-unit voltage equivalent of the current mismatch
    return float(np.max(np.abs(f) / nodal.y_diag) / xr)


def solve_steady_state(
    grid: GridSpec,
    *,
    tol: float = 1e-9,
    max_iter: int = 50,
    collapse_floor: float = 0.5,
) -> SteadyState:
    """Solve bus voltages and converter injections of ``grid``.

    Raises NoSolutionError if Newton does not converge within ``max_iter``
    iterations and VoltageCollapseError if any bus ends below
    ``collapse_floor * rated_voltage``.
    """
    xr = grid.rated_voltage
    nodal = _Nodal(grid)
    v = np.full(grid.num_buses, xr, dtype=float)
    f = nodal.residual(v)
    res = _residual_norm(nodal, f, xr)
    step = math.inf
    it = 0
    while not (res <= tol and step <= tol):
        if it >= max_iter:
            raise NoSolutionError(
                f"Newton iteration did not converge in {max_iter} iterations "
                f"(residual {res:.3e}); loading is likely infeasible"
            )
        it += 1
        try:
            dv = np.linalg.solve(nodal.jacobian(v), -f)
        except np.linalg.LinAlgError as exc:
            raise NoSolutionError(f"singular Jacobian at iteration {it}") from exc
        norm0 = np.linalg.norm(f)
        t = 1.0
        while True:
            trial = v + t * dv
            if np.all(trial > 0.0):
                f_trial = nodal.residual(trial)
                if np.linalg.norm(f_trial) <= norm0 or t < 2.0**-20:
                    break
            elif t < 2.0**-20:
                raise NoSolutionError("Newton step cannot keep bus voltages positive")
            t *= 0.5
        v, f = trial, f_trial
        step = float(np.max(np.abs(t * dv)) / xr)
        res = _residual_norm(nodal, f, xr)

    if np.any(v < collapse_floor * xr):
        bus = int(np.argmin(v))
        raise VoltageCollapseError(
            f"bus {bus} settles at {v[bus]:.4g} V, below the collapse floor "
            f"{collapse_floor * xr:.4g} V"
        )
    i_conv, p_conv = _injections(grid, v)
    return SteadyState(v=v, i_conv=i_conv, p_conv=p_conv, residual_norm=res, iterations=it)


def _injections(grid: GridSpec, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    i_conv = np.empty(len(grid.converters))
    p_conv = np.empty(len(grid.converters))
    for k, conv in enumerate(grid.converters):
        vn = v[conv.bus]
        if conv.mode is Mode.VSC:
            i_conv[k] = (conv.reference_voltage - vn) / conv.virtual_resistance
            p_conv[k] = vn * i_conv[k]
        else:
            p_conv[k] = conv.injection
            i_conv[k] = conv.injection / vn
    return i_conv, p_conv


def converter_injections(grid: GridSpec, state: SteadyState) -> tuple[np.ndarray, np.ndarray]:
    """Recompute per-converter current and power from the bus voltages in ``state``."""
    v = np.asarray(state.v, dtype=float)
    if v.shape != (grid.num_buses,):
        raise InvalidArgumentError(
            f"state has {v.size} bus voltages, grid has {grid.num_buses} buses"
        )
    return _injections(grid, v)


@lru_cache(maxsize=8192)
def solve_cached(grid: GridSpec) -> SteadyState:
    """Memoized solve; callers must not mutate the returned arrays."""
    return solve_steady_state(grid)


def power_balance(grid: GridSpec, state: SteadyState) -> tuple[float, float, float]:
    """Return (generated, consumed by loads, line losses) in watts."""
    xr = grid.rated_voltage
    generated = float(np.sum(state.p_conv))
    consumed = sum(load.consumed(state.v[n], xr) for n, load in enumerate(grid.buses))
    losses = sum(
        (state.v[ln.bus_a] - state.v[ln.bus_b]) ** 2 / ln.resistance for ln in grid.lines
    )
    return generated, float(consumed), float(losses)


def single_bus_grid(
    n_vsc: int,
    load: BusLoad = BusLoad(),
    *,
    rated_voltage: float = 48.0,
    reference_voltage: float = 48.0,
    virtual_resistance: float = 0.2,
    p_max: float = 1000.0,
    costs=None,
    x_limits: tuple[float, float] = (44.0, 52.0),
) -> GridSpec:
    """Single bus with ``n_vsc`` identical droop converters."""
    costs = list(costs) if costs is not None else [1.0 + 0.2 * k for k in range(n_vsc)]
    convs = tuple(
        Converter(
            bus=0,
            reference_voltage=reference_voltage,
            virtual_resistance=virtual_resistance,
            p_max=p_max,
            incremental_cost=costs[k],
            x_min=x_limits[0],
            x_max=x_limits[1],
        )
        for k in range(n_vsc)
    )
    return GridSpec(rated_voltage=rated_voltage, buses=(load,), converters=convs)
