"""Power-talk physical layer.

A transmitting VSC sends a bit by offsetting its droop reference voltage by
-gamma (bit 0) or +gamma (bit 1) for one slot. Receivers average the K noisy
bus-voltage samples of the slot and compare the average against the level
they measured before the session started.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from powertalk.errors import (
    ConstraintError,
    InvalidModeError,
    InvalidParameterError,
    InvalidSwingError,
    PowerTalkWarning,
)
from powertalk.grid import GridSpec, Mode, solve_cached


@dataclass(frozen=True)
class PowerTalkParams:
    gamma: float = 0.25
    slot_duration: float = 5e-3
    sampling_frequency: float = 50e3
    noise_sigma: float = 0.05
    bits_per_payload: int = 4
    crc_enabled: bool = False
    max_retries: int = 3
    # silent slots averaged for the pre-phase baseline
    baseline_slots: int = 20

    def __post_init__(self):
        if not (self.gamma >= 0.0 and math.isfinite(self.gamma)):
            raise InvalidParameterError(f"gamma must be >= 0, got {self.gamma!r}")
        if not self.slot_duration > 0.0:
            raise InvalidParameterError(f"slot_duration must be > 0, got {self.slot_duration!r}")
        if not self.sampling_frequency > 0.0:
            raise InvalidParameterError(
                f"sampling_frequency must be > 0, got {self.sampling_frequency!r}"
            )
        if not self.noise_sigma >= 0.0:
            raise InvalidParameterError(f"noise_sigma must be >= 0, got {self.noise_sigma!r}")
        if self.bits_per_payload < 1:
            raise InvalidParameterError(
                f"bits_per_payload must be >= 1, got {self.bits_per_payload!r}"
            )
        if self.baseline_slots < 1:
            raise InvalidParameterError(f"baseline_slots must be >= 1, got {self.baseline_slots!r}")
        if self.max_retries < 0:
            raise InvalidParameterError(f"max_retries must be >= 0, got {self.max_retries!r}")
        if self.samples_per_slot < 1:
            raise InvalidParameterError(
                "slot_duration * sampling_frequency rounds to zero samples per slot"
            )

    @property
    def samples_per_slot(self) -> int:
        return int(round(self.slot_duration * self.sampling_frequency))

    @property
    def averaged_sigma(self) -> float:
        """Noise standard deviation of a slot average."""
        return self.noise_sigma / math.sqrt(self.samples_per_slot)


@dataclass(frozen=True)
class SlotObservation:
    averaged_voltage: float
    receiver_bus: int = 0
    slot_index: int = 0


def validate_params(grid: GridSpec, params: PowerTalkParams, transmitters=None) -> None:
    """Check electrical constraints of the signaling set and warn on atypical values.

    ``transmitters`` defaults to every VSC in the grid.
    """
    if transmitters is None:
        transmitters = [k for k, c in enumerate(grid.converters) if c.mode is Mode.VSC]
    for k in transmitters:
        _check_swing(grid, k, params.gamma)
    rel = params.noise_sigma / grid.rated_voltage
    if not 1e-4 <= rel <= 1e-3:
        warnings.warn(
            f"noise_sigma is {100 * rel:.3g}% of the rated voltage; typical range is 0.01-0.1%",
            PowerTalkWarning,
            stacklevel=2,
        )
    if 1.0 / params.slot_duration > 1000.0:
        warnings.warn(
            f"signaling rate {1.0 / params.slot_duration:.0f} Bd exceeds 1 kBd; "
            "the bus may not settle within one slot",
            PowerTalkWarning,
            stacklevel=2,
        )


def _check_swing(grid: GridSpec, transmitter: int, gamma: float) -> None:
    conv = grid.converters[transmitter]
    if conv.mode is not Mode.VSC:
        raise InvalidModeError(f"converter {transmitter} is in CSC mode and cannot transmit")
    lo, hi = conv.reference_voltage - gamma, conv.reference_voltage + gamma
    if lo < conv.x_min or hi > conv.x_max:
        raise ConstraintError(
            f"converter {transmitter}: reference {conv.reference_voltage} +/- gamma {gamma} "
            f"leaves [{conv.x_min}, {conv.x_max}]"
        )


def apply_symbol(
    grid: GridSpec, transmitter: int, bit: int, params: PowerTalkParams, *, parameter: str = "x"
) -> GridSpec:
    """Return a copy of ``grid`` with the transmitter's reference deviated for ``bit``."""
    if parameter != "x":
        raise NotImplementedError("virtual-resistance signaling is unimplemented")
    if bit not in (0, 1):
        raise InvalidParameterError(f"bit must be 0 or 1, got {bit!r}")
    _check_swing(grid, transmitter, params.gamma)
    if params.gamma == 0.0:
        return grid
    x = grid.converters[transmitter].reference_voltage
    return grid.with_converter(transmitter, reference_voltage=x + (params.gamma if bit else -params.gamma))


def observe_slot(
    true_voltage: float,
    params: PowerTalkParams,
    rng: np.random.Generator,
    *,
    receiver_bus: int = 0,
    slot_index: int = 0,
) -> SlotObservation:
    """Average of K noisy samples of ``true_voltage``."""
    if params.noise_sigma == 0.0:
        avg = float(true_voltage)
    else:
        samples = rng.normal(true_voltage, params.noise_sigma, params.samples_per_slot)
        avg = float(samples.mean())
    return SlotObservation(avg, receiver_bus, slot_index)


def observe_many(true_voltages, params: PowerTalkParams, rng: np.random.Generator) -> np.ndarray:
    """Slot averages for an array of true voltages.

    The mean of K iid N(v, sigma^2) samples is exactly N(v, sigma^2 / K), so
    the average is drawn directly instead of through K samples.
    """
    v = np.asarray(true_voltages, dtype=float)
    if params.noise_sigma == 0.0:
        return v.copy()
    return v + rng.normal(0.0, params.averaged_sigma, v.shape)


def detect_bit(observation, baseline: float) -> int:
    """Sign detector; exact ties decide 0."""
    value = observation.averaged_voltage if isinstance(observation, SlotObservation) else observation
    return 1 if value > baseline else 0


def baseline_noise(params: PowerTalkParams, rng: np.random.Generator) -> float:
    """Noise on an average over ``baseline_slots`` silent slots."""
    if params.noise_sigma == 0.0:
        return 0.0
    n = params.baseline_slots * params.samples_per_slot
    return float(rng.normal(0.0, params.noise_sigma / math.sqrt(n)))


def measure_baseline(
    grid: GridSpec, receiver_bus: int, params: PowerTalkParams, rng: np.random.Generator
) -> float:
    """Pre-phase level at ``receiver_bus``: the silent-window average with references at nominal."""
    return float(solve_cached(grid).v[receiver_bus]) + baseline_noise(params, rng)


def voltage_swing(
    grid: GridSpec, transmitter: int, receiver_bus: int, params: PowerTalkParams, bit: int = 1
) -> float:
    """Noiseless |v(bit) - v(nominal)| at the receiver bus, from two solves."""
    base = solve_cached(grid).v[receiver_bus]
    dev = solve_cached(apply_symbol(grid, transmitter, bit, params)).v[receiver_bus]
    return abs(float(dev - base))


def analytic_ber(voltage_swing: float, params: PowerTalkParams, baseline_slots: int | None = None) -> float:
    """Bit-error probability of the sign detector, Phi(-swing / sigma_eff).

    With ``baseline_slots=None`` the baseline is known exactly. Passing the
    number of silent slots the baseline was averaged over accounts for the
    baseline's own noise (marginal per-bit probability).
    """
    if not voltage_swing > 0.0:
        raise InvalidSwingError(f"voltage swing must be > 0, got {voltage_swing!r}")
    sigma = params.averaged_sigma
    if baseline_slots is not None:
        sigma *= math.sqrt(1.0 + 1.0 / baseline_slots)
    if sigma == 0.0:
        return 0.0
    return 0.5 * math.erfc(voltage_swing / sigma / math.sqrt(2.0))


def empirical_ber(
    grid: GridSpec,
    transmitter: int,
    receiver_bus: int,
    params: PowerTalkParams,
    rng: np.random.Generator,
    trials: int = 100_000,
    *,
    chunk: int = 10_000,
) -> tuple[int, int, float]:
    """Monte Carlo error count of observe + detect against the trained baseline.

    Bits are drawn uniformly. Returns ``(errors, trials, predicted)`` where
    ``predicted`` averages ``analytic_ber`` over the two bit values.
    """
    base = float(solve_cached(grid).v[receiver_bus])
    levels = np.array(
        [solve_cached(apply_symbol(grid, transmitter, b, params)).v[receiver_bus] for b in (0, 1)]
    )
    swings = np.abs(levels - base)
    predicted = 0.5 * sum(analytic_ber(s, params) for s in swings)
    errors = 0
    done = 0
    while done < trials:
        n = min(chunk, trials - done)
        bits = rng.integers(0, 2, n)
        obs = observe_many(levels[bits], params, rng)
        errors += int(np.count_nonzero((obs > base).astype(int) != bits))
        done += n
    return errors, trials, predicted
