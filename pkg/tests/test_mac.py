import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from powertalk.errors import InvalidArgumentError, InvalidParameterError
from powertalk.grid import BusLoad, Converter, GridSpec, Line, single_bus_grid, solve_steady_state
from powertalk.mac import (
    CrcMismatch,
    LoadChange,
    build_schedule,
    crc8,
    decode_frame,
    encode_frame,
    int_to_bits,
    run_session,
    session_duration,
    write_slot_trace,
)
from powertalk.phy import PowerTalkParams

# CRC-8 (0x07, init 0) of the single byte 0x00; from the long-division oracle below
CRC_OF_ZERO_BYTE = 0x00
# standard check value of this CRC-8 variant over ASCII "123456789"
CRC_CHECK_123456789 = 0xF4


def crc_long_division(bits):
    """Remainder of bits(x) * x^8 modulo x^8 + x^2 + x + 1, by polynomial division on ints."""
    m = 0
    for b in bits:
        m = (m << 1) | b
    m <<= 8
    poly = 0x107
    while m.bit_length() > 8:
        m ^= poly << (m.bit_length() - 9)
    return m


def bytes_to_bits(data):
    return [int(b) for byte in data for b in format(byte, "08b")]


def mesh4():
    buses = (BusLoad(20, 10, 150), BusLoad(0, 0, 250), BusLoad(60, 0, 100), BusLoad(0, 30, 200))
    lines = (Line(0, 1, 0.05), Line(1, 2, 0.07), Line(2, 3, 0.04), Line(3, 0, 0.06), Line(0, 2, 0.1))
    convs = tuple(Converter(n, virtual_resistance=0.2 + 0.05 * n, x_min=44, x_max=52) for n in range(4))
    return GridSpec(48.0, buses, lines, convs)


def test_crc_check_value():
    assert crc8(bytes_to_bits(b"123456789")) == CRC_CHECK_123456789


def test_crc_golden_zero_byte():
    assert crc_long_division([0] * 8) == CRC_OF_ZERO_BYTE
    assert crc8([0] * 8) == CRC_OF_ZERO_BYTE


@settings(max_examples=300, deadline=None)
@given(bits=st.lists(st.integers(0, 1), min_size=1, max_size=40))
def test_crc_matches_long_division(bits):
    assert crc8(bits) == crc_long_division(bits)


@settings(max_examples=100, deadline=None)
@given(bits=st.lists(st.integers(0, 1), min_size=1, max_size=20))
def test_crc_left_padding_invariant(bits):
    pad = (-len(bits)) % 8
    assert crc8(bits) == crc8([0] * pad + bits)


def test_frame_roundtrip_without_crc():
    for q in (1, 4, 8):
        for p in itertools.product((0, 1), repeat=q):
            assert decode_frame(encode_frame(p, False).bits, False) == p


def test_frame_roundtrip_with_crc():
    for p in itertools.product((0, 1), repeat=8):
        frame = encode_frame(p, True)
        assert frame.crc_bits == int_to_bits(crc8(p), 8)
        assert decode_frame(frame.bits, True) == p


def test_single_bit_flips_detected():
    rng = np.random.default_rng(0)
    for q in range(1, 17):
        payloads = itertools.product((0, 1), repeat=q) if q <= 8 else (tuple(rng.integers(0, 2, q)) for _ in range(64))
        for p in payloads:
            bits = list(encode_frame(p, True).bits)
            for k in range(len(bits)):
                bits[k] ^= 1
                with pytest.raises(CrcMismatch):
                    decode_frame(bits, True)
                bits[k] ^= 1


def test_bursts_up_to_eight_detected():
    for q in (4, 8):
        for p in itertools.product((0, 1), repeat=q):
            bits = np.array(encode_frame(p, True).bits)
            n = len(bits)
            for length in range(1, 9):
                for start in range(n - length + 1):
                    # a burst flips its first and last bit; inner bits take every pattern
                    for inner in range(2 ** max(0, length - 2)):
                        e = np.zeros(n, dtype=int)
                        e[start] = e[start + length - 1] = 1
                        for j in range(length - 2):
                            e[start + 1 + j] = (inner >> j) & 1
                        with pytest.raises(CrcMismatch):
                            decode_frame(bits ^ e, True)
            if q == 8:
                break  # all payloads at q = 4, one representative at q = 8


def test_decode_mismatch_carries_payload():
    bits = list(encode_frame((1, 0, 1, 1), True).bits)
    bits[0] ^= 1
    with pytest.raises(CrcMismatch) as err:
        decode_frame(bits, True)
    assert err.value.payload == (0, 0, 1, 1)
    assert err.value.kind == "crc-failure"


def test_encode_rejects_non_bits():
    with pytest.raises(InvalidParameterError):
        encode_frame((0, 2), False)


def test_schedule_sizes():
    assert build_schedule(6, 4).total_slots == 24
    s = build_schedule(1, 1)
    assert s.slot_assignments == ((0, 0),)
    assert build_schedule(9, 8, crc=True).total_slots == 144
    with pytest.raises(InvalidParameterError):
        build_schedule(0, 4)
    with pytest.raises(InvalidParameterError):
        build_schedule(3, 0)


@settings(max_examples=50, deadline=None)
@given(u=st.integers(1, 12), q=st.integers(1, 16), crc=st.booleans())
def test_schedule_contiguous(u, q, crc):
    s = build_schedule(u, q, crc)
    length = q + (8 if crc else 0)
    assert s.total_slots == u * length
    for unit in range(u):
        slots = [k for k, (owner, _) in enumerate(s.slot_assignments) if owner == unit]
        assert slots == list(s.subphase(unit))
        assert [s.slot_assignments[k][1] for k in slots] == list(range(length))


@pytest.mark.parametrize("q", [1, 4, 8])
@pytest.mark.parametrize("crc", [False, True])
def test_noiseless_session_exact(q, crc):
    p = PowerTalkParams(gamma=0.1, noise_sigma=0.0, crc_enabled=crc)
    rng = np.random.default_rng(q)
    for grid in (single_bus_grid(6, BusLoad(d_ca=900.0)), mesh4()):
        n = len(grid.converters)
        payloads = [tuple(int(b) for b in rng.integers(0, 2, q)) for _ in range(n)]
        rep = run_session(grid, p, payloads, rng=np.random.default_rng(1))
        assert rep.retries == 0 and not rep.aborted
        for r in range(n):
            for tx in range(n):
                assert rep.views[r][tx] == payloads[tx]


def test_noisy_session_high_swing_no_errors():
    grid = single_bus_grid(6, BusLoad(d_ca=900.0))
    p = PowerTalkParams(gamma=0.1, bits_per_payload=4)
    for seed in range(100):
        rng = np.random.default_rng(seed)
        payloads = [tuple(int(b) for b in rng.integers(0, 2, 4)) for _ in range(6)]
        rep = run_session(grid, p, payloads, rng=rng)
        assert all(rep.views[r][tx] == payloads[tx] for r in range(6) for tx in range(6))


def test_energy_overhead_definition():
    grid = single_bus_grid(3, BusLoad(d_ca=600.0))
    p = PowerTalkParams(gamma=0.2, noise_sigma=0.0)
    payloads = [(1, 0), (0, 0), (1, 1)]
    rep = run_session(grid, p, payloads)
    base = solve_steady_state(grid).p_conv
    from powertalk.phy import apply_symbol

    expected = 0.0
    for tx, bits in enumerate(payloads):
        for b in bits:
            dev = solve_steady_state(apply_symbol(grid, tx, b, p)).p_conv
            expected += np.abs(dev - base).sum() * p.slot_duration / 3600
    assert rep.energy_overhead_wh == pytest.approx(expected, rel=1e-12)
    assert sum(rep.energy_overhead_by_tx.values()) == pytest.approx(expected, rel=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_energy_overhead_increasing_in_gamma(seed):
    rng = np.random.default_rng(seed)
    grid = single_bus_grid(4, BusLoad(d_ca=float(rng.uniform(100, 900))))
    payloads = [tuple(int(b) for b in rng.integers(0, 2, 3)) for _ in range(4)]
    energies = [
        run_session(grid, PowerTalkParams(gamma=g, noise_sigma=0.0), payloads).energy_overhead_wh
        for g in (0.05, 0.1, 0.3, 0.8)
    ]
    assert all(b > a for a, b in zip(energies, energies[1:]))


def fig2b_session(seed, payload=None, step=True):
    """VSC 0 sends one CRC-protected byte to VSC 1 over a shared resistive load."""
    grid = single_bus_grid(2, BusLoad(d_ca=480.0))
    p = PowerTalkParams(gamma=0.25, bits_per_payload=8, crc_enabled=True)
    rng = np.random.default_rng(seed)
    if payload is None:
        payload = tuple(int(b) for b in rng.integers(0, 2, 8))
    # step lands in the middle of the 16-slot frame
    t = (p.baseline_slots + 8.5) * p.slot_duration
    events = [LoadChange(t, 0, BusLoad(d_ca=960.0))] if step else []
    rep = run_session(grid, p, {0: payload}, events, rng, receivers=(1,))
    return rep, payload


def test_load_step_is_large():
    grid = single_bus_grid(2, BusLoad(d_ca=480.0))
    before = solve_steady_state(grid).v[0]
    after = solve_steady_state(grid.with_load(0, BusLoad(d_ca=960.0))).v[0]
    p = PowerTalkParams()
    assert before - after > 10 * p.averaged_sigma


def test_load_step_triggers_retry():
    rep, payload = fig2b_session(3, payload=(1, 0, 1, 1, 0, 0, 1, 0))
    assert rep.crc_failures and rep.retries == 1 and not rep.aborted
    assert rep.views[1][0] == payload
    assert rep.final_grid.buses[0].d_ca == 960.0


def test_all_zero_payload_escapes_detection():
    # the all-zero frame is a codeword, and a voltage-lowering step reads as zeros
    rep, _ = fig2b_session(0, payload=(0,) * 8)
    assert rep.retries == 0


def test_no_event_no_retry():
    rep, payload = fig2b_session(5, step=False)
    assert rep.retries == 0 and rep.views[1][0] == payload


def test_abort_after_max_retries():
    grid = single_bus_grid(2, BusLoad(d_ca=480.0))
    p = PowerTalkParams(gamma=0.25, bits_per_payload=8, crc_enabled=True, max_retries=2)
    attempt = (p.baseline_slots + 16) * p.slot_duration
    # a fresh load step inside every attempt
    events = [LoadChange((k * attempt) + (p.baseline_slots + 4.5) * p.slot_duration, 0, BusLoad(d_ca=480.0 * (k + 2))) for k in range(4)]
    rep = run_session(grid, p, {0: (1, 1, 0, 1, 0, 1, 1, 1)}, events, np.random.default_rng(0), receivers=(1,))
    assert rep.aborted and rep.retries == 2


def test_session_argument_checks():
    grid = single_bus_grid(2, BusLoad(d_ca=480.0))
    p = PowerTalkParams()
    with pytest.raises(InvalidArgumentError):
        run_session(grid, p, [(1, 0)])
    with pytest.raises(InvalidArgumentError):
        run_session(grid, p, {0: (1, 0), 1: (1,)})
    with pytest.raises(InvalidArgumentError):
        run_session(grid, p, {0: (1,)}, receivers=(5,))


def test_session_duration():
    p = PowerTalkParams(slot_duration=2.5e-3, crc_enabled=True)
    assert session_duration(p, 10, 18) == pytest.approx((10 * 26 + 20) * 2.5e-3)
    rep, _ = fig2b_session(1, step=False)
    assert rep.end_time - rep.start_time == pytest.approx(session_duration(PowerTalkParams(crc_enabled=True), 1, 8))


def test_slot_trace_csv(tmp_path):
    rep, _ = fig2b_session(1, step=True)
    with pytest.raises(InvalidArgumentError):
        write_slot_trace(rep, tmp_path / "x.csv", 1)
    grid = single_bus_grid(2, BusLoad(d_ca=480.0))
    rep = run_session(grid, PowerTalkParams(), [(1, 0, 1, 1), (0, 0, 1, 0)], trace=True)
    path = tmp_path / "slots.csv"
    write_slot_trace(rep, path, 1)
    lines = path.read_text().splitlines()
    assert lines[0] == "attempt,slot,t_seconds,transmitter,bit,v_bus_0,obs_0,obs_1,decision_0,decision_1"
    assert len(lines) == 1 + 8
