"""Acceptance gate: one test per criterion, each printing a single PASS/FAIL line."""

import csv
import itertools
import math
import time
import warnings
from collections import defaultdict

import numpy as np
import pytest

from powertalk.dispatch import merit_order
from powertalk.grid import BusLoad, Converter, GridSpec, Line, single_bus_grid, solve_steady_state, two_vsc_bus_voltage
from powertalk.mac import CrcMismatch, LoadChange, crc8, decode_frame, encode_frame, run_session
from powertalk.phy import PowerTalkParams, empirical_ber, observe_many, observe_slot
from powertalk.secctl import WirelessSpec, build_wireless_graph, components, is_connected, per_unit_current, run_consensus
from powertalk.sim.runner import binomial_within, run
from powertalk.sim.scenario import load_scenario


def verdict(number, title, ok, detail, elapsed, limit):
    ok = ok and elapsed < limit
    print(f"{'PASS' if ok else 'FAIL'} criterion {number} ({title}): {detail}; {elapsed:.2f} s (limit {limit:g} s)")
    return ok


def quiet(fn, *args, **kwargs):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return fn(*args, **kwargs)


@pytest.fixture(scope="module")
def fig5b_first(tmp_path_factory):
    out = tmp_path_factory.mktemp("fig5b_a")
    t0 = time.perf_counter()
    quiet(run, "dispatch-sweep", load_scenario("fig5b"), seed=0, out_dir=out)
    return out, time.perf_counter() - t0


@pytest.fixture(scope="module")
def fig6_first(tmp_path_factory):
    out = tmp_path_factory.mktemp("fig6_a")
    t0 = time.perf_counter()
    quiet(run, "jam-demo", load_scenario("fig6"), seed=0, out_dir=out)
    return out, time.perf_counter() - t0


def test_criterion_1_closed_form_equivalence():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        R = float(rng.uniform(0.5, 50.0))
        x1, x2 = rng.uniform(44.0, 52.0, 2)
        r1, r2 = rng.uniform(0.05, 1.0, 2)
        grid = GridSpec(
            48.0,
            (BusLoad(d_ca=48.0**2 / R),),
            (),
            (Converter(0, reference_voltage=float(x1), virtual_resistance=float(r1)),
             Converter(0, reference_voltage=float(x2), virtual_resistance=float(r2))),
        )
        v = solve_steady_state(grid).v[0]
        worst = max(worst, abs(v - two_vsc_bus_voltage(R, x1, r1, x2, r2)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 * 48.0
    assert verdict(1, "closed-form equivalence", ok, f"max |error| {worst:.2e} V over 1000 instances", elapsed, 1.0)


def test_criterion_2_noise_and_ber():
    t0 = time.perf_counter()
    p = PowerTalkParams(noise_sigma=0.05, sampling_frequency=50e3, slot_duration=5e-3)
    target = 0.05 / math.sqrt(250)
    rng = np.random.default_rng(2)
    per_sample = np.array([observe_slot(48.0, p, rng).averaged_voltage for _ in range(100_000)])
    direct = observe_many(np.full(100_000, 48.0), p, rng)
    ratios = [per_sample.std(ddof=1) / target, direct.std(ddof=1) / target]
    std_ok = all(abs(r - 1) <= 0.05 for r in ratios)
    grid = load_scenario("fig5b").grid
    ber_ok = True
    parts = []
    for gamma in (0.02, 0.05, 1.0):
        errors, n, pred = empirical_ber(grid, 0, 0, PowerTalkParams(gamma=gamma), np.random.default_rng(10), 100_000)
        within = binomial_within(errors, n, pred)
        ber_ok &= within
        parts.append(f"gamma {gamma}: {errors}/{n} vs {pred:.3g}")
    elapsed = time.perf_counter() - t0
    detail = f"std ratios {ratios[0]:.4f}/{ratios[1]:.4f}; " + ", ".join(parts)
    assert verdict(2, "noise and BER model", std_ok and ber_ok, detail, elapsed, 30.0)


def mesh4():
    buses = (BusLoad(20, 10, 150), BusLoad(0, 0, 250), BusLoad(60, 0, 100), BusLoad(0, 30, 200))
    lines = (Line(0, 1, 0.05), Line(1, 2, 0.07), Line(2, 3, 0.04), Line(3, 0, 0.06))
    convs = tuple(Converter(n, virtual_resistance=0.2 + 0.05 * n, x_min=44, x_max=52) for n in range(4))
    return GridSpec(48.0, buses, lines, convs)


def test_criterion_3_noiseless_exactness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    checked = 0
    ok = True
    for grid in (single_bus_grid(6, BusLoad(d_ca=900.0)), mesh4()):
        n = len(grid.converters)
        for q in (1, 4, 8):
            for crc in (False, True):
                payloads = [tuple(int(b) for b in rng.integers(0, 2, q)) for _ in range(n)]
                rep = run_session(grid, PowerTalkParams(gamma=0.1, noise_sigma=0.0, crc_enabled=crc), payloads)
                ok &= rep.retries == 0 and not rep.aborted
                for r in range(n):
                    for tx in range(n):
                        ok &= rep.views[r][tx] == payloads[tx]
                        checked += 1
    elapsed = time.perf_counter() - t0
    assert verdict(3, "noiseless protocol exactness", ok, f"{checked} views exact", elapsed, 10.0)


def test_criterion_4_crc_and_load_change():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    flips = missed = 0
    for q in range(1, 17):
        # the code is linear, so every single-bit error has a nonzero syndrome for any payload
        for k in range(q + 8):
            e = [0] * (q + 8)
            e[k] = 1
            missed += crc8(e) == 0
        payloads = itertools.product((0, 1), repeat=q) if q <= 10 else (tuple(rng.integers(0, 2, q)) for _ in range(256))
        for payload in payloads:
            bits = list(encode_frame(payload, True).bits)
            for k in range(len(bits)):
                bits[k] ^= 1
                flips += 1
                try:
                    decode_frame(bits, True)
                    missed += 1
                except CrcMismatch:
                    pass
                bits[k] ^= 1

    grid = single_bus_grid(2, BusLoad(d_ca=480.0))
    p = PowerTalkParams(gamma=0.25, bits_per_payload=8, crc_enabled=True)
    step_at = (p.baseline_slots + 8.5) * p.slot_duration  # middle of the 16-slot frame
    recovered = 0
    for seed in range(100):
        r = np.random.default_rng(seed)
        payload = tuple(int(b) for b in r.integers(0, 2, 8))
        rep = run_session(grid, p, {0: payload}, [LoadChange(step_at, 0, BusLoad(d_ca=960.0))], r, receivers=(1,))
        recovered += bool(rep.crc_failures) and rep.retries >= 1 and not rep.aborted and rep.views[1][0] == payload
    elapsed = time.perf_counter() - t0
    ok = missed == 0 and recovered >= 99
    detail = f"{flips} single-bit flips, {missed} undetected; load step detected and retried in {recovered}/100 runs"
    assert verdict(4, "CRC and load-change detection", ok, detail, elapsed, 30.0)


def test_criterion_5_merit_order_oracle():
    t0 = time.perf_counter()
    all_costs = (1.0, 2.0, 3.0)
    instances = 0
    worst = 0.0
    for u in (1, 2, 3):
        costs = np.array(all_costs[:u])
        penalty = 10.0 * costs[-1]
        grids = np.array(list(itertools.product(range(21), repeat=u)), dtype=float)
        served = grids.sum(axis=1).astype(int)
        gen = grids @ costs
        for caps in itertools.product(range(21), repeat=u):
            feasible = np.all(grids <= np.array(caps), axis=1)
            # cheapest generation cost for each exact served total
            best_at = np.full(21 * u + 1, np.inf)
            np.minimum.at(best_at, served[feasible], gen[feasible])
            # with shortfall priced at the penalty, demand d is met by some total S <= d
            adjusted = np.minimum.accumulate(best_at - penalty * np.arange(best_at.size))
            for d in range(1, 21 * u + 3):
                brute = adjusted[min(d, best_at.size - 1)] + penalty * d
                greedy = merit_order(caps, costs, d, penalty).generation_cost_rate
                worst = max(worst, abs(greedy - brute))
                instances += 1
    elapsed = time.perf_counter() - t0
    assert verdict(5, "merit order vs exhaustive search", worst <= 1e-9, f"{instances} instances, max gap {worst:.1e}", elapsed, 60.0)


def read_sweep(path):
    table = defaultdict(dict)
    with open(path) as fh:
        for row in csv.DictReader(fh):
            table[float(row["gamma_volts"])][int(row["Q"])] = float(row["delta_mean"])
    return table


def test_criterion_6_fig5b_shape(fig5b_first):
    out, elapsed = fig5b_first
    table = read_sweep(out / "sweep.csv")
    qs = sorted(next(iter(table.values())))
    interior = []
    for gamma, row in table.items():
        q_star = min(row, key=row.get)
        if q_star not in (qs[0], qs[-1]) and 3 <= q_star <= 6:
            interior.append((gamma, q_star))
    minimum = min(min(row.values()) for row in table.values())
    high = table[1.0]
    rising = all(high[q + 1] > high[q] for q in qs if q > 5 and q + 1 in high)
    ok = bool(interior) and minimum < 0.01 and rising
    detail = (
        f"interior minima {interior}; min delta {100 * minimum:.3f}%; "
        f"gamma 1 V rising for Q > 5: {rising}"
    )
    assert verdict(6, "dispatch cost sweep shape", ok, detail, elapsed, 600.0)


def read_trace(path):
    rows = defaultdict(dict)
    events = []
    with open(path) as fh:
        for r in csv.DictReader(fh):
            t = float(r["t_seconds"])
            rows[t][int(r["der_id"])] = r
            if r["event"] and r["der_id"] == "1":
                events.append((t, r["event"]))
    return rows, events


def spread_at(rows, t, caps):
    row = rows[t]
    regs = [d for d, r in row.items() if r["regulator_flag"] == "1"]
    ipu = [float(row[d]["i_out_amps"]) * 48.0 / caps[d - 1] for d in regs]
    return set(regs), max(ipu) - min(ipu), float(row[1]["v_bus_volts"])


def test_criterion_7_consensus_fixed_point():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst_spread = worst_v = 0.0
    for kind in ("path", "ring", "complete"):
        for n in range(2, 7):
            adj = np.zeros((n, n), dtype=bool)
            for i in range(n - 1):
                adj[i, i + 1] = adj[i + 1, i] = True
            if kind == "ring" and n > 2:
                adj[0, n - 1] = adj[n - 1, 0] = True
            if kind == "complete":
                adj = ~np.eye(n, dtype=bool)
            caps = rng.uniform(100.0, 300.0, n)
            convs = tuple(
                Converter(0, virtual_resistance=float(rng.uniform(0.1, 0.3)), p_max=float(c), x_min=44, x_max=54)
                for c in caps
            )
            grid = GridSpec(48.0, (BusLoad(d_cp=0.1 * caps.sum(), d_ca=0.5 * caps.sum()),), (), convs)
            _, steady = run_consensus(grid, adj, range(n), 500)
            ipu = per_unit_current(grid, steady.i_conv)
            worst_spread = max(worst_spread, float(np.ptp(ipu)))
            worst_v = max(worst_v, abs(float(steady.v[0]) - 48.0))
    caps = [100.0, 150.0, 250.0, 300.0]
    grid = GridSpec(48.0, (BusLoad(d_ca=400.0),), (), tuple(Converter(0, p_max=c, x_min=44, x_max=54) for c in caps))
    split = np.zeros((4, 4), dtype=bool)
    split[0, 1] = split[1, 0] = split[2, 3] = split[3, 2] = True
    _, steady = run_consensus(grid, split, range(4), 500)
    ipu = per_unit_current(grid, steady.i_conv)
    global_spread = float(np.ptp(ipu))
    local = max(float(np.ptp(ipu[list(c)])) for c in components(split, range(4)))
    elapsed = time.perf_counter() - t0
    ok = worst_spread <= 1e-3 and worst_v <= 1e-3 * 48.0 and global_spread > 1e-2 and local <= 1e-3
    detail = (
        f"connected: spread {worst_spread:.1e}, |v - 48| {worst_v:.1e} V; "
        f"partitioned: global {global_spread:.3f}, per component {local:.1e}"
    )
    assert verdict(7, "consensus fixed point", ok, detail, elapsed, 60.0)


def test_criterion_8_jamming_timeline(fig6_first):
    out, elapsed = fig6_first
    scn = load_scenario("fig6")
    caps = [c.p_max for c in scn.grid.converters]
    rows, events = read_trace(out / "trace.csv")
    times = sorted(rows)
    with open(out / "reconfigurations.csv") as fh:
        rounds = list(csv.DictReader(fh))

    # (a) imbalance after the load step, before the next power-talk phase
    before_pt = [t for t in times if 7.0 < t < 8.0 and rows[t][1]["phase"] == "secondary"]
    regs_a, spread_a, _ = spread_at(rows, before_pt[-1], caps)
    ok_a = regs_a == {2, 5, 6, 9} and spread_a > 1e-2

    # (b) the first phase after the step selects a connected set without DER 5
    first = next(r for r in rounds if float(r["t_start"]) >= 7.0)
    new = {int(d) for d in first["regulators"].split()}
    adj = build_wireless_graph(WirelessSpec(scn.wireless.positions, scn.wireless.comm_range, scn.wireless.jammers), float(first["t_start"]))
    ok_b = len(new) == 4 and 5 not in new and is_connected(adj, [d - 1 for d in new]) and new == {1, 2, 7, 10}

    # (c) balanced again before the following phase and at the end
    checks = []
    for t_end in (float(first["t_start"]) + 4.0, times[-1] + 1.0):
        t = [s for s in times if s < t_end and rows[s][1]["phase"] == "secondary"][-1]
        regs, spread, v = spread_at(rows, t, caps)
        checks.append(regs == new and spread <= 1e-3 and abs(v - 48.0) <= 1e-3 * 48.0)
    ok_c = all(checks)
    detail = (
        f"spread under {sorted(regs_a)} after step {spread_a:.3f}; reselected {sorted(new)} at "
        f"t={float(first['t_start']):.2f} s; rebalanced {checks}"
    )
    assert verdict(8, "jamming timeline", ok_a and ok_b and ok_c, detail, elapsed, 120.0)


def test_criterion_9_reproducibility(fig5b_first, fig6_first, tmp_path):
    t0 = time.perf_counter()
    quiet(run, "dispatch-sweep", load_scenario("fig5b"), seed=0, out_dir=tmp_path / "fig5b")
    quiet(run, "jam-demo", load_scenario("fig6"), seed=0, out_dir=tmp_path / "fig6")
    elapsed = time.perf_counter() - t0
    same = []
    for first, name, sub in ((fig5b_first[0], "sweep.csv", "fig5b"), (fig6_first[0], "trace.csv", "fig6"), (fig6_first[0], "reconfigurations.csv", "fig6")):
        same.append((first / name).read_bytes() == (tmp_path / sub / name).read_bytes())
    limit = 600.0 + 120.0
    assert verdict(9, "reproducibility", all(same), f"byte-identical re-runs: {same}", elapsed, limit)
