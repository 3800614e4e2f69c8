"""Command pipelines and run artifacts.

Every run writes the canonical scenario echo (``scenario.yaml``), its CSV
results and ``manifest.json`` into the output directory. CSV content depends
only on the scenario and the seed; the manifest also records versions and
wall time.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import platform
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

import powertalk
from powertalk.dispatch import sweep, write_sweep_csv
from powertalk.errors import ScenarioError
from powertalk.grid import solve_steady_state
from powertalk.mac import write_slot_trace
from powertalk.phy import empirical_ber, validate_params, voltage_swing
from powertalk.secctl import run_timeline
from powertalk.sim.rng import derive_substream
from powertalk.sim.scenario import Scenario, dump_scenario

COMMANDS = ("solve", "ber", "dispatch-sweep", "jam-demo")


@dataclass
class RunArtifacts:
    out_dir: Path
    files: list[Path] = field(default_factory=list)
    manifest: dict = field(default_factory=dict)


def _writer(path: Path):
    fh = open(path, "w", newline="")
    return fh, csv.writer(fh, lineterminator="\n")


def _solve(scn: Scenario, out: Path, seed: int, trace: bool, **_) -> list[Path]:
    grid = scn.grid
    state = solve_steady_state(grid)
    bus_path, conv_path = out / "buses.csv", out / "converters.csv"
    fh, w = _writer(bus_path)
    with fh:
        w.writerow(["bus", "v_bus_volts"])
        for n, v in enumerate(state.v):
            w.writerow([n, repr(float(v))])
    fh, w = _writer(conv_path)
    with fh:
        w.writerow(["converter", "bus", "mode", "i_out_amps", "p_out_watts"])
        for k, c in enumerate(grid.converters):
            w.writerow([k, c.bus, c.mode.value, repr(float(state.i_conv[k])), repr(float(state.p_conv[k]))])
    return [bus_path, conv_path]


def binomial_within(errors: int, trials: int, p: float, k: float = 3.0) -> bool:
    """Whether an error count lies within k binomial standard deviations of trials * p."""
    mean = trials * p
    return abs(errors - mean) <= k * math.sqrt(trials * p * (1.0 - p))


def _ber(scn: Scenario, out: Path, seed: int, trace: bool, gammas=None, **_) -> list[Path]:
    if scn.ber is None:
        raise ScenarioError("ber: the scenario has no 'ber' section")
    cfg = scn.ber
    gammas = list(gammas) if gammas else list(cfg.gamma_range_volts)
    path = out / "ber.csv"
    fh, w = _writer(path)
    with fh:
        w.writerow(
            ["gamma_volts", "delta_v_volts", "analytic_ber", "empirical_ber", "trials", "errors", "within_3sigma"]
        )
        for gamma in gammas:
            params = replace(scn.powertalk, gamma=float(gamma))
            validate_params(scn.grid, params, [cfg.transmitter])
            dv = voltage_swing(scn.grid, cfg.transmitter, cfg.receiver_bus, params)
            rng = derive_substream(seed, f"ber/gamma:{float(gamma)!r}")
            errors, trials, predicted = empirical_ber(
                scn.grid, cfg.transmitter, cfg.receiver_bus, params, rng, cfg.trials
            )
            w.writerow(
                [
                    repr(float(gamma)),
                    repr(dv),
                    repr(predicted),
                    repr(errors / trials),
                    trials,
                    errors,
                    int(binomial_within(errors, trials, predicted)),
                ]
            )
    return [path]


def _dispatch(scn: Scenario, out: Path, seed: int, trace: bool, progress=None, **_) -> list[Path]:
    if scn.dispatch is None:
        raise ScenarioError("application.dispatch: required by dispatch-sweep")
    validate_params(scn.grid, replace(scn.powertalk, gamma=max(scn.dispatch_gamma_range)))
    table = sweep(
        scn.dispatch_q_range, scn.dispatch_gamma_range, scn.grid, scn.powertalk, scn.dispatch, seed, progress
    )
    path = out / "sweep.csv"
    write_sweep_csv(table, path)
    files = [path]
    if trace:
        runs = out / "runs.csv"
        fh, w = _writer(runs)
        with fh:
            w.writerow(["Q", "gamma_volts", "run", "delta"])
            for row in table:
                for i, d in enumerate(row.deltas):
                    w.writerow([row.q, repr(row.gamma), i, repr(float(d))])
        files.append(runs)
    return files


def _jam(scn: Scenario, out: Path, seed: int, trace: bool, **_) -> list[Path]:
    if scn.wireless is None or scn.timeline is None:
        raise ScenarioError("application.secctl: required by jam-demo")
    tl = run_timeline(scn.grid, scn.wireless, scn.powertalk, scn.timeline, scn.events, seed)
    path = out / "trace.csv"
    tl.to_csv(path)
    files = [path]
    rpath = out / "reconfigurations.csv"
    fh, w = _writer(rpath)
    with fh:
        w.writerow(["round", "t_start", "t_end", "retries", "aborted", "unanimous", "detection", "regulators"])
        for k, rc in enumerate(tl.reconfigurations):
            rep = rc.report
            w.writerow(
                [
                    k,
                    f"{rep.start_time:.6f}",
                    f"{rep.end_time:.6f}",
                    rep.retries,
                    int(rc.aborted),
                    int(rc.unanimous),
                    int(rc.detection),
                    " ".join(str(tl.der_ids[i]) for i in rc.regulators),
                ]
            )
    files.append(rpath)
    if trace:
        for k, rc in enumerate(tl.reconfigurations):
            p = out / f"powertalk_{k}.csv"
            write_slot_trace(rc.report, p, len(scn.grid.buses))
            files.append(p)
    return files


_PIPELINES = {"solve": _solve, "ber": _ber, "dispatch-sweep": _dispatch, "jam-demo": _jam}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run(
    command: str,
    scenario: Scenario,
    seed: int | None = None,
    out_dir=".",
    *,
    trace: bool = False,
    gammas: Sequence[float] | None = None,
    progress=None,
) -> RunArtifacts:
    """Run ``command`` on ``scenario`` and write artifacts to ``out_dir``.

    ``seed`` overrides the scenario's own seed.
    """
    if command not in _PIPELINES:
        raise ScenarioError(f"unknown command {command!r}; expected one of {', '.join(COMMANDS)}")
    seed = scenario.seed if seed is None else int(seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    echo = out / "scenario.yaml"
    echo.write_text(dump_scenario(scenario), encoding="utf-8")
    files = _PIPELINES[command](scenario, out, seed, trace, gammas=gammas, progress=progress)
    manifest = {
        "command": command,
        "scenario": scenario.name,
        "seed": seed,
        "trace": trace,
        "versions": {
            "powertalk": powertalk.__version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "wall_time_s": round(time.perf_counter() - started, 3),
        "files": {p.name: _sha256(p) for p in [echo, *files]},
    }
    mpath = out / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return RunArtifacts(out, [echo, *files, mpath], manifest)
