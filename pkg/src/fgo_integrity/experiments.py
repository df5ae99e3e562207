"""Fault-injection protocol shared by the acceptance suite and ad-hoc studies."""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .pipeline import RunConfig, RunResult, run_scenario
from .scenario import FaultEvent, ScenarioConfig, build_scenario

DURATION = 20.0  # s
FAULT_START, FAULT_END = 6.0, 16.0  # s
GNSS_TARGET = "G05"

# per-sensor fault magnitudes; dual modes combine the single ones
_SINGLE = {
    "G": f"gnss {{t0:g}} {{t1:g}} range=15 target={GNSS_TARGET}",
    "I": "imu {t0:g} {t1:g} accel=0.15 gyro=0.02",
    "V": "vision {t0:g} {t1:g} pixel=5",
}
MODES = ("FF", "I", "G", "V", "GI", "IV")


def fault_schedule(mode: str, t0: float = FAULT_START, t1: float = FAULT_END) -> tuple:
    if mode == "FF":
        return ()
    return tuple(FaultEvent.parse(_SINGLE[c].format(t0=t0, t1=t1)) for c in mode)


def protocol_config(mode: str, seed: int, fde: bool, duration: float = DURATION, **kw) -> RunConfig:
    scen = ScenarioConfig(duration=duration, faults=fault_schedule(mode))
    return RunConfig(scenario=scen, seed=seed, fde=fde, **kw)


@dataclass
class RunMetrics:
    mode: str
    seed: int
    fde: bool
    seconds: float
    violations: int  # epochs with HPE above the PEB of the matching mode
    min_margin: float  # min over epochs of PEB - HPE for the matching mode
    availability: dict  # mode -> % of epochs with PEB <= AL
    mean_hpe: float
    fault_hpe: float  # mean HPE over the fault interval
    mean_peb: dict
    first_exclusion: dict  # exclusion label -> first epoch
    continuity_alerts: int

    @classmethod
    def from_result(cls, mode: str, res: RunResult, seconds: float) -> "RunMetrics":
        cfg = res.config
        hpe = np.array([r.hpe for r in res.records])
        t = np.array([r.time for r in res.records])
        peb = {m: np.array([r.peb_h[m] for r in res.records]) for m in res.modes}
        infault = (t >= FAULT_START) & (t < FAULT_END)
        first = {}
        for r in res.records:
            for x in r.exclusions:
                first.setdefault(x, r.epoch)
        return cls(mode, cfg.seed, cfg.fde, seconds,
                   int(np.sum(hpe > peb[mode])), float(np.min(peb[mode] - hpe)),
                   {m: 100.0 * float(np.mean(p <= cfg.al)) for m, p in peb.items()},
                   float(hpe.mean()), float(hpe[infault].mean()),
                   {m: float(p.mean()) for m, p in peb.items()}, first, res.continuity_alerts)


def run_protocol(mode: str, seed: int, fde: bool, **kw) -> tuple:
    """One protocol run; returns ``(RunMetrics, RunResult)``."""
    cfg = protocol_config(mode, seed, fde, **kw)
    sc = build_scenario(cfg.scenario, seed)
    t = time.perf_counter()
    res = run_scenario(sc, cfg)
    return RunMetrics.from_result(mode, res, time.perf_counter() - t), res


def _metrics(job) -> RunMetrics:
    mode, seed, fde, kw = job
    return run_protocol(mode, seed, fde, **kw)[0]


def monte_carlo(modes, seeds, fde: bool, workers: int = 1, **kw) -> list:
    """Metrics of every ``(seed, mode)`` pair; ``workers > 1`` spreads runs over processes."""
    jobs = [(m, s, fde, kw) for s in seeds for m in modes]
    if workers <= 1:
        return [_metrics(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_metrics, jobs, chunksize=4))


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    return replace(cfg, seed=seed)


__all__ = ["DURATION", "FAULT_END", "FAULT_START", "GNSS_TARGET", "MODES", "RunMetrics", "fault_schedule",
           "monte_carlo", "protocol_config", "run_protocol"]
