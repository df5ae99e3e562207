"""Command-line batch pipeline: ``run``, ``replay`` and ``compare``.

Exit codes
    0  success (low availability is a result, not an error)
    2  configuration or input error (bad config file, bad scenario dump, epoch mismatch)
    3  observability failure in the estimator
    4  continuity alert (every satellite excluded at some epoch; outputs are still written)
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import logging
import math
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields, replace

import numpy as np

from . import __version__
from .integrity import SENSOR_CLASSES, DetectionConfig
from .pipeline import RunConfig, RunResult, run_scenario
from .scenario import (
    INI_KEYS,
    Scenario,
    ScenarioError,
    build_scenario,
    dump_scenario,
    load_scenario,
    scenario_config_from_ini,
)
from .solver import ObservabilityError, SolverConfig

log = logging.getLogger("fgo_integrity")

EXIT_OK, EXIT_CONFIG, EXIT_OBSERVABILITY, EXIT_CONTINUITY = 0, 2, 3, 4

EPOCHS_FILE = "epochs.csv"
SUMMARY_FILE = "summary.txt"
MANIFEST_FILE = "manifest.json"
DUMP_FILE = "scenario.jsonl"

RUN_KEYS = {"seed", "fde", "faults", "perturb_initial", "init_epochs"}
INTEGRITY_KEYS = {"p_hmi_total", "horizontal_share", "p_g", "p_i", "p_v", "cutoff", "al",
                  "p_fa", "p_md", "detection_window", "exposure", "convert_rates"}


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config

def _typed(section, key: str, like):
    try:
        if isinstance(like, bool):
            return section.getboolean(key)
        if isinstance(like, int):
            return section.getint(key)
        return section.getfloat(key)
    except ValueError as exc:
        raise ConfigError(f"[{section.name}] {key}: {exc}") from None


def parse_config(text: str) -> RunConfig:
    """Build a :class:`RunConfig` from INI text (see README for every key)."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from None
    solver_keys = {f.name for f in fields(SolverConfig)}
    known = dict(INI_KEYS, run=RUN_KEYS, integrity=INTEGRITY_KEYS, solver=solver_keys)
    for name in cp.sections():
        if name not in known:
            raise ConfigError(f"unknown section [{name}]")
        allowed = known[name]
        if allowed is not None:
            extra = set(cp[name]) - allowed
            if extra:
                raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(extra))}")
    try:
        scen = scenario_config_from_ini(cp)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"scenario: {exc}") from None

    base = RunConfig()
    kw = {}
    if cp.has_section("run"):
        s = cp["run"]
        for k in RUN_KEYS & set(s):
            kw[k] = _typed(s, k, getattr(base, k))
    solver = base.solver
    if cp.has_section("solver"):
        s = cp["solver"]
        try:
            solver = replace(solver, **{k: _typed(s, k, getattr(solver, k)) for k in s})
        except ValueError as exc:
            raise ConfigError(f"[solver] {exc}") from None
    det = base.detection
    if cp.has_section("integrity"):
        s = cp["integrity"]
        dk = {}
        for k in set(s):
            if k == "detection_window":
                dk["window"] = _typed(s, k, 1)
            elif k in ("p_fa", "p_md", "exposure", "convert_rates"):
                dk[k] = _typed(s, k, getattr(det, k))
            else:
                kw[k] = _typed(s, k, getattr(base, k))
        try:
            det = replace(det, **dk)
        except ValueError as exc:
            raise ConfigError(f"[integrity] {exc}") from None
    try:
        cfg = replace(base, scenario=scen, solver=solver, detection=det, **kw)
        cfg.budget()
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path: str) -> RunConfig:
    if not os.path.isfile(path):
        raise ConfigError(f"config file {path!r} does not exist")
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def config_dict(cfg: RunConfig) -> dict:
    d = asdict(cfg)
    d["scenario"] = cfg.scenario.to_dict()
    return d


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(config_dict(cfg), sort_keys=True, separators=(",", ":"), default=list)
    return hashlib.sha256(blob.encode()).hexdigest()


# ----------------------------------------------------------------- outputs

def _num(x: float) -> str:
    # shortest round-trip text keeps the CSV exact and byte-stable
    return repr(float(x))


def epoch_columns(modes) -> list:
    cols = ["epoch", "time", "truth_e", "truth_n", "truth_u", "est_e", "est_n", "est_u", "hpe"]
    for s in SENSOR_CLASSES:
        cols += [f"T_{s}", f"thr_{s}"]
    cols += ["exclusions", "continuity_alert", "faults"]
    cols += [f"peb_{m}" for m in modes]
    cols += [f"avail_{m}" for m in modes]
    return cols


def epoch_units(modes) -> list:
    units = ["-", "s"] + ["m"] * 7
    units += ["-", "-"] * len(SENSOR_CLASSES)
    units += ["-", "-", "-"]
    units += ["m"] * len(modes) + ["-"] * len(modes)
    return units


def epochs_csv(result: RunResult) -> str:
    modes = result.modes
    cols = epoch_columns(modes)
    buf = io.StringIO()
    buf.write("# units: " + ",".join(f"{c}[{u}]" for c, u in zip(cols, epoch_units(modes))) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in result.records:
        row = [r.epoch, _num(r.time), *map(_num, r.truth_n), *map(_num, r.est_n), _num(r.hpe)]
        for s in SENSOR_CLASSES:
            t = r.tests.get(s)
            row += [_num(t.statistic), _num(t.threshold)] if t is not None else ["nan", "nan"]
        row += [";".join(r.exclusions), int(r.continuity_alert), ";".join(r.faults)]
        row += [_num(r.peb_h[m]) for m in modes]
        row += [int(r.peb_h[m] <= r.al) for m in modes]
        w.writerow(row)
    return buf.getvalue()


def read_epochs_csv(path: str) -> list:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def summary_table(rows, modes, cfg: RunConfig) -> str:
    """Per-mode average error, average PEB and availability, computed from CSV rows."""
    hpe = [float(r["hpe"]) for r in rows]
    avg_err = sum(hpe) / len(hpe)
    lines = [f"P_HMI,total = {cfg.p_hmi_total:g}   AL = {cfg.al:g} m   FDE = {'on' if cfg.fde else 'off'}"
             f"   epochs = {len(rows)}"]
    head = f"{'':<20}" + "".join(f"{m:>9}" for m in modes)
    lines.append(head)
    err = f"{'Average error (m)':<20}" + "".join(f"{avg_err:>9.2f}" for _ in modes)
    peb = f"{'Average PEB (m)':<20}"
    av = f"{'Availability (%)':<20}"
    for m in modes:
        p = [float(r[f"peb_{m}"]) for r in rows]
        a = [int(r[f"avail_{m}"]) for r in rows]
        peb += f"{sum(p) / len(p):>9.2f}"
        av += f"{100.0 * sum(a) / len(a):>9.1f}"
    lines += [err, peb, av]
    return "\n".join(lines) + "\n"


def manifest(cfg: RunConfig, result: RunResult, source: str, status: int) -> dict:
    import scipy

    return {
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "source": source,
        "fde": cfg.fde,
        "epochs": len(result.records),
        "continuity_alerts": result.continuity_alerts,
        "exit_status": status,
        "versions": {"fgo_integrity": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "config": config_dict(cfg),
    }


def svg_plot(result: RunResult, width: int = 720, height: int = 360) -> str:
    """HPE (black) against every horizontal PEB series."""
    recs = result.records
    t = [r.time for r in recs]
    series = {m: [r.peb_h[m] for r in recs] for m in result.modes}
    series["HPE"] = [r.hpe for r in recs]
    ymax = max(max(v) for v in series.values()) * 1.1 or 1.0
    t0, t1 = min(t), max(t) if max(t) > min(t) else min(t) + 1.0
    pad = 40

    def xy(ti, yi):
        x = pad + (ti - t0) / (t1 - t0) * (width - 2 * pad)
        y = height - pad - yi / ymax * (height - 2 * pad)
        return f"{x:.1f},{y:.1f}"

    colours = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
           f'<text x="4" y="{pad - 8}" font-size="11">{ymax:.1f} m</text>']
    for i, (name, ys) in enumerate(series.items()):
        c = "black" if name == "HPE" else colours[i % len(colours)]
        pts = " ".join(xy(a, b) for a, b in zip(t, ys))
        out.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.2" points="{pts}"/>')
        out.append(f'<text x="{width - pad + 4}" y="{pad + 12 * i}" font-size="10" fill="{c}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_outputs(out_dir: str, cfg: RunConfig, result: RunResult, source: str, svg: bool = False) -> int:
    os.makedirs(out_dir, exist_ok=True)
    status = EXIT_CONTINUITY if result.continuity_alerts else EXIT_OK
    text = epochs_csv(result)
    with open(os.path.join(out_dir, EPOCHS_FILE), "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    rows = read_epochs_csv(os.path.join(out_dir, EPOCHS_FILE))
    with open(os.path.join(out_dir, SUMMARY_FILE), "w", encoding="utf-8") as fh:
        fh.write(summary_table(rows, result.modes, cfg))
    with open(os.path.join(out_dir, MANIFEST_FILE), "w", encoding="utf-8") as fh:
        json.dump(manifest(cfg, result, source, status), fh, indent=1, sort_keys=True, default=list)
        fh.write("\n")
    if svg:
        with open(os.path.join(out_dir, "hpe_peb.svg"), "w", encoding="utf-8") as fh:
            fh.write(svg_plot(result))
    return status


# ---------------------------------------------------------------- commands

def execute(cfg: RunConfig, out_dir: str, scenario: Scenario | None = None, source: str = "generated",
            svg: bool = False) -> int:
    """Run one estimation and write its outputs; returns the exit status."""
    try:
        sc = scenario if scenario is not None else build_scenario(cfg.scenario, cfg.seed)
    except (ScenarioError, ValueError) as exc:
        log.error("scenario error: %s", exc)
        return EXIT_CONFIG
    if scenario is None:
        os.makedirs(out_dir, exist_ok=True)
        dump_scenario(sc, os.path.join(out_dir, DUMP_FILE))
    try:
        result = run_scenario(sc, cfg)
    except ObservabilityError as exc:
        log.error("observability failure: %s", exc)
        return EXIT_OBSERVABILITY
    except ValueError as exc:
        log.error("run error: %s", exc)
        return EXIT_CONFIG
    status = write_outputs(out_dir, cfg, result, source, svg)
    if status == EXIT_CONTINUITY:
        log.warning("%d continuity alert(s)", result.continuity_alerts)
    return status


def _mc_worker(args):
    cfg, out_dir, svg = args
    logging.basicConfig(level=logging.WARNING)
    return execute(cfg, out_dir, svg=svg)


def run_montecarlo(cfg: RunConfig, out_dir: str, n: int, workers: int | None = None, svg: bool = False) -> int:
    """``n`` runs with seeds ``seed, seed+1, ...`` in ``out_dir/run_XXXX``; worst exit status wins."""
    jobs = [(replace(cfg, seed=cfg.seed + i), os.path.join(out_dir, f"run_{i:04d}"), svg) for i in range(n)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        codes = list(pool.map(_mc_worker, jobs))
    lines = ["run,seed,status"] + [f"run_{i:04d},{cfg.seed + i},{c}" for i, c in enumerate(codes)]
    with open(os.path.join(out_dir, "montecarlo.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return max(codes) if codes else EXIT_OK


def compare_runs(dir_a: str, dir_b: str) -> dict:
    """Per-epoch ``B - A`` differences of HPE and every PEB, plus the in-fault HPE contrast."""
    a = read_epochs_csv(os.path.join(dir_a, EPOCHS_FILE))
    b = read_epochs_csv(os.path.join(dir_b, EPOCHS_FILE))
    if [r["epoch"] for r in a] != [r["epoch"] for r in b] or [r["time"] for r in a] != [r["time"] for r in b]:
        raise ConfigError("runs do not cover identical epochs")
    modes = [c[4:] for c in a[0].keys() if c.startswith("peb_")] if a else []
    rows, infault = [], []
    for ra, rb in zip(a, b):
        d = {"epoch": int(ra["epoch"]), "time": float(ra["time"]),
             "d_hpe": float(rb["hpe"]) - float(ra["hpe"])}
        for m in modes:
            d[f"d_peb_{m}"] = float(rb[f"peb_{m}"]) - float(ra[f"peb_{m}"])
        rows.append(d)
        if ra["faults"] or rb["faults"]:
            infault.append((float(ra["hpe"]), float(rb["hpe"])))
    summ = {"epochs": len(rows), "fault_epochs": len(infault),
            "max_abs_d_hpe": max((abs(r["d_hpe"]) for r in rows), default=0.0)}
    if infault:
        ha, hb = np.array(infault).T
        summ.update(mean_fault_hpe_a=float(ha.mean()), mean_fault_hpe_b=float(hb.mean()),
                    max_fault_hpe_a=float(ha.max()), max_fault_hpe_b=float(hb.max()),
                    max_fault_d_hpe=float(np.max(hb - ha)))
    return {"modes": modes, "rows": rows, "summary": summ}


def format_comparison(rep: dict) -> str:
    modes = rep["modes"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "time", "d_hpe"] + [f"d_peb_{m}" for m in modes])
    for r in rep["rows"]:
        w.writerow([r["epoch"], _num(r["time"]), f"{r['d_hpe']:.6f}"] + [f"{r[f'd_peb_{m}']:.6f}" for m in modes])
    for k, v in rep["summary"].items():
        buf.write(f"# {k} = {v:.6f}\n" if isinstance(v, float) else f"# {k} = {v}\n")
    return buf.getvalue()


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fgo-integrity",
        description="GNSS/INS/vision factor-graph estimation with integrity monitoring.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="exit codes:\n  0  success (low availability is a result, not an error)\n"
               "  2  config or input error (bad config, bad scenario dump, epoch mismatch)\n"
               "  3  observability failure in the estimator\n"
               "  4  continuity alert: every satellite excluded at some epoch (outputs still written)",
    )
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="generate a scenario and run the estimator")
    r.add_argument("--config", help="INI config file (defaults apply when omitted)")
    r.add_argument("--no-fde", action="store_true", help="disable fault detection and exclusion")
    r.add_argument("--seed", type=int, help="override the config seed")
    r.add_argument("--out", default="out", help="output directory (default: out)")
    r.add_argument("--montecarlo", type=int, metavar="N", help="N seeded runs in parallel, one subdirectory each")
    r.add_argument("--workers", type=int, help="parallel processes for --montecarlo")
    r.add_argument("--svg", action="store_true", help="also write hpe_peb.svg")

    y = sub.add_parser("replay", help="run the estimator on a recorded scenario dump")
    y.add_argument("--dump", required=True, help="scenario dump written by run (scenario.jsonl)")
    y.add_argument("--config", help="INI config for estimator and integrity settings; scenario keys are ignored")
    y.add_argument("--no-fde", action="store_true")
    y.add_argument("--out", default="out_replay")
    y.add_argument("--svg", action="store_true")

    c = sub.add_parser("compare", help="per-epoch HPE/PEB differences, B minus A")
    c.add_argument("dir_a")
    c.add_argument("dir_b")
    c.add_argument("--out", help="write the report here instead of stdout")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "compare":
            text = format_comparison(compare_runs(args.dir_a, args.dir_b))
            if args.out:
                with open(args.out, "w", encoding="utf-8") as fh:
                    fh.write(text)
            else:
                sys.stdout.write(text)
            return EXIT_OK
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.no_fde:
            cfg = replace(cfg, fde=False)
        if args.command == "replay":
            sc = load_scenario(args.dump)
            cfg = replace(cfg, scenario=sc.config, seed=sc.seed)
            return execute(cfg, args.out, sc, source="replay", svg=args.svg)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.montecarlo:
            if args.montecarlo < 1:
                raise ConfigError("--montecarlo needs a positive count")
            return run_montecarlo(cfg, args.out, args.montecarlo, args.workers, args.svg)
        return execute(cfg, args.out, svg=args.svg)
    except (ConfigError, ScenarioError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG


__all__ = ["ConfigError", "DetectionConfig", "compare_runs", "config_hash", "epochs_csv", "execute",
           "load_config", "main", "parse_config", "run_montecarlo"]
