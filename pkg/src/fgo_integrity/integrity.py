"""Windowed chi-square fault detection and exclusion, fault-mode risk allocation,
and position error bounds (PEB) from sensitivity matrices and characteristic slopes.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy import stats

from .factors import SOURCES, WhitenedResidual

log = logging.getLogger(__name__)

SENSOR_CLASSES = ("gnss", "imu", "vision")


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class DetectionConfig:
    """Detection window and per-exposure false-alarm / missed-detection probabilities.

    Probabilities are quoted per hour.  By default they are applied directly
    to every test (one exposure per test); with ``convert_rates`` they are
    scaled to the exposure interval ``exposure`` seconds.
    """

    window: int = 1  # epochs; see the README for why not the solver window length
    p_fa: float = 1e-5
    p_md: float = 1e-3
    exposure: float = 3600.0
    convert_rates: bool = False

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("detection window must be at least one epoch")
        for name in ("p_fa", "p_md"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if not self.exposure > 0:
            raise ValueError("exposure interval must be positive")

    def _scale(self, p: float) -> float:
        if not self.convert_rates:
            return p
        return min(p * self.exposure / 3600.0, 0.5)

    @property
    def fa(self) -> float:
        return self._scale(self.p_fa)

    @property
    def md(self) -> float:
        return self._scale(self.p_md)


class FaultMode(NamedTuple):
    gnss: bool
    imu: bool
    vision: bool

    @property
    def label(self) -> str:
        s = "".join(c for c, f in zip("GIV", self) if f)
        return s or "FF"

    @property
    def sensors(self) -> tuple:
        return tuple(n for n, f in zip(SENSOR_CLASSES, self) if f)

    @classmethod
    def parse(cls, label: str) -> "FaultMode":
        label = label.upper()
        if label == "FF":
            return cls(False, False, False)
        if not label or not set(label) <= set("GIV"):
            raise ValueError(f"bad fault mode label {label!r}")
        return cls("G" in label, "I" in label, "V" in label)


ALL_MODES = tuple(FaultMode(*bits) for bits in itertools.product((False, True), repeat=3))
# order used in tables and CSV columns
MODE_ORDER = ("FF", "I", "G", "V", "GI", "IV", "GV", "GIV")


def fault_mode_priors(p_g: float, p_i: float, p_v: float) -> dict:
    """Joint prior of every fault mode assuming independent sensor faults."""
    for p in (p_g, p_i, p_v):
        if not 0.0 < p < 1.0:
            raise ValueError("sensor fault priors must lie in (0, 1)")
    out = {}
    for m in ALL_MODES:
        out[m] = ((p_g if m.gnss else 1.0 - p_g) * (p_i if m.imu else 1.0 - p_i)
                  * (p_v if m.vision else 1.0 - p_v))
    return out


def bilateral_quantile(p: float) -> float:
    """``K`` with ``P(|N(0,1)| > K) = p``."""
    if not 0.0 < p <= 1.0:
        raise ValueError("probability must lie in (0, 1]")
    return float(stats.norm.isf(0.5 * p))


@dataclass(frozen=True)
class IntegrityBudget:
    p_hmi_total: float
    horizontal_share: float
    vertical_share: float
    p_g: float
    p_i: float
    p_v: float
    cutoff: float
    priors: dict
    allocated: dict  # FaultMode -> allocated risk
    p_hmi_given: dict  # FaultMode -> P(HMI | F)
    k_md: dict  # FaultMode -> K_md

    @property
    def modes(self) -> tuple:
        return tuple(m for m in sorted(self.allocated, key=lambda m: MODE_ORDER.index(m.label)))

    @property
    def horizontal_budget(self) -> float:
        return self.p_hmi_total * self.horizontal_share


def allocate_integrity_risk(p_hmi_total: float = 1e-7, horizontal_share: float = 0.5,
                            p_g: float = 1e-5, p_i: float = 1e-3, p_v: float = 1e-4,
                            cutoff: float = 1e-9) -> IntegrityBudget:
    """Split the horizontal integrity budget equally over modes whose prior reaches ``cutoff``."""
    if not 0.0 < p_hmi_total < 1.0:
        raise ValueError("total integrity risk must lie in (0, 1)")
    if not 0.0 < horizontal_share <= 1.0:
        raise ValueError("horizontal share must lie in (0, 1]")
    priors = fault_mode_priors(p_g, p_i, p_v)
    kept = [m for m in ALL_MODES if priors[m] >= cutoff]
    if not kept:
        raise ValueError(f"every fault mode falls below the allocation cutoff {cutoff:g}")
    h = p_hmi_total * horizontal_share
    share = h / len(kept)
    allocated = {m: share for m in kept}
    given = {m: min(share / priors[m], 1.0) for m in kept}
    k_md = {m: bilateral_quantile(given[m]) for m in kept}
    return IntegrityBudget(p_hmi_total, horizontal_share, 1.0 - horizontal_share, p_g, p_i, p_v,
                           cutoff, priors, allocated, given, k_md)


# ------------------------------------------------------------------ detection

@dataclass
class StackedResiduals:
    vector: np.ndarray
    labels: list  # (epoch, label) per component

    @property
    def dof(self) -> int:
        return int(self.vector.size)


def stack_window_residuals(epochs, window: int) -> dict:
    """Concatenate whitened residuals of the last ``window`` epochs per sensor class.

    ``epochs`` is a sequence (oldest first) of iterables of
    :class:`WhitenedResidual`; fewer epochs than ``window`` use all available.
    """
    if window < 1:
        raise ValueError("window must be at least one epoch")
    recent = list(epochs)[-window:]
    parts = {s: ([], []) for s in SOURCES}
    for residuals in recent:
        for w in residuals:
            if not isinstance(w, WhitenedResidual):
                raise TypeError("expected WhitenedResidual entries")
            parts[w.source][0].append(w.whitened)
            parts[w.source][1].extend((w.epoch, lab) for lab in w.labels)
    return {s: StackedResiduals(np.concatenate(v) if v else np.zeros(0), lab)
            for s, (v, lab) in parts.items()}


def test_statistic(stacked) -> float:
    v = stacked.vector if isinstance(stacked, StackedResiduals) else np.asarray(stacked, dtype=float)
    return float(v @ v)


def detection_threshold(dof: int, p_fa: float) -> float:
    """Central chi-square quantile at ``1 - p_fa``."""
    if dof < 1:
        raise ValueError("degrees of freedom must be at least 1")
    if not 0.0 < p_fa < 1.0:
        raise ValueError("false-alarm probability must lie in (0, 1)")
    return float(stats.chi2.isf(p_fa, dof))


_LAMBDA_CACHE: dict = {}


def min_detectable_noncentrality(dof: int, p_fa: float, p_md: float, rtol: float = 1e-10,
                                 max_steps: int = 200) -> float:
    """Noncentrality whose chi-square CDF at the detection threshold equals ``p_md`` (bisection)."""
    key = (int(dof), float(p_fa), float(p_md), rtol)
    if key in _LAMBDA_CACHE:
        return _LAMBDA_CACHE[key]
    if not 0.0 < p_md < 1.0:
        raise ValueError("missed-detection probability must lie in (0, 1)")
    T = detection_threshold(dof, p_fa)

    def f(lam):
        return stats.ncx2.cdf(T, dof, lam) - p_md if lam > 0 else stats.chi2.cdf(T, dof) - p_md

    lo, hi = 0.0, max(T, 1.0)
    if f(lo) <= 0.0:
        raise ValueError("missed-detection probability exceeds the fault-free acceptance probability")
    steps = 0
    while f(hi) > 0.0:
        lo, hi = hi, 2.0 * hi
        steps += 1
        if steps > max_steps:
            raise ConvergenceError("failed to bracket the noncentrality root")
    for _ in range(max_steps):
        mid = 0.5 * (lo + hi)
        if f(mid) > 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= rtol * hi:
            lam = 0.5 * (lo + hi)
            _LAMBDA_CACHE[key] = lam
            return lam
    raise ConvergenceError(f"bisection did not converge in {max_steps} steps")


@dataclass
class ClassTest:
    statistic: float
    threshold: float
    dof: int

    @property
    def alarm(self) -> bool:
        return self.dof > 0 and self.statistic > self.threshold

    @property
    def ratio(self) -> float:
        return self.statistic / self.threshold if self.dof > 0 else 0.0


def run_tests(stacked: dict, cfg: DetectionConfig) -> dict:
    """Test statistic, threshold and dof per sensor class (empty classes never alarm)."""
    out = {}
    for s in SENSOR_CLASSES:
        st = stacked.get(s)
        dof = st.dof if st is not None else 0
        T = test_statistic(st) if dof else 0.0
        thr = detection_threshold(dof, cfg.fa) if dof else math.inf
        out[s] = ClassTest(T, thr, dof)
    return out


def worst_contributor(stacked: StackedResiduals):
    """Label with the largest windowed sum of squared components."""
    sums: dict = {}
    for (ep, lab), v in zip(stacked.labels, stacked.vector):
        sums[lab] = sums.get(lab, 0.0) + float(v * v)
    return max(sums.items(), key=lambda kv: (kv[1], str(kv[0])))[0] if sums else None


@dataclass
class Exclusion:
    sensor: str
    target: object  # satellite id for gnss, epoch index for imu/vision
    statistic: float
    threshold: float


@dataclass
class FdeResult:
    tests: dict  # final ClassTest per sensor class
    exclusions: list = field(default_factory=list)
    exhausted: list = field(default_factory=list)  # sensor classes with nothing left to exclude
    initial_tests: dict = field(default_factory=dict)

    @property
    def alarms(self) -> list:
        return [s for s, t in self.initial_tests.items() if t.alarm]


def fde(evaluate: Callable[[], dict], exclude: Callable[[Exclusion], bool], cfg: DetectionConfig,
        current_epoch: int, max_rounds: int = 50) -> FdeResult:
    """Detect and exclude faults until every class passes or is exhausted.

    ``evaluate()`` re-solves and returns stacked residuals per class;
    ``exclude(x)`` applies one exclusion and returns ``False`` when nothing
    could be removed.  Each round removes the top contributor of the class
    whose statistic most exceeds its threshold.
    """
    stacked = evaluate()
    tests = run_tests(stacked, cfg)
    res = FdeResult(tests, initial_tests=tests)
    for _ in range(max_rounds):
        alarms = [s for s in SENSOR_CLASSES if tests[s].alarm and s not in res.exhausted]
        if not alarms:
            break
        s = max(alarms, key=lambda c: tests[c].ratio)
        target = worst_contributor(stacked[s]) if s == "gnss" else current_epoch
        x = Exclusion(s, target, tests[s].statistic, tests[s].threshold)
        if target is None or not exclude(x):
            res.exhausted.append(s)
            continue
        res.exclusions.append(x)
        stacked = evaluate()
        tests = run_tests(stacked, cfg)
    res.tests = tests
    return res


# ---------------------------------------------------------- error bounding

def sensitivity_matrix(J, W) -> tuple:
    """``B = (J^T W J)^-1 J^T W`` and whether a pseudo-inverse was needed."""
    J = np.atleast_2d(np.asarray(J, dtype=float))
    W = np.atleast_2d(np.asarray(W, dtype=float))
    N = J.T @ W @ J
    N = 0.5 * (N + N.T)
    w, V = np.linalg.eigh(N)
    wmax = w.max() if w.size else 0.0
    flagged = not (w.size and w.min() > 0.0 and wmax / w.min() <= 1e12)
    if flagged:
        keep = w > wmax * 1e-12
        Ninv = (V[:, keep] / w[keep]) @ V[:, keep].T
    else:
        Ninv = (V / w) @ V.T
    return Ninv @ J.T @ W, flagged


@dataclass
class SlopeAnalysis:
    sensor: str
    B: np.ndarray
    slopes: np.ndarray  # (n_state, n_residual)
    max_slope: np.ndarray  # per state axis
    lambda_a: float
    pseudo_inverse: bool = False

    def __post_init__(self):
        if np.any(self.slopes < 0):
            raise ValueError("slopes are non-negative by construction")
        if not self.lambda_a > 0:
            raise ValueError("minimum detectable noncentrality must be positive")

    @classmethod
    def excluded(cls, sensor: str, n_state: int = 3, lambda_a: float = 1.0) -> "SlopeAnalysis":
        """Placeholder for a sensor removed by exclusion: it cannot bias the estimate."""
        return cls(sensor, np.zeros((n_state, 0)), np.zeros((n_state, 0)), np.zeros(n_state), lambda_a)


def slopes(B, tau, sensor: str = "", lambda_a: float = 1.0, pseudo_inverse: bool = False) -> SlopeAnalysis:
    """Characteristic slopes ``|b_qm| / sqrt(tau_mm)`` and their per-axis maxima."""
    B = np.atleast_2d(np.asarray(B, dtype=float))
    tau = np.asarray(tau, dtype=float)
    d = np.diag(tau) if tau.ndim == 2 else tau
    if np.any(~(d > 0)):
        raise ValueError("residual weights tau_mm must be positive")
    S = np.abs(B) / np.sqrt(d)[None, :]
    mx = S.max(axis=1) if S.shape[1] else np.zeros(S.shape[0])
    return SlopeAnalysis(sensor, B, S, mx, lambda_a, pseudo_inverse)


def position_error_bounding(mode: FaultMode, P, slope_map: dict, budget: IntegrityBudget,
                            axes=(0, 1)) -> dict:
    """Per-axis PEB of ``mode`` and the horizontal root-sum-square over ``axes``."""
    if mode not in budget.k_md:
        raise ValueError(f"fault mode {mode.label} is not allocated")
    P = np.atleast_2d(np.asarray(P, dtype=float))
    xi = np.sqrt(np.clip(np.diag(P), 0.0, None))
    peb = budget.k_md[mode] * xi
    for s in mode.sensors:
        if s not in slope_map:
            raise KeyError(f"mode {mode.label} needs the slope analysis of {s}")
        sa = slope_map[s]
        peb = peb + sa.max_slope[: peb.size] * math.sqrt(sa.lambda_a)
    return {"axes": peb, "horizontal": float(np.sqrt(np.sum(peb[list(axes)] ** 2))), "xi": xi}


@dataclass
class PebReport:
    epoch: int
    time: float
    tests: dict  # sensor -> ClassTest
    exclusions: list
    peb: dict  # mode label -> per-axis PEB (E, N, U)
    peb_h: dict  # mode label -> horizontal PEB
    hpe: float
    al: float
    continuity_alert: bool = False

    def __post_init__(self):
        for lab, v in self.peb.items():
            if np.any(np.asarray(v) < 0):
                raise ValueError(f"negative PEB for mode {lab}")

    @property
    def available(self) -> dict:
        return {m: v <= self.al for m, v in self.peb_h.items()}


def availability(peb_series, al: float) -> float:
    """Percentage of epochs whose horizontal PEB does not exceed ``al``."""
    if not al > 0:
        raise ValueError("alert limit must be positive")
    v = np.asarray(list(peb_series), dtype=float)
    if v.size == 0:
        raise ValueError("empty PEB series")
    return 100.0 * float(np.mean(v <= al))


def summarize(reports, al: float, modes=None) -> dict:
    """Per-mode average HPE, average horizontal PEB and availability (percent)."""
    reports = list(reports)
    if not reports:
        raise ValueError("no epochs to summarise")
    modes = modes or [m for m in MODE_ORDER if m in reports[0].peb_h]
    hpe = float(np.mean([r.hpe for r in reports]))
    out = {}
    for m in modes:
        series = [r.peb_h[m] for r in reports]
        out[m] = {"avg_error": hpe, "avg_peb": float(np.mean(series)), "availability": availability(series, al)}
    return out
