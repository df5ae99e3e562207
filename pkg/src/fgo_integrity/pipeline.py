"""Per-epoch estimation loop: solve the window, run FDE, bound the position error."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geom import SPEED_OF_LIGHT, ImuState, Rotation, rotation_from_yaw
from .integrity import (
    SENSOR_CLASSES,
    DetectionConfig,
    Exclusion,
    FaultMode,
    SlopeAnalysis,
    allocate_integrity_risk,
    detection_threshold,
    fde,
    min_detectable_noncentrality,
    position_error_bounding,
    run_tests,
    sensitivity_matrix,
    slopes,
    stack_window_residuals,
)
from .scenario import Scenario, ScenarioConfig
from .solver import SlidingWindow, SolverConfig, state_covariance

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    p_hmi_total: float = 1e-7
    horizontal_share: float = 0.5
    p_g: float = 1e-5
    p_i: float = 1e-3
    p_v: float = 1e-4
    cutoff: float = 1e-9
    al: float = 6.0  # m
    fde: bool = True
    faults: bool = True
    seed: int = 0
    perturb_initial: bool = True  # draw the initial state from its prior (noisy scenarios only)
    nees: bool = False  # record the position NEES of every epoch
    # leading keyframes that only initialise the window: the first one carries no
    # IMU factor and no visual residual, so no integrity output is reported for it
    init_epochs: int = 1

    def __post_init__(self):
        if not self.al > 0:
            raise ValueError("alert limit must be positive")
        if self.init_epochs < 0:
            raise ValueError("init_epochs must be non-negative")

    def budget(self):
        return allocate_integrity_risk(self.p_hmi_total, self.horizontal_share, self.p_g, self.p_i,
                                       self.p_v, self.cutoff)


@dataclass
class EpochRecord:
    epoch: int
    time: float
    truth_n: np.ndarray
    est_n: np.ndarray
    hpe: float
    tests: dict  # sensor -> ClassTest after FDE
    initial_tests: dict  # sensor -> ClassTest before FDE
    exclusions: list  # labels of exclusions made at this epoch
    peb: dict  # mode label -> (E, N, U)
    peb_h: dict  # mode label -> horizontal PEB
    al: float
    continuity_alert: bool = False
    faults: tuple = ()
    nees: float = math.nan

    @property
    def available(self) -> dict:
        return {m: v <= self.al for m, v in self.peb_h.items()}


@dataclass
class RunResult:
    config: RunConfig
    records: list
    modes: tuple
    continuity_alerts: int = 0

    def summary(self) -> dict:
        hpe = float(np.mean([r.hpe for r in self.records]))
        out = {}
        for m in self.modes:
            s = np.array([r.peb_h[m] for r in self.records])
            out[m] = {"avg_error": hpe, "avg_peb": float(s.mean()),
                      "availability": 100.0 * float(np.mean(s <= self.config.al))}
        return out


def initial_state(truth: ImuState, psi_true: float, cfg: RunConfig, noisy: bool):
    """Initial keyframe state and yaw offset, drawn from the prior when ``noisy``."""
    if not (noisy and cfg.perturb_initial):
        return truth, psi_true
    sc = cfg.solver
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    n = rng.standard_normal
    dth = np.array([sc.prior_tilt, sc.prior_tilt, sc.prior_yaw]) * n(3)
    x0 = truth.replace(
        p=truth.p + sc.prior_p * n(3),
        v=truth.v + sc.prior_v * n(3),
        q=truth.q * Rotation.from_rotvec(dth),
        ba=truth.ba + sc.prior_ba * n(3),
        bg=truth.bg + sc.prior_bg * n(3),
        clock=truth.clock + sc.prior_clock / SPEED_OF_LIGHT * n(4),
        drift=truth.drift + sc.prior_drift / SPEED_OF_LIGHT * n(),
    )
    return x0, psi_true + sc.prior_psi * n()


class Estimator:
    """Runs one scenario epoch by epoch."""

    def __init__(self, scenario: Scenario, cfg: RunConfig):
        self.sc = scenario
        self.cfg = cfg
        self.budget = cfg.budget()
        self.modes = tuple(m.label for m in self.budget.modes)
        self.sticky: set = set()
        self.imu_sticky = False
        self.window: SlidingWindow | None = None
        self.alerts = 0

    def _stacked(self):
        return stack_window_residuals(self.window.window_residuals(), self.cfg.detection.window)

    def _exclude(self, x: Exclusion, epoch_index: int) -> bool:
        w = self.window
        if x.sensor == "gnss":
            ok = w.exclude_satellite(x.target)
            if ok:
                self.sticky.add(x.target)
            return ok
        if x.sensor == "imu":
            ok = w.exclude_imu(epoch_index)
            self.imu_sticky = self.imu_sticky or ok
            return ok
        return w.exclude_vision(epoch_index)

    def _screen_sticky(self):
        """Re-admit excluded satellites whose current single-epoch residual passes."""
        if not self.sticky:
            return False
        kf = self.window.latest
        thr = detection_threshold(1, self.cfg.detection.fa)
        readmit = []
        for i, sid in enumerate(kf.sat_ids):
            if sid not in self.sticky:
                continue
            m = np.zeros(len(kf.sat_ids), dtype=bool)
            m[i] = True
            r, *_ = self.window._gnss_rows(kf, kf.state, m)
            if float(r @ r) <= thr:
                readmit.append((i, sid))
        for i, sid in readmit:
            kf.sat_active[i] = True
            self.sticky.discard(sid)
        return bool(readmit)

    def _screen_imu(self):
        """Re-admit the newest pre-integration factor once it agrees with the solution again."""
        if not self.imu_sticky:
            return False
        w = self.window
        if w.latest.preint is None:
            return False
        if w.imu_statistic(-1) > detection_threshold(15, self.cfg.detection.fa):
            return False
        w.restore_imu(-1)
        self.imu_sticky = False
        return True

    def step(self, ep, first_state=None) -> EpochRecord:
        cfg = self.cfg
        w = self.window
        w.add_keyframe(ep, first_state)
        kf = w.latest
        if cfg.fde:
            for i, sid in enumerate(kf.sat_ids):
                if sid in self.sticky:
                    kf.sat_active[i] = False
            if self.imu_sticky and kf.preint is not None:
                kf.imu_active = False
        w.optimize()
        if cfg.fde:
            readmit = self._screen_sticky()
            if self._screen_imu() or readmit:
                w.optimize()
        exclusions = []
        if cfg.fde:
            first = [True]

            def evaluate():
                if not first[0]:
                    w.optimize()
                first[0] = False
                return self._stacked()

            res = fde(evaluate, lambda x: self._exclude(x, ep.index), cfg.detection, ep.index)
            tests, initial = res.tests, res.initial_tests
            exclusions = [f"{x.sensor}:{x.target}" if x.sensor == "gnss" else x.sensor for x in res.exclusions]
            stacked = self._stacked()
        else:
            stacked = self._stacked()
            tests = initial = run_tests(stacked, cfg.detection)
        alert = bool(len(kf.sat_ids)) and not kf.sat_active.any()
        if alert:
            self.alerts += 1
            log.warning("continuity alert at epoch %d: every satellite excluded", ep.index)

        peb, peb_h = self._bound(stacked)
        Rn = rotation_from_yaw(w.psi).matrix
        est = Rn @ kf.state.p
        truth = rotation_from_yaw(self.sc.psi).matrix @ ep.truth.p
        err = est - truth
        nees = math.nan
        if cfg.nees:
            C = w.position_covariance_n(-1)
            nees = float(err @ np.linalg.solve(C, err))
        return EpochRecord(ep.index, ep.time, truth, est, float(np.hypot(err[0], err[1])), tests, initial,
                           exclusions, peb, peb_h, cfg.al, alert, tuple(ep.faults), nees)

    def _bound(self, stacked):
        cfg = self.cfg
        systems = self.window.epoch_systems(-1)
        P = state_covariance(systems)["total"]
        smap = {}
        for s in SENSOR_CLASSES:
            dof = stacked[s].dof
            if s not in systems or dof == 0:
                smap[s] = SlopeAnalysis.excluded(s)
                continue
            J, W, pos = systems[s]
            lam = min_detectable_noncentrality(dof, cfg.detection.fa, cfg.detection.md)
            B, flagged = sensitivity_matrix(J, W)
            smap[s] = slopes(B[pos, :], W, s, lam, flagged)
        peb, peb_h = {}, {}
        for m in self.budget.modes:
            b = position_error_bounding(m, P, smap, self.budget)
            peb[m.label] = b["axes"]
            peb_h[m.label] = b["horizontal"]
        return peb, peb_h

    def run(self) -> RunResult:
        sc, cfg = self.sc, self.cfg
        epochs = sc.faulted_epochs() if cfg.faults else sc.epochs
        if len(epochs) <= cfg.init_epochs:
            raise ValueError("scenario has no epochs after initialisation")
        noisy = sc.config.noise_scale > 0
        x0, psi0 = initial_state(epochs[0].truth, sc.psi, cfg, noisy)
        self.window = SlidingWindow(sc.anchor, sc.camera, sc.gravity, sc.config.imu, cfg.solver, psi=psi0)
        records = [self.step(epochs[0], x0)]
        for ep in epochs[1:]:
            records.append(self.step(ep))
        return RunResult(cfg, records[cfg.init_epochs:], self.modes, self.alerts)


def run_scenario(scenario: Scenario, cfg: RunConfig) -> RunResult:
    return Estimator(scenario, cfg).run()


def with_faults(cfg: RunConfig, faults) -> RunConfig:
    return replace(cfg, scenario=replace(cfg.scenario, faults=tuple(faults)))


__all__ = ["EpochRecord", "Estimator", "FaultMode", "RunConfig", "RunResult", "initial_state",
           "run_scenario", "with_faults"]
