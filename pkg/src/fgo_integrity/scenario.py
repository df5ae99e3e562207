"""Synthetic ground truth, sensor measurements and step-fault injection."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .factors import CameraModel
from .geom import (
    CONSTELLATIONS,
    SPEED_OF_LIGHT,
    AnchorGeodesy,
    ImuState,
    Rotation,
    ecef_from_enu,
    rotation_from_yaw,
)

log = logging.getLogger(__name__)

GRAVITY = np.array([0.0, 0.0, -9.81])
PROFILES = ("circle", "figure-eight", "straight")
SENSORS = ("imu", "gnss", "vision")
DUMP_SCHEMA = "fgo-integrity-scenario/1"

# orbit radii (m) used to place static satellites
ORBIT_RADIUS = {"G": 26_560e3, "R": 25_510e3, "E": 29_600e3, "C": 27_900e3}


class ScenarioError(ValueError):
    pass


# ---------------------------------------------------------------- trajectory

@dataclass(frozen=True)
class TruthTrajectory:
    t: np.ndarray  # (N,)
    p: np.ndarray  # (N,3) w-frame
    v: np.ndarray
    yaw: np.ndarray  # level attitude: heading about w-frame up
    omega: np.ndarray  # (N,3) body angular rate
    f: np.ndarray  # (N,3) body specific force
    rate: float
    keyframe_rate: float
    profile: str = "circle"

    def __len__(self):
        return self.t.size

    def attitude(self, i: int) -> Rotation:
        return rotation_from_yaw(float(self.yaw[i]))

    @property
    def keyframe_stride(self) -> int:
        return int(round(self.rate / self.keyframe_rate))


def _profile_kinematics(profile: str, t, radius: float, speed: float, heading: float):
    """Analytic position, velocity and acceleration in the w-frame."""
    n = t.size
    if profile == "straight":
        d = np.array([math.cos(heading), math.sin(heading), 0.0])
        p = np.outer(t * speed, d)
        v = np.tile(d * speed, (n, 1))
        a = np.zeros((n, 3))
    elif profile == "circle":
        w = speed / radius
        th = w * t + heading - 0.5 * math.pi
        c = np.array([-radius * math.cos(heading - 0.5 * math.pi),
                      -radius * math.sin(heading - 0.5 * math.pi), 0.0])
        p = c + radius * np.column_stack([np.cos(th), np.sin(th), np.zeros(n)])
        v = radius * w * np.column_stack([-np.sin(th), np.cos(th), np.zeros(n)])
        a = -radius * w * w * np.column_stack([np.cos(th), np.sin(th), np.zeros(n)])
    elif profile == "figure-eight":
        # lemniscate of Gerono scaled so that the peak speed is close to ``speed``
        A = radius
        w = speed / A
        s, c = np.sin(w * t), np.cos(w * t)
        s2, c2 = np.sin(2 * w * t), np.cos(2 * w * t)
        p = np.column_stack([A * s, 0.5 * A * s2, np.zeros(n)])
        v = np.column_stack([A * w * c, A * w * c2, np.zeros(n)])
        a = np.column_stack([-A * w * w * s, -2 * A * w * w * s2, np.zeros(n)])
        R = rotation_from_yaw(heading).matrix
        p, v, a = p @ R.T, v @ R.T, a @ R.T
    else:
        raise ScenarioError(f"unknown trajectory profile {profile!r}; expected one of {PROFILES}")
    return p, v, a


def generate_trajectory(profile: str, duration: float, keyframe_rate: float, imu_rate: float = 200.0,
                        radius: float = 50.0, speed: float = 5.0, heading: float = 0.0) -> TruthTrajectory:
    """Level-attitude analytic trajectory sampled at ``imu_rate``.

    Body x points along the velocity (or along ``heading`` when static), body z up.
    """
    if profile not in PROFILES:
        raise ScenarioError(f"unknown trajectory profile {profile!r}; expected one of {PROFILES}")
    if not duration > 0:
        raise ScenarioError("duration must be positive")
    stride = imu_rate / keyframe_rate
    if stride < 10 or abs(stride - round(stride)) > 1e-9:
        raise ScenarioError("IMU rate must be an integer multiple (>= 10x) of the keyframe rate")
    n = int(round(duration * imu_rate)) + 1
    t = np.arange(n) / imu_rate
    p, v, a = _profile_kinematics(profile, t, radius, speed, heading)
    vh2 = v[:, 0] ** 2 + v[:, 1] ** 2
    moving = vh2 > 1e-12
    yaw = np.full(n, heading)
    yaw[moving] = np.arctan2(v[moving, 1], v[moving, 0])
    yaw = np.unwrap(yaw)
    yaw_rate = np.zeros(n)
    yaw_rate[moving] = (v[moving, 0] * a[moving, 1] - v[moving, 1] * a[moving, 0]) / vh2[moving]
    omega = np.column_stack([np.zeros(n), np.zeros(n), yaw_rate])
    cy, sy = np.cos(yaw), np.sin(yaw)
    fw = a - GRAVITY
    # R_w^b of a pure yaw rotation
    f = np.column_stack([cy * fw[:, 0] + sy * fw[:, 1], -sy * fw[:, 0] + cy * fw[:, 1], fw[:, 2]])
    p, v, yaw = _integrate_midpoint(t, p[0], v[0], yaw[0], f, yaw_rate)
    return TruthTrajectory(t=t, p=p, v=v, yaw=yaw, omega=omega, f=f, rate=float(imu_rate),
                           keyframe_rate=float(keyframe_rate), profile=profile)


def _integrate_midpoint(t, p0, v0, yaw0, f, yaw_rate):
    """Re-integrate the kinematics with the pre-integration's midpoint rule.

    The analytic profile only defines the inertial signals; the states are the
    discrete integral of those signals, so noiseless pre-integration between
    keyframes is exact up to round-off.
    """
    dt = np.diff(t)
    yaw = yaw0 + np.r_[0.0, np.cumsum(0.5 * (yaw_rate[:-1] + yaw_rate[1:]) * dt)]
    cy, sy = np.cos(yaw), np.sin(yaw)
    fw = np.column_stack([cy * f[:, 0] - sy * f[:, 1], sy * f[:, 0] + cy * f[:, 1], f[:, 2]])
    a_mid = 0.5 * (fw[:-1] + fw[1:]) + GRAVITY
    v = v0 + np.vstack([np.zeros(3), np.cumsum(a_mid * dt[:, None], axis=0)])
    p = p0 + np.vstack([np.zeros(3), np.cumsum(v[:-1] * dt[:, None] + 0.5 * a_mid * (dt * dt)[:, None],
                                               axis=0)])
    return p, v, yaw


# ---------------------------------------------------------------------- IMU

@dataclass(frozen=True)
class ImuSpec:
    acc_noise: float = 0.04  # m/s^2/sqrt(Hz)
    gyr_noise: float = 2e-3  # rad/s/sqrt(Hz)
    acc_bias: tuple = (0.0, 0.0, 0.0)  # m/s^2
    gyr_bias: tuple = (0.0, 0.0, 0.0)  # rad/s
    rate: float = 200.0  # Hz
    acc_bias_rw: float = 1e-3  # m/s^3/sqrt(Hz)
    gyr_bias_rw: float = 1e-4  # rad/s^2/sqrt(Hz)

    def __post_init__(self):
        for name in ("acc_noise", "gyr_noise", "acc_bias_rw", "gyr_bias_rw"):
            val = getattr(self, name)
            if not (math.isfinite(val) and val >= 0.0):
                raise ScenarioError(f"{name} must be finite and non-negative")
        if not self.rate > 0:
            raise ScenarioError("IMU rate must be positive")
        object.__setattr__(self, "acc_bias", tuple(float(x) for x in self.acc_bias))
        object.__setattr__(self, "gyr_bias", tuple(float(x) for x in self.gyr_bias))

    def scaled(self, k: float) -> "ImuSpec":
        return replace(self, acc_noise=self.acc_noise * k, gyr_noise=self.gyr_noise * k)


@dataclass(frozen=True)
class ImuSamples:
    t: np.ndarray
    acc: np.ndarray
    gyr: np.ndarray

    def __len__(self):
        return self.t.size

    def slice(self, i0: int, i1: int) -> "ImuSamples":
        """Samples ``i0..i1`` inclusive."""
        return ImuSamples(self.t[i0:i1 + 1], self.acc[i0:i1 + 1], self.gyr[i0:i1 + 1])


def synthesize_imu(truth: TruthTrajectory, spec: ImuSpec, seed: int) -> ImuSamples:
    """Truth plus constant bias plus white noise of standard deviation density * sqrt(rate)."""
    rng = np.random.default_rng(seed)
    n = len(truth)
    na = rng.standard_normal((n, 3)) * (spec.acc_noise * math.sqrt(truth.rate))
    ng = rng.standard_normal((n, 3)) * (spec.gyr_noise * math.sqrt(truth.rate))
    acc = truth.f + np.asarray(spec.acc_bias) + na
    gyr = truth.omega + np.asarray(spec.gyr_bias) + ng
    return ImuSamples(truth.t.copy(), acc, gyr)


# --------------------------------------------------------------------- GNSS

@dataclass(frozen=True)
class Satellite:
    sat_id: str
    constellation: str
    position: np.ndarray  # e-frame
    clock: float  # s, broadcast satellite clock offset


@dataclass(frozen=True)
class SatelliteObservation:
    sat_id: str
    constellation: str
    sat_pos: np.ndarray
    sat_clock: float
    pseudorange: float
    sigma: float
    troposphere: float = 0.0
    ionosphere: float = 0.0
    multipath: float = 0.0
    sagnac: float = 0.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ScenarioError("pseudorange sigma must be positive")
        if self.constellation not in CONSTELLATIONS:
            raise ScenarioError(f"unknown constellation {self.constellation!r}")
        r = float(np.linalg.norm(self.sat_pos))
        if not 2.0e7 <= r <= 3.0e7:
            raise ScenarioError(f"satellite {self.sat_id} radius {r:.0f} m outside MEO band")


@dataclass(frozen=True)
class ClockModel:
    bias: tuple = (1e-4, 2e-4, -1e-4, 5e-5)  # s at t=0, order G R E C
    drift: float = 1e-8  # s/s

    def at(self, t: float) -> np.ndarray:
        return np.asarray(self.bias, dtype=float) + self.drift * t


@dataclass(frozen=True)
class GnssConfig:
    sigma: float = 1.5
    counts: tuple = (("G", 10), ("R", 10), ("E", 10), ("C", 10))
    elevation_min: float = 15.0  # deg
    elevation_max: float = 85.0
    azimuth_offset: float = 0.0  # deg
    min_visible: int = 5
    troposphere: float = 0.0
    ionosphere: float = 0.0
    multipath: float = 0.0
    sagnac: float = 0.0


def make_constellation(anchor: AnchorGeodesy, cfg: GnssConfig) -> list:
    """Static satellites spread in azimuth and elevation above the anchor."""
    Rne = ecef_from_enu(anchor).matrix
    sats = []
    golden = 0.5 * (math.sqrt(5.0) - 1.0)
    for ci, (sys, n) in enumerate(cfg.counts):
        if sys not in CONSTELLATIONS:
            raise ScenarioError(f"unknown constellation {sys!r}")
        for j in range(n):
            az = math.radians(cfg.azimuth_offset) + 2 * math.pi * (j + ci / len(cfg.counts)) / n
            frac = ((j * golden) + 0.37 * ci) % 1.0
            el = math.radians(cfg.elevation_min + frac * (cfg.elevation_max - cfg.elevation_min))
            u_n = np.array([math.cos(el) * math.sin(az), math.cos(el) * math.cos(az), math.sin(el)])
            u = Rne @ u_n
            a = anchor.position
            Rorb = ORBIT_RADIUS[sys]
            au = a @ u
            rho = -au + math.sqrt(au * au - a @ a + Rorb * Rorb)
            clk = 1e-5 * math.sin(1.7 * (ci * 31 + j))
            sats.append(Satellite(f"{sys}{j + 1:02d}", sys, a + rho * u, clk))
    return sats


def receiver_ecef(p_w, psi: float, anchor: AnchorGeodesy) -> np.ndarray:
    return anchor.position + ecef_from_enu(anchor).matrix @ (rotation_from_yaw(psi).matrix @ p_w)


def synthesize_pseudoranges(positions_w, times, satellites, clock: ClockModel, cfg: GnssConfig,
                            psi: float, anchor: AnchorGeodesy, seed: int, noise_scale: float = 1.0) -> list:
    """Per-epoch lists of :class:`SatelliteObservation` at the given receiver positions."""
    rng = np.random.default_rng(seed)
    delays = cfg.troposphere + cfg.ionosphere + cfg.multipath + cfg.sagnac
    out = []
    for p_w, t in zip(positions_w, times):
        rec = receiver_ecef(p_w, psi, anchor)
        dt_rx = clock.at(t)
        up = ecef_from_enu(anchor).matrix[:, 2]
        obs = []
        for s in satellites:
            d = s.position - rec
            if d @ up <= 0.0:
                continue
            rng_geo = float(np.linalg.norm(d))
            eps = rng.standard_normal() * cfg.sigma * noise_scale
            pr = (rng_geo + SPEED_OF_LIGHT * (dt_rx[CONSTELLATIONS.index(s.constellation)] - s.clock)
                  + delays + eps)
            obs.append(SatelliteObservation(s.sat_id, s.constellation, s.position, s.clock, pr, cfg.sigma,
                                            cfg.troposphere, cfg.ionosphere, cfg.multipath, cfg.sagnac))
        if len(obs) < cfg.min_visible:
            raise ScenarioError(f"only {len(obs)} satellites visible at t={t:.3f} s")
        out.append(obs)
    return out


# ------------------------------------------------------------------- vision

@dataclass(frozen=True)
class LandmarkField:
    count: int = 800
    inner: float = 5.0  # m beyond the trajectory extent
    outer: float = 30.0
    z_min: float = -2.0
    z_max: float = 8.0
    max_range: float = 80.0
    min_depth: float = 1.0
    pixel_sigma: float = 1.0
    min_features: int = 8


@dataclass
class FeatureTrack:
    fid: int
    anchor: int  # keyframe index of the first observation
    observations: list  # [(keyframe index, pixel (2,))]
    landmark: np.ndarray
    sigma: float


def make_landmarks(truth: TruthTrajectory, cfg: LandmarkField, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    c = 0.5 * (truth.p.max(axis=0) + truth.p.min(axis=0))
    extent = float(np.max(np.linalg.norm(truth.p[:, :2] - c[:2], axis=1)))
    r = np.sqrt(rng.uniform((extent + cfg.inner) ** 2, (extent + cfg.outer) ** 2, cfg.count))
    th = rng.uniform(0.0, 2 * math.pi, cfg.count)
    z = rng.uniform(cfg.z_min, cfg.z_max, cfg.count)
    return np.column_stack([c[0] + r * np.cos(th), c[1] + r * np.sin(th), z])


def synthesize_features(truth: TruthTrajectory, landmarks, cam: CameraModel, cfg: LandmarkField,
                        seed: int, noise_scale: float = 1.0):
    """Feature tracks over keyframes.

    A landmark yields one track per contiguous run of keyframes in which it is
    visible; runs shorter than two frames are discarded.  Returns
    ``(tracks, flagged)`` where ``flagged`` lists keyframes with fewer than
    ``cfg.min_features`` observations.
    """
    landmarks = np.atleast_2d(np.asarray(landmarks, dtype=float))
    if landmarks.size == 0:
        raise ScenarioError("landmark field is empty")
    rng = np.random.default_rng(seed)
    stride = truth.keyframe_stride
    idx = np.arange(0, len(truth), stride)
    Rbc = cam.R_bc.matrix
    vis = np.zeros((idx.size, landmarks.shape[0]), dtype=bool)
    pix = np.zeros((idx.size, landmarks.shape[0], 2))
    for k, i in enumerate(idx):
        Rwb = truth.attitude(i).matrix
        xb = (landmarks - truth.p[i]) @ Rwb
        xc = xb @ Rbc.T + cam.t_bc
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = cam.pi(xc)
        uv = uv + rng.standard_normal(uv.shape) * cfg.pixel_sigma * noise_scale
        ok = ((xc[:, 2] > cfg.min_depth) & (np.linalg.norm(xc, axis=1) < cfg.max_range)
              & cam.in_image(uv))
        vis[k] = ok
        pix[k] = uv
    tracks = []
    fid = 0
    for m in range(landmarks.shape[0]):
        k = 0
        while k < idx.size:
            if not vis[k, m]:
                k += 1
                continue
            k0 = k
            while k < idx.size and vis[k, m]:
                k += 1
            if k - k0 >= 2:
                obs = [(j, pix[j, m].copy()) for j in range(k0, k)]
                tracks.append(FeatureTrack(fid, k0, obs, landmarks[m].copy(), cfg.pixel_sigma))
                fid += 1
    counts = np.zeros(idx.size, dtype=int)
    for tr in tracks:
        for j, _ in tr.observations:
            counts[j] += 1
    flagged = [int(k) for k in np.flatnonzero(counts < cfg.min_features)]
    if flagged:
        log.warning("%d keyframes observe fewer than %d features", len(flagged), cfg.min_features)
    return tracks, flagged


# ------------------------------------------------------------------- faults

@dataclass(frozen=True)
class FaultEvent:
    sensor: str
    start: float
    end: float
    accel: float = 0.0  # m/s^2
    gyro: float = 0.0  # rad/s
    range: float = 0.0  # m
    pixel: float = 0.0  # px
    target: str = "all"  # imu: axes subset such as "xyz"; gnss: satellite id

    def __post_init__(self):
        if self.sensor not in SENSORS:
            raise ScenarioError(f"unknown fault sensor {self.sensor!r}")
        if not self.start < self.end:
            raise ScenarioError("fault start must precede its end")
        if not all(math.isfinite(x) for x in (self.accel, self.gyro, self.range, self.pixel)):
            raise ScenarioError("fault magnitudes must be finite")

    def active(self, t) -> np.ndarray:
        t = np.asarray(t)
        return (t >= self.start) & (t < self.end)

    def axes(self) -> np.ndarray:
        sel = "xyz" if self.target == "all" else self.target
        if not set(sel) <= set("xyz") or not sel:
            raise ScenarioError(f"bad IMU axis selector {self.target!r}")
        return np.array([c in sel for c in "xyz"], dtype=float)

    @classmethod
    def parse(cls, text: str) -> "FaultEvent":
        """``"<sensor> <start> <end> key=value ..."``"""
        parts = text.split()
        if len(parts) < 3:
            raise ScenarioError(f"cannot parse fault event {text!r}")
        kw = {}
        for item in parts[3:]:
            k, _, v = item.partition("=")
            if k == "target":
                kw[k] = v
            elif k in ("accel", "gyro", "range", "pixel"):
                kw[k] = float(v)
            else:
                raise ScenarioError(f"unknown fault field {k!r}")
        return cls(parts[0], float(parts[1]), float(parts[2]), **kw)

    def format(self) -> str:
        out = [self.sensor, repr(self.start), repr(self.end)]
        for k in ("accel", "gyro", "range", "pixel"):
            if getattr(self, k):
                out.append(f"{k}={getattr(self, k)!r}")
        if self.target != "all":
            out.append(f"target={self.target}")
        return " ".join(out)


# ------------------------------------------------------------------- epochs

@dataclass
class MeasurementEpoch:
    index: int
    time: float
    sats: list
    feature_ids: np.ndarray  # (N,) int
    pixels: np.ndarray  # (N,2)
    pixel_sigma: float
    imu: ImuSamples  # samples from the previous keyframe to this one, both ends included
    truth: ImuState
    faults: tuple = ()


def _check_schedule(schedule, t0: float, t1: float):
    by_sensor = {}
    for ev in schedule:
        if ev.start < t0 or ev.end > t1 + 1e-9:
            raise ScenarioError(f"fault event {ev.format()!r} outside scenario span [{t0}, {t1}]")
        by_sensor.setdefault(ev.sensor, []).append(ev)
    for sensor, evs in by_sensor.items():
        evs = sorted(evs, key=lambda e: e.start)
        for a, b in zip(evs, evs[1:]):
            if b.start < a.end:
                raise ScenarioError(f"overlapping {sensor} fault events")


def inject_faults(epochs, schedule) -> list:
    """Return copies of ``epochs`` with additive step faults applied in ``[start, end)``."""
    schedule = list(schedule)
    if not schedule:
        return list(epochs)
    if epochs:
        _check_schedule(schedule, epochs[0].imu.t[0], epochs[-1].time)
    out = []
    for ep in epochs:
        labels = list(ep.faults)
        imu = ep.imu
        sats = ep.sats
        pixels = ep.pixels
        for ev in schedule:
            if ev.sensor == "imu":
                m = ev.active(imu.t)
                if m.any():
                    ax = ev.axes()
                    acc = imu.acc.copy()
                    gyr = imu.gyr.copy()
                    acc[m] += ev.accel * ax
                    gyr[m] += ev.gyro * ax
                    imu = ImuSamples(imu.t, acc, gyr)
                    labels.append("imu")
            elif ev.sensor == "gnss" and ev.active(ep.time):
                new = []
                for s in sats:
                    if ev.target in ("all", s.sat_id):
                        s = replace(s, pseudorange=s.pseudorange + ev.range)
                        labels.append(f"gnss:{s.sat_id}")
                    new.append(s)
                sats = new
            elif ev.sensor == "vision" and ev.active(ep.time) and len(pixels):
                pixels = pixels + ev.pixel
                labels.append("vision")
        out.append(replace(ep, imu=imu, sats=sats, pixels=pixels, faults=tuple(dict.fromkeys(labels))))
    return out


# ------------------------------------------------------------------- config

@dataclass(frozen=True)
class ScenarioConfig:
    profile: str = "circle"
    duration: float = 60.0
    keyframe_rate: float = 1.0
    radius: float = 50.0
    speed: float = 5.0
    heading: float = 0.0  # rad
    yaw_offset: float = 0.3  # rad, true psi between w and n
    anchor_lat: float = 22.3  # deg
    anchor_lon: float = 114.2
    anchor_height: float = 10.0
    noise_scale: float = 1.0  # multiplies every simulated noise; 0 gives noiseless data
    imu: ImuSpec = field(default_factory=ImuSpec)
    gnss: GnssConfig = field(default_factory=GnssConfig)
    clock: ClockModel = field(default_factory=ClockModel)
    camera: dict = field(default_factory=dict)  # CameraModel keyword overrides
    landmarks: LandmarkField = field(default_factory=LandmarkField)
    faults: tuple = ()

    @property
    def anchor(self) -> AnchorGeodesy:
        return AnchorGeodesy.from_latlon(math.radians(self.anchor_lat), math.radians(self.anchor_lon),
                                         self.anchor_height)

    def camera_model(self) -> CameraModel:
        return CameraModel.forward_looking(**self.camera)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["faults"] = [ev.format() for ev in self.faults]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        d["imu"] = ImuSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.get("imu", {}).items()})
        g = dict(d.get("gnss", {}))
        if "counts" in g:
            g["counts"] = tuple(tuple(x) for x in g["counts"])
        d["gnss"] = GnssConfig(**g)
        c = dict(d.get("clock", {}))
        if "bias" in c:
            c["bias"] = tuple(c["bias"])
        d["clock"] = ClockModel(**c)
        d["landmarks"] = LandmarkField(**d.get("landmarks", {}))
        d["faults"] = tuple(FaultEvent.parse(s) for s in d.get("faults", ()))
        return cls(**d)


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.replace(",", " ").split())


# keys understood by scenario_config_from_ini, per section ("faults" takes any key)
INI_KEYS = {
    "scenario": {"profile", "duration", "keyframe_rate", "radius", "speed", "heading", "yaw_offset",
                 "anchor_lat", "anchor_lon", "anchor_height", "noise_scale"},
    "imu": {"acc_noise", "gyr_noise", "rate", "acc_bias_rw", "gyr_bias_rw", "acc_bias", "gyr_bias"},
    "gnss": {"sigma", "elevation_min", "elevation_max", "azimuth_offset", "troposphere", "ionosphere",
             "multipath", "sagnac", "min_visible", "satellites", "clock_bias", "clock_drift"},
    "camera": {"fx", "fy", "cx", "cy", "width", "height", "inner", "outer", "z_min", "z_max",
               "max_range", "min_depth", "pixel_sigma", "landmarks", "min_features"},
    "faults": None,
}


def scenario_config_from_ini(cp) -> ScenarioConfig:
    """Build a :class:`ScenarioConfig` from a :class:`configparser.ConfigParser`."""
    base = ScenarioConfig()
    kw = {}
    if cp.has_section("scenario"):
        s = cp["scenario"]
        for k in ("duration", "keyframe_rate", "radius", "speed", "heading", "yaw_offset",
                  "anchor_lat", "anchor_lon", "anchor_height", "noise_scale"):
            if k in s:
                kw[k] = s.getfloat(k)
        if "profile" in s:
            kw["profile"] = s["profile"].strip()
    if cp.has_section("imu"):
        s = cp["imu"]
        ik = {}
        for k in ("acc_noise", "gyr_noise", "rate", "acc_bias_rw", "gyr_bias_rw"):
            if k in s:
                ik[k] = s.getfloat(k)
        for k in ("acc_bias", "gyr_bias"):
            if k in s:
                ik[k] = _floats(s[k])
        kw["imu"] = replace(base.imu, **ik)
    if cp.has_section("gnss"):
        s = cp["gnss"]
        gk = {}
        for k in ("sigma", "elevation_min", "elevation_max", "azimuth_offset", "troposphere",
                  "ionosphere", "multipath", "sagnac"):
            if k in s:
                gk[k] = s.getfloat(k)
        if "min_visible" in s:
            gk["min_visible"] = s.getint("min_visible")
        if "satellites" in s:
            counts = []
            for item in s["satellites"].replace(",", " ").split():
                sys, _, n = item.partition(":")
                counts.append((sys.strip(), int(n)))
            gk["counts"] = tuple(counts)
        kw["gnss"] = replace(base.gnss, **gk)
        ck = {}
        if "clock_bias" in s:
            ck["bias"] = _floats(s["clock_bias"])
        if "clock_drift" in s:
            ck["drift"] = s.getfloat("clock_drift")
        kw["clock"] = replace(base.clock, **ck)
    if cp.has_section("camera"):
        s = cp["camera"]
        cam = {}
        for k in ("fx", "fy", "cx", "cy"):
            if k in s:
                cam[k] = s.getfloat(k)
        for k in ("width", "height"):
            if k in s:
                cam[k] = s.getint(k)
        kw["camera"] = cam
        lk = {}
        for k in ("inner", "outer", "z_min", "z_max", "max_range", "min_depth", "pixel_sigma"):
            if k in s:
                lk[k] = s.getfloat(k)
        for k in ("landmarks", "min_features"):
            if k in s:
                lk["count" if k == "landmarks" else k] = s.getint(k)
        kw["landmarks"] = replace(base.landmarks, **lk)
    if cp.has_section("faults"):
        kw["faults"] = tuple(FaultEvent.parse(v) for _, v in sorted(cp["faults"].items()) if v.strip())
    return replace(base, **kw)


# ----------------------------------------------------------------- scenario

@dataclass
class Scenario:
    config: ScenarioConfig
    seed: int
    epochs: list  # clean epochs
    anchor: AnchorGeodesy
    camera: CameraModel
    psi: float
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    tracks: list = field(default_factory=list)
    flagged_frames: list = field(default_factory=list)

    def faulted_epochs(self, schedule=None) -> list:
        return inject_faults(self.epochs, self.config.faults if schedule is None else schedule)


def _truth_state(truth: TruthTrajectory, i: int, spec: ImuSpec, clock: ClockModel) -> ImuState:
    return ImuState(p=truth.p[i], v=truth.v[i], q=truth.attitude(i), ba=spec.acc_bias, bg=spec.gyr_bias,
                    clock=clock.at(truth.t[i]), drift=clock.drift)


def build_scenario(cfg: ScenarioConfig, seed: int) -> Scenario:
    """Generate the clean measurement epochs of one scenario."""
    truth = generate_trajectory(cfg.profile, cfg.duration, cfg.keyframe_rate, cfg.imu.rate,
                                cfg.radius, cfg.speed, cfg.heading)
    ss = np.random.SeedSequence(seed)
    s_imu, s_gnss, s_land, s_feat = (int(x.generate_state(1)[0]) for x in ss.spawn(4))
    anchor = cfg.anchor
    cam = cfg.camera_model()
    imu = synthesize_imu(truth, cfg.imu.scaled(cfg.noise_scale), s_imu)
    stride = truth.keyframe_stride
    kf = np.arange(0, len(truth), stride)
    sats = make_constellation(anchor, cfg.gnss)
    prs = synthesize_pseudoranges(truth.p[kf], truth.t[kf], sats, cfg.clock, cfg.gnss,
                                  cfg.yaw_offset, anchor, s_gnss, cfg.noise_scale)
    landmarks = make_landmarks(truth, cfg.landmarks, s_land)
    tracks, flagged = synthesize_features(truth, landmarks, cam, cfg.landmarks, s_feat, cfg.noise_scale)
    per_frame = [[] for _ in kf]
    for tr in tracks:
        for j, uv in tr.observations:
            per_frame[j].append((tr.fid, uv))
    epochs = []
    for k, i in enumerate(kf):
        seg = imu.slice(max(i - stride, 0), i)
        obs = per_frame[k]
        ids = np.array([o[0] for o in obs], dtype=int)
        px = np.array([o[1] for o in obs]).reshape(-1, 2)
        epochs.append(MeasurementEpoch(k, float(truth.t[i]), prs[k], ids, px, cfg.landmarks.pixel_sigma,
                                       seg, _truth_state(truth, i, cfg.imu, cfg.clock)))
    if cfg.faults:
        _check_schedule(cfg.faults, 0.0, float(truth.t[-1]))
    return Scenario(cfg, seed, epochs, anchor, cam, cfg.yaw_offset, GRAVITY.copy(), tracks, flagged)


# --------------------------------------------------------------------- dump

def _state_to_dict(s: ImuState) -> dict:
    return {"p": s.p.tolist(), "v": s.v.tolist(), "q": s.q.q.tolist(), "ba": s.ba.tolist(),
            "bg": s.bg.tolist(), "clock": s.clock.tolist(), "drift": s.drift}


def _state_from_dict(d: dict) -> ImuState:
    return ImuState(p=d["p"], v=d["v"], q=Rotation(d["q"]), ba=d["ba"], bg=d["bg"],
                    clock=d["clock"], drift=d["drift"])


def dump_scenario(sc: Scenario, path) -> None:
    """Write one JSON record per line: header, one record per epoch, trailer.

    Epoch record fields, in order: ``k, t, imu{t, acc, gyr}, sats[[id, sys, x, y, z,
    clock, pr, sigma, T, I, M, S]], features[[id, u, v]], pixel_sigma, truth``.
    """
    with open(path, "w", encoding="utf-8") as fh:
        header = {"schema": DUMP_SCHEMA, "seed": sc.seed, "config": sc.config.to_dict(),
                  "n_epochs": len(sc.epochs)}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for ep in sc.epochs:
            rec = {
                "k": ep.index, "t": ep.time,
                "imu": {"t": ep.imu.t.tolist(), "acc": ep.imu.acc.tolist(), "gyr": ep.imu.gyr.tolist()},
                "sats": [[s.sat_id, s.constellation, *s.sat_pos.tolist(), s.sat_clock, s.pseudorange,
                          s.sigma, s.troposphere, s.ionosphere, s.multipath, s.sagnac] for s in ep.sats],
                "features": [[int(i), float(u), float(v)] for i, (u, v) in zip(ep.feature_ids, ep.pixels)],
                "pixel_sigma": ep.pixel_sigma,
                "truth": _state_to_dict(ep.truth),
            }
            fh.write(json.dumps(rec) + "\n")
        fh.write(json.dumps({"end": True, "n_epochs": len(sc.epochs)}) + "\n")


def load_scenario(path) -> Scenario:
    """Inverse of :func:`dump_scenario`; raises :class:`ScenarioError` on schema problems."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    try:
        recs = [json.loads(ln) for ln in lines]
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"corrupt scenario dump: {exc}") from None
    if not recs or recs[0].get("schema") != DUMP_SCHEMA:
        raise ScenarioError("scenario dump schema mismatch")
    header = recs[0]
    n = header.get("n_epochs")
    if len(recs) != n + 2 or not recs[-1].get("end") or recs[-1].get("n_epochs") != n:
        raise ScenarioError("scenario dump is truncated")
    try:
        cfg = ScenarioConfig.from_dict(header["config"])
        epochs = []
        for r in recs[1:-1]:
            sats = [SatelliteObservation(s[0], s[1], np.array(s[2:5]), s[5], s[6], s[7], *s[8:12])
                    for s in r["sats"]]
            f = np.array(r["features"], dtype=float).reshape(-1, 3)
            imu = ImuSamples(np.array(r["imu"]["t"]), np.array(r["imu"]["acc"]).reshape(-1, 3),
                             np.array(r["imu"]["gyr"]).reshape(-1, 3))
            epochs.append(MeasurementEpoch(r["k"], r["t"], sats, f[:, 0].astype(int), f[:, 1:].copy(),
                                           r["pixel_sigma"], imu, _state_from_dict(r["truth"])))
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise ScenarioError(f"malformed scenario dump: {exc}") from None
    return Scenario(cfg, header["seed"], epochs, cfg.anchor, cfg.camera_model(), cfg.yaw_offset)


def clone_epochs(epochs) -> list:
    return copy.deepcopy(epochs)
