"""Frames, rotation algebra and manifold updates of the navigation state.

Conventions
-----------
* Quaternions are scalar-first Hamilton quaternions ``(w, x, y, z)``.
* ``q_b^w`` maps body vectors into the world frame: ``v_w = q.apply(v_b)``.
* Attitude errors are right-multiplicative: ``q (+) dtheta = q * Exp(dtheta)``.
* Receiver clock error-state coordinates are expressed in metres
  (speed of light times seconds) to keep the normal equations well scaled;
  the state itself stores clock offsets in seconds.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

SPEED_OF_LIGHT = 299792458.0  # m/s
EARTH_RADIUS = 6378137.0  # m, spherical model

CONSTELLATIONS = ("G", "R", "E", "C")

# error-state layout of one keyframe
SL_P = slice(0, 3)
SL_V = slice(3, 6)
SL_TH = slice(6, 9)
SL_BA = slice(9, 12)
SL_BG = slice(12, 15)
SL_CLK = slice(15, 19)
IX_DRIFT = 19
INERTIAL_DIM = 15
ERROR_DIM = 20

_SMALL_ANGLE = 1e-8


def skew(v) -> np.ndarray:
    """Cross-product matrix ``[v]x``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(phi) -> np.ndarray:
    """Rotation matrix of the rotation vector ``phi`` (Rodrigues)."""
    phi = np.asarray(phi, dtype=float)
    theta = math.sqrt(phi @ phi)
    K = skew(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * K @ K
    return (np.eye(3) + math.sin(theta) / theta * K
            + (1.0 - math.cos(theta)) / theta**2 * K @ K)


def so3_log(R) -> np.ndarray:
    """Rotation vector of a rotation matrix (inverse of :func:`so3_exp`)."""
    return Rotation.from_matrix(R).log()


def right_jacobian(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = math.sqrt(phi @ phi)
    K = skew(phi)
    if theta < 1e-5:
        return np.eye(3) - 0.5 * K + K @ K / 6.0
    return (np.eye(3) - (1.0 - math.cos(theta)) / theta**2 * K
            + (theta - math.sin(theta)) / theta**3 * K @ K)


def right_jacobian_inv(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = math.sqrt(phi @ phi)
    K = skew(phi)
    if theta < 1e-5:
        return np.eye(3) + 0.5 * K + K @ K / 12.0
    coef = 1.0 / theta**2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) + 0.5 * K + coef * K @ K


class Rotation:
    """Unit quaternion, scalar first. Immutable."""

    __slots__ = ("_q", "_R")

    def __init__(self, q):
        q = np.array(q, dtype=float).reshape(4)
        n = math.sqrt(q @ q)
        if not np.isfinite(n) or n == 0.0:
            raise ValueError("quaternion must be finite and non-zero")
        q = q / n
        if q[0] < 0.0:
            q = -q
        q.setflags(write=False)
        self._q = q
        self._R = None

    @classmethod
    def identity(cls) -> "Rotation":
        return cls((1.0, 0.0, 0.0, 0.0))

    @classmethod
    def from_rotvec(cls, phi) -> "Rotation":
        phi = np.asarray(phi, dtype=float)
        theta = math.sqrt(phi @ phi)
        if theta < _SMALL_ANGLE:
            return cls(np.r_[1.0, 0.5 * phi])
        s = math.sin(0.5 * theta) / theta
        return cls(np.r_[math.cos(0.5 * theta), s * phi])

    @classmethod
    def from_matrix(cls, R) -> "Rotation":
        R = np.asarray(R, dtype=float)
        tr = np.trace(R)
        if tr > 0.0:
            s = 2.0 * math.sqrt(tr + 1.0)
            q = (0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s,
                 (R[1, 0] - R[0, 1]) / s)
        elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
            s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
            q = ((R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s,
                 (R[0, 2] + R[2, 0]) / s)
        elif R[1, 1] > R[2, 2]:
            s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
            q = ((R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s,
                 (R[1, 2] + R[2, 1]) / s)
        else:
            s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
            q = ((R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                 (R[1, 2] + R[2, 1]) / s, 0.25 * s)
        return cls(q)

    @property
    def q(self) -> np.ndarray:
        return self._q

    @property
    def matrix(self) -> np.ndarray:
        if self._R is None:
            w, x, y, z = self._q
            R = np.array([
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ])
            R.setflags(write=False)
            self._R = R
        return self._R

    def __mul__(self, other: "Rotation") -> "Rotation":
        w1, x1, y1, z1 = self._q
        w2, x2, y2, z2 = other._q
        return Rotation((
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ))

    def inverse(self) -> "Rotation":
        w, x, y, z = self._q
        return Rotation((w, -x, -y, -z))

    def apply(self, v) -> np.ndarray:
        return self.matrix @ np.asarray(v, dtype=float)

    def log(self) -> np.ndarray:
        w = self._q[0]
        vec = self._q[1:]
        s = math.sqrt(vec @ vec)
        if s < _SMALL_ANGLE:
            return 2.0 * vec / w
        return 2.0 * math.atan2(s, w) / s * vec

    @property
    def angle(self) -> float:
        return float(np.linalg.norm(self.log()))

    def __repr__(self) -> str:
        return "Rotation(w={:.9f}, x={:.9f}, y={:.9f}, z={:.9f})".format(*self._q)


def rotation_from_yaw(psi: float) -> Rotation:
    """Rotation about the Up axis by ``psi``; maps w-frame vectors to the n-frame."""
    if not math.isfinite(psi):
        raise ValueError("yaw offset must be finite")
    return Rotation((math.cos(0.5 * psi), 0.0, 0.0, math.sin(0.5 * psi)))


def yaw_matrix_derivative(psi: float) -> np.ndarray:
    """d R_w^n / d psi."""
    c, s = math.cos(psi), math.sin(psi)
    return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])


class FrameTag(enum.Enum):
    ECEF = "e"
    ENU = "n"
    WORLD = "w"
    BODY = "b"
    CAMERA = "c"


@dataclass(frozen=True)
class FrameTransform:
    """Rigid transform ``x_dst = R x_src + t`` between two tagged frames."""

    rotation: Rotation
    translation: np.ndarray
    src: FrameTag
    dst: FrameTag

    def __matmul__(self, other: "FrameTransform") -> "FrameTransform":
        if other.dst is not self.src:
            raise ValueError(f"cannot chain {other.src.value}->{other.dst.value} "
                             f"into {self.src.value}->{self.dst.value}")
        return FrameTransform(self.rotation * other.rotation,
                              self.rotation.apply(other.translation) + self.translation,
                              other.src, self.dst)

    def apply(self, x) -> np.ndarray:
        return self.rotation.apply(x) + self.translation

    def inverse(self) -> "FrameTransform":
        Rinv = self.rotation.inverse()
        return FrameTransform(Rinv, -Rinv.apply(self.translation), self.dst, self.src)


@dataclass(frozen=True)
class AnchorGeodesy:
    """GNSS anchor point; defines the origin and orientation of the n-frame."""

    position: np.ndarray  # e-frame, m
    lat: float  # rad
    lon: float  # rad

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float).reshape(3)
        norm = float(np.linalg.norm(pos))
        if not 6.3e6 <= norm <= 6.5e6:
            raise ValueError(f"anchor radius {norm:.1f} m outside Earth-surface band")
        object.__setattr__(self, "position", pos)

    @classmethod
    def from_latlon(cls, lat: float, lon: float, height: float = 0.0) -> "AnchorGeodesy":
        r = EARTH_RADIUS + height
        pos = r * np.array([math.cos(lat) * math.cos(lon),
                            math.cos(lat) * math.sin(lon),
                            math.sin(lat)])
        return cls(pos, lat, lon)


def ecef_from_enu(anchor: AnchorGeodesy) -> Rotation:
    """R_n^e: columns are the East, North and Up directions at the anchor."""
    sl, cl = math.sin(anchor.lat), math.cos(anchor.lat)
    so, co = math.sin(anchor.lon), math.cos(anchor.lon)
    R = np.array([
        [-so, -sl * co, cl * co],
        [co, -sl * so, cl * so],
        [0.0, cl, sl],
    ])
    return Rotation.from_matrix(R)


def _vec(x, n=3) -> np.ndarray:
    a = np.array(x, dtype=float).reshape(n)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ImuState:
    """Navigation state of one keyframe."""

    p: np.ndarray
    v: np.ndarray
    q: Rotation
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bg: np.ndarray = field(default_factory=lambda: np.zeros(3))
    clock: np.ndarray = field(default_factory=lambda: np.zeros(4))  # s, order G R E C
    drift: float = 0.0  # s/s

    def __post_init__(self):
        object.__setattr__(self, "p", _vec(self.p))
        object.__setattr__(self, "v", _vec(self.v))
        object.__setattr__(self, "ba", _vec(self.ba))
        object.__setattr__(self, "bg", _vec(self.bg))
        object.__setattr__(self, "clock", _vec(self.clock, 4))
        object.__setattr__(self, "drift", float(self.drift))
        if not isinstance(self.q, Rotation):
            raise TypeError("q must be a Rotation")
        finite = all(np.all(np.isfinite(a)) for a in (self.p, self.v, self.ba, self.bg, self.clock))
        if not finite or not math.isfinite(self.drift):
            raise ValueError("ImuState fields must be finite")

    def replace(self, **kw) -> "ImuState":
        d = dict(p=self.p, v=self.v, q=self.q, ba=self.ba, bg=self.bg,
                 clock=self.clock, drift=self.drift)
        d.update(kw)
        return ImuState(**d)


def manifold_plus(state: ImuState, delta) -> ImuState:
    """Apply an error-state increment (length :data:`ERROR_DIM`) to ``state``."""
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (ERROR_DIM,):
        raise ValueError(f"error-state increment must have shape ({ERROR_DIM},), got {delta.shape}")
    return ImuState(
        p=state.p + delta[SL_P],
        v=state.v + delta[SL_V],
        q=state.q * Rotation.from_rotvec(delta[SL_TH]),
        ba=state.ba + delta[SL_BA],
        bg=state.bg + delta[SL_BG],
        clock=state.clock + delta[SL_CLK] / SPEED_OF_LIGHT,
        drift=state.drift + delta[IX_DRIFT] / SPEED_OF_LIGHT,
    )


def manifold_minus(a: ImuState, b: ImuState) -> np.ndarray:
    """Error-state difference ``a (-) b`` such that ``b (+) (a (-) b) == a``."""
    d = np.empty(ERROR_DIM)
    d[SL_P] = a.p - b.p
    d[SL_V] = a.v - b.v
    d[SL_TH] = (b.q.inverse() * a.q).log()
    d[SL_BA] = a.ba - b.ba
    d[SL_BG] = a.bg - b.bg
    d[SL_CLK] = (a.clock - b.clock) * SPEED_OF_LIGHT
    d[IX_DRIFT] = (a.drift - b.drift) * SPEED_OF_LIGHT
    return d
