"""Visual and pseudorange residuals with analytic Jacobians, plus whitening."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import (
    CONSTELLATIONS,
    ERROR_DIM,
    SL_CLK,
    SL_P,
    SL_TH,
    SPEED_OF_LIGHT,
    AnchorGeodesy,
    ImuState,
    Rotation,
    ecef_from_enu,
    rotation_from_yaw,
    skew,
    yaw_matrix_derivative,
)

SOURCES = ("imu", "gnss", "vision")


class ProjectionError(ValueError):
    """Point has non-positive depth in the camera frame."""


@dataclass(frozen=True)
class CameraModel:
    fx: float = 400.0
    fy: float = 400.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480
    R_bc: Rotation = field(default_factory=Rotation.identity)  # body -> camera
    t_bc: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point outside the image")
        object.__setattr__(self, "t_bc", np.asarray(self.t_bc, dtype=float).reshape(3))

    @classmethod
    def forward_looking(cls, **kw) -> "CameraModel":
        """Camera looking along body +x, image x to body -y, image y to body -z."""
        R = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
        return cls(R_bc=Rotation.from_matrix(R), **kw)

    def in_image(self, uv) -> np.ndarray:
        uv = np.atleast_2d(uv)
        return ((uv[:, 0] >= 0) & (uv[:, 0] < self.width)
                & (uv[:, 1] >= 0) & (uv[:, 1] < self.height))

    def bearing(self, uv) -> np.ndarray:
        """Unit camera-frame ray through pixel ``uv``."""
        x = np.array([(uv[0] - self.cx) / self.fx, (uv[1] - self.cy) / self.fy, 1.0])
        return x / np.linalg.norm(x)

    def pi(self, xc) -> np.ndarray:
        xc = np.atleast_2d(xc)
        return np.column_stack([self.fx * xc[:, 0] / xc[:, 2] + self.cx,
                                self.fy * xc[:, 1] / xc[:, 2] + self.cy])


@dataclass
class FeatureParam:
    """Inverse-depth landmark anchored in keyframe ``anchor`` (keyframe id)."""

    fid: int
    anchor: int
    rho: float
    bearing: np.ndarray  # unit vector in the anchor camera frame

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("inverse depth must be positive")
        b = np.asarray(self.bearing, dtype=float).reshape(3)
        self.bearing = b / np.linalg.norm(b)


def world_to_camera(xw, state: ImuState, cam: CameraModel) -> np.ndarray:
    Rwb = state.q.matrix
    return cam.R_bc.matrix @ (Rwb.T @ (np.asarray(xw, dtype=float) - state.p)) + cam.t_bc


def feature_world_point(feat: FeatureParam, anchor_state: ImuState, cam: CameraModel) -> np.ndarray:
    xc = feat.bearing / feat.rho
    xb = cam.R_bc.matrix.T @ (xc - cam.t_bc)
    return anchor_state.q.matrix @ xb + anchor_state.p


def project(landmark, state: ImuState, cam: CameraModel, anchor_state: ImuState | None = None) -> np.ndarray:
    """Pinhole projection of a w-frame point (or an anchored feature) into ``state``'s camera.

    Raises :class:`ProjectionError` for non-positive depth.
    """
    if isinstance(landmark, FeatureParam):
        if anchor_state is None:
            raise ValueError("anchored feature needs its anchor state")
        xw = feature_world_point(landmark, anchor_state, cam)
    else:
        xw = landmark
    xc = world_to_camera(xw, state, cam)
    if xc[2] <= 0.0:
        raise ProjectionError(f"non-positive depth {xc[2]:.3g} m")
    return cam.pi(xc)[0]


def visual_residual_batch(obs, bearing, rho, Ri, pi_, Rj, pj, cam: CameraModel):
    """Vectorised visual residual for ``N`` observations.

    ``Ri, Rj`` are ``(N,3,3)`` body-to-world rotations of anchor/observing frames,
    ``pi_, pj`` their positions. Returns ``(r, depth, J_pi, J_thi, J_pj, J_thj, J_rho)``
    where ``r = obs - pi_c(x_c_j)`` is ``(N,2)`` and Jacobians are ``(N,2,3)``
    (``J_rho`` is ``(N,2)``).
    """
    Rbc = cam.R_bc.matrix
    Rcb = Rbc.T
    xci = bearing / rho[:, None]
    xbi = (xci - cam.t_bc) @ Rcb.T
    xw = np.einsum("nij,nj->ni", Ri, xbi) + pi_
    xbj = np.einsum("nji,nj->ni", Rj, xw - pj)
    xcj = xbj @ Rbc.T + cam.t_bc
    x, y, z = xcj[:, 0], xcj[:, 1], xcj[:, 2]
    zinv = 1.0 / z
    pred = np.column_stack([cam.fx * x * zinv + cam.cx, cam.fy * y * zinv + cam.cy])
    r = obs - pred

    n = len(rho)
    Dpi = np.zeros((n, 2, 3))
    Dpi[:, 0, 0] = cam.fx * zinv
    Dpi[:, 0, 2] = -cam.fx * x * zinv**2
    Dpi[:, 1, 1] = cam.fy * zinv
    Dpi[:, 1, 2] = -cam.fy * y * zinv**2
    # residual = obs - pi, so every block carries a minus sign
    M = -Dpi @ Rbc  # d r / d x_bj
    RjT = np.transpose(Rj, (0, 2, 1))
    MRjT = M @ RjT  # d r / d x_w
    J_pj = -MRjT
    J_thj = M @ _skew_batch(xbj)
    J_pi = MRjT
    J_thi = -(MRjT @ Ri) @ _skew_batch(xbi)
    J_rho = np.einsum("nij,nj->ni", MRjT @ Ri, (bearing @ Rcb.T)) * (-1.0 / rho**2)[:, None]
    return r, z, J_pi, J_thi, J_pj, J_thj, J_rho


def anchor_pixel_jacobian(bearing, rho, Ri, pi_, Rj, pj, cam: CameraModel) -> np.ndarray:
    """``d r_j / d uv_anchor``, ``(N,2,2)``: how anchor-pixel noise frozen into the bearing enters residual ``j``.

    The anchor pixel is taken as the projection of the unit ``bearing``.
    """
    Rbc = cam.R_bc.matrix
    xbi = (bearing / rho[:, None] - cam.t_bc) @ Rbc
    xw = np.einsum("nij,nj->ni", Ri, xbi) + pi_
    xbj = np.einsum("nji,nj->ni", Rj, xw - pj)
    xcj = xbj @ Rbc.T + cam.t_bc
    zinv = 1.0 / xcj[:, 2]
    n = len(rho)
    Dpi = np.zeros((n, 2, 3))
    Dpi[:, 0, 0] = cam.fx * zinv
    Dpi[:, 0, 2] = -cam.fx * xcj[:, 0] * zinv**2
    Dpi[:, 1, 1] = cam.fy * zinv
    Dpi[:, 1, 2] = -cam.fy * xcj[:, 1] * zinv**2
    # d x_cj / d bearing = R_bc R_j^T R_i R_bc^T / rho
    C = Rbc @ np.transpose(Rj, (0, 2, 1)) @ Ri @ Rbc.T / rho[:, None, None]
    # bearing = m / |m| with m = ((u - cx)/fx, (v - cy)/fy, 1)
    m = bearing / bearing[:, 2:3]
    nm = np.linalg.norm(m, axis=1)
    P = (np.eye(3)[None] - np.einsum("ni,nj->nij", bearing, bearing)) / nm[:, None, None]
    Dm = np.zeros((3, 2))
    Dm[0, 0] = 1.0 / cam.fx
    Dm[1, 1] = 1.0 / cam.fy
    return -(Dpi @ C @ P @ Dm)


def _skew_batch(v):
    n = v.shape[0]
    S = np.zeros((n, 3, 3))
    S[:, 0, 1] = -v[:, 2]
    S[:, 0, 2] = v[:, 1]
    S[:, 1, 0] = v[:, 2]
    S[:, 1, 2] = -v[:, 0]
    S[:, 2, 0] = -v[:, 1]
    S[:, 2, 1] = v[:, 0]
    return S


def visual_residual(obs, feature: FeatureParam, state_i: ImuState, state_j: ImuState, cam: CameraModel):
    """Reprojection residual of ``feature`` observed at pixel ``obs`` in frame ``j``.

    Returns ``(r, jac)`` where ``jac`` maps block names ``p_i, theta_i, p_j,
    theta_j, rho`` to their Jacobians.
    """
    r, z, J_pi, J_thi, J_pj, J_thj, J_rho = visual_residual_batch(
        np.atleast_2d(np.asarray(obs, dtype=float)), feature.bearing[None, :],
        np.array([feature.rho]), state_i.q.matrix[None], state_i.p[None],
        state_j.q.matrix[None], state_j.p[None], cam)
    if z[0] <= 0.0:
        raise ProjectionError(f"non-positive depth {z[0]:.3g} m in observing frame")
    return r[0], {"p_i": J_pi[0], "theta_i": J_thi[0], "p_j": J_pj[0],
                  "theta_j": J_thj[0], "rho": J_rho[0]}


def pseudorange_residual_batch(sat_pos, sat_clock, pr, sys_index, delays, p_w, clock_s,
                               psi: float, anchor: AnchorGeodesy):
    """Vectorised pseudorange residual of ``N`` satellites at one receiver state.

    ``p_w`` (3,) and ``clock_s`` (4,) may also be given per row, ``(N,3)`` and
    ``(N,4)``, to evaluate several receiver states in one call.

    Returns ``(r, J_p, J_clk, J_psi)``: residual in metres, Jacobian w.r.t. the
    w-frame position ``(N,3)``, w.r.t. the receiver clock in metres ``(N,4)``
    (one-hot by constellation) and w.r.t. the yaw offset ``(N,)``.
    """
    n = len(pr)
    Rne = ecef_from_enu(anchor).matrix
    M = Rne @ rotation_from_yaw(psi).matrix
    p_w = np.broadcast_to(np.asarray(p_w, dtype=float), (n, 3))
    clock_s = np.broadcast_to(np.asarray(clock_s, dtype=float), (n, 4))
    rows = np.arange(n)
    # range = |s - a| + increment; the increment is formed without the ~2e7 m
    # magnitudes so the residual varies smoothly at sub-nanometre level
    rel = sat_pos - anchor.position
    rho0 = np.sqrt(np.einsum("ij,ij->i", rel, rel))
    off = p_w @ M.T
    d = rel - off
    rng = np.sqrt(np.einsum("ij,ij->i", d, d))
    inc = (np.einsum("ij,ij->i", off, off) - 2.0 * np.einsum("ij,ij->i", rel, off)) / (rng + rho0)
    u = d / rng[:, None]
    r = (rho0 - pr) + SPEED_OF_LIGHT * (clock_s[rows, sys_index] - sat_clock) + delays + inc
    J_p = -u @ M
    J_clk = np.zeros((n, 4))
    J_clk[rows, sys_index] = 1.0
    J_psi = -np.einsum("ij,ij->i", u, p_w @ (Rne @ yaw_matrix_derivative(psi)).T)
    return r, J_p, J_clk, J_psi


def pseudorange_residual(obs, state: ImuState, psi: float, anchor: AnchorGeodesy):
    """Residual of one pseudorange and its Jacobian row.

    The row is ordered ``[p (3), clock (4, metres), psi (1)]``; the clock
    derivative is with respect to ``SPEED_OF_LIGHT * clock`` so it is one-hot 1.
    """
    r, J_p, J_clk, J_psi = pseudorange_residual_batch(
        np.asarray(obs.sat_pos)[None], np.array([obs.sat_clock]), np.array([obs.pseudorange]),
        np.array([CONSTELLATIONS.index(obs.constellation)]),
        np.array([obs.troposphere + obs.ionosphere + obs.sagnac]),
        state.p, state.clock, psi, anchor)
    return float(r[0]), np.concatenate([J_p[0], J_clk[0], [J_psi[0]]])


@dataclass(frozen=True)
class WhitenedResidual:
    raw: np.ndarray
    sigma: np.ndarray
    whitened: np.ndarray
    source: str
    epoch: int
    labels: tuple

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown residual source {self.source!r}")
        if len(self.labels) != len(self.whitened):
            raise ValueError("labels must match residual length")


def whiten(raw, sigma, labels, source: str = "gnss", epoch: int = 0) -> WhitenedResidual:
    """Componentwise normalisation ``raw / sigma``."""
    raw = np.atleast_1d(np.asarray(raw, dtype=float))
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), raw.shape).copy()
    if np.any(~(sigma > 0)):
        raise ValueError("sigmas must be strictly positive")
    return WhitenedResidual(raw, sigma, raw / sigma, source, epoch, tuple(labels))


def whiten_correlated(raw, sqrt_info, labels, source: str = "imu", epoch: int = 0) -> WhitenedResidual:
    """Whitening with a full square-root information matrix (correlated noise).

    ``raw`` is stored as the decorrelated residual with unit sigma so that
    ``whitened == raw / sigma`` still holds.
    """
    e = np.asarray(sqrt_info, dtype=float) @ np.asarray(raw, dtype=float)
    return WhitenedResidual(e, np.ones_like(e), e.copy(), source, epoch, tuple(labels))


def state_columns_pseudorange() -> list:
    """Error-state index layout used by :func:`pseudorange_residual` rows (excluding psi)."""
    idx = list(range(ERROR_DIM))
    return idx[SL_P] + idx[SL_CLK]


__all__ = [
    "CameraModel", "FeatureParam", "ProjectionError", "WhitenedResidual",
    "feature_world_point", "project", "pseudorange_residual", "pseudorange_residual_batch",
    "visual_residual", "visual_residual_batch", "anchor_pixel_jacobian", "whiten", "whiten_correlated", "world_to_camera",
    "skew", "SL_TH",
]
