"""IMU pre-integration between keyframes and its 15-dimensional residual.

Error-state ordering of the pre-integrated quantities and of the residual is
``(d_alpha, d_beta, d_theta, d_ba, d_bg)``.  Integration uses the midpoint
(trapezoidal) rule on bias-corrected samples.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .geom import (
    ERROR_DIM,
    SL_BA,
    SL_BG,
    SL_P,
    SL_TH,
    SL_V,
    ImuState,
    Rotation,
    right_jacobian,
    right_jacobian_inv,
    skew,
    so3_exp,
)

log = logging.getLogger(__name__)

A, B, TH, BA, BG = (slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15))


@dataclass(frozen=True)
class PreintegratedImu:
    alpha: np.ndarray
    beta: np.ndarray
    gamma: Rotation
    dt: float
    ba_lin: np.ndarray
    bg_lin: np.ndarray
    cov: np.ndarray  # 15x15
    jac: np.ndarray  # 15x15, d(alpha, beta, theta, ba, bg)_end / d(.., ba, bg)_start
    samples: object  # the raw segment, kept for re-linearisation
    spec: object

    @property
    def J_alpha_ba(self):
        return self.jac[A, BA]

    @property
    def J_alpha_bg(self):
        return self.jac[A, BG]

    @property
    def J_beta_ba(self):
        return self.jac[B, BA]

    @property
    def J_beta_bg(self):
        return self.jac[B, BG]

    @property
    def J_theta_bg(self):
        return self.jac[TH, BG]

    def corrected(self, ba, bg):
        """First-order bias-corrected ``(alpha, beta, gamma)`` at new biases."""
        dba = np.asarray(ba) - self.ba_lin
        dbg = np.asarray(bg) - self.bg_lin
        alpha = self.alpha + self.J_alpha_ba @ dba + self.J_alpha_bg @ dbg
        beta = self.beta + self.J_beta_ba @ dba + self.J_beta_bg @ dbg
        gamma = self.gamma * Rotation.from_rotvec(self.J_theta_bg @ dbg)
        return alpha, beta, gamma

    def sqrt_info(self) -> np.ndarray:
        """Upper factor ``S`` with ``S.T @ S = inv(cov)``; whitened residual is ``S @ r``."""
        L = np.linalg.cholesky(self.cov)
        return np.linalg.inv(L)


def preintegrate(samples, bias_lin, spec) -> PreintegratedImu:
    """Pre-integrate a raw IMU segment.

    Parameters
    ----------
    samples : ImuSamples
        Contiguous samples ``t, acc, gyr``; the segment spans ``t[0]..t[-1]``.
    bias_lin : tuple of array_like
        Linearisation biases ``(ba, bg)``.
    spec : ImuSpec
        Supplies the noise densities used for covariance propagation.
    """
    t = np.asarray(samples.t, dtype=float)
    acc = np.asarray(samples.acc, dtype=float)
    gyr = np.asarray(samples.gyr, dtype=float)
    if t.size < 1:
        raise ValueError("empty IMU segment")
    if np.any(np.diff(t) <= 0.0):
        raise ValueError("IMU timestamps must be strictly increasing")
    ba = np.asarray(bias_lin[0], dtype=float)
    bg = np.asarray(bias_lin[1], dtype=float)

    total = float(t[-1] - t[0])
    if t.size == 1:
        # no motion; keep a tiny covariance so whitening is defined
        return PreintegratedImu(alpha=np.zeros(3), beta=np.zeros(3), gamma=Rotation.identity(), dt=total,
                                ba_lin=ba.copy(), bg_lin=bg.copy(), cov=np.eye(15) * 1e-12, jac=np.eye(15),
                                samples=samples, spec=spec)

    n = t.size - 1
    dt = np.diff(t)
    a0 = acc[:-1] - ba
    a1 = acc[1:] - ba
    w = 0.5 * (gyr[:-1] + gyr[1:]) - bg
    phi = w * dt[:, None]
    dR = _exp_batch(phi)
    Jr = _right_jacobian_batch(phi)

    # attitude at every sample (sequential composition)
    Rs = np.empty((n + 1, 3, 3))
    Rs[0] = np.eye(3)
    for i in range(n):
        Rs[i + 1] = Rs[i] @ dR[i]
    R0, R1 = Rs[:-1], Rs[1:]
    a_mid = 0.5 * ((R0 @ a0[:, :, None]) + (R1 @ a1[:, :, None]))[:, :, 0]
    dv = a_mid * dt[:, None]
    beta_all = np.vstack([np.zeros(3), np.cumsum(dv, axis=0)])
    alpha = np.sum(beta_all[:-1] * dt[:, None] + 0.5 * a_mid * (dt * dt)[:, None], axis=0)
    beta = beta_all[-1]

    # per-step error-state transition F and noise maps G0 (sample i), G1 (sample i+1)
    Ra0 = R0 @ _skew_batch(a0)
    Ra1 = R1 @ _skew_batch(a1)
    dRT = np.transpose(dR, (0, 2, 1))
    h = dt[:, None, None]
    dam_th = -0.5 * (Ra0 + Ra1 @ dRT)
    dam_ba = -0.5 * (R0 + R1)
    dam_bg = 0.5 * (Ra1 @ Jr) * h
    dam_ng = -0.25 * (Ra1 @ Jr) * h  # per gyro sample noise (half of the mean)

    F = np.broadcast_to(np.eye(15), (n, 15, 15)).copy()
    F[:, A, B] = np.eye(3) * h
    F[:, A, TH] = 0.5 * h * h * dam_th
    F[:, A, BA] = 0.5 * h * h * dam_ba
    F[:, A, BG] = 0.5 * h * h * dam_bg
    F[:, B, TH] = h * dam_th
    F[:, B, BA] = h * dam_ba
    F[:, B, BG] = h * dam_bg
    F[:, TH, TH] = dRT
    F[:, TH, BG] = -Jr * h

    G0 = np.zeros((n, 15, 6))
    G1 = np.zeros((n, 15, 6))
    G0[:, A, 0:3] = 0.25 * h * h * R0
    G0[:, B, 0:3] = 0.5 * h * R0
    G1[:, A, 0:3] = 0.25 * h * h * R1
    G1[:, B, 0:3] = 0.5 * h * R1
    for G in (G0, G1):
        G[:, A, 3:6] = 0.5 * h * h * dam_ng
        G[:, B, 3:6] = h * dam_ng
        G[:, TH, 3:6] = 0.5 * Jr * h

    # suffix products Phi_s = F_{n-1} ... F_s map an error injected after step
    # s-1 to the end of the segment; Phi_0 is the bias Jacobian carrier
    Phi = np.empty((n + 1, 15, 15))
    Phi[n] = np.eye(15)
    for i in range(n - 1, -1, -1):
        Phi[i] = Phi[i + 1] @ F[i]

    rate = 1.0 / np.median(dt)
    Sn = np.r_[[spec.acc_noise**2 * rate] * 3, [spec.gyr_noise**2 * rate] * 3]
    # noise of sample i acts through step i (G0) and step i-1 (G1)
    K = np.zeros((n + 1, 15, 6))
    K[:-1] += Phi[1:] @ G0
    K[1:] += Phi[1:] @ G1
    Kf = K.transpose(1, 0, 2).reshape(15, -1)
    P = (Kf * np.tile(Sn, n + 1)) @ Kf.T
    rw = np.r_[[spec.acc_bias_rw**2] * 3, [spec.gyr_bias_rw**2] * 3]
    Pb = Phi[1:, :, 9:15].transpose(1, 0, 2).reshape(15, -1)
    P += (Pb * np.outer(dt, rw).ravel()) @ Pb.T
    J = Phi[0]
    P = 0.5 * (P + P.T)
    return PreintegratedImu(alpha=alpha, beta=beta, gamma=Rotation.from_matrix(Rs[-1]),
                            dt=total, ba_lin=ba.copy(), bg_lin=bg.copy(), cov=P, jac=J,
                            samples=samples, spec=spec)


def _skew_batch(v):
    S = np.zeros(v.shape[:-1] + (3, 3))
    S[..., 0, 1] = -v[..., 2]
    S[..., 0, 2] = v[..., 1]
    S[..., 1, 0] = v[..., 2]
    S[..., 1, 2] = -v[..., 0]
    S[..., 2, 0] = -v[..., 1]
    S[..., 2, 1] = v[..., 0]
    return S


def _exp_batch(phi):
    th = np.linalg.norm(phi, axis=1)
    K = _skew_batch(phi)
    K2 = K @ K
    small = th < 1e-8
    ts = np.where(small, 1.0, th)
    a = np.where(small, 1.0, np.sin(ts) / ts)
    b = np.where(small, 0.5, (1.0 - np.cos(ts)) / ts**2)
    return np.eye(3) + a[:, None, None] * K + b[:, None, None] * K2


def _right_jacobian_batch(phi):
    th = np.linalg.norm(phi, axis=1)
    K = _skew_batch(phi)
    K2 = K @ K
    small = th < 1e-5
    ts = np.where(small, 1.0, th)
    a = np.where(small, 0.5, (1.0 - np.cos(ts)) / ts**2)
    b = np.where(small, 1.0 / 6.0, (ts - np.sin(ts)) / ts**3)
    return np.eye(3) - a[:, None, None] * K + b[:, None, None] * K2


def relinearize(p: PreintegratedImu, ba, bg) -> PreintegratedImu:
    return preintegrate(p.samples, (ba, bg), p.spec)


def needs_relinearization(p: PreintegratedImu, ba, bg, threshold: float,
                          scale_a: float, scale_g: float) -> bool:
    """Bias delta test in whitened units (delta divided by the bias prior scale)."""
    da = np.max(np.abs(np.asarray(ba) - p.ba_lin)) / scale_a
    dg = np.max(np.abs(np.asarray(bg) - p.bg_lin)) / scale_g
    return bool(max(da, dg) > threshold)


def compose(p1: PreintegratedImu, p2: PreintegratedImu):
    """Chain two consecutive pre-integrations (same biases); returns ``(alpha, beta, gamma, dt)``."""
    R1 = p1.gamma.matrix
    alpha = p1.alpha + p1.beta * p2.dt + R1 @ p2.alpha
    beta = p1.beta + R1 @ p2.beta
    return alpha, beta, p1.gamma * p2.gamma, p1.dt + p2.dt


def predict(p: PreintegratedImu, state: ImuState, gravity) -> ImuState:
    """Propagate ``state`` across the pre-integrated interval (biases held)."""
    g = np.asarray(gravity, dtype=float)
    alpha, beta, gamma = p.corrected(state.ba, state.bg)
    R = state.q.matrix
    dt = p.dt
    return state.replace(
        p=state.p + state.v * dt + 0.5 * g * dt * dt + R @ alpha,
        v=state.v + g * dt + R @ beta,
        q=state.q * gamma,
        clock=state.clock + state.drift * dt,
    )


def preint_residual(p: PreintegratedImu, state_k: ImuState, state_k1: ImuState, gravity) -> np.ndarray:
    g = np.asarray(gravity, dtype=float)
    dt = p.dt
    alpha, beta, gamma = p.corrected(state_k.ba, state_k.bg)
    Rk = state_k.q.matrix
    r = np.empty(15)
    r[A] = Rk.T @ (state_k1.p - state_k.p - state_k.v * dt - 0.5 * g * dt * dt) - alpha
    r[B] = Rk.T @ (state_k1.v - state_k.v - g * dt) - beta
    r[TH] = (gamma.inverse() * state_k.q.inverse() * state_k1.q).log()
    r[BA] = state_k1.ba - state_k.ba
    r[BG] = state_k1.bg - state_k.bg
    return r


def preint_jacobian(p: PreintegratedImu, state_k: ImuState, state_k1: ImuState, gravity):
    """Jacobians of :func:`preint_residual` w.r.t. both states' error coordinates.

    Returns ``(J_k, J_k1)``, each ``15 x ERROR_DIM``; clock columns are zero.
    """
    g = np.asarray(gravity, dtype=float)
    dt = p.dt
    Rk = state_k.q.matrix
    Rk1 = state_k1.q.matrix
    dbg = state_k.bg - p.bg_lin
    _, _, gamma_c = p.corrected(state_k.ba, state_k.bg)
    E = gamma_c.inverse() * state_k.q.inverse() * state_k1.q
    r_th = E.log()
    Jri = right_jacobian_inv(r_th)
    phi = p.J_theta_bg @ dbg

    Jk = np.zeros((15, ERROR_DIM))
    Jk1 = np.zeros((15, ERROR_DIM))
    Jk[A, SL_P] = -Rk.T
    Jk[A, SL_V] = -Rk.T * dt
    Jk[A, SL_TH] = skew(Rk.T @ (state_k1.p - state_k.p - state_k.v * dt - 0.5 * g * dt * dt))
    Jk[A, SL_BA] = -p.J_alpha_ba
    Jk[A, SL_BG] = -p.J_alpha_bg
    Jk[B, SL_V] = -Rk.T
    Jk[B, SL_TH] = skew(Rk.T @ (state_k1.v - state_k.v - g * dt))
    Jk[B, SL_BA] = -p.J_beta_ba
    Jk[B, SL_BG] = -p.J_beta_bg
    Jk[TH, SL_TH] = -Jri @ Rk1.T @ Rk
    Jk[TH, SL_BG] = -Jri @ E.matrix.T @ right_jacobian(phi) @ p.J_theta_bg
    Jk[BA, SL_BA] = -np.eye(3)
    Jk[BG, SL_BG] = -np.eye(3)

    Jk1[A, SL_P] = Rk.T
    Jk1[B, SL_V] = Rk.T
    Jk1[TH, SL_TH] = Jri
    Jk1[BA, SL_BA] = np.eye(3)
    Jk1[BG, SL_BG] = np.eye(3)
    return Jk, Jk1


def with_samples(p: PreintegratedImu, samples) -> PreintegratedImu:
    return replace(p, samples=samples)


# ------------------------------------------------------------------ batched

def _qmul(a, b):
    w1, x1, y1, z1 = np.moveaxis(a, -1, 0)
    w2, x2, y2, z2 = np.moveaxis(b, -1, 0)
    return np.stack([w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
                     w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                     w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
                     w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2], axis=-1)


def _qconj(q):
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def _qexp(phi):
    th = np.linalg.norm(phi, axis=-1)
    small = th < 1e-8
    ts = np.where(small, 1.0, th)
    s = np.where(small, 0.5, np.sin(0.5 * ts) / ts)
    c = np.where(small, 1.0, np.cos(0.5 * ts))
    return np.concatenate([c[..., None], s[..., None] * phi], axis=-1)


def _qlog(q):
    q = np.where(q[..., :1] < 0.0, -q, q)
    w = q[..., 0]
    v = q[..., 1:]
    s = np.linalg.norm(v, axis=-1)
    small = s < 1e-8
    f = np.where(small, 2.0 / np.where(small, w, 1.0), 2.0 * np.arctan2(s, w) / np.where(small, 1.0, s))
    return f[..., None] * v


def _right_jacobian_inv_batch(phi):
    th = np.linalg.norm(phi, axis=1)
    K = _skew_batch(phi)
    small = th < 1e-5
    ts = np.where(small, 1.0, th)
    coef = np.where(small, 1.0 / 12.0, 1.0 / ts**2 - (1.0 + np.cos(ts)) / (2.0 * ts * np.sin(ts)))
    return np.eye(3) + 0.5 * K + coef[:, None, None] * (K @ K)


def preint_batch(preints, states_k, states_k1, gravity, want_jac: bool = True):
    """Residuals ``(m,15)`` and optionally Jacobians ``(m,15,20)`` of ``m`` consecutive factors at once."""
    g = np.asarray(gravity, dtype=float)
    m = len(preints)
    dt = np.array([p.dt for p in preints])
    jac = np.array([p.jac for p in preints])
    dba = np.array([s.ba for s in states_k]) - np.array([p.ba_lin for p in preints])
    dbg = np.array([s.bg for s in states_k]) - np.array([p.bg_lin for p in preints])
    alpha = (np.array([p.alpha for p in preints]) + (jac[:, A, BA] @ dba[:, :, None])[:, :, 0]
             + (jac[:, A, BG] @ dbg[:, :, None])[:, :, 0])
    beta = (np.array([p.beta for p in preints]) + (jac[:, B, BA] @ dba[:, :, None])[:, :, 0]
            + (jac[:, B, BG] @ dbg[:, :, None])[:, :, 0])
    phi = (jac[:, TH, BG] @ dbg[:, :, None])[:, :, 0]
    qg = _qmul(np.array([p.gamma.q for p in preints]), _qexp(phi))
    qk = np.array([s.q.q for s in states_k])
    qk1 = np.array([s.q.q for s in states_k1])
    Rk = np.array([s.q.matrix for s in states_k])
    pk = np.array([s.p for s in states_k])
    vk = np.array([s.v for s in states_k])
    dp = np.array([s.p for s in states_k1]) - pk - vk * dt[:, None] - 0.5 * g * (dt * dt)[:, None]
    dv = np.array([s.v for s in states_k1]) - vk - g * dt[:, None]
    RkT = np.transpose(Rk, (0, 2, 1))
    dp_b = (RkT @ dp[:, :, None])[:, :, 0]
    dv_b = (RkT @ dv[:, :, None])[:, :, 0]
    qE = _qmul(_qconj(qg), _qmul(_qconj(qk), qk1))
    r = np.empty((m, 15))
    r[:, A] = dp_b - alpha
    r[:, B] = dv_b - beta
    r[:, TH] = _qlog(qE)
    r[:, BA] = np.array([s.ba for s in states_k1]) - np.array([s.ba for s in states_k])
    r[:, BG] = np.array([s.bg for s in states_k1]) - np.array([s.bg for s in states_k])
    if not want_jac:
        return r, None, None
    Jri = _right_jacobian_inv_batch(r[:, TH])
    Rk1 = np.array([s.q.matrix for s in states_k1])
    ER = np.array([Rotation(q).matrix for q in qE]) if m else np.zeros((0, 3, 3))
    h = dt[:, None, None]
    I3 = np.eye(3)
    Jk = np.zeros((m, 15, ERROR_DIM))
    Jk1 = np.zeros((m, 15, ERROR_DIM))
    Jk[:, A, SL_P] = -RkT
    Jk[:, A, SL_V] = -RkT * h
    Jk[:, A, SL_TH] = _skew_batch(dp_b)
    Jk[:, A, SL_BA] = -jac[:, A, BA]
    Jk[:, A, SL_BG] = -jac[:, A, BG]
    Jk[:, B, SL_V] = -RkT
    Jk[:, B, SL_TH] = _skew_batch(dv_b)
    Jk[:, B, SL_BA] = -jac[:, B, BA]
    Jk[:, B, SL_BG] = -jac[:, B, BG]
    Jk[:, TH, SL_TH] = -Jri @ np.transpose(Rk1, (0, 2, 1)) @ Rk
    Jk[:, TH, SL_BG] = -Jri @ np.transpose(ER, (0, 2, 1)) @ _right_jacobian_batch(phi) @ jac[:, TH, BG]
    Jk[:, BA, SL_BA] = -I3
    Jk[:, BG, SL_BG] = -I3
    Jk1[:, A, SL_P] = RkT
    Jk1[:, B, SL_V] = RkT
    Jk1[:, TH, SL_TH] = Jri
    Jk1[:, BA, SL_BA] = I3
    Jk1[:, BG, SL_BG] = I3
    return r, Jk, Jk1
