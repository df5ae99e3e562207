"""Sliding-window least-squares estimator over keyframe states, features and yaw offset."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .factors import (
    CameraModel,
    FeatureParam,
    ProjectionError,
    WhitenedResidual,
    anchor_pixel_jacobian,
    pseudorange_residual_batch,
    visual_residual_batch,
)
from .geom import (
    CONSTELLATIONS,
    ERROR_DIM,
    INERTIAL_DIM,
    IX_DRIFT,
    SPEED_OF_LIGHT,
    SL_BA,
    SL_BG,
    SL_CLK,
    SL_P,
    SL_TH,
    SL_V,
    AnchorGeodesy,
    ImuState,
    ecef_from_enu,
    manifold_minus,
    manifold_plus,
    right_jacobian_inv,
    rotation_from_yaw,
    yaw_matrix_derivative,
)
from .preint import (
    PreintegratedImu,
    needs_relinearization,
    preint_batch,
    predict,
    preint_jacobian,
    preint_residual,
    preintegrate,
)

log = logging.getLogger(__name__)

PSI = "psi"


_GRIDS: dict = {}


def _grid(shape):
    """Flattened row/column index arrays of a dense block (cached per shape)."""
    g = _GRIDS.get(shape)
    if g is None:
        rr, cc = np.indices(shape)
        g = _GRIDS[shape] = (rr.ravel(), cc.ravel())
    return g


class ObservabilityError(RuntimeError):
    """Normal matrix too ill-conditioned; ``block`` names the weakly observed variable."""

    def __init__(self, msg: str, block: str = ""):
        super().__init__(msg)
        self.block = block


@dataclass(frozen=True)
class SolverConfig:
    window: int = 10
    max_iter: int = 30
    damping: float = 1e-4
    cost_tol: float = 1e-5
    converge_damping: float = 1.0  # largest damping at which a small decrease counts as converged
    step_tol: float = 1e-8
    cond_max: float = 1e12
    rho_min: float = 1e-4
    relin_threshold: float = 0.1
    relin_scale_ba: float = 1.0  # m/s^2, whitening of the bias delta for the re-linearisation test
    relin_scale_bg: float = 0.05  # rad/s
    # receiver clock process noise (bias in m/sqrt(s), drift in m/s/sqrt(s))
    clock_sigma: float = 0.1
    drift_sigma: float = 0.01
    # initial prior sigmas
    prior_p: float = 1.0
    prior_v: float = 0.2
    prior_tilt: float = 0.01
    prior_yaw: float = 1e-4
    prior_ba: float = 0.05
    prior_bg: float = 0.005
    prior_clock: float = 100.0  # m
    prior_drift: float = 10.0  # m/s
    prior_psi: float = 0.05
    # inflation added to alpha/beta/theta when an IMU factor is excluded
    bridge_alpha: float = 5.0
    bridge_beta: float = 5.0
    bridge_theta: float = 0.5
    min_parallax_deg: float = 1.0
    min_depth: float = 0.5

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window capacity must be at least 1")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        for name in ("damping", "cost_tol", "converge_damping", "step_tol", "cond_max", "clock_sigma",
                     "drift_sigma", "prior_p", "prior_v", "prior_tilt", "prior_yaw", "prior_ba", "prior_bg",
                     "prior_clock", "prior_drift", "prior_psi", "relin_scale_ba", "relin_scale_bg"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def prior_sigmas(self) -> np.ndarray:
        s = np.empty(ERROR_DIM + 1)
        s[SL_P] = self.prior_p
        s[SL_V] = self.prior_v
        s[SL_TH] = (self.prior_tilt, self.prior_tilt, self.prior_yaw)
        s[SL_BA] = self.prior_ba
        s[SL_BG] = self.prior_bg
        s[SL_CLK] = self.prior_clock
        s[IX_DRIFT] = self.prior_drift
        s[-1] = self.prior_psi
        return s


@dataclass
class PriorFactor:
    """Linear prior ``S @ [x (-) x_lin; psi - psi_lin] + e`` on the oldest keyframe and psi."""

    S: np.ndarray
    e: np.ndarray
    x_lin: ImuState
    psi_lin: float

    def residual(self, x: ImuState, psi: float) -> np.ndarray:
        d = np.r_[manifold_minus(x, self.x_lin), psi - self.psi_lin]
        return self.S @ d + self.e

    def jacobian(self, x: ImuState) -> np.ndarray:
        """Jacobian w.r.t. ``[x (20), psi]``; the attitude block carries ``Jr^-1`` of the difference."""
        J = self.S.copy()
        dth = (self.x_lin.q.inverse() * x.q).log()
        J[:, SL_TH] = self.S[:, SL_TH] @ right_jacobian_inv(dth)
        return J


@dataclass
class Keyframe:
    index: int  # epoch index
    time: float
    state: ImuState
    epoch: object  # MeasurementEpoch
    preint: PreintegratedImu | None = None  # from the previous keyframe
    imu_active: bool = True
    vision_active: bool = True
    sat_active: np.ndarray = None
    # cached pseudorange arrays
    sat_pos: np.ndarray = None
    sat_clock: np.ndarray = None
    pr: np.ndarray = None
    sys: np.ndarray = None
    delays: np.ndarray = None
    pr_sigma: np.ndarray = None
    sat_ids: tuple = ()
    obs: dict = field(default_factory=dict)  # feature id -> pixel

    def __post_init__(self):
        sats = self.epoch.sats
        n = len(sats)
        self.sat_ids = tuple(s.sat_id for s in sats)
        self.sat_pos = np.array([s.sat_pos for s in sats]).reshape(n, 3)
        self.sat_clock = np.array([s.sat_clock for s in sats], dtype=float)
        self.pr = np.array([s.pseudorange for s in sats], dtype=float)
        self.sys = np.array([CONSTELLATIONS.index(s.constellation) for s in sats], dtype=int)
        self.delays = np.array([s.troposphere + s.ionosphere + s.sagnac for s in sats], dtype=float)
        self.pr_sigma = np.array([s.sigma for s in sats], dtype=float)
        if self.sat_active is None:
            self.sat_active = np.ones(n, dtype=bool)
        self.obs = {int(f): np.asarray(uv, dtype=float) for f, uv in zip(self.epoch.feature_ids, self.epoch.pixels)}


@dataclass
class SolveReport:
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    class_cost: dict = field(default_factory=dict)
    converged: bool = False
    damping_trace: list = field(default_factory=list)
    cost_trace: list = field(default_factory=list)  # per solve pass: start cost, then each accepted step


class SlidingWindow:
    """Keyframe states, inverse-depth features and the yaw offset of one estimator."""

    def __init__(self, anchor: AnchorGeodesy, camera: CameraModel, gravity, imu_spec,
                 config: SolverConfig | None = None, psi: float = 0.0):
        self.anchor = anchor
        self.camera = camera
        self.gravity = np.asarray(gravity, dtype=float)
        self.imu_spec = imu_spec
        self.config = config or SolverConfig()
        self.psi = float(psi)
        self.keyframes: list = []
        self.features: dict = {}  # fid -> FeatureParam (anchor = epoch index)
        self.pending: dict = {}  # fid -> first observing epoch index
        self.prior: PriorFactor | None = None
        self.initial_state: ImuState | None = None
        self.R_ne = ecef_from_enu(anchor).matrix
        self._whitener = None  # (structure key, T)

    # ------------------------------------------------------------ bookkeeping
    @property
    def capacity(self) -> int:
        return self.config.window

    def __len__(self):
        return len(self.keyframes)

    @property
    def latest(self) -> Keyframe:
        return self.keyframes[-1]

    def slot_of(self, epoch_index: int) -> int:
        for s, kf in enumerate(self.keyframes):
            if kf.index == epoch_index:
                return s
        raise KeyError(epoch_index)

    def states(self) -> list:
        return [kf.state for kf in self.keyframes]

    def position_n(self, state: ImuState | None = None) -> np.ndarray:
        """Latest (or given) position rotated into the local ENU frame."""
        st = self.latest.state if state is None else state
        return rotation_from_yaw(self.psi).matrix @ st.p

    def add_keyframe(self, epoch, initial_state: ImuState | None = None) -> "SlidingWindow":
        """Append a keyframe predicted by IMU propagation (or ``initial_state`` when empty)."""
        if self.keyframes and epoch.time <= self.latest.time:
            raise ValueError(f"keyframe time {epoch.time} does not advance past {self.latest.time}")
        if not self.keyframes:
            if initial_state is None:
                raise ValueError("the first keyframe needs an initial state")
            self.initial_state = initial_state
            kf = Keyframe(epoch.index, epoch.time, initial_state, epoch)
            self.keyframes.append(kf)
            if self.prior is None:
                sig = self.config.prior_sigmas()
                self.prior = PriorFactor(np.diag(1.0 / sig), np.zeros(sig.size), initial_state, self.psi)
        else:
            prev = self.latest.state
            p = preintegrate(epoch.imu, (prev.ba, prev.bg), self.imu_spec)
            state = predict(p, prev, self.gravity)
            if len(self.keyframes) >= self.capacity:
                self.slide()
            kf = Keyframe(epoch.index, epoch.time, state, epoch, preint=p)
            self.keyframes.append(kf)
        self._register_features(kf)
        return self

    def _register_features(self, kf: Keyframe):
        for fid in kf.obs:
            if fid in self.features:
                continue
            if fid not in self.pending:
                self.pending[fid] = kf.index
                continue
            self._try_triangulate(fid)

    def _camera_pose(self, state: ImuState):
        Rwb = state.q.matrix
        Rwc = Rwb @ self.camera.R_bc.matrix.T
        C = state.p - Rwc @ self.camera.t_bc
        return Rwc, C

    def _try_triangulate(self, fid: int) -> bool:
        a_idx = self.pending[fid]
        kfs = [kf for kf in self.keyframes if fid in kf.obs and kf.vision_active]
        if len(kfs) < 2 or kfs[0].index != a_idx:
            return False
        A = np.zeros((3, 3))
        b = np.zeros(3)
        rays = []
        for kf in kfs:
            Rwc, C = self._camera_pose(kf.state)
            d = Rwc @ self.camera.bearing(kf.obs[fid])
            rays.append((d, C))
            P = np.eye(3) - np.outer(d, d)
            A += P
            b += P @ C
        d0, C0 = rays[0]
        par = max(math.degrees(math.acos(np.clip(d0 @ d, -1.0, 1.0))) for d, _ in rays[1:])
        if par < self.config.min_parallax_deg:
            return False
        X = np.linalg.solve(A, b)
        depth = float(d0 @ (X - C0))
        if depth < self.config.min_depth:
            return False
        bearing = self.camera.bearing(kfs[0].obs[fid])
        self.features[fid] = FeatureParam(fid, a_idx, 1.0 / depth, bearing)
        del self.pending[fid]
        return True

    def slide(self) -> "SlidingWindow":
        """Drop the oldest keyframe, marginalising its inertial, clock and GNSS information."""
        if not self.keyframes:
            return self
        if len(self.keyframes) == 1:
            self.keyframes.clear()
            self.features.clear()
            self.pending.clear()
            return self
        old, nxt = self.keyframes[0], self.keyframes[1]
        self.prior = self._marginalize(old, nxt)
        self.keyframes.pop(0)
        for fid in list(self.features):
            f = self.features[fid]
            if f.anchor != old.index:
                continue
            self._reanchor(fid, old)
        for fid in [f for f, a in self.pending.items() if a == old.index]:
            nxt_obs = [kf.index for kf in self.keyframes if fid in kf.obs and kf.vision_active]
            if nxt_obs:
                self.pending[fid] = nxt_obs[0]
            else:
                del self.pending[fid]
        return self

    def _reanchor(self, fid: int, old: Keyframe):
        f = self.features[fid]
        later = [kf for kf in self.keyframes if fid in kf.obs and kf.vision_active]
        if not later:
            del self.features[fid]
            return
        xw = self._feature_point(f, old.state)
        new = later[0]
        Rwc, C = self._camera_pose(new.state)
        xc = Rwc.T @ (xw - C)
        dist = float(np.linalg.norm(xc))
        if xc[2] <= 0.0 or dist <= 0.0:
            del self.features[fid]
            return
        self.features[fid] = FeatureParam(fid, new.index, 1.0 / dist, xc / dist)

    def _feature_point(self, f: FeatureParam, anchor_state: ImuState) -> np.ndarray:
        Rwc, C = self._camera_pose(anchor_state)
        return Rwc @ (f.bearing / f.rho) + C

    def feature_points(self) -> dict:
        anchors = {kf.index: kf.state for kf in self.keyframes}
        return {fid: self._feature_point(f, anchors[f.anchor]) for fid, f in self.features.items()}

    # -------------------------------------------------------- marginalisation
    def _marginalize(self, old: Keyframe, nxt: Keyframe) -> PriorFactor:
        n_var = 2 * ERROR_DIM + 1
        rows_J, rows_r = [], []

        def put(J_blocks, r):
            J = np.zeros((len(r), n_var))
            for cols, blk in J_blocks:
                J[:, cols] = blk
            rows_J.append(J)
            rows_r.append(r)

        s0 = slice(0, ERROR_DIM)
        s1 = slice(ERROR_DIM, 2 * ERROR_DIM)
        ipsi = 2 * ERROR_DIM
        if self.prior is not None:
            r = self.prior.residual(old.state, self.psi)
            Jp = self.prior.jacobian(old.state)
            put([(s0, Jp[:, :ERROR_DIM]), ([ipsi], Jp[:, ERROR_DIM:])], r)
        if nxt.preint is not None:
            r, Jk, Jk1 = self._imu_factor(nxt, old.state, nxt.state)
            put([(s0, Jk), (s1, Jk1)], r)
        r, Jk, Jk1 = self._clock_factor(old, nxt)
        put([(s0, Jk), (s1, Jk1)], r)
        m = old.sat_active
        if m.any():
            r, Jp, Jc, Jpsi = self._gnss_rows(old, old.state, m)
            cols_p = list(range(SL_P.start, SL_P.stop))
            cols_c = list(range(SL_CLK.start, SL_CLK.stop))
            put([(cols_p, Jp), (cols_c, Jc), ([ipsi], Jpsi[:, None])], r)
        J = np.vstack(rows_J)
        r = np.concatenate(rows_r)
        H = J.T @ J
        b = J.T @ r
        H00 = H[s0, s0]
        H0k = H[s0, ERROR_DIM:]
        Hkk = H[ERROR_DIM:, ERROR_DIM:]
        w, V = np.linalg.eigh(H00)
        keep = w > w.max() * 1e-14
        H00_inv = (V[:, keep] / w[keep]) @ V[:, keep].T
        Hm = Hkk - H0k.T @ H00_inv @ H0k
        bm = b[ERROR_DIM:] - H0k.T @ H00_inv @ b[s0]
        Hm = 0.5 * (Hm + Hm.T)
        w, V = np.linalg.eigh(Hm)
        keep = w > max(w.max(), 0.0) * 1e-14
        sq = np.sqrt(w[keep])
        S = sq[:, None] * V[:, keep].T
        e = (V[:, keep].T @ bm) / sq
        return PriorFactor(S, e, nxt.state, self.psi)

    # ---------------------------------------------------------------- factors
    def _imu_factor(self, kf: Keyframe, sk: ImuState, sk1: ImuState):
        p = kf.preint
        r = preint_residual(p, sk, sk1, self.gravity)
        Jk, Jk1 = preint_jacobian(p, sk, sk1, self.gravity)
        L = self._imu_sqrt_info(kf)
        return L @ r, L @ Jk, L @ Jk1

    def _imu_sqrt_info(self, kf: Keyframe) -> np.ndarray:
        key = (id(kf.preint), kf.imu_active)
        cached = getattr(kf, "_sqrt_info", None)
        if cached is not None and cached[0] == key:
            return cached[1]
        cov = kf.preint.cov.copy()
        if not kf.imu_active:
            c = self.config
            cov[0:3, 0:3] += np.eye(3) * c.bridge_alpha**2
            cov[3:6, 3:6] += np.eye(3) * c.bridge_beta**2
            cov[6:9, 6:9] += np.eye(3) * c.bridge_theta**2
        L = np.linalg.inv(np.linalg.cholesky(cov))
        kf._sqrt_info = (key, L)
        return L

    def _gnss_rows(self, kf: Keyframe, state: ImuState, mask, psi: float | None = None):
        psi = self.psi if psi is None else psi
        r, Jp, Jc, Jpsi = pseudorange_residual_batch(
            kf.sat_pos[mask], kf.sat_clock[mask], kf.pr[mask], kf.sys[mask], kf.delays[mask],
            state.p, state.clock, psi, self.anchor)
        s = kf.pr_sigma[mask]
        return r / s, Jp / s[:, None], Jc / s[:, None], Jpsi / s

    def _vision_structure(self):
        """Observation index arrays for all active visual residuals in the window."""
        slot = {kf.index: i for i, kf in enumerate(self.keyframes)}
        fids = sorted(self.features)
        rows = []
        for fi, fid in enumerate(fids):
            f = self.features[fid]
            a = slot[f.anchor]
            for j, kf in enumerate(self.keyframes):
                if j == a or not kf.vision_active or fid not in kf.obs:
                    continue
                rows.append((fi, a, j, fid))
        used = sorted({r[0] for r in rows})
        col_of = {fi: c for c, fi in enumerate(used)}
        n = len(rows)
        st = {
            "fids": [fids[i] for i in used],
            "feat": np.array([col_of[r[0]] for r in rows], dtype=int),
            "a": np.array([r[1] for r in rows], dtype=int),
            "j": np.array([r[2] for r in rows], dtype=int),
            "obs": np.array([self.keyframes[r[2]].obs[r[3]] for r in rows]).reshape(n, 2),
            "sigma": np.array([self.keyframes[r[2]].epoch.pixel_sigma for r in rows], dtype=float),
            "sigma_a": np.array([self.keyframes[r[1]].epoch.pixel_sigma for r in rows], dtype=float),
            "label": [(self.keyframes[r[2]].index, r[3]) for r in rows],
        }
        return st

    def _vision_whitener(self, states, rhos, vs):
        """Sparse ``T`` such that ``T @ (r / sigma)`` is white.

        The bearing of each feature is frozen from a noisy anchor pixel, so all
        residuals of one feature share that noise: per feature the covariance of
        ``r / sigma`` is ``I + H H^T`` with ``H_j = G_j sigma_a / sigma_j``.
        ``T`` is its symmetric inverse square root, held fixed within one solve.
        """
        N = len(vs["feat"])
        if N == 0:
            return sp.identity(0, format="csr")
        fp = [self.features[f] for f in vs["fids"]]
        bear = np.array([f.bearing for f in fp])[vs["feat"]]
        rho = rhos[vs["feat"]]
        Rs = np.array([st.q.matrix for st in states])
        Ps = np.array([st.p for st in states])
        G = anchor_pixel_jacobian(bear, rho, Rs[vs["a"]], Ps[vs["a"]], Rs[vs["j"]], Ps[vs["j"]], self.camera)
        H = G * (vs["sigma_a"] / vs["sigma"])[:, None, None]
        F = len(fp)
        S = np.zeros((F, 2, 2))
        np.add.at(S, vs["feat"], np.transpose(H, (0, 2, 1)) @ H)
        lam, U = np.linalg.eigh(S)
        lam = np.clip(lam, 0.0, None)
        q = np.sqrt(1.0 + lam)
        c = -1.0 / (q * (q + 1.0))  # (1/sqrt(1+l) - 1) / l without the l -> 0 cancellation
        M = (U * c[:, None, :]) @ np.transpose(U, (0, 2, 1))
        rr, cc = _grid((2, 2))
        Hb = sp.csr_matrix((H.ravel(), (((2 * np.arange(N))[:, None] + rr).ravel(),
                                        ((2 * vs["feat"])[:, None] + cc).ravel())), shape=(2 * N, 2 * F))
        Mb = sp.csr_matrix((M.ravel(), (((2 * np.arange(F))[:, None] + rr).ravel(),
                                        ((2 * np.arange(F))[:, None] + cc).ravel())), shape=(2 * F, 2 * F))
        return (sp.identity(2 * N, format="csr") + Hb @ Mb @ Hb.T).tocsr()

    # ---------------------------------------------------------- linearisation
    def _layout(self, vs):
        n = len(self.keyframes)
        ipsi = n * ERROR_DIM
        nfeat = len(vs["fids"])
        return ipsi, ipsi + 1, ipsi + 1 + nfeat

    def _evaluate(self, states, psi, rhos, vs, want_jac=True):
        """Whitened residual vector, optional sparse Jacobian, and per-class costs."""
        n = len(states)
        ipsi, ifeat, ncol = self._layout(vs)
        r_parts, classes = [], {}
        Jr, Jc, Jv = [], [], []
        row = 0

        def add(r, blocks, cls):
            nonlocal row
            r_parts.append(r)
            classes[cls] = classes.get(cls, 0.0) + 0.5 * float(r @ r)
            if want_jac:
                for c0, blk in blocks:
                    rr, cc = _grid(blk.shape)
                    Jr.append(row + rr)
                    Jc.append(c0 + cc)
                    Jv.append(blk.ravel())
            row += len(r)

        def add_batch(r, blocks, cls_of_row=None, cls=None):
            """``r`` is ``(m, d)``; blocks are ``(col0 (m,), blk (m, d, k))``."""
            nonlocal row
            m, d = r.shape
            r_parts.append(r.ravel())
            if cls_of_row is None:
                classes[cls] = classes.get(cls, 0.0) + 0.5 * float(np.sum(r * r))
            else:
                for c in set(cls_of_row):
                    sel = [i for i, x in enumerate(cls_of_row) if x == c]
                    classes[c] = classes.get(c, 0.0) + 0.5 * float(np.sum(r[sel] ** 2))
            if want_jac:
                rows = row + np.arange(m * d).reshape(m, d, 1)
                for c0, blk in blocks:
                    k = blk.shape[2]
                    Jr.append(np.broadcast_to(rows, blk.shape).ravel())
                    Jc.append(np.broadcast_to(np.asarray(c0)[:, None, None] + np.arange(k), blk.shape).ravel())
                    Jv.append(blk.ravel())
            row += m * d

        if self.prior is not None:
            r = self.prior.residual(states[0], psi)
            Jp = self.prior.jacobian(states[0]) if want_jac else None
            add(r, [(0, Jp[:, :ERROR_DIM]), (ipsi, Jp[:, ERROR_DIM:])] if want_jac else [], "prior")
        slots = [s for s in range(1, n) if self.keyframes[s].preint is not None]
        if slots:
            kfs = [self.keyframes[s] for s in slots]
            r, Jk, Jk1 = preint_batch([kf.preint for kf in kfs], [states[s - 1] for s in slots],
                                      [states[s] for s in slots], self.gravity, want_jac)
            L = np.array([self._imu_sqrt_info(kf) for kf in kfs])
            r = (L @ r[:, :, None])[:, :, 0]
            cols = np.array(slots) * ERROR_DIM
            blocks = [(cols - ERROR_DIM, L @ Jk), (cols, L @ Jk1)] if want_jac else []
            add_batch(r, blocks, ["imu" if kf.imu_active else "bridge" for kf in kfs])
        if n > 1:
            r, Jk, Jk1 = self._clock_batch(states)
            cols = np.arange(1, n) * ERROR_DIM
            add_batch(r, [(cols - ERROR_DIM, Jk), (cols, Jk1)], cls="clock")
        gs = [s for s, kf in enumerate(self.keyframes) if kf.sat_active.any()]
        if gs:
            kfs = [self.keyframes[s] for s in gs]
            ms = [kf.sat_active for kf in kfs]
            cnt = [int(m.sum()) for m in ms]
            slot = np.repeat(gs, cnt)
            P = np.array([st.p for st in states])[slot]
            C = np.array([st.clock for st in states])[slot]
            cat = lambda name: np.concatenate([getattr(kf, name)[m] for kf, m in zip(kfs, ms)])
            sig = cat("pr_sigma")
            r, Jp, Jcl, Jpsi = pseudorange_residual_batch(cat("sat_pos"), cat("sat_clock"), cat("pr"), cat("sys"),
                                                          cat("delays"), P, C, psi, self.anchor)
            r = r / sig
            base = slot * ERROR_DIM
            w = 1.0 / sig[:, None, None]
            add_batch(r[:, None], [(base + SL_P.start, Jp[:, None, :] * w), (base + SL_CLK.start, Jcl[:, None, :] * w),
                                   (np.full(len(r), ipsi), Jpsi[:, None, None] * w)], cls="gnss")
        if len(vs["feat"]):
            fparams = [self.features[f] for f in vs["fids"]]
            bear = np.array([f.bearing for f in fparams])[vs["feat"]]
            rho = rhos[vs["feat"]]
            Rs = np.array([st.q.matrix for st in states])
            Ps = np.array([st.p for st in states])
            r2, z, J_pi, J_thi, J_pj, J_thj, J_rho = visual_residual_batch(
                vs["obs"], bear, rho, Rs[vs["a"]], Ps[vs["a"]], Rs[vs["j"]], Ps[vs["j"]], self.camera)
            if np.any(z <= 0.0):
                raise ProjectionError("feature behind the camera")
            sig = vs["sigma"][:, None]
            T = vs["T"]
            r = T @ (r2 / sig).ravel()
            classes["vision"] = classes.get("vision", 0.0) + 0.5 * float(r @ r)
            r_parts.append(r)
            if want_jac:
                N = len(rho)
                vr, vc, vv = [], [], []
                rows2 = np.arange(2 * N).reshape(N, 2)
                for blk, base_slot, off in ((J_pi, vs["a"], SL_P.start), (J_thi, vs["a"], SL_TH.start),
                                            (J_pj, vs["j"], SL_P.start), (J_thj, vs["j"], SL_TH.start)):
                    blk = blk / sig[:, :, None]
                    cols = (base_slot * ERROR_DIM + off)[:, None, None] + np.arange(3)[None, None, :]
                    vr.append(np.broadcast_to(rows2[:, :, None], blk.shape).ravel())
                    vc.append(np.broadcast_to(cols, blk.shape).ravel())
                    vv.append(blk.ravel())
                vr.append(rows2.ravel())
                vc.append(np.repeat(ifeat + vs["feat"], 2))
                vv.append((J_rho / sig).ravel())
                Jvis = sp.csr_matrix((np.concatenate(vv), (np.concatenate(vr), np.concatenate(vc))),
                                     shape=(2 * N, ncol))
            row += len(r)
        r = np.concatenate(r_parts) if r_parts else np.zeros(0)
        J = None
        if want_jac:
            nv = 2 * len(vs["feat"])
            J = sp.csr_matrix((np.concatenate(Jv), (np.concatenate(Jr), np.concatenate(Jc))),
                              shape=(row - nv, ncol))
            if nv:
                J = sp.vstack([J, vs["T"] @ Jvis], format="csr")
        return r, J, classes

    def _clock_factor_states(self, t0, t1, x0, x1):
        dt = t1 - t0
        sc = self.config.clock_sigma * math.sqrt(dt)
        sd = self.config.drift_sigma * math.sqrt(dt)
        c0, c1 = x0.clock * SPEED_OF_LIGHT, x1.clock * SPEED_OF_LIGHT
        d0, d1 = x0.drift * SPEED_OF_LIGHT, x1.drift * SPEED_OF_LIGHT
        r = np.r_[(c1 - c0 - d0 * dt) / sc, (d1 - d0) / sd]
        Jk = np.zeros((5, ERROR_DIM))
        Jk1 = np.zeros((5, ERROR_DIM))
        Jk[0:4, SL_CLK] = -np.eye(4) / sc
        Jk[0:4, IX_DRIFT] = -dt / sc
        Jk1[0:4, SL_CLK] = np.eye(4) / sc
        Jk[4, IX_DRIFT] = -1.0 / sd
        Jk1[4, IX_DRIFT] = 1.0 / sd
        return r, Jk, Jk1

    def _clock_batch(self, states):
        """Clock factors between all consecutive keyframes: ``(m,5)``, ``(m,5,20)``, ``(m,5,20)``."""
        t = np.array([kf.time for kf in self.keyframes])
        dt = np.diff(t)
        m = dt.size
        sc = self.config.clock_sigma * np.sqrt(dt)
        sd = self.config.drift_sigma * np.sqrt(dt)
        c = np.array([st.clock for st in states]) * SPEED_OF_LIGHT
        d = np.array([st.drift for st in states]) * SPEED_OF_LIGHT
        r = np.empty((m, 5))
        r[:, :4] = (c[1:] - c[:-1] - (d[:-1] * dt)[:, None]) / sc[:, None]
        r[:, 4] = (d[1:] - d[:-1]) / sd
        Jk = np.zeros((m, 5, ERROR_DIM))
        Jk1 = np.zeros((m, 5, ERROR_DIM))
        eye = np.eye(4)[None] / sc[:, None, None]
        Jk[:, 0:4, SL_CLK] = -eye
        Jk[:, 0:4, IX_DRIFT] = -(dt / sc)[:, None]
        Jk1[:, 0:4, SL_CLK] = eye
        Jk[:, 4, IX_DRIFT] = -1.0 / sd
        Jk1[:, 4, IX_DRIFT] = 1.0 / sd
        return r, Jk, Jk1

    def _clock_factor(self, kf0: Keyframe, kf1: Keyframe):
        return self._clock_factor_states(kf0.time, kf1.time, kf0.state, kf1.state)

    # ------------------------------------------------------------ optimiser
    def _relinearize(self) -> bool:
        c = self.config
        changed = False
        for s in range(1, len(self.keyframes)):
            kf = self.keyframes[s]
            prev = self.keyframes[s - 1].state
            if kf.preint is not None and needs_relinearization(kf.preint, prev.ba, prev.bg,
                                                               c.relin_threshold, c.relin_scale_ba, c.relin_scale_bg):
                kf.preint = preintegrate(kf.preint.samples, (prev.ba, prev.bg), kf.preint.spec)
                changed = True
        return changed

    def _check_conditioning(self, H, vs):
        d = np.sqrt(np.diag(H))
        if np.any(d <= 0.0):
            bad = int(np.flatnonzero(d <= 0.0)[0])
            raise ObservabilityError(f"no information on {self._name_col(bad, vs)}", self._name_col(bad, vs))
        Hs = H / d[:, None] / d[None, :]
        try:
            L = np.linalg.cholesky(Hs)
            est = (np.max(np.diag(L)) / np.min(np.diag(L))) ** 2
        except np.linalg.LinAlgError:
            est = np.inf
        if est < self.config.cond_max * 1e-3:
            return
        w, V = np.linalg.eigh(Hs)
        cond = w[-1] / max(w[0], 1e-300)
        if w[0] <= 0.0 or cond > self.config.cond_max:
            col = int(np.argmax(np.abs(V[:, 0])))
            name = self._name_col(col, vs)
            raise ObservabilityError(f"normal matrix condition {cond:.3g} exceeds "
                                     f"{self.config.cond_max:.0e}; weakly observed: {name}", name)

    def _name_col(self, col: int, vs) -> str:
        n = len(self.keyframes)
        if col < n * ERROR_DIM:
            s, k = divmod(col, ERROR_DIM)
            names = ["position"] * 3 + ["velocity"] * 3 + ["attitude"] * 3 + ["accel bias"] * 3 \
                + ["gyro bias"] * 3 + ["clock " + c for c in CONSTELLATIONS] + ["clock drift"]
            return f"keyframe {self.keyframes[s].index} {names[k]}"
        if col == n * ERROR_DIM:
            return "yaw offset psi"
        return f"feature {vs['fids'][col - n * ERROR_DIM - 1]} inverse depth"

    def _apply(self, states, psi, rhos, dx, vs):
        n = len(states)
        ipsi, ifeat, _ = self._layout(vs)
        new_states = [manifold_plus(states[s], dx[s * ERROR_DIM:(s + 1) * ERROR_DIM]) for s in range(n)]
        new_rho = np.maximum(rhos + dx[ifeat:], self.config.rho_min)
        return new_states, psi + float(dx[ipsi]), new_rho

    def optimize(self) -> SolveReport:
        """Damped Gauss-Newton (Levenberg-Marquardt) over the window."""
        rep = SolveReport()
        if len(self.keyframes) < 1:
            raise ValueError("window is empty")
        self._relinearize()
        self._lm(rep, check=True)
        if self._relinearize():
            # biases moved enough to re-integrate: polish once more
            self._lm(rep, check=False)
        return rep

    def _prune_features(self):
        """Drop features that project behind (or too close to) any observing camera."""
        vs = self._vision_structure()
        if not len(vs["feat"]):
            return vs
        states = self.states()
        fp = [self.features[f] for f in vs["fids"]]
        bear = np.array([f.bearing for f in fp])[vs["feat"]]
        rho = np.array([f.rho for f in fp])[vs["feat"]]
        Rs = np.array([st.q.matrix for st in states])
        Ps = np.array([st.p for st in states])
        _, z, *_ = visual_residual_batch(vs["obs"], bear, rho, Rs[vs["a"]], Ps[vs["a"]], Rs[vs["j"]],
                                         Ps[vs["j"]], self.camera)
        bad = {vs["fids"][i] for i in np.unique(vs["feat"][z < self.config.min_depth])}
        if not bad:
            return vs
        log.debug("dropping %d features with non-positive depth", len(bad))
        for f in bad:
            del self.features[f]
        return self._vision_structure()

    def _structure(self, prune: bool = False):
        """Vision structure with the anchor-noise whitener.

        The whitener is evaluated once per structure (keyframes, features,
        anchors, active observations) and reused by later solves, so repeated
        solves of one window minimise the same cost.
        """
        vs = self._prune_features() if prune else self._vision_structure()
        rhos = np.array([self.features[f].rho for f in vs["fids"]], dtype=float)
        key = (tuple(vs["label"]), tuple(self.features[f].anchor for f in vs["fids"]), vs["a"].tobytes())
        if self._whitener is None or self._whitener[0] != key:
            self._whitener = (key, self._vision_whitener(self.states(), rhos, vs))
        vs["T"] = self._whitener[1]
        return vs, rhos

    @staticmethod
    def _normal_blocks(J, nx):
        """``J^T J`` split into the state block, the state-feature block and the feature diagonal."""
        Jc = J.tocsc()
        Jx = Jc[:, :nx].toarray()
        Jf = Jc[:, nx:]
        hff = np.asarray(Jf.multiply(Jf).sum(axis=0)).ravel()
        return Jx.T @ Jx, (Jf.T @ Jx).T, hff

    @staticmethod
    def _damped_step(Hxx, Hxf, hff, g, lam):
        """Solve the damped normal equations, eliminating the inverse depths first.

        Every inverse depth enters only its own feature's rows, so the feature
        block of the normal matrix is diagonal and the Schur complement is exact.
        """
        nx = Hxx.shape[0]
        A = Hxx + lam * np.diag(np.maximum(np.diag(Hxx), 1e-9))
        dff = hff + lam * np.maximum(hff, 1e-9)
        gx, gf = g[:nx], g[nx:]
        if dff.size:
            Bs = Hxf / dff
            A = A - Bs @ Hxf.T
            gx = gx - Bs @ gf
        dxx = -sla.cho_solve(sla.cho_factor(A, check_finite=False), gx, check_finite=False)
        dxf = -(gf + Hxf.T @ dxx) / dff
        return np.concatenate([dxx, dxf])

    def _lm(self, rep: SolveReport, check: bool):
        c = self.config
        vs, rhos = self._structure(prune=True)
        states = self.states()
        psi = self.psi
        r, J, classes = self._evaluate(states, psi, rhos, vs)
        cost = 0.5 * float(r @ r)
        if rep.iterations == 0:
            rep.initial_cost = cost
        rep.cost_trace.append([cost])
        lam = c.damping
        converged = False
        nx = self._layout(vs)[1]
        for it in range(c.max_iter):
            Hxx, Hxf, hff = self._normal_blocks(J, nx)
            g = J.T @ r
            if check and it == 0:
                self._check_conditioning(np.block([[Hxx, Hxf], [Hxf.T, np.diag(hff)]]), vs)
            accepted = False
            while not accepted:
                try:
                    dx = self._damped_step(Hxx, Hxf, hff, g, lam)
                except np.linalg.LinAlgError:
                    lam *= 10.0
                    rep.damping_trace.append(lam)
                    continue
                try:
                    ns, npsi, nrho = self._apply(states, psi, rhos, dx, vs)
                    r_new, J_new, cl_new = self._evaluate(ns, npsi, nrho, vs)
                    cost_new = 0.5 * float(r_new @ r_new)
                except (ProjectionError, ValueError):
                    cost_new = np.inf
                rep.damping_trace.append(lam)
                if cost_new < cost or (cost_new == cost == 0.0):
                    accepted = True
                    break
                lam *= 10.0
                if lam > 1e12:
                    break
            rep.iterations += 1
            if not accepted:
                converged = True  # no further decrease possible at this linearisation
                break
            dec = cost - cost_new
            rel = dec / max(cost, 1e-300)
            step = float(np.linalg.norm(dx))
            # a heavily damped step says little about convergence; at lam <= 1 the
            # step keeps at least about half of its Gauss-Newton length
            near_gn = lam <= c.converge_damping
            states, psi, rhos = ns, npsi, nrho
            lam = max(lam / 10.0, 1e-12)
            r, J, classes, cost = r_new, J_new, cl_new, cost_new
            rep.cost_trace[-1].append(cost)
            if (near_gn and rel < c.cost_tol) or step < c.step_tol:
                converged = True
                break
        for kf, st in zip(self.keyframes, states):
            kf.state = st
        self.psi = psi
        for f, rho in zip(vs["fids"], rhos):
            self.features[f].rho = float(rho)
        rep.final_cost = cost
        rep.class_cost = classes
        rep.converged = converged
        return rep

    # ------------------------------------------------- residuals and exclusion
    _IMU_LABELS = tuple(f"{b}_{a}" for b in ("alpha", "beta", "theta", "ba", "bg") for a in "xyz")

    def class_residuals(self, slot: int) -> list:
        """Whitened post-fit residuals attributed to keyframe ``slot``, one entry per sensor class."""
        return self.window_residuals()[slot % len(self.keyframes)]

    def window_residuals(self) -> list:
        """Whitened post-fit residuals per keyframe (oldest first), one entry per sensor class.

        Visual residuals are decorrelated per feature before being attributed to
        the keyframe of the observation.
        """
        out = [[] for _ in self.keyframes]
        for slot, kf in enumerate(self.keyframes):
            m = kf.sat_active
            if m.any():
                r, _, _, _ = self._gnss_rows(kf, kf.state, m)
                ids = [sid for sid, a in zip(kf.sat_ids, m) if a]
                out[slot].append(WhitenedResidual(r * kf.pr_sigma[m], kf.pr_sigma[m].copy(), r, "gnss",
                                                  kf.index, tuple(ids)))
            if slot > 0 and kf.preint is not None and kf.imu_active:
                raw = preint_residual(kf.preint, self.keyframes[slot - 1].state, kf.state, self.gravity)
                e = self._imu_sqrt_info(kf) @ raw
                out[slot].append(WhitenedResidual(e, np.ones(15), e.copy(), "imu", kf.index, self._IMU_LABELS))
        vs, rhos = self._structure()
        if len(vs["feat"]):
            states = self.states()
            fp = [self.features[f] for f in vs["fids"]]
            Rs = np.array([st.q.matrix for st in states])
            Ps = np.array([st.p for st in states])
            r2, *_ = visual_residual_batch(vs["obs"], np.array([f.bearing for f in fp])[vs["feat"]],
                                           rhos[vs["feat"]], Rs[vs["a"]], Ps[vs["a"]], Rs[vs["j"]],
                                           Ps[vs["j"]], self.camera)
            e = (vs["T"] @ (r2 / vs["sigma"][:, None]).ravel()).reshape(-1, 2)
            for slot in np.unique(vs["j"]):
                sel = np.flatnonzero(vs["j"] == slot)
                sig = np.repeat(vs["sigma"][sel], 2)
                w = e[sel].ravel()
                labels = tuple((vs["label"][k][1], c) for k in sel for c in "uv")
                out[slot].append(WhitenedResidual(w * sig, sig, w, "vision", self.keyframes[slot].index, labels))
        return out

    def exclude_satellite(self, sat_id) -> bool:
        """Deactivate ``sat_id`` in every keyframe of the window; ``False`` if it was not in use."""
        hit = False
        for kf in self.keyframes:
            for i, sid in enumerate(kf.sat_ids):
                if sid == sat_id and kf.sat_active[i]:
                    kf.sat_active[i] = False
                    hit = True
        return hit

    def exclude_imu(self, epoch_index: int) -> bool:
        """Replace the pre-integration factor ending at ``epoch_index`` by an inflated bridge."""
        kf = self.keyframes[self.slot_of(epoch_index)]
        if kf.preint is None or not kf.imu_active:
            return False
        kf.imu_active = False
        return True

    def imu_statistic(self, slot: int = -1) -> float:
        """Squared norm of the pre-integration residual of ``slot`` under its nominal covariance."""
        slot %= len(self.keyframes)
        kf = self.keyframes[slot]
        if slot == 0 or kf.preint is None:
            return 0.0
        r = preint_residual(kf.preint, self.keyframes[slot - 1].state, kf.state, self.gravity)
        e = np.linalg.solve(np.linalg.cholesky(kf.preint.cov), r)
        return float(e @ e)

    def restore_imu(self, slot: int = -1) -> bool:
        kf = self.keyframes[slot]
        if kf.preint is None or kf.imu_active:
            return False
        kf.imu_active = True
        return True

    def exclude_vision(self, epoch_index: int) -> bool:
        """Drop every visual factor of keyframe ``epoch_index``."""
        kf = self.keyframes[self.slot_of(epoch_index)]
        if not kf.vision_active:
            return False
        kf.vision_active = False
        for fid in [f for f, a in self.pending.items() if a == kf.index]:
            del self.pending[fid]
        return True

    # ---------------------------------------------------------- covariances
    def information(self):
        """Normal matrix at the current estimate and its variable layout."""
        vs, rhos = self._structure()
        r, J, _ = self._evaluate(self.states(), self.psi, rhos, vs)
        return (J.T @ J).toarray(), vs

    def position_covariance_n(self, slot: int = -1) -> np.ndarray:
        """Marginal covariance of the ENU position of keyframe ``slot``, including psi uncertainty."""
        H, vs = self.information()
        n = len(self.keyframes)
        slot = slot % n
        ipsi = n * ERROR_DIM
        idx = list(range(slot * ERROR_DIM, slot * ERROR_DIM + 3)) + [ipsi]
        E = np.zeros((H.shape[0], len(idx)))
        E[idx, range(len(idx))] = 1.0
        X = sla.cho_solve(sla.cho_factor(H), E)
        C = X[idx, :]
        Rwn = rotation_from_yaw(self.psi).matrix
        G = np.hstack([Rwn, (yaw_matrix_derivative(self.psi) @ self.keyframes[slot].state.p)[:, None]])
        return G @ C @ G.T

    def epoch_systems(self, slot: int = -1) -> dict:
        """Per-sensor linear systems of keyframe ``slot`` used for error bounding.

        Each entry is ``(J, W, pos_cols)`` with ``J`` mapping the designated state
        subset to the raw residual, ``W`` the residual weight (inverse covariance)
        and ``pos_cols`` the columns of the ENU position error.
        """
        n = len(self.keyframes)
        slot = slot % n
        kf = self.keyframes[slot]
        st = kf.state
        Rwn = rotation_from_yaw(self.psi).matrix
        out = {}
        m = kf.sat_active
        if m.any():
            _, Jp, Jc, _ = pseudorange_residual_batch(
                kf.sat_pos[m], kf.sat_clock[m], kf.pr[m], kf.sys[m], kf.delays[m], st.p, st.clock,
                self.psi, self.anchor)
            present = sorted(set(kf.sys[m].tolist()))
            J = np.hstack([Jp @ Rwn.T, Jc[:, present]])
            W = np.diag(1.0 / kf.pr_sigma[m] ** 2)
            out["gnss"] = (J, W, [0, 1, 2])
        if slot > 0 and kf.preint is not None and kf.imu_active:
            prev = self.keyframes[slot - 1].state
            _, Jk1 = preint_jacobian(kf.preint, prev, st, self.gravity)
            J = Jk1[:, :INERTIAL_DIM].copy()
            J[:, SL_P] = J[:, SL_P] @ Rwn.T
            W = np.linalg.inv(kf.preint.cov)
            out["imu"] = (J, 0.5 * (W + W.T), [0, 1, 2])
        if kf.vision_active:
            anchors = {k.index: k.state for k in self.keyframes}
            fids = [f for f in sorted(self.features) if f in kf.obs and self.features[f].anchor != kf.index]
            if len(fids) >= 2:
                fp = [self.features[f] for f in fids]
                N = len(fids)
                Ri = np.array([anchors[f.anchor].q.matrix for f in fp])
                Pi = np.array([anchors[f.anchor].p for f in fp])
                _, z, _, _, J_pj, _, _ = visual_residual_batch(
                    np.array([kf.obs[f] for f in fids]), np.array([f.bearing for f in fp]),
                    np.array([f.rho for f in fp]), Ri, Pi, np.repeat(st.q.matrix[None], N, 0),
                    np.repeat(st.p[None], N, 0), self.camera)
                J = (J_pj @ Rwn.T).reshape(2 * N, 3)
                # anchor-pixel noise frozen in the bearing adds sigma_a^2 G G^T per feature
                G = anchor_pixel_jacobian(np.array([f.bearing for f in fp]), np.array([f.rho for f in fp]), Ri,
                                          Pi, np.repeat(st.q.matrix[None], N, 0), np.repeat(st.p[None], N, 0),
                                          self.camera)
                sa = np.array([self.keyframes[self.slot_of(f.anchor)].epoch.pixel_sigma for f in fp])
                C = kf.epoch.pixel_sigma**2 * np.eye(2)[None] + sa[:, None, None] ** 2 * (G @ np.transpose(G, (0, 2, 1)))
                W = sla.block_diag(*np.linalg.inv(C))
                out["vision"] = (J, W, [0, 1, 2])
        return out


def state_covariance(systems: dict) -> dict:
    """Per-sensor position covariances ``(J^T W J)^-1`` and their sum.

    A rank-deficient sensor normal matrix is inverted with a pseudo-inverse.
    Raises :class:`ObservabilityError` if no sensor constrains some position axis.
    """
    out = {}
    observed = np.zeros(3, dtype=bool)
    for name, (J, W, pos) in systems.items():
        N = J.T @ W @ J
        w, V = np.linalg.eigh(0.5 * (N + N.T))
        tol = w.max() * 1e-12 if w.size and w.max() > 0 else 0.0
        keep = w > tol
        C = (V[:, keep] / w[keep]) @ V[:, keep].T
        # position axes touched only by dropped directions are unobserved for this sensor
        null = V[:, ~keep]
        weak = np.linalg.norm(null[pos, :], axis=1) > 1e-6 if null.size else np.zeros(3, dtype=bool)
        observed |= ~weak
        out[name] = C[np.ix_(pos, pos)]
    if not observed.all():
        raise ObservabilityError("position axis unobserved by every sensor", "position")
    out["total"] = sum(out.values())
    return out
