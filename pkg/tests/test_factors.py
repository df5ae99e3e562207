import dataclasses

import numpy as np
import pytest

from fgo_integrity.factors import (
    CameraModel,
    FeatureParam,
    ProjectionError,
    WhitenedResidual,
    anchor_pixel_jacobian,
    feature_world_point,
    project,
    pseudorange_residual,
    pseudorange_residual_batch,
    visual_residual,
    visual_residual_batch,
    whiten,
    whiten_correlated,
)
from fgo_integrity.geom import CONSTELLATIONS, ImuState, Rotation

from fd import central, pseudorange_errors, visual_errors

CAM = CameraModel()
ORIGIN = ImuState(np.zeros(3), np.zeros(3), Rotation.identity())


def test_projection_examples():
    np.testing.assert_allclose(project(np.array([0.0, 0.0, 2.0]), ORIGIN, CAM), [320.0, 240.0])
    np.testing.assert_allclose(project(np.array([0.2, -0.1, 1.0]), ORIGIN, CAM), [400.0, 200.0], atol=1e-12)
    with pytest.raises(ProjectionError):
        project(np.array([0.0, 0.0, -1.0]), ORIGIN, CAM)


def test_camera_validation():
    with pytest.raises(ValueError):
        CameraModel(fx=0.0)
    with pytest.raises(ValueError):
        CameraModel(cx=1000.0)
    with pytest.raises(ValueError):
        FeatureParam(0, 0, -0.1, np.array([0, 0, 1.0]))


def test_forward_camera_looks_along_body_x():
    cam = CameraModel.forward_looking()
    np.testing.assert_allclose(project(np.array([5.0, 0.0, 0.0]), ORIGIN, cam), [320.0, 240.0], atol=1e-12)
    u, v = project(np.array([5.0, 1.0, 1.0]), ORIGIN, cam)
    assert u < 320 and v < 240  # left and up in the image


def test_anchored_feature_round_trip():
    si = ImuState([1.0, 2.0, 0.5], np.zeros(3), Rotation.from_rotvec([0.1, -0.2, 0.3]))
    x = np.array([4.0, 5.0, 12.0])
    xc = CAM.R_bc.matrix @ (si.q.matrix.T @ (x - si.p))
    f = FeatureParam(1, 0, 1.0 / np.linalg.norm(xc), xc)
    np.testing.assert_allclose(feature_world_point(f, si, CAM), x, atol=1e-12)
    np.testing.assert_allclose(project(f, si, CAM, anchor_state=si), CAM.pi(xc)[0], atol=1e-9)
    with pytest.raises(ValueError):
        project(f, si, CAM)


def _visual_setup():
    si = ImuState([0.0, 0.0, 0.0], np.zeros(3), Rotation.from_rotvec([0.02, 0.01, -0.03]))
    sj = ImuState([0.5, -0.3, 0.2], np.zeros(3), Rotation.from_rotvec([-0.01, 0.03, 0.02]))
    f = FeatureParam(0, 0, 0.1, np.array([0.1, -0.05, 1.0]))
    uv = project(feature_world_point(f, si, CAM), sj, CAM)
    return si, sj, f, uv


def test_visual_residual_noiseless_and_offset():
    si, sj, f, uv = _visual_setup()
    r, _ = visual_residual(uv, f, si, sj, CAM)
    assert np.abs(r).max() < 1e-9
    r, _ = visual_residual(uv + [5.0, 0.0], f, si, sj, CAM)
    np.testing.assert_allclose(r, [5.0, 0.0], atol=1e-9)


def test_visual_residual_behind_camera():
    si, sj, f, uv = _visual_setup()
    sj = sj.replace(p=sj.p + [0, 0, 20.0])
    with pytest.raises(ProjectionError):
        visual_residual(uv, f, si, sj, CAM)


def test_visual_jacobians_match_finite_differences(rng):
    for _ in range(20):
        assert max(visual_errors(rng)) < 1e-4


def test_anchor_pixel_jacobian(rng):
    si, sj, f, uv = _visual_setup()
    G = anchor_pixel_jacobian(f.bearing[None], np.array([f.rho]), si.q.matrix[None], si.p[None],
                              sj.q.matrix[None], sj.p[None], CAM)[0]
    uv_a = CAM.pi(f.bearing)[0]

    def r(d):
        b = CAM.bearing(uv_a + d)
        fb = FeatureParam(0, 0, f.rho, b)
        return visual_residual(uv, fb, si, sj, CAM)[0]

    # the feature keeps its inverse depth along the moved ray
    num = central(r, 2, h=1e-4)
    np.testing.assert_allclose(G, num, rtol=1e-4, atol=1e-8)


def test_visual_batch_matches_single():
    si, sj, f, uv = _visual_setup()
    r, z, *_ = visual_residual_batch(uv[None] + 1.0, f.bearing[None], np.array([f.rho]), si.q.matrix[None],
                                     si.p[None], sj.q.matrix[None], sj.p[None], CAM)
    np.testing.assert_allclose(r[0], visual_residual(uv + 1.0, f, si, sj, CAM)[0], atol=1e-12)
    assert z[0] > 0


def test_pseudorange_at_truth(noiseless_scenario):
    sc = noiseless_scenario
    ep = sc.epochs[1]
    for obs in ep.sats:
        r, row = pseudorange_residual(obs, ep.truth, sc.psi, sc.anchor)
        assert abs(r) < 1e-6
        assert row.shape == (8,)
        assert row[3 + CONSTELLATIONS.index(obs.constellation)] == 1.0


def test_pseudorange_clock_sensitivity(noiseless_scenario):
    sc = noiseless_scenario
    ep = sc.epochs[1]
    obs = next(o for o in ep.sats if o.constellation == "G")
    st = ep.truth.replace(clock=ep.truth.clock + [1e-9, 0, 0, 0])
    r, _ = pseudorange_residual(obs, st, sc.psi, sc.anchor)
    assert r == pytest.approx(0.299792458, abs=1e-6)
    other = next(o for o in ep.sats if o.constellation == "E")
    assert abs(pseudorange_residual(other, st, sc.psi, sc.anchor)[0]) < 1e-6


def test_pseudorange_clock_gauge(noiseless_scenario):
    # a common shift of receiver and satellite clocks leaves the residual unchanged
    sc = noiseless_scenario
    ep = sc.epochs[1]
    st = ep.truth.replace(clock=ep.truth.clock + 2e-6)
    for obs in ep.sats:
        shifted = dataclasses.replace(obs, sat_clock=obs.sat_clock + 2e-6)
        assert abs(pseudorange_residual(shifted, st, sc.psi, sc.anchor)[0]) < 1e-6


def test_pseudorange_batch_per_row_states(noiseless_scenario):
    sc = noiseless_scenario
    ep = sc.epochs[2]
    n = len(ep.sats)
    sp = np.array([o.sat_pos for o in ep.sats])
    sys = np.array([CONSTELLATIONS.index(o.constellation) for o in ep.sats])
    args = (sp, np.array([o.sat_clock for o in ep.sats]), np.array([o.pseudorange for o in ep.sats]), sys, np.zeros(n))
    r1, *_ = pseudorange_residual_batch(*args, ep.truth.p, ep.truth.clock, sc.psi, sc.anchor)
    r2, *_ = pseudorange_residual_batch(*args, np.tile(ep.truth.p, (n, 1)), np.tile(ep.truth.clock, (n, 1)),
                                        sc.psi, sc.anchor)
    np.testing.assert_array_equal(r1, r2)


def test_pseudorange_jacobians_match_finite_differences(rng):
    for _ in range(20):
        assert max(pseudorange_errors(rng)) < 1e-4


def test_whiten_examples():
    w = whiten([3.0, 0.0], [1.5, 2.0], ["a", "b"])
    np.testing.assert_array_equal(w.whitened, [2.0, 0.0])
    with pytest.raises(ValueError):
        whiten([1.0], [0.0], ["a"])
    with pytest.raises(ValueError):
        whiten([1.0], [1.0], ["a"], source="radar")
    with pytest.raises(ValueError):
        whiten([1.0, 2.0], [1.0], ["a"])


def test_whitened_noise_has_unit_variance():
    rng = np.random.default_rng(77)
    sig = rng.uniform(0.1, 10.0, 100_000)
    w = whiten(rng.standard_normal(sig.size) * sig, sig, range(sig.size))
    assert abs(np.var(w.whitened) - 1.0) < 0.02


def test_whiten_correlated(rng):
    A = rng.normal(size=(3, 3))
    C = A @ A.T + np.eye(3)
    S = np.linalg.inv(np.linalg.cholesky(C))
    x = rng.multivariate_normal(np.zeros(3), C, 50_000)
    e = np.array([whiten_correlated(v, S, "xyz").whitened for v in x[:2000]])
    assert isinstance(whiten_correlated(x[0], S, "xyz"), WhitenedResidual)
    np.testing.assert_allclose(np.cov((S @ x.T)), np.eye(3), atol=0.03)
    np.testing.assert_allclose(e, (S @ x[:2000].T).T, atol=1e-12)
