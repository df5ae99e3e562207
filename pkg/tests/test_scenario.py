import math
from dataclasses import replace

import numpy as np
import pytest

from fgo_integrity.factors import CameraModel, project, pseudorange_residual
from fgo_integrity.geom import SPEED_OF_LIGHT, AnchorGeodesy, ImuState, Rotation
from fgo_integrity.scenario import (
    GRAVITY,
    ClockModel,
    FaultEvent,
    GnssConfig,
    ImuSpec,
    LandmarkField,
    Satellite,
    ScenarioConfig,
    ScenarioError,
    build_scenario,
    dump_scenario,
    generate_trajectory,
    inject_faults,
    load_scenario,
    make_constellation,
    receiver_ecef,
    synthesize_features,
    synthesize_imu,
    synthesize_pseudoranges,
)

ANCHOR = AnchorGeodesy.from_latlon(math.radians(22.3), math.radians(114.2), 10.0)
QUIET = ImuSpec(acc_noise=0.0, gyr_noise=0.0)


def test_static_straight_profile_senses_gravity_only():
    tr = generate_trajectory("straight", 2.0, 1.0, speed=0.0)
    np.testing.assert_allclose(tr.f, np.tile(-GRAVITY, (len(tr), 1)), atol=1e-12)
    np.testing.assert_array_equal(tr.omega, 0.0)


def test_circle_centripetal_acceleration():
    tr = generate_trajectory("circle", 10.0, 1.0, radius=50.0, speed=5.0)
    np.testing.assert_allclose(np.hypot(tr.f[:, 0], tr.f[:, 1]), 0.5, atol=1e-6)
    np.testing.assert_allclose(tr.omega[:, 2], 0.1, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(tr.v, axis=1), 5.0, atol=1e-6)


def test_sample_count():
    assert len(generate_trajectory("straight", 1200.0, 1.0)) == 240001


def test_trajectory_rejects_bad_inputs():
    with pytest.raises(ScenarioError):
        generate_trajectory("spiral", 5.0, 1.0)
    with pytest.raises(ScenarioError):
        generate_trajectory("circle", 5.0, 1.0, imu_rate=205.5)
    with pytest.raises(ScenarioError):
        generate_trajectory("circle", -1.0, 1.0)


def test_truth_is_consistent_with_its_own_signals():
    # discrete truth: trapezoidal integration of the specific force reproduces velocity
    tr = generate_trajectory("figure-eight", 8.0, 1.0)
    dt = np.diff(tr.t)
    cy, sy = np.cos(tr.yaw), np.sin(tr.yaw)
    fw = np.column_stack([cy * tr.f[:, 0] - sy * tr.f[:, 1], sy * tr.f[:, 0] + cy * tr.f[:, 1], tr.f[:, 2]])
    a = 0.5 * (fw[:-1] + fw[1:]) + GRAVITY
    np.testing.assert_allclose(tr.v[1:] - tr.v[:-1], a * dt[:, None], atol=1e-12)


def test_imu_noiseless_equals_truth():
    tr = generate_trajectory("circle", 3.0, 1.0)
    s = synthesize_imu(tr, QUIET, 1)
    np.testing.assert_array_equal(s.acc, tr.f)
    np.testing.assert_array_equal(s.gyr, tr.omega)


def test_imu_bias_is_exact_offset():
    tr = generate_trajectory("circle", 3.0, 1.0)
    s = synthesize_imu(tr, replace(QUIET, acc_bias=(0.1, 0.1, 0.1)), 1)
    np.testing.assert_allclose(s.acc - tr.f, 0.1, atol=1e-15)


def test_imu_same_seed_bit_identical():
    tr = generate_trajectory("circle", 3.0, 1.0)
    a, b = synthesize_imu(tr, ImuSpec(), 9), synthesize_imu(tr, ImuSpec(), 9)
    assert a.acc.tobytes() == b.acc.tobytes() and a.gyr.tobytes() == b.gyr.tobytes()
    c = synthesize_imu(tr, ImuSpec(), 10)
    assert a.acc.tobytes() != c.acc.tobytes()


def test_imu_noise_standard_deviation():
    tr = generate_trajectory("straight", 200.0, 1.0, speed=0.0)
    s = synthesize_imu(tr, ImuSpec(acc_noise=0.04, gyr_noise=0.002), 4)
    np.testing.assert_allclose(np.std(s.acc - tr.f), 0.04 * math.sqrt(200.0), rtol=0.02)
    np.testing.assert_allclose(np.std(s.gyr - tr.omega), 0.002 * math.sqrt(200.0), rtol=0.02)


def test_imu_spec_rejects_negative_noise():
    with pytest.raises(ScenarioError):
        ImuSpec(acc_noise=-1.0)


def _one_sat(constellation="G", clock=0.0):
    up = ANCHOR.position / np.linalg.norm(ANCHOR.position)
    return Satellite(f"{constellation}01", constellation, ANCHOR.position + 2.0e7 * up, clock)


def _pr(sats, clock, p=np.zeros(3), psi=0.0):
    cfg = GnssConfig(sigma=1.0, min_visible=1)
    return synthesize_pseudoranges([p], [0.0], sats, clock, cfg, psi, ANCHOR, seed=0, noise_scale=0.0)[0]


def test_pseudorange_noiseless_is_geometric_range():
    sat = _one_sat()
    p = np.array([3.0, -4.0, 1.0])
    obs = _pr([sat], ClockModel(bias=(0, 0, 0, 0), drift=0.0), p, psi=0.2)[0]
    expected = np.linalg.norm(sat.position - receiver_ecef(p, 0.2, ANCHOR))
    assert obs.pseudorange == pytest.approx(expected, abs=1e-6)


def test_pseudorange_receiver_clock_offset():
    sat = _one_sat()
    base = _pr([sat], ClockModel(bias=(0, 0, 0, 0), drift=0.0))[0].pseudorange
    shifted = _pr([sat], ClockModel(bias=(1e-6, 0, 0, 0), drift=0.0))[0].pseudorange
    assert shifted - base == pytest.approx(299.792458, abs=1e-6)


def test_pseudorange_intersystem_bias():
    clock = ClockModel(bias=(3e-6, 0.0, 0.0, -2e-6), drift=0.0)
    g, c = _pr([_one_sat("G"), _one_sat("C")], clock)
    assert g.pseudorange - c.pseudorange == pytest.approx(SPEED_OF_LIGHT * (3e-6 + 2e-6), abs=1e-6)


def test_constellation_geometry():
    sats = make_constellation(ANCHOR, GnssConfig())
    assert len(sats) == 40
    assert len({s.sat_id for s in sats}) == 40
    for s in sats:
        assert 2.0e7 < np.linalg.norm(s.position) < 3.0e7


def test_too_few_satellites_raises():
    cfg = GnssConfig(counts=(("G", 2),))
    with pytest.raises(ScenarioError):
        synthesize_pseudoranges([np.zeros(3)], [0.0], make_constellation(ANCHOR, cfg), ClockModel(), cfg,
                                0.0, ANCHOR, 0)


def test_pinhole_projection_examples():
    cam = CameraModel()
    st = ImuState(np.zeros(3), np.zeros(3), Rotation.identity())
    np.testing.assert_allclose(project(np.array([0.0, 0.0, 5.0]), st, cam), [320.0, 240.0])
    np.testing.assert_allclose(project(np.array([0.1, 0.0, 1.0]), st, cam), [360.0, 240.0], atol=1e-9)


def test_landmark_behind_camera_is_never_observed():
    tr = generate_trajectory("straight", 3.0, 1.0, speed=1.0)
    cam = CameraModel.forward_looking()
    behind = np.array([[-20.0, 0.0, 0.0], [30.0, 0.0, 0.0]])
    tracks, _ = synthesize_features(tr, behind, cam, LandmarkField(pixel_sigma=1.0), 0, noise_scale=0.0)
    assert [t.landmark[0] for t in tracks] == [30.0]


def test_gnss_fault_is_exact_and_targeted(short_scenario):
    ev = FaultEvent("gnss", 2.0, 4.0, range=15.0, target="G05")
    out = inject_faults(short_scenario.epochs, [ev])
    for a, b in zip(short_scenario.epochs, out):
        for sa, sb in zip(a.sats, b.sats):
            hit = 2.0 <= a.time < 4.0 and sa.sat_id == "G05"
            assert sb.pseudorange == (sa.pseudorange + 15.0 if hit else sa.pseudorange)
        assert ("gnss:G05" in b.faults) == (2.0 <= a.time < 4.0)


def test_empty_schedule_is_identity(short_scenario):
    out = inject_faults(short_scenario.epochs, [])
    for a, b in zip(short_scenario.epochs, out):
        assert a is b


def test_vision_fault_adds_pixel_offset(short_scenario):
    out = inject_faults(short_scenario.epochs, [FaultEvent("vision", 1.0, 3.0, pixel=5.0)])
    for a, b in zip(short_scenario.epochs, out):
        on = 1.0 <= a.time < 3.0
        np.testing.assert_array_equal(b.pixels, a.pixels + 5.0 if on else a.pixels)


def test_imu_fault_is_additive(short_scenario):
    ev = FaultEvent("imu", 2.0, 4.0, accel=0.15, gyro=0.02)
    out = inject_faults(short_scenario.epochs, [ev])
    for a, b in zip(short_scenario.epochs, out):
        on = (a.imu.t >= 2.0) & (a.imu.t < 4.0)
        np.testing.assert_array_equal(b.imu.acc[on], a.imu.acc[on] + 0.15)
        np.testing.assert_array_equal(b.imu.gyr[on], a.imu.gyr[on] + 0.02)
        np.testing.assert_array_equal(b.imu.acc[~on], a.imu.acc[~on])


def test_fault_schedule_validation(short_scenario):
    with pytest.raises(ScenarioError):
        FaultEvent("radar", 0.0, 1.0)
    with pytest.raises(ScenarioError):
        FaultEvent("gnss", 2.0, 1.0)
    with pytest.raises(ScenarioError):
        inject_faults(short_scenario.epochs, [FaultEvent("gnss", 1.0, 99.0, range=1.0)])
    with pytest.raises(ScenarioError):
        inject_faults(short_scenario.epochs, [FaultEvent("gnss", 1.0, 3.0, range=1.0),
                                              FaultEvent("gnss", 2.0, 4.0, range=1.0)])


def test_fault_text_round_trip():
    ev = FaultEvent.parse("imu 6 16 accel=0.15 gyro=0.02 target=xy")
    assert FaultEvent.parse(ev.format()) == ev
    with pytest.raises(ScenarioError):
        FaultEvent.parse("gnss 1 2 bogus=3")


def test_noiseless_measurements_fit_truth(noiseless_scenario):
    sc = noiseless_scenario
    lm = {tr.fid: tr.landmark for tr in sc.tracks}
    for ep in sc.epochs:
        for obs in ep.sats:
            r, _ = pseudorange_residual(obs, ep.truth, sc.psi, sc.anchor)
            assert abs(r) < 1e-6
        for fid, uv in zip(ep.feature_ids, ep.pixels):
            np.testing.assert_allclose(project(lm[fid], ep.truth, sc.camera), uv, atol=1e-8)


def test_scenario_is_deterministic():
    cfg = ScenarioConfig(duration=4.0)
    a, b = build_scenario(cfg, 5), build_scenario(cfg, 5)
    for ea, eb in zip(a.epochs, b.epochs):
        assert ea.imu.acc.tobytes() == eb.imu.acc.tobytes()
        assert [s.pseudorange for s in ea.sats] == [s.pseudorange for s in eb.sats]
        assert ea.pixels.tobytes() == eb.pixels.tobytes()


def test_dump_round_trip(tmp_path, short_scenario):
    path = tmp_path / "sc.jsonl"
    dump_scenario(short_scenario, path)
    back = load_scenario(path)
    assert len(back.epochs) == len(short_scenario.epochs)
    for a, b in zip(short_scenario.epochs, back.epochs):
        assert a.imu.acc.tobytes() == b.imu.acc.tobytes()
        assert [s.pseudorange for s in a.sats] == [s.pseudorange for s in b.sats]
        np.testing.assert_array_equal(a.feature_ids, b.feature_ids)


def test_truncated_dump_rejected(tmp_path, short_scenario):
    path = tmp_path / "sc.jsonl"
    dump_scenario(short_scenario, path)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-2]) + "\n")
    with pytest.raises(ScenarioError):
        load_scenario(path)
    path.write_text("not json\n")
    with pytest.raises(ScenarioError):
        load_scenario(path)


def test_config_dict_round_trip():
    cfg = ScenarioConfig(duration=7.0, faults=(FaultEvent("vision", 1.0, 2.0, pixel=5.0),))
    assert ScenarioConfig.from_dict(cfg.to_dict()) == cfg
