import numpy as np
import pytest

from sloshmpc.kinematics import Pose2D
from sloshmpc.ocp import HorizonConfig
from sloshmpc.operator_input import (
    MappingState,
    OperatorSample,
    TargetTracker,
    generate_input,
    map_input,
    predict_reference,
    read_samples,
    replay_source,
)

POSE = Pose2D(0.5, 0.3, -1.2)


def test_inactive_clutch_holds_current_pose():
    sample = OperatorSample(0.0, 0.7, -0.4, clutch=False)
    target, state = map_input(sample, POSE, MappingState())
    assert target == POSE
    assert not state.clutch


def test_relative_displacement_mapping():
    state = MappingState()
    _, state = map_input(OperatorSample(0.0, 0.0, 0.0, True), POSE, state)
    target, state = map_input(OperatorSample(0.1, 0.1, -0.05, True), POSE, state)
    np.testing.assert_allclose(target.as_array(), [0.6, 0.25, -1.2], atol=1e-15)
    assert state.clutch


def test_reengage_does_not_jump():
    state = MappingState()
    _, state = map_input(OperatorSample(0.0, 0.0, 0.0, True), POSE, state)
    t1, state = map_input(OperatorSample(0.1, 0.2, 0.0, True), POSE, state)
    assert t1.x == pytest.approx(0.7)
    # release: target returns to the (current) pose
    t2, state = map_input(OperatorSample(0.2, 0.9, 0.9, False), POSE, state)
    assert t2 == POSE
    # re-engage at a totally different device position: no teleport
    t3, state = map_input(OperatorSample(0.3, 5.0, -3.0, True), POSE, state)
    assert t3 == POSE
    t4, _ = map_input(OperatorSample(0.4, 5.1, -3.0, True), POSE, state)
    assert t4.x == pytest.approx(0.6)


def test_mapping_translation_equivariance():
    rng = np.random.default_rng(31)
    moves = rng.uniform(-0.2, 0.2, (10, 2))
    for shift in ((0.0, 0.0), (3.7, -1.9)):
        state = MappingState()
        targets = []
        for i, (mx, mz) in enumerate(moves):
            s = OperatorSample(0.1 * i, mx + shift[0], mz + shift[1], True)
            target, state = map_input(s, POSE, state)
            targets.append(target.as_array())
        if shift == (0.0, 0.0):
            base = np.array(targets)
        else:
            np.testing.assert_allclose(np.array(targets), base, atol=1e-12)


def test_device_scale():
    state = MappingState()
    _, state = map_input(OperatorSample(0.0, 0.0, 0.0, True), POSE, state, scale=0.5)
    target, _ = map_input(OperatorSample(0.1, 0.2, 0.0, True), POSE, state, scale=0.5)
    assert target.x == pytest.approx(0.6)


def test_predict_reference_single_target():
    horizon = HorizonConfig(n=5, dt=1.0 / 30.0)
    refs = predict_reference((0.0, POSE), None, horizon)
    assert refs.shape == (5, 3)
    np.testing.assert_allclose(refs, np.tile(POSE.as_array(), (5, 1)))


def test_predict_reference_constant_velocity():
    horizon = HorizonConfig(n=30, dt=1.0 / 30.0)
    prev = (0.0, Pose2D(0.5, 0.3, -1.2))
    latest = (1.0 / 30.0, Pose2D(0.51, 0.3, -1.2))
    refs = predict_reference(latest, prev, horizon)
    # v = 0.3 m/s in x, theta held
    for k in (1, 10, 30):
        assert refs[k - 1, 0] == pytest.approx(0.51 + 0.3 * k / 30.0)
    np.testing.assert_allclose(refs[:, 1], 0.3)
    np.testing.assert_allclose(refs[:, 2], -1.2)


def test_predict_reference_stationary():
    horizon = HorizonConfig(n=4, dt=0.1)
    refs = predict_reference((1.0, POSE), (0.9, POSE), horizon)
    np.testing.assert_allclose(refs, np.tile(POSE.as_array(), (4, 1)))


def test_tracker_zero_velocity_when_inactive():
    tracker = TargetTracker()
    horizon = HorizonConfig(n=3, dt=0.1)
    # drifting pose with clutch off: targets follow but velocity stays zero
    tracker.update(OperatorSample(0.0, 0.0, 0.0, False), Pose2D(0.5, 0.3, 0.0))
    tracker.update(OperatorSample(0.1, 0.0, 0.0, False), Pose2D(0.6, 0.3, 0.0))
    refs = tracker.reference(horizon)
    np.testing.assert_allclose(refs[:, 0], 0.6)


def test_tracker_clutch_transition_continuity():
    tracker = TargetTracker()
    pose = Pose2D(0.5, 0.3, -1.2)
    prev = tracker.update(OperatorSample(0.0, 0.0, 0.0, False), pose)
    for i, clutch in enumerate([True, True, False, True]):
        s = OperatorSample(0.1 * (i + 1), 0.01 * i, 0.0, clutch)
        target = tracker.update(s, pose)
        assert np.max(np.abs(target.as_array() - prev.as_array())) < 0.05
        prev = target


def test_generate_ramp_profile():
    samples = generate_input("ramp", rate_hz=30.0, duration=10.0)
    assert len(samples) == 300
    assert samples[0].device_x == 0.0
    assert samples[0].clutch
    t_half = samples[15]
    assert t_half.device_x == pytest.approx(0.3 * 0.5)
    assert samples[30].device_x == pytest.approx(0.3)
    assert samples[-1].device_x == pytest.approx(0.3)


def test_generate_step_and_sine():
    step = generate_input("step", rate_hz=10.0, duration=2.0, amplitude=0.2, at=1.0)
    assert step[9].device_x == 0.0
    assert step[10].device_x == pytest.approx(0.2)
    sine = generate_input("sine", rate_hz=20.0, duration=2.0, amplitude=0.1, frequency=0.5, axis="z")
    assert sine[0].device_z == pytest.approx(0.0)
    assert sine[10].device_z == pytest.approx(0.1 * np.sin(2 * np.pi * 0.5 * 0.5))
    with pytest.raises(ValueError):
        generate_input("warble")
    with pytest.raises(ValueError):
        generate_input("ramp", nonsense=1.0)


def test_replay_round_trip(tmp_path):
    path = tmp_path / "input.csv"
    rows = ["t,device_x,device_z,clutch"]
    for k in range(300):
        t = k / 30.0
        rows.append(f"{t},{0.01 * k},0.0,1")
    path.write_text("\n".join(rows) + "\n")
    samples = replay_source(path, rate_hz=30.0)
    assert len(samples) == 300
    assert samples[10].device_x == pytest.approx(0.1)
    assert all(s.clutch for s in samples)


def test_replay_clutch_false(tmp_path):
    path = tmp_path / "idle.csv"
    path.write_text("t,device_x,device_z,clutch\n0.0,0.0,0.0,false\n1.0,0.5,0.0,false\n")
    samples = replay_source(path, rate_hz=30.0)
    assert len(samples) == int(round((1.0 + 1.0 / 30.0) * 30))
    assert not any(s.clutch for s in samples)


def test_replay_parse_errors(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("t,device_x,device_z,clutch\n0.0,abc,0.0,1\n")
    with pytest.raises(ValueError, match="line 2"):
        read_samples(bad)
    nonmono = tmp_path / "nonmono.csv"
    nonmono.write_text("t,device_x,device_z,clutch\n1.0,0,0,1\n0.5,0,0,1\n")
    with pytest.raises(ValueError, match="line 3"):
        read_samples(nonmono)
    header = tmp_path / "header.csv"
    header.write_text("time,x,z,button\n0,0,0,1\n")
    with pytest.raises(ValueError, match="header"):
        read_samples(header)
