import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from keyframing import keyframes as kf
from keyframing import planarenv as pe


@pytest.fixture(scope="module")
def dataset():
    return pe.generate_reference_dataset(pe.DatasetConfig(clips=8), 4, seed=2)


def state_at(p=(0.0, 0.0), yaw=0.0, theta=None, t=0):
    cfg = pe.EnvConfig()
    s = pe.default_state(cfg)
    s.p[0] = p
    s.yaw[0] = yaw
    if theta is not None:
        s.theta[0] = theta
    s.t[0] = t
    return s


def test_keyframe_validation():
    with pytest.raises(ValueError):
        kf.Keyframe(0, position=np.zeros(2))
    with pytest.raises(ValueError):
        kf.Keyframe(10)
    with pytest.raises(ValueError):
        kf.KeyframeSet([kf.Keyframe(10, yaw=0.0), kf.Keyframe(10, yaw=1.0)])
    assert kf.Keyframe(50, yaw=0.0).time == pytest.approx(1.0)


def test_goal_error_identity():
    s = state_at((1.0, 2.0), 0.3, [0.1, 0.2, 0.3, 0.4])
    e = kf.goal_error(s, kf.Keyframe(10, np.array([1.0, 2.0]), 0.3, np.array([0.1, 0.2, 0.3, 0.4])))
    assert np.all(e.position == 0) and np.all(e.yaw == 0) and np.all(e.posture == 0)


def test_goal_error_rotates_into_base_frame():
    e = kf.goal_error(state_at(yaw=math.pi / 2), kf.Keyframe(10, position=np.array([1.0, 0.0])))
    np.testing.assert_allclose(e.position[0], [0.0, -1.0], atol=1e-15)


def test_goal_error_wraps_yaw():
    e = kf.goal_error(state_at(yaw=math.pi - 0.05), kf.Keyframe(10, yaw=-math.pi + 0.05))
    assert e.yaw[0] == pytest.approx(0.1, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-math.pi, math.pi), st.floats(-3, 3),
       st.floats(-3, 3), st.floats(-math.pi, math.pi))
def test_goal_error_equivariance(dx, dy, rot, gx, gy, gyaw):
    s = state_at((0.3, -0.2), 0.4)
    k = kf.Keyframe(10, np.array([gx, gy]), gyaw)
    base = kf.goal_error(s, k)
    # translate the world
    s2 = state_at((0.3 + dx, -0.2 + dy), 0.4)
    k2 = kf.Keyframe(10, np.array([gx + dx, gy + dy]), gyaw)
    e2 = kf.goal_error(s2, k2)
    np.testing.assert_allclose(e2.position, base.position, atol=1e-9)
    # rotate the world about the origin
    s3 = state_at(pe.rotate(np.array([0.3, -0.2]), rot), pe.wrap_angle(0.4 + rot))
    k3 = kf.Keyframe(10, pe.rotate(np.array([gx, gy]), rot), float(pe.wrap_angle(gyaw + rot)))
    e3 = kf.goal_error(s3, k3)
    np.testing.assert_allclose(e3.position, base.position, atol=1e-9)
    assert abs(math.remainder(float(e3.yaw[0] - base.yaw[0]), 2 * math.pi)) < 1e-9


@settings(max_examples=200, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50))
def test_wrapped_difference_preserves_direction(a, b):
    w = float(pe.wrap_angle(a - b))
    assert -math.pi < w <= math.pi
    assert abs(math.cos(w) - math.cos(a - b)) < 1e-12 and abs(math.sin(w) - math.sin(a - b)) < 1e-12


def _tokens(keyframes, t=0, nk=5, **cfg_kw):
    cfg = kf.KeyframeConfig(max_keyframes=nk, **cfg_kw)
    s = state_at(t=t)
    return kf.build_tokens_single(s, kf.KeyframeSet(keyframes), cfg, 4), cfg


def test_tokens_without_keyframes_only_self_goal_visible():
    seq, _ = _tokens([])
    assert seq.tokens.shape == (1, 6, kf.token_dim(pe.EnvConfig()))
    assert seq.mask[0].tolist() == [False] + [True] * 5


def test_self_goal_row_is_state_then_zeros():
    seq, _ = _tokens([kf.Keyframe(30, position=np.array([1.0, 0.5]))], t=3)
    sdim = kf.state_observation(state_at()).shape[1]
    assert np.all(seq.tokens[0, 0, sdim:] == 0)
    np.testing.assert_array_equal(seq.tokens[0, 0, :sdim], seq.tokens[0, 1, :sdim])


def test_unused_rows_masked():
    seq, _ = _tokens([kf.Keyframe(30, yaw=0.0), kf.Keyframe(60, yaw=0.0)])
    assert seq.mask[0].tolist() == [False, False, False, True, True, True]


def test_goal_token_layout():
    seq, cfg = _tokens([kf.Keyframe(30, position=np.array([1.0, 0.5]), yaw=0.25)], t=10)
    sdim = kf.state_observation(state_at()).shape[1]
    row = seq.tokens[0, 1, sdim:]
    np.testing.assert_allclose(row[:2], [1.0, 0.5])
    assert row[2] == pytest.approx(0.25)
    np.testing.assert_array_equal(row[3:7], 0)
    np.testing.assert_array_equal(row[7:10], [1, 1, 0])
    assert row[10] == pytest.approx(20 * pe.DT / cfg.time_scale)


def test_past_goal_masking_boundary():
    ks = [kf.Keyframe(10, yaw=0.0)]
    assert not _tokens(ks, t=60)[0].mask[0, 1]   # exactly 1.0 s past
    assert _tokens(ks, t=61)[0].mask[0, 1]       # 1.02 s past


def test_next_goal_only_mask():
    ks = [kf.Keyframe(10, yaw=0.0), kf.Keyframe(20, yaw=0.0), kf.Keyframe(30, yaw=0.0)]
    assert _tokens(ks, t=0, next_goal_only=True)[0].mask[0].tolist() == [False, False, True, True, True, True]
    assert _tokens(ks, t=10, next_goal_only=True)[0].mask[0].tolist() == [False, True, False, True, True, True]
    assert _tokens(ks, t=30, next_goal_only=True)[0].mask[0].tolist() == [False] + [True] * 5


def test_dataset_keyframes_follow_source_clip(dataset):
    cfg = kf.KeyframeConfig(components=["position", "yaw", "posture"])
    clip, frame = 2, 10
    c = dataset.clips[clip]
    ks = kf.sample_dataset_keyframes(dataset, cfg, np.random.default_rng(0), 3, c.pos[frame], c.yaw[frame],
                                     start=(clip, frame))
    for k in ks:
        np.testing.assert_allclose(k.position, c.pos[frame + k.step], atol=1e-12)
        assert k.yaw == pytest.approx(float(c.yaw[frame + k.step]), abs=1e-12)
        np.testing.assert_array_equal(k.posture, c.joints[frame + k.step])


def test_dataset_keyframes_resample_when_clip_too_short(dataset):
    cfg = kf.KeyframeConfig()
    last = len(dataset.clips[0]) - 1
    ks = kf.sample_dataset_keyframes(dataset, cfg, np.random.default_rng(0), 3, np.zeros(2), 0.0, start=(0, last))
    assert len(ks) == 3


def test_interval_distribution_uniform():
    cfg = kf.KeyframeConfig()
    x = kf.sample_intervals(cfg, np.random.default_rng(7), 10_000)
    assert x.min() >= 25 and x.max() <= 50
    counts = np.bincount(x - 25, minlength=26)
    expected = 10_000 / 26
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    # 99th percentile of chi-squared with 25 degrees of freedom
    assert chi2 < 44.314


def test_random_keyframes_respect_ranges(dataset):
    cfg = kf.KeyframeConfig()
    rng = np.random.default_rng(3)
    for _ in range(200):
        ks = kf.sample_random_keyframes(dataset, cfg, rng, 5, np.zeros(2), 0.3)
        prev_p, prev_yaw = np.zeros(2), 0.3
        for k in ks:
            assert 0.5 <= np.linalg.norm(k.position - prev_p) <= 1.0
            assert abs(pe.wrap_angle(k.yaw - prev_yaw)) <= math.pi / 3 + 1e-12
            prev_p, prev_yaw = k.position, k.yaw


def test_random_keyframes_seeded(dataset):
    cfg = kf.KeyframeConfig()
    a = kf.sample_random_keyframes(dataset, cfg, np.random.default_rng(5), 3, np.zeros(2), 0.0)
    b = kf.sample_random_keyframes(dataset, cfg, np.random.default_rng(5), 3, np.zeros(2), 0.0)
    assert kf.scenario_to_list(a) == kf.scenario_to_list(b)


def test_sampled_components_follow_config(dataset):
    cfg = kf.KeyframeConfig(components=["position"])
    ks = kf.sample_random_keyframes(dataset, cfg, np.random.default_rng(0), 2, np.zeros(2), 0.0)
    assert all(k.components == ("position",) for k in ks)


def test_keyframe_count_distribution():
    cfg = kf.KeyframeConfig(max_keyframes=3)
    rng = np.random.default_rng(0)
    counts = np.bincount([kf.sample_count(cfg, rng) for _ in range(3000)], minlength=4)
    assert counts[0] == 0 and all(900 < c < 1100 for c in counts[1:])


def test_curriculum():
    assert kf.curriculum_mix(0.0) == 0.0
    assert kf.curriculum_mix(1.0) == 0.8
    assert kf.curriculum_mix(0.25) == pytest.approx(0.4)
    grid = [kf.curriculum_mix(p) for p in np.linspace(0, 1, 101)]
    assert all(b >= a for a, b in zip(grid, grid[1:]))


def test_scenario_round_trip_and_validation(tmp_path):
    items = [{"t_step": 50, "x": 0.0, "y": 1.0}, {"t_step": 75, "x": 1.0, "y": 1.5, "yaw": 0.3}]
    path = tmp_path / "s.json"
    path.write_text(json.dumps(items))
    ks = kf.load_scenario(path)
    assert kf.scenario_to_list(ks) == items
    with pytest.raises(ValueError, match="strictly increase"):
        kf.scenario_from_list([{"t_step": 50, "yaw": 0.0}, {"t_step": 40, "yaw": 0.0}])
    with pytest.raises(ValueError, match="unknown"):
        kf.scenario_from_list([{"t_step": 50, "z": 1.0}])
    with pytest.raises(ValueError, match="joints"):
        kf.scenario_from_list([{"t_step": 50, "posture": [0.0, 0.0]}], num_joints=4)


def test_dataset_keyframes_fall_back_to_fitting_start_frames():
    ds = pe.generate_reference_dataset(pe.DatasetConfig(clips=3, seconds=2.0), 4, seed=0)
    cfg = kf.KeyframeConfig(interval_range=[32, 32])
    # three keyframes span 96 of 101 frames, so only five start frames per clip fit
    ks = kf.sample_dataset_keyframes(ds, cfg, np.random.default_rng(1), 3, np.zeros(2), 0.0, max_tries=1)
    assert [k.step for k in ks] == [32, 64, 96]
    with pytest.raises(ValueError, match="long enough"):
        kf.sample_dataset_keyframes(ds, kf.KeyframeConfig(interval_range=[40, 40]), np.random.default_rng(1), 3,
                                    np.zeros(2), 0.0)
