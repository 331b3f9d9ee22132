import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kdtraj.scene import scene_to_dict, validate_scene
from kdtraj.synth import (CaptionRules, GeneratorConfig, caption_motion, caption_obstacle, classify_bearing,
                          future_turn, generate_dataset, generate_scene)

PIXELS = CaptionRules()
STILL = "The person is standing still."
SLOW = "The person is walking slowly."
WALK = "The person is walking."
RIGHT = "There is an obstacle on the right."
FRONT = "There is an obstacle in front."
LEFT = "There is an obstacle on the left."
NOT_AHEAD = "There is no obstacle in the heading direction of the person."
NONE = "There is no obstacle around."


@pytest.mark.parametrize("disp,text", [
    (0.0, STILL), (1.0, STILL), (1.4999, STILL), (1.5, SLOW), (10.0, SLOW),
    (19.999, SLOW), (20.0, WALK), (25.0, WALK),
])
def test_caption_motion_pixels(disp, text):
    assert caption_motion(disp, PIXELS).text == text


def test_caption_motion_metric_defaults():
    rules = CaptionRules.metric()
    assert (rules.still_threshold, rules.slow_threshold) == (0.06, 0.8)
    assert caption_motion(0.05, rules).text == STILL
    assert caption_motion(0.5, rules).text == SLOW
    assert caption_motion(0.8, rules).text == WALK


def test_caption_motion_negative():
    with pytest.raises(ValueError):
        caption_motion(-0.1, PIXELS)


@given(a=st.floats(0, 100), b=st.floats(0, 100))
def test_caption_motion_monotone_step(a, b):
    order = {STILL: 0, SLOW: 1, WALK: 2}
    lo, hi = sorted((a, b))
    assert order[caption_motion(lo, PIXELS).text] <= order[caption_motion(hi, PIXELS).text]
    expected = 0 if lo < 1.5 else 1 if lo < 20 else 2
    assert order[caption_motion(lo, PIXELS).text] == expected


def _at_bearing(sigma_deg, dist=2.0):
    # obstacle clockwise of a +x heading by sigma degrees (y-up frame)
    ang = -math.radians(sigma_deg)
    return np.array([[dist * math.cos(ang), dist * math.sin(ang)]])


@pytest.mark.parametrize("sigma,text", [(0.0, FRONT), (60.0, RIGHT), (-60.0, LEFT), (150.0, NOT_AHEAD),
                                        (-150.0, NOT_AHEAD), (180.0, NOT_AHEAD), (29.0, FRONT), (-99.0, LEFT)])
def test_caption_obstacle_bins(sigma, text):
    assert caption_obstacle((0.0, 0.0), (1.0, 0.0), _at_bearing(sigma), PIXELS).text == text


@pytest.mark.parametrize("sigma,text", [(30.0, NOT_AHEAD), (-30.0, NOT_AHEAD), (100.0, NOT_AHEAD),
                                        (-100.0, NOT_AHEAD), (30.0001, RIGHT), (29.9999, FRONT),
                                        (99.9999, RIGHT), (-30.0001, LEFT), (-99.9999, LEFT)])
def test_bearing_boundaries(sigma, text):
    assert classify_bearing(sigma, PIXELS).text == text


def test_obstacle_distance_gate():
    zeta = PIXELS.obstacle_gate
    assert caption_obstacle((0, 0), (1, 0), _at_bearing(0.0, zeta + 1), PIXELS).text == NONE
    assert caption_obstacle((0, 0), (1, 0), _at_bearing(0.0, zeta), PIXELS).text == NONE
    assert caption_obstacle((0, 0), (1, 0), _at_bearing(0.0, zeta - 1e-9), PIXELS).text == FRONT
    assert caption_obstacle((0, 0), (1, 0), np.zeros((0, 2)), PIXELS).text == NONE


def test_obstacle_heading_rotates_with_agent():
    # heading +y, obstacle at +x is on the right
    assert caption_obstacle((1, 1), (0, 2), np.array([[3.0, 1.0]]), PIXELS).text == RIGHT


def test_obstacle_segments():
    seg = np.array([[[2.0, -5.0], [2.0, 5.0]]])
    token = caption_obstacle((0, 0), (1, 0), np.zeros((0, 2)), PIXELS, obstacle_segments=seg)
    assert token.text == FRONT


def test_obstacle_zero_heading():
    with pytest.raises(ValueError):
        caption_obstacle((0, 0), (0, 0), _at_bearing(0.0), PIXELS)


@given(st.floats(-179.999, 180.0))
def test_bearing_bins_exhaustive(sigma):
    assert classify_bearing(sigma, PIXELS).text in {RIGHT, FRONT, LEFT, NOT_AHEAD}


def test_caption_rules_validation():
    with pytest.raises(ValueError):
        CaptionRules(still_threshold=5, slow_threshold=2)
    with pytest.raises(ValueError):
        CaptionRules(bearing_bins=(100, 30))


def test_generate_deterministic():
    a = json.dumps(scene_to_dict(generate_scene(GeneratorConfig(seed=0))))
    b = json.dumps(scene_to_dict(generate_scene(GeneratorConfig(seed=0))))
    c = json.dumps(scene_to_dict(generate_scene(GeneratorConfig(seed=1))))
    assert a == b and a != c


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), group=st.floats(0, 1), obstacles=st.integers(0, 6))
def test_generated_scenes_validate(seed, group, obstacles):
    scene = generate_scene(GeneratorConfig(seed=seed, group_probability=group, obstacle_count=obstacles))
    assert validate_scene(scene) == []


def test_group_relation():
    scene = generate_scene(GeneratorConfig(seed=3, n_agents=(2, 2), group_probability=1.0))
    a, b = scene.agents
    assert [j for j, _ in a.relations] == [b.id] and [j for j, _ in b.relations] == [a.id]
    assert a.relations[0][1] == b.relations[0][1]


def test_bad_configs():
    with pytest.raises(ValueError):
        GeneratorConfig(n_agents=(0, 0))
    with pytest.raises(ValueError):
        GeneratorConfig(group_probability=1.5)
    with pytest.raises(ValueError):
        GeneratorConfig.from_dict({"bogus": 1})


def _probe(gain, count=250):
    scenes, _ = generate_dataset(GeneratorConfig(pose_signal_gain=gain, seed=11), count)
    theta = np.array([a.pose[-1].theta[1:] for s in scenes for a in s.agents])
    turn = np.concatenate([future_turn(s) for s in scenes])
    assert len(turn) >= 1000
    n_fit = int(0.7 * len(turn))
    design = np.c_[theta, np.ones(len(turn))]
    w, *_ = np.linalg.lstsq(design[:n_fit], turn[:n_fit], rcond=None)
    resid = turn[n_fit:] - design[n_fit:] @ w
    return 1.0 - resid.var() / turn[n_fit:].var(), theta, turn


def test_pose_signal_probe():
    r2_on, _, _ = _probe(1.0)
    r2_off, theta, turn = _probe(0.0)
    assert r2_on > 0.5
    assert r2_off < 0.05
    corr = [abs(np.corrcoef(theta[:, k], turn)[0, 1]) for k in range(theta.shape[1])]
    assert max(corr) < 0.1
