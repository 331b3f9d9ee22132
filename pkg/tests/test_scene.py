import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kdtraj.scene import (CAPTION_VOCAB, CaptionToken, InvalidMaskError, ObservationMask, SceneError, Trajectory,
                          apply_mask, bundle_from_scene, load_scene, rotate_scene, save_scene, scene_from_dict,
                          scene_to_dict, validate_scene)


def _equal_bundles(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a.arrays().values(), b.arrays().values()))


def test_full_mask_is_identity(synthetic_bundles):
    b = synthetic_bundles[0]
    assert _equal_bundles(apply_mask(b, ObservationMask(b.t_obs)), b)


def test_keep_last_one(synthetic_bundles):
    b = synthetic_bundles[0]
    m = apply_mask(b, ObservationMask(1))
    assert not m.valid[:, :7].any() and not m.pose_valid[:, :7].any() and not m.caption_valid[:, :7].any()
    assert (m.positions[:, :7] == 0).all() and (m.pose[:, :7] == 0).all()
    for name in ("positions", "valid", "heading", "pose", "caption_ids"):
        assert np.array_equal(getattr(m, name)[:, 7], getattr(b, name)[:, 7])
    assert np.array_equal(m.future, b.future)


def test_keep_last_too_large(synthetic_bundles):
    with pytest.raises(InvalidMaskError):
        apply_mask(synthetic_bundles[0], ObservationMask(9))
    with pytest.raises(InvalidMaskError):
        ObservationMask(0)


@settings(max_examples=30, deadline=None)
@given(keep=st.sampled_from([1, 2, 8]), idx=st.integers(0, 23), pad=st.sampled_from(["zero", "repeat"]))
def test_mask_idempotent(synthetic_bundles, keep, idx, pad):
    b = synthetic_bundles[idx]
    once = apply_mask(b, ObservationMask(keep), pad)
    assert _equal_bundles(apply_mask(once, ObservationMask(keep), pad), once)


def test_repeat_padding(synthetic_bundles):
    b = synthetic_bundles[0]
    m = apply_mask(b, ObservationMask(2), pad="repeat")
    assert np.array_equal(m.positions[:, 0], b.positions[:, 6])
    assert not m.valid[:, :6].any()


def test_masked_perturbation_is_erased(synthetic_bundles):
    b = synthetic_bundles[3]
    noisy = dataclasses.replace(b, positions=b.positions + np.where(np.arange(8)[None, :, None] < 6, 9.0, 0.0))
    assert _equal_bundles(apply_mask(noisy, ObservationMask(2)), apply_mask(b, ObservationMask(2)))


def test_validate_well_formed(two_agent_scene):
    assert validate_scene(two_agent_scene) == []


def test_validate_nan_position(two_agent_scene):
    a = two_agent_scene.agents[1]
    pos = a.trajectory_obs.positions.copy()
    pos[3, 0] = np.nan
    bad = dataclasses.replace(a, trajectory_obs=Trajectory(pos, a.trajectory_obs.valid))
    scene = dataclasses.replace(two_agent_scene, agents=(two_agent_scene.agents[0], bad))
    problems = validate_scene(scene)
    assert len(problems) == 1
    assert "agent 1" in problems[0] and "frame 3" in problems[0]


def test_validate_missing_relation_target(two_agent_scene):
    a = two_agent_scene.agents[0]
    bad = dataclasses.replace(a, relations=((5, CaptionToken.from_id(8)),))
    scene = dataclasses.replace(two_agent_scene, agents=(bad, two_agent_scene.agents[1]))
    problems = validate_scene(scene)
    assert len(problems) == 1 and "missing agent 5" in problems[0]


def test_validate_self_relation_and_heading(two_agent_scene):
    a = two_agent_scene.agents[0]
    bad = dataclasses.replace(a, relations=((0, CaptionToken.from_id(8)),), heading=np.full(8, np.pi))
    scene = dataclasses.replace(two_agent_scene, agents=(bad, two_agent_scene.agents[1]))
    assert len(validate_scene(scene)) == 2


def test_caption_token_contract():
    assert CaptionToken.from_id(0).text == CAPTION_VOCAB[0]
    with pytest.raises(SceneError):
        CaptionToken(0, "something else")
    with pytest.raises(SceneError):
        CaptionToken.from_id(len(CAPTION_VOCAB))


def test_serialization_round_trip(tmp_path, synthetic_scenes):
    scene = synthetic_scenes[5]
    save_scene(scene, tmp_path / "scene_00000.json")
    back = load_scene(tmp_path / "scene_00000.json")
    assert _equal_bundles(bundle_from_scene(back), bundle_from_scene(scene))
    assert np.array_equal(back.obstacle_points, scene.obstacle_points)
    assert scene_to_dict(back) == scene_to_dict(scene)


def test_schema_version_checked(two_agent_scene):
    d = scene_to_dict(two_agent_scene)
    d["schema_version"] = 99
    with pytest.raises(SceneError):
        scene_from_dict(d)


def test_bundle_relations(two_agent_scene):
    b = bundle_from_scene(two_agent_scene)
    assert b.relation_ids[0, 1] == b.relation_ids[1, 0] == CAPTION_VOCAB.index("They are walking together.")
    assert b.relation_ids[0, 0] == -1


def test_rotate_scene_preserves_validity(synthetic_scenes):
    assert validate_scene(rotate_scene(synthetic_scenes[0], 2.0, (1.0, -3.0))) == []
