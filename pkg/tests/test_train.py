from dataclasses import replace

import numpy as np
import pytest
import torch

from kdtraj.evaluate import evaluate
from kdtraj.scene import bundle_from_scene
from kdtraj.train import (ConfigError, ExperimentConfig, TrainingDiverged, distill_student, load_checkpoint,
                          parameter_hash, save_checkpoint, train_baseline, train_teacher)

SMALL = dict(d_model=16, n_heads=2, n_layers=1, batch_size=8, epochs=2)


@pytest.fixture(scope="module")
def tiny_data():
    from kdtraj.synth import GeneratorConfig, generate_dataset
    scenes, _ = generate_dataset(GeneratorConfig(seed=3, n_agents=(2, 4)), 32)
    return scenes


@pytest.fixture(scope="module")
def teacher(tiny_data):
    return train_teacher(ExperimentConfig(variant="holistic", **SMALL), tiny_data)


def _smoothed(history, k=4):
    totals = [h["total"] for h in history]
    return np.mean(totals[:k]), np.mean(totals[-k:])


@pytest.mark.parametrize("variant", ["holistic", "graph"])
def test_smoke_training_decreases_loss(variant, tiny_data):
    trained = train_baseline(ExperimentConfig(variant=variant, **{**SMALL, "epochs": 3}), tiny_data)
    first, last = _smoothed(trained.history)
    assert np.isfinite(last) and last < first


def test_training_is_deterministic(tiny_data):
    cfg = ExperimentConfig(variant="holistic", **SMALL)
    a, b = train_teacher(cfg, tiny_data), train_teacher(cfg, tiny_data)
    assert parameter_hash(a.model) == parameter_hash(b.model)
    assert a.history == b.history
    assert evaluate(a, tiny_data[:8]).values() == evaluate(b, tiny_data[:8]).values()


def test_seed_changes_result(tiny_data):
    a = train_baseline(ExperimentConfig(variant="holistic", **{**SMALL, "epochs": 1}), tiny_data)
    b = train_baseline(ExperimentConfig(variant="holistic", **{**SMALL, "epochs": 1, "seed": 1}), tiny_data)
    assert parameter_hash(a.model) != parameter_hash(b.model)


def test_config_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig(teacher_modalities=("X",), student_modalities=("X", "P"))
    with pytest.raises(ConfigError):
        ExperimentConfig(n_modes=3)
    with pytest.raises(ConfigError):
        ExperimentConfig(kd_form="l1")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"epochz": 3})
    cfg = ExperimentConfig(seed=5)
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.fingerprint() == ExperimentConfig(seed=5).fingerprint() != ExperimentConfig().fingerprint()


def test_student_modalities_must_be_covered(teacher, tiny_data):
    cfg = ExperimentConfig(variant="holistic", teacher_modalities=("X", "P"), student_modalities=("X", "P"), **SMALL)
    narrow = train_teacher(replace(cfg, epochs=0, student_modalities=("X",)), tiny_data)
    with pytest.raises(ConfigError):
        distill_student(replace(cfg, teacher_modalities=("X", "P", "S"), student_modalities=("X", "S")), narrow,
                        tiny_data)
    with pytest.raises(ConfigError):
        distill_student(replace(cfg, student_modalities=("X",), d_model=32, n_heads=2), teacher, tiny_data)


def test_teacher_frozen_during_distillation(teacher, tiny_data):
    before = parameter_hash(teacher.model)
    student = distill_student(ExperimentConfig(variant="holistic", **SMALL), teacher, tiny_data)
    assert parameter_hash(teacher.model) == before
    assert all(p.requires_grad for p in teacher.model.parameters())
    assert student.teacher_fingerprint == teacher.fingerprint
    assert student.history[0]["kd_local_full"] > 0


def test_kd_off_matches_baseline(teacher, tiny_data):
    cfg = ExperimentConfig(variant="holistic", kd_local=False, kd_global=False, **SMALL)
    a = distill_student(cfg, teacher, tiny_data)
    b = train_baseline(cfg, tiny_data)
    assert [h["total"] for h in a.history] == [h["total"] for h in b.history]
    assert parameter_hash(a.model) == parameter_hash(b.model)


def test_divergence_raises_with_snapshot(tiny_data):
    bad = [bundle_from_scene(s) for s in tiny_data[:8]]
    bad[3] = replace(bad[3], future=np.full_like(bad[3].future, np.nan))
    with pytest.raises(TrainingDiverged) as info:
        train_baseline(ExperimentConfig(variant="holistic", **SMALL), bad)
    snap = info.value.snapshot
    assert 3 in snap["scene_indices"] and "parameter_hash" in snap and snap["config"]["seed"] == 0


def test_checkpoint_round_trip(teacher, tiny_data, tmp_path):
    path = save_checkpoint(teacher, tmp_path / "model.npz")
    loaded = load_checkpoint(tmp_path)
    assert parameter_hash(loaded.model) == parameter_hash(teacher.model)
    assert loaded.fingerprint == teacher.fingerprint and loaded.role == "teacher"
    from kdtraj.encoders import collate
    batch = collate([bundle_from_scene(s) for s in tiny_data[:4]])
    assert torch.equal(loaded.predict(batch).proposals, teacher.predict(batch).proposals)
    with np.load(path) as z:
        arrays = dict(z)
    arrays["param/decoder.logits.bias"] = arrays["param/decoder.logits.bias"] + 1
    np.savez(tmp_path / "tampered.npz", **arrays)
    with pytest.raises(ValueError, match="fingerprint"):
        load_checkpoint(tmp_path / "tampered.npz")
