"""Teacher pretraining and student distillation.

Each optimizer step runs the model on the same scenes under the three
observation regimes (full, last 2 frames, last 1 frame). Students additionally
match the frozen teacher's latents under the same regime.
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import __version__
from .encoders import Forecaster, ModelConfig, SceneBatch, collate, normalize_modalities
from .losses import REGIMES, LossReport, kd_terms, regression_loss, total_loss
from .scene import ModalityBundle, ObservationMask, Scene, apply_mask, bundle_from_scene

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = 1
ALLOWED_MODES = (1, 6, 10, 20)
DTYPES = {"float32": torch.float32, "float64": torch.float64}


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class ExperimentConfig:
    teacher_modalities: tuple[str, ...] = ("X", "P", "S")
    student_modalities: tuple[str, ...] = ("X",)
    variant: str = "graph"
    kd_local: bool = True
    kd_global: bool = True
    kd_form: str = "plain"
    kd_dist: str = "gaussian"
    lambda_cos: float = 0.5
    lambda_reg: float = 3.0
    reg_loss: str = "auto"
    teacher_reg_regimes: tuple[str, ...] = REGIMES
    student_reg_regimes: tuple[str, ...] = REGIMES
    n_modes: int = 6
    t_obs: int = 8
    t_fut: int = 12
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    tau: float = 5.0
    relation_text: bool = True
    temporal_pooling: str = "cls"
    pad_mode: str = "zero"
    lr: float = 1e-3
    weight_decay: float = 0.0
    grad_clip: float = 5.0
    epochs: int = 20
    batch_size: int = 16
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        try:
            self.teacher_modalities = normalize_modalities(self.teacher_modalities)
            self.student_modalities = normalize_modalities(self.student_modalities)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if not set(self.student_modalities) <= set(self.teacher_modalities):
            raise ConfigError(f"student modalities {self.student_modalities} are not a subset of "
                              f"teacher modalities {self.teacher_modalities}")
        if self.n_modes not in ALLOWED_MODES:
            raise ConfigError(f"n_modes must be one of {ALLOWED_MODES}, got {self.n_modes}")
        checks = {
            "variant": ("graph", "holistic"),
            "kd_form": ("plain", "cos_reg"),
            "kd_dist": ("gaussian", "softmax"),
            "reg_loss": ("auto", "l2", "nll"),
            "pad_mode": ("zero", "repeat"),
            "temporal_pooling": ("cls", "mean"),
            "dtype": tuple(DTYPES),
        }
        for name, allowed in checks.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        for name in ("teacher_reg_regimes", "student_reg_regimes"):
            regimes = tuple(str(r) for r in getattr(self, name))
            if not regimes or set(regimes) - set(REGIMES):
                raise ConfigError(f"{name} must be a non-empty subset of {REGIMES}")
            setattr(self, name, regimes)
        if self.lambda_cos < 0 or self.lambda_reg < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and lr > 0 required")
        if self.t_obs < 2:
            raise ConfigError("t_obs must be at least 2")

    @property
    def regression(self) -> str:
        if self.reg_loss != "auto":
            return self.reg_loss
        return "nll" if self.variant == "graph" else "l2"

    def model_config(self, role: str) -> ModelConfig:
        mods = self.teacher_modalities if role == "teacher" else self.student_modalities
        return ModelConfig(modalities=mods, variant=self.variant, d_model=self.d_model, n_heads=self.n_heads,
                           n_layers=self.n_layers, n_modes=self.n_modes, t_obs=self.t_obs, t_fut=self.t_fut,
                           tau=self.tau, relation_text=self.relation_text,
                           temporal_pooling=self.temporal_pooling)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        try:
            return cls(**kwargs)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def parameter_hash(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class TrainedModel:
    model: Forecaster
    config: ExperimentConfig
    role: str
    history: list[dict] = field(default_factory=list)
    teacher_fingerprint: str | None = None

    @property
    def modalities(self) -> tuple[str, ...]:
        return self.model.cfg.modalities

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps({"config": self.config.to_dict(), "role": self.role, "version": __version__,
                             "teacher": self.teacher_fingerprint}, sort_keys=True).encode())
        h.update(parameter_hash(self.model).encode())
        return h.hexdigest()[:16]

    @torch.no_grad()
    def predict(self, batch: SceneBatch):
        self.model.eval()
        return self.model(batch)[1]


# -- data --------------------------------------------------------------------------

def regime_mask(regime: str, t_obs: int) -> ObservationMask:
    return ObservationMask(t_obs if regime == "full" else int(regime))


def prepare_views(data: Sequence[Scene | ModalityBundle], t_obs: int, pad: str = "zero") -> list[dict]:
    """Per scene, the bundle seen under each observation regime."""
    if not data:
        raise ValueError("dataset is empty")
    views = []
    for item in data:
        b = bundle_from_scene(item) if isinstance(item, Scene) else item
        if b.t_obs != t_obs:
            raise ValueError(f"scene has {b.t_obs} observed frames, config expects {t_obs}")
        views.append({r: apply_mask(b, regime_mask(r, t_obs), pad) for r in REGIMES})
    return views


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


# -- training -------------------------------------------------------------------------

def _build(cfg: ExperimentConfig, role: str) -> Forecaster:
    torch.manual_seed(cfg.seed)
    return Forecaster(cfg.model_config(role)).to(DTYPES[cfg.dtype])


def _fit(model: Forecaster, cfg: ExperimentConfig, views: list[dict], reg_regimes, teacher: TrainedModel | None,
         on_step: Callable[[dict], None] | None) -> list[dict]:
    dtype = DTYPES[cfg.dtype]
    use_kd = teacher is not None and (cfg.kd_local or cfg.kd_global)
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(views) / cfg.batch_size)
    total_steps = max(1, cfg.epochs * steps_per_epoch)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=total_steps)
    history = []
    step = 0
    model.train()
    if teacher is not None:
        teacher.model.eval()
    for epoch in range(cfg.epochs):
        for idx in _batches(len(views), cfg.batch_size, rng):
            report = LossReport()
            for regime in REGIMES:
                batch = collate([views[i][regime] for i in idx], dtype)
                latents, forecast = model(batch)
                reg = regression_loss(cfg.regression, forecast, batch.future, batch.future_valid, batch.agent_mask)
                setattr(report, f"reg_{regime}", reg)
                if use_kd:
                    with torch.no_grad():
                        t_latents, _ = teacher.model(batch)
                    kd_l, kd_g = kd_terms(t_latents, latents, cfg.kd_form, cfg.lambda_cos, batch.agent_mask,
                                          cfg.kd_dist)
                    setattr(report, f"kd_local_{regime}", kd_l)
                    setattr(report, f"kd_global_{regime}", kd_g)
            loss = total_loss(report, cfg.lambda_reg, cfg.kd_local, cfg.kd_global, reg_regimes)
            report.total = loss
            record = {"step": step, "epoch": epoch, "lr": sched.get_last_lr()[0], **report.to_record()}
            if not torch.isfinite(loss):
                snapshot = {"record": record, "parameter_hash": parameter_hash(model),
                            "config": cfg.to_dict(), "scene_indices": [int(i) for i in idx]}
                raise TrainingDiverged(f"non-finite loss at step {step} (epoch {epoch})", snapshot)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            sched.step()
            history.append(record)
            if on_step:
                on_step(record)
            step += 1
        log.info("epoch %d: loss %.4f", epoch, float(np.mean([h["total"] for h in history[-steps_per_epoch:]])))
    model.eval()
    return history


def train_teacher(config: ExperimentConfig, dataset: Sequence, on_step=None) -> TrainedModel:
    views = prepare_views(dataset, config.t_obs, config.pad_mode)
    model = _build(config, "teacher")
    history = _fit(model, config, views, config.teacher_reg_regimes, None, on_step)
    return TrainedModel(model, config, "teacher", history)


def train_baseline(config: ExperimentConfig, dataset: Sequence, on_step=None) -> TrainedModel:
    """Student architecture trained on regression only (the no-distillation twin)."""
    views = prepare_views(dataset, config.t_obs, config.pad_mode)
    model = _build(config, "student")
    history = _fit(model, config, views, config.student_reg_regimes, None, on_step)
    return TrainedModel(model, config, "student", history)


def distill_student(config: ExperimentConfig, teacher: TrainedModel, dataset: Sequence, on_step=None) -> TrainedModel:
    if not set(config.student_modalities) <= set(teacher.modalities):
        raise ConfigError(f"teacher modalities {teacher.modalities} do not cover student "
                          f"modalities {config.student_modalities}")
    if teacher.model.cfg.d_model != config.d_model:
        raise ConfigError("teacher and student latent sizes differ")
    if teacher.model.cfg.t_obs != config.t_obs:
        raise ConfigError("teacher and student observation lengths differ")
    views = prepare_views(dataset, config.t_obs, config.pad_mode)
    model = _build(config, "student")
    before = parameter_hash(teacher.model)
    flags = [p.requires_grad for p in teacher.model.parameters()]
    for p in teacher.model.parameters():
        p.requires_grad_(False)
    try:
        history = _fit(model, config, views, config.student_reg_regimes, teacher, on_step)
    finally:
        for p, f in zip(teacher.model.parameters(), flags):
            p.requires_grad_(f)
    if parameter_hash(teacher.model) != before:
        raise RuntimeError("teacher parameters changed during distillation")
    return TrainedModel(model, config, "student", history, teacher_fingerprint=teacher.fingerprint)


# -- checkpoints ------------------------------------------------------------------------
#
# A checkpoint is a single .npz archive: every parameter/buffer under
# "param/<state_dict key>" plus "__meta__", a UTF-8 JSON document stored as a
# uint8 array with keys schema_version, role, config, model_config,
# fingerprint, teacher_fingerprint, code_version and history.

def save_checkpoint(trained: TrainedModel, path: str | Path) -> Path:
    path = Path(path)
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in trained.model.state_dict().items()}
    meta = {
        "schema_version": CHECKPOINT_SCHEMA,
        "role": trained.role,
        "config": trained.config.to_dict(),
        "model_config": trained.model.cfg.to_dict(),
        "fingerprint": trained.fingerprint,
        "teacher_fingerprint": trained.teacher_fingerprint,
        "code_version": __version__,
        "history": trained.history,
    }
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path: str | Path) -> TrainedModel:
    path = Path(path)
    if path.is_dir():
        path = path / "model.npz"
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(z["__meta__"].tobytes().decode())
        if meta.get("schema_version") != CHECKPOINT_SCHEMA:
            raise ValueError(f"unsupported checkpoint schema {meta.get('schema_version')!r}")
        state = {k[len("param/"):]: torch.from_numpy(z[k].copy()) for k in z.files if k.startswith("param/")}
    cfg = ExperimentConfig.from_dict(meta["config"])
    model = Forecaster(ModelConfig.from_dict(meta["model_config"]))
    model.load_state_dict(state)
    model = model.to(next(iter(state.values())).dtype)
    model.eval()
    trained = TrainedModel(model, cfg, meta["role"], meta["history"], meta.get("teacher_fingerprint"))
    if trained.fingerprint != meta["fingerprint"]:
        raise ValueError(f"checkpoint fingerprint mismatch for {path}")
    return trained


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(cfg, **kw)


__all__ = ["ExperimentConfig", "TrainedModel", "ConfigError", "TrainingDiverged", "train_teacher",
           "train_baseline", "distill_student", "save_checkpoint", "load_checkpoint", "parameter_hash",
           "prepare_views", "regime_mask"]
