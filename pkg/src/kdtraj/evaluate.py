"""Best-of-F displacement metrics, regime evaluation and comparison reports.

Metrics pool all real agents of a dataset before averaging (not per scene).
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch

from .encoders import ForecastSet, SceneBatch, collate, reference_frame
from .losses import REGIMES
from .scene import ModalityBundle, Scene, apply_mask, bundle_from_scene
from .train import regime_mask

log = logging.getLogger(__name__)

METRICS = ("ADE", "ADE2", "ADE1", "FDE", "FDE2", "FDE1")
REGIME_SUFFIX = {"full": "", "2": "2", "1": "1"}


def _arrays(forecast, gt):
    proposals = forecast.proposals if isinstance(forecast, ForecastSet) else forecast
    if isinstance(proposals, torch.Tensor):
        proposals = proposals.detach().cpu().numpy()
    if isinstance(gt, torch.Tensor):
        gt = gt.detach().cpu().numpy()
    proposals = np.asarray(proposals, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if proposals.shape[-2:] != gt.shape[-2:] or proposals.shape[:-3] != gt.shape[:-2]:
        raise ValueError(f"forecast {proposals.shape} and ground truth {gt.shape} do not agree")
    return proposals, gt


def _pool(per_agent: np.ndarray, agent_mask) -> float:
    if agent_mask is None:
        return float(per_agent.mean())
    m = np.asarray(agent_mask.cpu().numpy() if isinstance(agent_mask, torch.Tensor) else agent_mask, bool)
    return float(per_agent[m].mean())


def per_agent_ade(forecast, gt) -> np.ndarray:
    proposals, gt = _arrays(forecast, gt)
    err = np.linalg.norm(proposals - gt[..., None, :, :], axis=-1).mean(-1)
    return err.min(-1)


def per_agent_fde(forecast, gt) -> np.ndarray:
    proposals, gt = _arrays(forecast, gt)
    err = np.linalg.norm(proposals[..., -1, :] - gt[..., None, -1, :], axis=-1)
    return err.min(-1)


def min_ade(forecast, gt, agent_mask=None) -> float:
    """Mean over agents of the smallest per-proposal average displacement error."""
    return _pool(per_agent_ade(forecast, gt), agent_mask)


def min_fde(forecast, gt, agent_mask=None) -> float:
    return _pool(per_agent_fde(forecast, gt), agent_mask)


@dataclass
class MetricReport:
    ADE: float
    ADE2: float
    ADE1: float
    FDE: float
    FDE2: float
    FDE1: float
    name: str = ""
    fingerprint: str = ""
    avg_improvement_percent: float | None = None
    baseline: str | None = None

    def values(self) -> dict[str, float]:
        return {m: getattr(self, m) for m in METRICS}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


class Predictor(Protocol):
    modalities: tuple[str, ...]

    def predict(self, batch: SceneBatch) -> ForecastSet: ...


class ConstantVelocity:
    """Extrapolates the last observed displacement; with one frame it stays put."""

    modalities = ("X",)

    def __init__(self, t_fut: int = 12):
        self.t_fut = t_fut

    def predict(self, batch: SceneBatch) -> ForecastSet:
        origin, _ = reference_frame(batch)
        pos, valid = batch.positions, batch.valid
        last = valid.shape[-1] - 1
        both = valid[..., last] & valid[..., last - 1]
        vel = torch.where(both[..., None], pos[..., last, :] - pos[..., last - 1, :], torch.zeros_like(origin))
        steps = torch.arange(1, self.t_fut + 1, dtype=pos.dtype)
        proposals = origin[..., None, :] + steps[:, None] * vel[..., None, :]
        b, n = batch.shape
        return ForecastSet(proposals[:, :, None], torch.zeros(b, n, 1, dtype=pos.dtype))


def _check_modalities(model, bundles: Sequence[ModalityBundle]):
    mods = tuple(getattr(model, "modalities", ("X",)))
    if "P" in mods and not any(b.pose_valid.any() for b in bundles):
        raise ValueError("model needs pose (P) but the dataset carries none")
    if "S" in mods and not any(b.caption_valid.any() for b in bundles):
        raise ValueError("model needs captions (S) but the dataset carries none")


def evaluate(model: Predictor, dataset: Sequence[Scene | ModalityBundle], regimes: Sequence[str] = REGIMES,
             batch_size: int = 32, name: str = "", pad: str = "zero") -> MetricReport:
    """Run ``model`` on each observation regime and fill the six best-of-F metrics."""
    bundles = [bundle_from_scene(d) if isinstance(d, Scene) else d for d in dataset]
    if not bundles:
        raise ValueError("dataset is empty")
    _check_modalities(model, bundles)
    inner = getattr(model, "model", None)
    dtype = next(inner.parameters()).dtype if inner is not None else torch.float64
    t_obs = bundles[0].t_obs
    values = {m: math.nan for m in METRICS}
    for regime in regimes:
        ade, fde = [], []
        for i in range(0, len(bundles), batch_size):
            chunk = [apply_mask(b, regime_mask(regime, t_obs), pad) for b in bundles[i:i + batch_size]]
            batch = collate(chunk, dtype)
            with torch.no_grad():
                forecast = model.predict(batch)
            mask = batch.agent_mask.numpy()
            ade.append(per_agent_ade(forecast, batch.future)[mask])
            fde.append(per_agent_fde(forecast, batch.future)[mask])
        suffix = REGIME_SUFFIX[regime]
        values["ADE" + suffix] = float(np.concatenate(ade).mean())
        values["FDE" + suffix] = float(np.concatenate(fde).mean())
    fp = getattr(model, "fingerprint", "")
    return MetricReport(**values, name=name, fingerprint=fp if isinstance(fp, str) else "")


def improvement_percent(report: MetricReport, baseline: MetricReport) -> float:
    """Mean over the six metrics of 100 * (baseline - value) / baseline."""
    gains = []
    for m in METRICS:
        base, val = getattr(baseline, m), getattr(report, m)
        if not base > 0:
            log.warning("baseline %s is %r; excluded from the average improvement", m, base)
            continue
        gains.append(100.0 * (base - val) / base)
    if not gains:
        raise ValueError("baseline has no positive metric")
    return float(np.mean(gains))


def _table(reports: Sequence[MetricReport], baseline: MetricReport) -> str:
    header = "| model | " + " | ".join(METRICS) + " | Avg. +% | fingerprint |"
    rule = "|" + "---|" * (len(METRICS) + 3)
    rows = [header, rule]
    for r in reports:
        gain = "-" if r is baseline else f"{improvement_percent(r, baseline):+.2f}"
        cells = " | ".join(f"{getattr(r, m):.4f}" for m in METRICS)
        rows.append(f"| {r.name or '?'} | {cells} | {gain} | {r.fingerprint or '-'} |")
    return "\n".join(rows) + "\n"


def emit_report(reports: Sequence[MetricReport], out_dir: str | Path, baseline_index: int = 0) -> list[Path]:
    """Write comparison.md / comparison.json and one bar chart per metric.

    The first report (or ``baseline_index``) is the reference for ``Avg. +%``.
    """
    if not reports:
        raise ValueError("no reports to compare")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create report directory {out}: {e}") from e
    baseline = reports[baseline_index]
    rows = []
    for r in reports:
        d = r.to_dict()
        if r is not baseline:
            d["avg_improvement_percent"] = improvement_percent(r, baseline)
            d["baseline"] = baseline.name
        rows.append(d)
    written = [out / "comparison.md", out / "comparison.json"]
    written[0].write_text(_table(reports, baseline))
    written[1].write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = [r.name or str(i) for i, r in enumerate(reports)]
    for m in METRICS:
        fig, ax = plt.subplots(figsize=(max(3.0, 1.2 * len(reports)), 3.0))
        ax.bar(range(len(reports)), [getattr(r, m) for r in reports], color="tab:blue")
        ax.set_xticks(range(len(reports)), names, rotation=30, ha="right")
        ax.set_ylabel(f"{m} (m)")
        fig.tight_layout()
        path = out / f"{m}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)
    return written
