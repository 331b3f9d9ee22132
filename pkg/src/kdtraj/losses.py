"""Regression and distillation losses and the combined student objective.

All losses average over real agents (``agent_mask``) pooled across the batch.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields
from typing import Mapping

import torch
import torch.nn.functional as F

from .encoders import ForecastSet, LatentPacket

log = logging.getLogger(__name__)

REGIMES = ("full", "2", "1")


def _agent_mean(x: torch.Tensor, agent_mask: torch.Tensor | None) -> torch.Tensor:
    if agent_mask is None:
        return x.mean()
    m = agent_mask.to(x.dtype)
    return (x * m).sum() / m.sum().clamp(min=1)


def _safe(x: torch.Tensor, agent_mask):
    # padded agents may hold arbitrary values; keep them out of the graph
    if agent_mask is None:
        return x
    return torch.where(agent_mask.view(agent_mask.shape + (1,) * (x.dim() - agent_mask.dim())), x,
                       torch.zeros((), dtype=x.dtype))


def mode_errors(proposals: torch.Tensor, gt: torch.Tensor, gt_valid: torch.Tensor | None = None) -> torch.Tensor:
    """Mean Euclidean error per mode: proposals [..., F, T, 2], gt [..., T, 2] -> [..., F]."""
    d = torch.linalg.vector_norm(proposals - gt.unsqueeze(-3), dim=-1)
    if gt_valid is None:
        return d.mean(-1)
    w = gt_valid.unsqueeze(-2).to(d.dtype)
    return (d * w).sum(-1) / w.sum(-1).clamp(min=1)


def wta_terms(forecast: ForecastSet, gt, gt_valid=None, agent_mask=None):
    """(regression, mode classification) parts of the winner-takes-all loss."""
    if forecast.proposals.shape[-3] == 0:
        raise ValueError("forecast has no proposals")
    if forecast.proposals.shape[-2:] != gt.shape[-2:]:
        raise ValueError(f"proposal steps {tuple(forecast.proposals.shape)} do not match gt {tuple(gt.shape)}")
    gt = _safe(gt, agent_mask)
    err = mode_errors(_safe(forecast.proposals, agent_mask), gt, gt_valid)
    winner = err.argmin(-1)
    reg = err.gather(-1, winner.unsqueeze(-1)).squeeze(-1)
    logits = _safe(forecast.mode_logits, agent_mask)
    cls = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), winner.reshape(-1), reduction="none")
    return _agent_mean(reg, agent_mask), _agent_mean(cls.view(winner.shape), agent_mask)


def wta_l2(forecast: ForecastSet, gt, gt_valid=None, agent_mask=None) -> torch.Tensor:
    reg, cls = wta_terms(forecast, gt, gt_valid, agent_mask)
    return reg + cls


def laplace_nll_per_mode(proposals, scales, gt, gt_valid=None):
    """Laplace negative log-likelihood summed over steps and coordinates -> [..., F]."""
    r = (proposals - gt.unsqueeze(-3)).abs()
    nll = torch.log(2 * scales) + r / scales
    if gt_valid is not None:
        nll = nll * gt_valid.unsqueeze(-2).unsqueeze(-1).to(nll.dtype)
    return nll.sum((-1, -2))


def nll_terms(forecast: ForecastSet, gt, gt_valid=None, agent_mask=None):
    if forecast.scales is None:
        raise ValueError("forecast carries no scale parameters")
    scales = forecast.scales
    if agent_mask is not None:
        scales = torch.where(agent_mask.view(agent_mask.shape + (1, 1, 1)), scales, torch.ones((), dtype=scales.dtype))
    if bool((scales <= 0).any()):
        raise ValueError("Laplace scales must be strictly positive")
    nll = laplace_nll_per_mode(_safe(forecast.proposals, agent_mask), scales, _safe(gt, agent_mask), gt_valid)
    winner = nll.argmin(-1)
    reg = nll.gather(-1, winner.unsqueeze(-1)).squeeze(-1)
    logits = _safe(forecast.mode_logits, agent_mask)
    cls = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), winner.reshape(-1), reduction="none")
    return _agent_mean(reg, agent_mask), _agent_mean(cls.view(winner.shape), agent_mask)


def nll_loss(forecast: ForecastSet, gt, gt_valid=None, agent_mask=None) -> torch.Tensor:
    reg, cls = nll_terms(forecast, gt, gt_valid, agent_mask)
    return reg + cls


def gaussian_kl(mean_a, logvar_a, mean_b, logvar_b, agent_mask=None) -> torch.Tensor:
    """KL(N(mean_a, exp(logvar_a)) || N(mean_b, exp(logvar_b))), summed over D, averaged over agents."""
    kl = 0.5 * (logvar_b - logvar_a + torch.exp(logvar_a - logvar_b) + (mean_a - mean_b) ** 2 * torch.exp(-logvar_b) - 1.0)
    return _agent_mean(_safe(kl, agent_mask).sum(-1), agent_mask)


def softmax_kl(mean_a, mean_b, agent_mask=None) -> torch.Tensor:
    """KL between softmax distributions over the latent dimension."""
    pa = F.log_softmax(mean_a, -1)
    pb = F.log_softmax(mean_b, -1)
    return _agent_mean(_safe((pa.exp() * (pa - pb)), agent_mask).sum(-1), agent_mask)


def _check_packets(teacher: LatentPacket, student: LatentPacket):
    for f in fields(LatentPacket):
        a, b = getattr(teacher, f.name), getattr(student, f.name)
        if a.shape != b.shape:
            raise ValueError(f"{f.name}: teacher {tuple(a.shape)} vs student {tuple(b.shape)}")


def kd_loss_plain(teacher: LatentPacket, student: LatentPacket, agent_mask=None, dist: str = "gaussian"):
    _check_packets(teacher, student)
    t = teacher.detach()
    if dist == "softmax":
        return (softmax_kl(t.Q_mean, student.Q_mean, agent_mask),
                softmax_kl(t.H_mean, student.H_mean, agent_mask))
    if dist != "gaussian":
        raise ValueError(f"unknown latent distribution {dist!r}")
    return (gaussian_kl(t.Q_mean, t.Q_logvar, student.Q_mean, student.Q_logvar, agent_mask),
            gaussian_kl(t.H_mean, t.H_logvar, student.H_mean, student.H_logvar, agent_mask))


def cosine_distance(a, b, agent_mask=None) -> torch.Tensor:
    """Mean over agents of 1 - cos(a, b); an agent with a zero vector counts as 1."""
    na = torch.linalg.vector_norm(a, dim=-1)
    nb = torch.linalg.vector_norm(b, dim=-1)
    degenerate = (na == 0) | (nb == 0)
    if agent_mask is not None:
        degenerate = degenerate & agent_mask
    if bool(degenerate.any()):
        log.warning("cosine distance: %d agent(s) with zero-norm latent mean", int(degenerate.sum()))
    cos = (a * b).sum(-1) / torch.where(degenerate, torch.ones_like(na), na * nb)
    dist = torch.where(degenerate, torch.ones_like(cos), 1.0 - cos)
    return _agent_mean(_safe(dist, agent_mask), agent_mask)


def standard_normal_kl(mean, logvar, agent_mask=None) -> torch.Tensor:
    """KL(N(0, I) || N(mean, exp(logvar)))."""
    zeros = torch.zeros_like(mean)
    return gaussian_kl(zeros, zeros, mean, logvar, agent_mask)


def kd_loss_reg(teacher: LatentPacket, student: LatentPacket, lambda_cos: float = 0.5, agent_mask=None):
    if lambda_cos < 0:
        raise ValueError("lambda_cos must be non-negative")
    _check_packets(teacher, student)
    t = teacher.detach()
    local = (lambda_cos * cosine_distance(t.Q_mean, student.Q_mean, agent_mask)
             + standard_normal_kl(student.Q_mean, student.Q_logvar, agent_mask))
    glob = (lambda_cos * cosine_distance(t.H_mean, student.H_mean, agent_mask)
            + standard_normal_kl(student.H_mean, student.H_logvar, agent_mask))
    return local, glob


@dataclass
class LossReport:
    reg_full: float | torch.Tensor = 0.0
    reg_2: float | torch.Tensor = 0.0
    reg_1: float | torch.Tensor = 0.0
    kd_local_full: float | torch.Tensor = 0.0
    kd_local_2: float | torch.Tensor = 0.0
    kd_local_1: float | torch.Tensor = 0.0
    kd_global_full: float | torch.Tensor = 0.0
    kd_global_2: float | torch.Tensor = 0.0
    kd_global_1: float | torch.Tensor = 0.0
    total: float | torch.Tensor = 0.0

    def to_record(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        return out


def total_loss(report: LossReport | Mapping, lambda_reg: float = 3.0, kd_local: bool = True,
               kd_global: bool = True, reg_regimes=REGIMES):
    """lambda_reg * reg_full + reg_2 + reg_1 plus the enabled distillation terms of all regimes.

    ``reg_regimes`` restricts which regression terms count (regression-loss
    combination ablation).
    """
    get = report.get if isinstance(report, Mapping) else (lambda k, d=0.0: getattr(report, k))
    weights = {"full": lambda_reg, "2": 1.0, "1": 1.0}
    total = 0.0
    for r in REGIMES:
        if r in reg_regimes:
            total = total + weights[r] * get(f"reg_{r}", 0.0)
    for r in REGIMES:
        if kd_local:
            total = total + get(f"kd_local_{r}", 0.0)
        if kd_global:
            total = total + get(f"kd_global_{r}", 0.0)
    return total


def kd_terms(teacher: LatentPacket, student: LatentPacket, form: str, lambda_cos: float = 0.5,
             agent_mask=None, dist: str = "gaussian"):
    if form == "plain":
        return kd_loss_plain(teacher, student, agent_mask, dist)
    if form == "cos_reg":
        return kd_loss_reg(teacher, student, lambda_cos, agent_mask)
    raise ValueError(f"unknown KD form {form!r}")


def regression_loss(kind: str, forecast: ForecastSet, gt, gt_valid=None, agent_mask=None):
    if kind == "l2":
        return wta_l2(forecast, gt, gt_valid, agent_mask)
    if kind == "nll":
        return nll_loss(forecast, gt, gt_valid, agent_mask)
    raise ValueError(f"unknown regression loss {kind!r}")


LOG2 = math.log(2.0)
