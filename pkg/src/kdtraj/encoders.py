"""Modality embedders, local/global encoders, latent heads and the decoder.

Everything operates on a padded :class:`SceneBatch` of shape [B, N, ...]; padded
agents carry ``agent_mask == False`` and never enter another agent's attention.
Invalid frames are replaced by exact zeros before any arithmetic, so values in
masked frames cannot reach the outputs.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .scene import CAPTION_VOCAB, ModalityBundle

MODALITIES = ("X", "P", "S")
LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
POS_SCALE = 5.0


class EncoderInputError(ValueError):
    pass


@dataclass
class ModelConfig:
    modalities: tuple[str, ...] = ("X", "P", "S")
    variant: str = "graph"
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    n_modes: int = 6
    t_obs: int = 8
    t_fut: int = 12
    d_pose: int = 72
    vocab_size: int = len(CAPTION_VOCAB)
    tau: float = 5.0
    relation_text: bool = True
    temporal_pooling: str = "cls"

    def __post_init__(self):
        self.modalities = normalize_modalities(self.modalities)
        if self.variant not in ("graph", "holistic"):
            raise ValueError(f"unknown encoder variant {self.variant!r}")
        if self.temporal_pooling not in ("cls", "mean"):
            raise ValueError(f"unknown temporal pooling {self.temporal_pooling!r}")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_modes < 1:
            raise ValueError("n_modes must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = list(self.modalities)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def normalize_modalities(mods) -> tuple[str, ...]:
    if isinstance(mods, str):
        mods = [m for m in mods.replace("+", ",").split(",") if m]
    mods = tuple(m.strip().upper() for m in mods)
    unknown = set(mods) - set(MODALITIES)
    if unknown or "X" not in mods:
        raise ValueError(f"modality set must contain X and only {MODALITIES}, got {mods}")
    return tuple(m for m in MODALITIES if m in mods)


# -- batching ----------------------------------------------------------------

@dataclass
class SceneBatch:
    positions: torch.Tensor       # [B, N, T, 2]
    valid: torch.Tensor           # [B, N, T]
    heading: torch.Tensor         # [B, N, T]
    pose: torch.Tensor            # [B, N, T, P]
    pose_valid: torch.Tensor      # [B, N, T]
    caption_ids: torch.Tensor     # [B, N, T, C]
    caption_valid: torch.Tensor   # [B, N, T]
    relation_ids: torch.Tensor    # [B, N, N]
    future: torch.Tensor          # [B, N, Tf, 2]
    future_valid: torch.Tensor    # [B, N, Tf]
    agent_mask: torch.Tensor      # [B, N]

    @property
    def shape(self):
        return tuple(self.valid.shape[:2])


def collate(bundles: Sequence[ModalityBundle], dtype=torch.float32) -> SceneBatch:
    """Pad a list of scene bundles along the agent axis."""
    if not bundles:
        raise ValueError("cannot collate an empty list")
    n = max(b.n_agents for b in bundles)
    out = {}
    for name in ModalityBundle.__dataclass_fields__:
        arrs = [getattr(b, name) for b in bundles]
        if name == "relation_ids":
            padded = np.full((len(arrs), n, n), -1, dtype=np.int64)
            for k, a in enumerate(arrs):
                padded[k, :a.shape[0], :a.shape[1]] = a
        else:
            a0 = arrs[0]
            padded = np.zeros((len(arrs), n) + a0.shape[1:], dtype=a0.dtype)
            for k, a in enumerate(arrs):
                padded[k, :a.shape[0]] = a
        t = torch.from_numpy(padded)
        out[name] = t.to(dtype) if t.is_floating_point() else t
    mask = np.zeros((len(bundles), n), dtype=bool)
    for k, b in enumerate(bundles):
        mask[k, :b.n_agents] = True
    out["agent_mask"] = torch.from_numpy(mask)
    return SceneBatch(**out)


# -- geometry ------------------------------------------------------------------

def rotate_to_heading(points, heading):
    """Express ``points`` [..., 2] in the frame whose x-axis points along ``heading``.

    Works for numpy arrays and torch tensors; ``heading`` broadcasts against
    the leading dimensions of ``points``.
    """
    if isinstance(points, torch.Tensor):
        heading = torch.as_tensor(heading, dtype=points.dtype)
        c, s = torch.cos(heading), torch.sin(heading)
        x, y = points[..., 0], points[..., 1]
        return torch.stack([c * x + s * y, -s * x + c * y], dim=-1)
    points = np.asarray(points, dtype=float)
    c, s = np.cos(heading), np.sin(heading)
    x, y = points[..., 0], points[..., 1]
    return np.stack([c * x + s * y, -s * x + c * y], axis=-1)


def rotate_from_heading(points: torch.Tensor, heading: torch.Tensor) -> torch.Tensor:
    return rotate_to_heading(points, -heading)


def last_valid_index(valid: torch.Tensor) -> torch.Tensor:
    t = valid.shape[-1]
    idx = torch.arange(t, device=valid.device).expand_as(valid)
    return torch.where(valid, idx, torch.full_like(idx, -1)).max(-1).values.clamp(min=0)


def _gather_t(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    # x [B, N, T, ...], idx [B, N] -> [B, N, ...]
    shape = idx.shape + (1,) + x.shape[3:]
    g = idx.view(idx.shape + (1,) * (x.dim() - 2)).expand(shape)
    return x.gather(2, g).squeeze(2)


def reference_frame(batch: SceneBatch) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-agent origin (last valid position) and heading.

    The heading is the direction of the last displacement when two trailing
    frames are valid and the agent moved, otherwise the stored heading.
    """
    valid = batch.valid
    last = last_valid_index(valid)
    prev = (last - 1).clamp(min=0)
    pos = torch.where(valid[..., None], batch.positions, torch.zeros_like(batch.positions))
    origin = _gather_t(pos, last)
    before = _gather_t(pos, prev)
    has_prev = (last > 0) & _gather_t(valid, prev)
    d = origin - before
    moved = has_prev & (d.norm(dim=-1) > 1e-6)
    stored = _gather_t(torch.where(valid, batch.heading, torch.zeros_like(batch.heading)), last)
    ang = torch.atan2(d[..., 1], d[..., 0])
    return origin, torch.where(moved, ang, stored)


def _masked(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return torch.where(mask.unsqueeze(-1), x, torch.zeros((), dtype=x.dtype))


def _displacements(pos: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    prev = torch.cat([pos[..., :1, :], pos[..., :-1, :]], dim=-2)
    pvalid = torch.cat([torch.zeros_like(valid[..., :1]), valid[..., :-1]], dim=-1)
    return _masked(pos - prev, valid & pvalid)


# -- building blocks -------------------------------------------------------------

class MLP(nn.Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d_in, d_hidden), nn.LayerNorm(d_hidden), nn.ReLU(),
                                 nn.Linear(d_hidden, d_out))

    def forward(self, x):
        return self.net(x)


class MaskedAttention(nn.Module):
    """Multi-head attention; ``key_mask`` is True for usable keys."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, query, keys, key_mask):
        *lead, lq, d = query.shape
        lk = keys.shape[-2]
        h = self.n_heads
        q = self.q(query).view(*lead, lq, h, d // h).transpose(-2, -3)
        k = self.k(keys).view(*lead, lk, h, d // h).transpose(-2, -3)
        v = self.v(keys).view(*lead, lk, h, d // h).transpose(-2, -3)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        scores = scores.masked_fill(~key_mask.unsqueeze(-2).unsqueeze(-3), float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        y = (attn @ v).transpose(-2, -3).reshape(*lead, lq, d)
        return self.out(y)


class Block(nn.Module):
    """Pre-norm attention block; self-attention when ``keys`` is None."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.norm_q = nn.LayerNorm(d_model)
        self.norm_k = nn.LayerNorm(d_model)
        self.attn = MaskedAttention(d_model, n_heads)
        self.norm_ff = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(nn.Linear(d_model, 2 * d_model), nn.ReLU(), nn.Linear(2 * d_model, d_model))

    def forward(self, x, key_mask, keys=None):
        kv = self.norm_k(x if keys is None else keys)
        x = x + self.attn(self.norm_q(x), kv, key_mask)
        return x + self.ff(self.norm_ff(x))


class LookupTextEncoder(nn.Module):
    """Learned embedding per caption template.

    Any module mapping integer template ids [...] to [..., D] can replace it.
    """

    def __init__(self, vocab_size: int, d_model: int):
        super().__init__()
        self.table = nn.Embedding(vocab_size, d_model)
        nn.init.normal_(self.table.weight, std=0.5)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        return self.table(ids.clamp(min=0))


@dataclass
class ModalityEmbeddings:
    z_x: torch.Tensor          # [B, N, T, D]
    z_p: torch.Tensor          # [B, N, T, D]
    z_sA: torch.Tensor         # [B, N, T, C, D], one token per caption template
    z_sR: torch.Tensor         # [B, N, T, D]
    mask_x: torch.Tensor
    mask_p: torch.Tensor
    mask_sA: torch.Tensor
    mask_sR: torch.Tensor
    modalities: tuple[str, ...] = field(default=MODALITIES)


class ModalityEmbedder(nn.Module):
    def __init__(self, cfg: ModelConfig, text_encoder: nn.Module | None = None):
        super().__init__()
        d = cfg.d_model
        self.with_heading = cfg.modalities == ("X",)
        self.traj = MLP(6 if self.with_heading else 4, d, d)
        self.pose = MLP(cfg.d_pose + 1, d, d)
        self.text = text_encoder or LookupTextEncoder(cfg.vocab_size, d)
        self.relation = LookupTextEncoder(cfg.vocab_size, d)
        self.d_model = d

    def traj_features(self, pos, disp, heading_rel):
        parts = [pos / POS_SCALE, disp]
        if self.with_heading:
            parts.append(torch.stack([torch.cos(heading_rel), torch.sin(heading_rel)], -1))
        return torch.cat(parts, -1)

    @staticmethod
    def pose_features(pose, yaw_ref):
        yaw = pose[..., 0] - yaw_ref
        return torch.cat([torch.cos(yaw)[..., None], torch.sin(yaw)[..., None], pose[..., 1:] / math.pi], -1)


def embed_modalities(embedder: ModalityEmbedder, batch: SceneBatch, modalities: Sequence[str],
                     frame: str = "world", relation_text: bool = True) -> ModalityEmbeddings:
    """Embed each requested modality per agent and frame.

    ``frame="world"`` translates trajectories to each agent's last position;
    ``frame="ego"`` additionally rotates them (and pose root yaw and heading)
    into the agent's reference heading. Absent modalities come back as zeros
    with all-false masks.
    """
    mods = normalize_modalities(modalities)
    b, n, t, _ = batch.positions.shape
    if batch.pose.shape[-1] + 1 != embedder.pose.net[0].in_features:
        raise EncoderInputError(f"pose dimension {batch.pose.shape[-1]} does not match the embedder")
    if ("X",) == mods and not embedder.with_heading or ("X",) != mods and embedder.with_heading:
        raise EncoderInputError(f"embedder was built for a different modality set than {mods}")
    d = embedder.d_model
    dtype = batch.positions.dtype
    valid = batch.valid & batch.agent_mask[..., None]
    origin, ref = reference_frame(batch)
    if frame == "world":
        ref = torch.zeros_like(ref)
    elif frame != "ego":
        raise ValueError(f"unknown frame {frame!r}")

    pos = _masked(batch.positions, valid)
    rel = rotate_to_heading(pos - origin[:, :, None], ref[:, :, None])
    disp = rotate_to_heading(_displacements(pos, valid), ref[:, :, None])
    head = torch.where(valid, batch.heading, torch.zeros((), dtype=dtype)) - ref[:, :, None]
    z_x = _masked(embedder.traj(_masked(embedder.traj_features(rel, disp, head), valid)), valid)

    zeros = torch.zeros(b, n, t, d, dtype=dtype)
    none = torch.zeros(b, n, t, dtype=torch.bool)
    z_p, mask_p = zeros, none
    if "P" in mods:
        mask_p = batch.pose_valid & valid
        pose = _masked(batch.pose, mask_p)
        z_p = _masked(embedder.pose(_masked(embedder.pose_features(pose, ref[:, :, None]), mask_p)), mask_p)

    c = batch.caption_ids.shape[-1]
    z_sA, mask_sA = torch.zeros(b, n, t, c, d, dtype=dtype), none
    z_sR, mask_sR = zeros, none
    if "S" in mods:
        mask_sA = batch.caption_valid & valid
        ids = torch.where(mask_sA[..., None], batch.caption_ids, torch.zeros_like(batch.caption_ids))
        z_sA = torch.where(mask_sA[..., None, None], embedder.text(ids), torch.zeros((), dtype=dtype))
        if relation_text:
            rel_ok = (batch.relation_ids >= 0) & batch.agent_mask[:, None, :] & batch.agent_mask[:, :, None]
            emb = torch.where(rel_ok[..., None], embedder.relation(batch.relation_ids), torch.zeros((), dtype=dtype))
            count = rel_ok.sum(-1, keepdim=True)
            mean = emb.sum(2) / count.clamp(min=1).to(dtype)
            has = count[..., 0] > 0
            mask_sR = valid & has[..., None]
            z_sR = _masked(mean[:, :, None, :].expand(b, n, t, d), mask_sR)
    return ModalityEmbeddings(z_x, z_p, z_sA, z_sR, valid, mask_p, mask_sA, mask_sR, mods)


def _check_agents_have_frames(batch: SceneBatch):
    empty = batch.agent_mask & ~batch.valid.any(-1)
    if bool(empty.any()):
        idx = empty.nonzero()[0].tolist()
        raise EncoderInputError(f"agent {idx[1]} in scene {idx[0]} has no valid observed frames")


# -- local encoders -----------------------------------------------------------------

class TemporalPool(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.mode = cfg.temporal_pooling
        self.cls = nn.Parameter(torch.randn(d) * 0.1)
        self.time = nn.Parameter(torch.randn(cfg.t_obs, d) * 0.1)
        self.blocks = nn.ModuleList(Block(d, cfg.n_heads) for _ in range(cfg.n_layers))
        self.norm = nn.LayerNorm(d)

    def forward(self, x, mask):
        # x [B, N, T, D], mask [B, N, T] -> [B, N, D]
        if self.mode == "mean":
            s = _masked(x, mask).sum(-2)
            return self.norm(s / mask.sum(-1, keepdim=True).clamp(min=1).to(x.dtype))
        b, n, t, d = x.shape
        tokens = _masked(x + self.time[:t], mask)
        tokens = torch.cat([self.cls.expand(b, n, 1, d), tokens], dim=2)
        keep = torch.cat([torch.ones(b, n, 1, dtype=torch.bool), mask], dim=2)
        for blk in self.blocks:
            tokens = _masked(blk(tokens, keep), keep)
        return self.norm(tokens[:, :, 0])


class HolisticLocalEncoder(nn.Module):
    """Class token attending jointly over modality and time tokens of one agent."""

    TYPE_X, TYPE_P, TYPE_SA, TYPE_SR = range(4)

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.cls = nn.Parameter(torch.randn(d) * 0.1)
        self.types = nn.Parameter(torch.randn(4, d) * 0.1)
        self.time = nn.Parameter(torch.randn(cfg.t_obs, d) * 0.1)
        self.blocks = nn.ModuleList(Block(d, cfg.n_heads) for _ in range(cfg.n_layers))
        self.norm = nn.LayerNorm(d)

    def forward(self, z: ModalityEmbeddings) -> torch.Tensor:
        b, n, t, d = z.z_x.shape
        time = self.time[:t]
        toks = [z.z_x + self.types[self.TYPE_X] + time]
        masks = [z.mask_x]
        if "P" in z.modalities:
            toks.append(z.z_p + self.types[self.TYPE_P] + time)
            masks.append(z.mask_p)
        if "S" in z.modalities:
            for c in range(z.z_sA.shape[3]):
                toks.append(z.z_sA[:, :, :, c] + self.types[self.TYPE_SA] + time)
                masks.append(z.mask_sA)
            toks.append(z.z_sR + self.types[self.TYPE_SR] + time)
            masks.append(z.mask_sR)
        tokens = torch.stack(toks, dim=3).reshape(b, n, -1, d)
        mask = torch.stack(masks, dim=3).reshape(b, n, -1)
        tokens = _masked(tokens, mask)
        tokens = torch.cat([self.cls.expand(b, n, 1, d), tokens], dim=2)
        keep = torch.cat([torch.ones(b, n, 1, dtype=torch.bool), mask], dim=2)
        for blk in self.blocks:
            tokens = _masked(blk(tokens, keep), keep)
        return self.norm(tokens[:, :, 0])


def local_encode_holistic(encoder: HolisticLocalEncoder, z: ModalityEmbeddings,
                          agent_mask: torch.Tensor | None = None) -> torch.Tensor:
    has_frames = z.mask_x.any(-1)
    real = has_frames if agent_mask is None else agent_mask
    if agent_mask is None and not bool(has_frames.all()) or bool((real & ~has_frames).any()):
        raise EncoderInputError("an agent has no valid observed frames")
    return encoder(z)


class GraphLocalEncoder(nn.Module):
    """Per-frame ego/neighbor graph attention in each agent's heading frame, then temporal pooling."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.cfg = cfg
        n_mod = len(cfg.modalities)
        self.ego_fuse = nn.Linear(n_mod * d, d)
        n_nbr = (2 if "P" in cfg.modalities else 1) + (1 if "S" in cfg.modalities and cfg.relation_text else 0)
        self.nbr_fuse = nn.Linear(n_nbr * d, d)
        self.edge = MLP(2, d, d)
        self.spatial = Block(d, cfg.n_heads)
        self.temporal = TemporalPool(cfg)

    def ego_tokens(self, z: ModalityEmbeddings) -> torch.Tensor:
        parts = [z.z_x]
        if "P" in z.modalities:
            parts.append(z.z_p)
        if "S" in z.modalities:
            parts.append(z.z_sA.mean(3) + z.z_sR)
        return _masked(self.ego_fuse(torch.cat(parts, -1)), z.mask_x)

    def forward(self, embedder: ModalityEmbedder, batch: SceneBatch, z: ModalityEmbeddings | None = None):
        cfg = self.cfg
        if z is None:
            z = embed_modalities(embedder, batch, cfg.modalities, frame="ego", relation_text=cfg.relation_text)
        ego = self.ego_tokens(z)                                     # [B, N, T, D]
        b, n, t, d = ego.shape
        dtype = ego.dtype
        valid = z.mask_x
        origin, ref = reference_frame(batch)
        ref_i = ref[:, :, None, None]                               # [B, N(i), 1, 1]

        # neighbour j seen from agent i: [B, N(i), N(j), T, ...]
        pos = _masked(batch.positions, valid)
        rel = rotate_to_heading(pos[:, None] - origin[:, :, None, None], ref_i)
        disp = rotate_to_heading(_displacements(pos, valid)[:, None].expand(b, n, n, t, 2), ref_i)
        head = torch.where(valid, batch.heading, torch.zeros((), dtype=dtype))[:, None] - ref_i
        pair_valid = valid[:, None].expand(b, n, n, t)
        parts = [embedder.traj(_masked(embedder.traj_features(rel, disp, head), pair_valid))]
        if "P" in cfg.modalities:
            pmask = (batch.pose_valid & valid)[:, None].expand(b, n, n, t)
            pose = _masked(batch.pose, batch.pose_valid & valid)[:, None].expand(b, n, n, t, -1)
            parts.append(_masked(embedder.pose(_masked(embedder.pose_features(pose, ref_i), pmask)), pmask))
        if "S" in cfg.modalities and cfg.relation_text:
            parts.append(z.z_sA.mean(3)[:, None].expand(b, n, n, t, d))
        v_ji = rotate_to_heading(origin[:, :, None] - origin[:, None, :], ref[:, :, None])  # [B, N, N, 2]
        nbr = self.nbr_fuse(torch.cat(parts, -1)) + self.edge(v_ji / POS_SCALE)[:, :, :, None]

        dist = (origin[:, :, None] - origin[:, None, :]).norm(dim=-1)
        eye = torch.eye(n, dtype=torch.bool)
        near = (dist < cfg.tau) & ~eye & batch.agent_mask[:, None, :] & batch.agent_mask[:, :, None]
        nbr_mask = near[..., None] & valid[:, None] & valid[:, :, None]   # [B, N, N, T]
        nbr = _masked(nbr, nbr_mask)

        query = ego.unsqueeze(3)                                          # [B, N, T, 1, D]
        keys = torch.cat([query, nbr.permute(0, 1, 3, 2, 4)], dim=3)      # [B, N, T, 1+N, D]
        key_mask = torch.cat([torch.ones(b, n, t, 1, dtype=torch.bool), nbr_mask.permute(0, 1, 3, 2)], dim=3)
        x = self.spatial(query, key_mask, keys=keys).squeeze(3)
        q_t = _masked(x, valid)
        return q_t, self.temporal(q_t, valid)


def local_encode_graph(encoder: GraphLocalEncoder, embedder: ModalityEmbedder, batch: SceneBatch):
    """Return (per-frame latents [B, N, T, D], pooled latents [B, N, D])."""
    _check_agents_have_frames(batch)
    return encoder(embedder, batch)


# -- global encoders ----------------------------------------------------------------

class PlainGlobalEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(Block(cfg.d_model, cfg.n_heads) for _ in range(cfg.n_layers))
        self.norm = nn.LayerNorm(cfg.d_model)

    def forward(self, q: torch.Tensor, agent_mask: torch.Tensor) -> torch.Tensor:
        h = q
        for blk in self.blocks:
            h = _masked(blk(h, agent_mask), agent_mask)
        return self.norm(h)


def global_encode_plain(encoder: PlainGlobalEncoder, q: torch.Tensor, agent_mask: torch.Tensor | None = None):
    if agent_mask is None:
        agent_mask = torch.ones(q.shape[:-1], dtype=torch.bool)
    return encoder(q, agent_mask)


class GraphGlobalEncoder(nn.Module):
    """Agent-to-agent graph attention with edge features (v_ji in ego frame, relation text)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.relation_text = cfg.relation_text
        self.edge = MLP(2, d, d)
        self.relation = LookupTextEncoder(cfg.vocab_size, d)
        self.blocks = nn.ModuleList(Block(d, cfg.n_heads) for _ in range(cfg.n_layers))
        self.norm = nn.LayerNorm(d)

    def edge_features(self, origin, ref, relation_ids, agent_mask, relation_text=None):
        use_text = self.relation_text if relation_text is None else relation_text
        v_ji = rotate_to_heading(origin[:, :, None] - origin[:, None, :], ref[:, :, None])
        e = self.edge(v_ji / POS_SCALE)
        if use_text:
            ok = (relation_ids >= 0) & agent_mask[:, None, :] & agent_mask[:, :, None]
            e = e + torch.where(ok[..., None], self.relation(relation_ids), torch.zeros((), dtype=e.dtype))
        return e

    def forward(self, q, origin, ref, relation_ids, agent_mask, relation_text=None):
        b, n, d = q.shape
        edges = self.edge_features(origin, ref, relation_ids, agent_mask, relation_text)  # [B, N(i), N(j), D]
        eye = torch.eye(n, dtype=torch.bool)
        key_mask = torch.cat([torch.ones(b, n, 1, dtype=torch.bool),
                              agent_mask[:, None, :] & ~eye & agent_mask[:, :, None]], dim=2)
        h = q
        for blk in self.blocks:
            keys = torch.cat([h[:, :, None], h[:, None, :, :].expand(b, n, n, d) + edges], dim=2)
            keys = _masked(keys, key_mask)
            h = _masked(blk(h.unsqueeze(2), key_mask, keys=keys).squeeze(2), agent_mask)
        return self.norm(h)


def global_encode_graph(encoder: GraphGlobalEncoder, q, positions, headings, relation_ids,
                        agent_mask=None, relation_text=None):
    """``positions``/``headings`` are each agent's t=0 position [B, N, 2] and reference heading [B, N]."""
    if agent_mask is None:
        agent_mask = torch.ones(q.shape[:-1], dtype=torch.bool)
    return encoder(q, positions, headings, relation_ids, agent_mask, relation_text)


# -- heads and decoder --------------------------------------------------------------------

class GaussianHead(nn.Module):
    def __init__(self, d_model: int, zero_init: bool = False):
        super().__init__()
        self.mean = nn.Linear(d_model, d_model)
        self.logvar = nn.Linear(d_model, d_model)
        if zero_init:
            for lin in (self.mean, self.logvar):
                nn.init.zeros_(lin.weight)
                nn.init.zeros_(lin.bias)

    def forward(self, x):
        return self.mean(x), self.logvar(x).clamp(LOGVAR_MIN, LOGVAR_MAX)


def make_distribution_heads(head: GaussianHead, latent: torch.Tensor):
    return head(latent)


@dataclass
class LatentPacket:
    Q_mean: torch.Tensor
    Q_logvar: torch.Tensor
    H_mean: torch.Tensor
    H_logvar: torch.Tensor

    def detach(self) -> "LatentPacket":
        return LatentPacket(*(getattr(self, f.name).detach() for f in fields(self)))


@dataclass
class ForecastSet:
    proposals: torch.Tensor      # [B, N, F, Tf, 2], world frame
    mode_logits: torch.Tensor    # [B, N, F]
    scales: torch.Tensor | None = None

    @property
    def n_modes(self) -> int:
        return self.proposals.shape[-3]


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig, zero_init: bool = False):
        super().__init__()
        d = cfg.d_model
        self.n_modes, self.t_fut = cfg.n_modes, cfg.t_fut
        self.body = nn.Sequential(nn.Linear(d, 2 * d), nn.ReLU())
        self.offsets = nn.Linear(2 * d, cfg.n_modes * cfg.t_fut * 2)
        self.scales = nn.Linear(2 * d, cfg.n_modes * cfg.t_fut * 2)
        self.logits = nn.Linear(d, cfg.n_modes)
        if zero_init:
            for p in self.parameters():
                nn.init.zeros_(p)

    def forward(self, h, origin, ref=None) -> ForecastSet:
        shape = h.shape[:-1] + (self.n_modes, self.t_fut, 2)
        z = self.body(h)
        off = self.offsets(z).view(shape)
        if ref is not None:
            off = rotate_from_heading(off, ref[..., None, None])
        proposals = origin[..., None, None, :] + off
        scales = F.softplus(self.scales(z).view(shape)) + 1e-3
        return ForecastSet(proposals, self.logits(h), scales)


def decode(decoder: Decoder, h, origin, ref=None) -> ForecastSet:
    return decoder(h, origin, ref)


# -- full model -----------------------------------------------------------------------------

class Forecaster(nn.Module):
    """Embedders -> local encoder -> Q head -> global encoder -> H head -> decoder."""

    def __init__(self, cfg: ModelConfig, text_encoder: nn.Module | None = None):
        super().__init__()
        self.cfg = cfg
        self.embedder = ModalityEmbedder(cfg, text_encoder)
        if cfg.variant == "holistic":
            self.local = HolisticLocalEncoder(cfg)
            self.glob = PlainGlobalEncoder(cfg)
        else:
            self.local = GraphLocalEncoder(cfg)
            self.glob = GraphGlobalEncoder(cfg)
        self.q_head = GaussianHead(cfg.d_model)
        self.h_head = GaussianHead(cfg.d_model)
        self.decoder = Decoder(cfg)

    def encode_local(self, batch: SceneBatch) -> torch.Tensor:
        _check_agents_have_frames(batch)
        cfg = self.cfg
        if cfg.variant == "holistic":
            z = embed_modalities(self.embedder, batch, cfg.modalities, "world", cfg.relation_text)
            return _masked(self.local(z), batch.agent_mask)
        _, q = self.local(self.embedder, batch)
        return _masked(q, batch.agent_mask)

    def forward(self, batch: SceneBatch) -> tuple[LatentPacket, ForecastSet]:
        q = self.encode_local(batch)
        q_mean, q_logvar = self.q_head(q)
        q_mean = _masked(q_mean, batch.agent_mask)
        origin, ref = reference_frame(batch)
        if self.cfg.variant == "holistic":
            h = self.glob(q_mean, batch.agent_mask)
            forecast_ref = None
        else:
            h = self.glob(q_mean, origin, ref, batch.relation_ids, batch.agent_mask)
            forecast_ref = ref
        h_mean, h_logvar = self.h_head(h)
        h_mean = _masked(h_mean, batch.agent_mask)
        forecast = self.decoder(h_mean, origin, forecast_ref)
        return LatentPacket(q_mean, q_logvar, h_mean, h_logvar), forecast
