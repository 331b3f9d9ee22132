"""Scene domain types, observation masking and the on-disk scene format.

Scenes are stored as one JSON document per file. Top-level fields:

    schema_version  int, currently 1
    frame_rate      float (Hz)
    obstacles       {"points": [[x, y], ...], "segments": [[[x0, y0], [x1, y1]], ...]}
    agents          list of agent records

Each agent record holds ``id``, ``obs`` / ``fut`` (``{"positions": [[x, y]...],
"valid": [bool...]}``), ``heading`` (radians per observed frame), ``pose``
(``{"theta": [[...]...], "available": [bool...]}``), ``caption`` (per observed
frame, a list of template ids) and ``relations`` (``[[neighbor_id, template_id], ...]``).
Caption text is not stored; it is recovered from ``CAPTION_VOCAB``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SCHEMA_VERSION = 1
T_OBS = 8
T_FUT = 12
D_POSE = 72
CAPTIONS_PER_FRAME = 2

MOTION_CAPTIONS = (
    "The person is standing still.",
    "The person is walking slowly.",
    "The person is walking.",
)
OBSTACLE_CAPTIONS = (
    "There is an obstacle on the right.",
    "There is an obstacle in front.",
    "There is an obstacle on the left.",
    "There is no obstacle in the heading direction of the person.",
    "There is no obstacle around.",
)
RELATION_CAPTIONS = (
    "They are walking together.",
    "They are standing together and having conversation.",
)
CAPTION_VOCAB: tuple[str, ...] = MOTION_CAPTIONS + OBSTACLE_CAPTIONS + RELATION_CAPTIONS
CAPTION_INDEX = {text: i for i, text in enumerate(CAPTION_VOCAB)}


class SceneError(ValueError):
    pass


class InvalidMaskError(ValueError):
    pass


@dataclass(frozen=True)
class CaptionToken:
    template_id: int
    text: str

    def __post_init__(self):
        if not 0 <= self.template_id < len(CAPTION_VOCAB):
            raise SceneError(f"template_id {self.template_id} outside caption vocabulary")
        if CAPTION_VOCAB[self.template_id] != self.text:
            raise SceneError(f"text does not match template {self.template_id}: {self.text!r}")

    @classmethod
    def from_id(cls, template_id: int) -> "CaptionToken":
        if not 0 <= template_id < len(CAPTION_VOCAB):
            raise SceneError(f"template_id {template_id} outside caption vocabulary")
        return cls(int(template_id), CAPTION_VOCAB[template_id])

    @classmethod
    def from_text(cls, text: str) -> "CaptionToken":
        return cls(CAPTION_INDEX[text], text)


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Trajectory:
    """Positions in meters, world frame, with a per-frame validity flag."""

    positions: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "positions", _frozen(self.positions, np.float64))
        object.__setattr__(self, "valid", _frozen(self.valid, bool))
        if self.positions.ndim != 2 or self.positions.shape[1] != 2:
            raise SceneError(f"positions must be [T, 2], got {self.positions.shape}")
        if self.valid.shape != (len(self.positions),):
            raise SceneError("valid must be a [T] vector matching positions")

    def __len__(self):
        return len(self.positions)


@dataclass(frozen=True)
class PoseFeature:
    theta: np.ndarray
    available: bool = True

    def __post_init__(self):
        object.__setattr__(self, "theta", _frozen(self.theta, np.float64))


@dataclass(frozen=True)
class AgentState:
    id: int
    trajectory_obs: Trajectory
    trajectory_fut: Trajectory
    heading: np.ndarray
    pose: tuple[PoseFeature, ...]
    caption: tuple[tuple[CaptionToken, ...], ...]
    relations: tuple[tuple[int, CaptionToken], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "heading", _frozen(self.heading, np.float64))
        object.__setattr__(self, "pose", tuple(self.pose))
        object.__setattr__(self, "caption", tuple(tuple(c) for c in self.caption))
        object.__setattr__(self, "relations", tuple((int(j), tok) for j, tok in self.relations))


@dataclass(frozen=True)
class Scene:
    agents: tuple[AgentState, ...]
    obstacle_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    obstacle_segments: np.ndarray = field(default_factory=lambda: np.zeros((0, 2, 2)))
    frame_rate: float = 2.5

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))
        object.__setattr__(self, "obstacle_points", _frozen(np.reshape(self.obstacle_points, (-1, 2)), np.float64))
        object.__setattr__(self, "obstacle_segments", _frozen(np.reshape(self.obstacle_segments, (-1, 2, 2)), np.float64))

    @property
    def t_obs(self) -> int:
        return len(self.agents[0].trajectory_obs)

    @property
    def t_fut(self) -> int:
        return len(self.agents[0].trajectory_fut)


@dataclass(frozen=True)
class ObservationMask:
    keep_last: int

    def __post_init__(self):
        if self.keep_last < 1:
            raise InvalidMaskError(f"keep_last must be >= 1, got {self.keep_last}")


@dataclass(frozen=True)
class ModalityBundle:
    """Dense per-scene arrays for N agents.

    Shapes: positions [N, T_p, 2], valid [N, T_p], heading [N, T_p],
    pose [N, T_p, D_pose], pose_valid [N, T_p], caption_ids [N, T_p, C],
    caption_valid [N, T_p], relation_ids [N, N] (-1 where no relation),
    future [N, T_f, 2], future_valid [N, T_f].
    """

    positions: np.ndarray
    valid: np.ndarray
    heading: np.ndarray
    pose: np.ndarray
    pose_valid: np.ndarray
    caption_ids: np.ndarray
    caption_valid: np.ndarray
    relation_ids: np.ndarray
    future: np.ndarray
    future_valid: np.ndarray

    @property
    def n_agents(self) -> int:
        return self.positions.shape[0]

    @property
    def t_obs(self) -> int:
        return self.positions.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


MASKED_FIELDS = ("positions", "heading", "pose", "caption_ids")


def apply_mask(bundle: ModalityBundle, mask: ObservationMask, pad: str = "zero") -> ModalityBundle:
    """Keep only the last ``mask.keep_last`` observed frames valid.

    ``pad="zero"`` zeroes masked payloads; ``pad="repeat"`` fills them with the
    first kept frame. Validity flags are cleared either way.
    """
    t = bundle.t_obs
    if mask.keep_last > t:
        raise InvalidMaskError(f"keep_last={mask.keep_last} exceeds observed length {t}")
    if pad not in ("zero", "repeat"):
        raise ValueError(f"unknown pad mode {pad!r}")
    cut = t - mask.keep_last
    if cut == 0:
        return bundle
    out = {}
    for name in MASKED_FIELDS:
        a = getattr(bundle, name).copy()
        if pad == "zero":
            a[:, :cut] = 0
        else:
            a[:, :cut] = a[:, cut:cut + 1]
        out[name] = a
    for name in ("valid", "pose_valid", "caption_valid"):
        a = getattr(bundle, name).copy()
        a[:, :cut] = False
        out[name] = a
    return replace(bundle, **out)


def bundle_from_scene(scene: Scene) -> ModalityBundle:
    agents = scene.agents
    n = len(agents)
    index = {a.id: i for i, a in enumerate(agents)}
    relation_ids = np.full((n, n), -1, dtype=np.int64)
    for i, a in enumerate(agents):
        for j, tok in a.relations:
            relation_ids[i, index[j]] = tok.template_id
    n_caps = max((len(c) for a in agents for c in a.caption), default=CAPTIONS_PER_FRAME)
    caption_ids = np.zeros((n, scene.t_obs, n_caps), dtype=np.int64)
    caption_valid = np.zeros((n, scene.t_obs), dtype=bool)
    for i, a in enumerate(agents):
        for t, toks in enumerate(a.caption):
            if toks:
                caption_ids[i, t, :len(toks)] = [tok.template_id for tok in toks]
                caption_valid[i, t] = a.trajectory_obs.valid[t]
    pose = np.stack([np.stack([p.theta for p in a.pose]) for a in agents])
    pose_valid = np.array([[p.available for p in a.pose] for a in agents]) & np.stack(
        [a.trajectory_obs.valid for a in agents])
    valid = np.stack([a.trajectory_obs.valid for a in agents])
    positions = np.where(valid[..., None], np.stack([a.trajectory_obs.positions for a in agents]), 0.0)
    return ModalityBundle(
        positions=positions,
        valid=valid,
        heading=np.stack([a.heading for a in agents]),
        pose=np.where(pose_valid[..., None], pose, 0.0),
        pose_valid=pose_valid,
        caption_ids=caption_ids,
        caption_valid=caption_valid,
        relation_ids=relation_ids,
        future=np.stack([a.trajectory_fut.positions for a in agents]),
        future_valid=np.stack([a.trajectory_fut.valid for a in agents]),
    )


def validate_scene(scene: Scene, t_obs: int | None = None, t_fut: int | None = None) -> list[str]:
    """Return one message per violated invariant; an empty list means the scene is valid."""
    problems: list[str] = []
    if not scene.agents:
        return ["scene: no agents"]
    t_obs = t_obs or len(scene.agents[0].trajectory_obs)
    t_fut = t_fut or len(scene.agents[0].trajectory_fut)
    ids = [a.id for a in scene.agents]
    if len(set(ids)) != len(ids):
        problems.append("scene: duplicate agent ids")
    known = set(ids)
    for a in scene.agents:
        tag = f"agent {a.id}"
        for name, traj, t_expect in (("trajectory_obs", a.trajectory_obs, t_obs),
                                     ("trajectory_fut", a.trajectory_fut, t_fut)):
            if len(traj) != t_expect:
                problems.append(f"{tag}: {name} has {len(traj)} frames, expected {t_expect}")
            bad = np.flatnonzero(traj.valid & ~np.isfinite(traj.positions).all(axis=1))
            for t in bad:
                problems.append(f"{tag}: {name} frame {t} is valid but not finite")
        if a.heading.shape != (t_obs,):
            problems.append(f"{tag}: heading has shape {a.heading.shape}, expected ({t_obs},)")
        elif not (np.isfinite(a.heading).all() and (a.heading >= -math.pi).all() and (a.heading < math.pi).all()):
            problems.append(f"{tag}: heading outside [-pi, pi)")
        if len(a.pose) != t_obs:
            problems.append(f"{tag}: pose has {len(a.pose)} frames, expected {t_obs}")
        for t, p in enumerate(a.pose):
            if p.available and not (np.isfinite(p.theta).all() and (np.abs(p.theta) <= math.pi).all()):
                problems.append(f"{tag}: pose frame {t} not finite or outside [-pi, pi]")
        if len(a.caption) != t_obs:
            problems.append(f"{tag}: caption has {len(a.caption)} frames, expected {t_obs}")
        for j, _tok in a.relations:
            if j == a.id:
                problems.append(f"{tag}: relations contain a self-relation")
            elif j not in known:
                problems.append(f"{tag}: relation references missing agent {j}")
    return problems


def wrap_angle(a):
    """Wrap angles into [-pi, pi)."""
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


# -- serialization ---------------------------------------------------------

def _traj_to_json(t: Trajectory) -> dict:
    return {"positions": t.positions.tolist(), "valid": t.valid.tolist()}


def scene_to_dict(scene: Scene) -> dict:
    agents = []
    for a in scene.agents:
        agents.append({
            "id": a.id,
            "obs": _traj_to_json(a.trajectory_obs),
            "fut": _traj_to_json(a.trajectory_fut),
            "heading": a.heading.tolist(),
            "pose": {"theta": [p.theta.tolist() for p in a.pose],
                     "available": [bool(p.available) for p in a.pose]},
            "caption": [[tok.template_id for tok in toks] for toks in a.caption],
            "relations": [[j, tok.template_id] for j, tok in a.relations],
        })
    return {
        "schema_version": SCHEMA_VERSION,
        "frame_rate": scene.frame_rate,
        "obstacles": {"points": scene.obstacle_points.tolist(),
                      "segments": scene.obstacle_segments.tolist()},
        "agents": agents,
    }


def scene_from_dict(d: dict) -> Scene:
    version = d.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SceneError(f"unsupported scene schema_version {version!r}")
    agents = []
    for r in d["agents"]:
        agents.append(AgentState(
            id=int(r["id"]),
            trajectory_obs=Trajectory(np.array(r["obs"]["positions"], dtype=float).reshape(-1, 2), r["obs"]["valid"]),
            trajectory_fut=Trajectory(np.array(r["fut"]["positions"], dtype=float).reshape(-1, 2), r["fut"]["valid"]),
            heading=r["heading"],
            pose=tuple(PoseFeature(th, av) for th, av in zip(r["pose"]["theta"], r["pose"]["available"])),
            caption=tuple(tuple(CaptionToken.from_id(i) for i in toks) for toks in r["caption"]),
            relations=tuple((j, CaptionToken.from_id(i)) for j, i in r["relations"]),
        ))
    obstacles = d.get("obstacles", {})
    return Scene(
        agents=tuple(agents),
        obstacle_points=np.array(obstacles.get("points", []), dtype=float).reshape(-1, 2),
        obstacle_segments=np.array(obstacles.get("segments", []), dtype=float).reshape(-1, 2, 2),
        frame_rate=float(d.get("frame_rate", 2.5)),
    )


def save_scene(scene: Scene, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene), separators=(",", ":")))


def load_scene(path: str | Path) -> Scene:
    return scene_from_dict(json.loads(Path(path).read_text()))


def load_scenes(directory: str | Path) -> list[Scene]:
    files = sorted(Path(directory).glob("scene_*.json"))
    if not files:
        raise FileNotFoundError(f"no scene_*.json files in {directory}")
    return [load_scene(f) for f in files]


def rotate_scene(scene: Scene, angle: float, translation: Sequence[float] = (0.0, 0.0)) -> Scene:
    """Rigidly transform a whole scene (positions, headings, pose root yaw, obstacles)."""
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    shift = np.asarray(translation, dtype=float)

    def tf(p):
        return p @ rot.T + shift

    agents = []
    for a in scene.agents:
        poses = []
        for p in a.pose:
            th = p.theta.copy()
            th[0] = wrap_angle(th[0] + angle)
            poses.append(PoseFeature(th, p.available))
        agents.append(replace(
            a,
            trajectory_obs=Trajectory(tf(a.trajectory_obs.positions), a.trajectory_obs.valid),
            trajectory_fut=Trajectory(tf(a.trajectory_fut.positions), a.trajectory_fut.valid),
            heading=wrap_angle(a.heading + angle),
            pose=tuple(poses),
        ))
    return replace(scene, agents=tuple(agents), obstacle_points=tf(scene.obstacle_points),
                   obstacle_segments=tf(scene.obstacle_segments))


def iter_bundles(scenes: Iterable[Scene]) -> list[ModalityBundle]:
    return [bundle_from_scene(s) for s in scenes]
