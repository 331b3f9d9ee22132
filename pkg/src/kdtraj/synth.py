"""Synthetic crowd scenes with pose and caption signal, plus the rule-based captioner.

Agents walk at constant preferred speed toward a far goal and are pushed apart
by quadratic repulsion from other agents and obstacles. Every moving agent
carries a planned turn that is executed shortly after the last observed
frame. The turn is invisible in the observed trajectory; it leaks into the
observed data through

* pose: body joint angles are a fixed seeded linear lift of
  (speed, ``pose_signal_gain`` * planned turn, gait phase), squashed into
  [-pi, pi]. ``theta[0]`` is the pelvis (root) yaw in the world frame, the
  only pose component that rotates with the world;
* heading: the stored per-frame heading is the walking direction plus
  ``gaze_lead`` times the planned turn, ramped in over the last observed frames.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .scene import (CAPTION_INDEX, D_POSE, AgentState, CaptionToken, PoseFeature, Scene, Trajectory,
                    wrap_angle)

POSE_LIFT_SEED = 20240917
POSE_LIFT_INPUTS = 5


@dataclass(frozen=True)
class CaptionRules:
    still_threshold: float = 1.5
    slow_threshold: float = 20.0
    obstacle_gate: float = 5.0
    bearing_bins: tuple[float, float] = (30.0, 100.0)

    def __post_init__(self):
        if not 0 < self.still_threshold < self.slow_threshold:
            raise ValueError("need 0 < still_threshold < slow_threshold")
        lo, hi = self.bearing_bins
        if not 0 < lo < hi:
            raise ValueError("bearing bins must be positive and ascending")
        if self.obstacle_gate <= 0:
            raise ValueError("obstacle_gate must be positive")

    @classmethod
    def metric(cls, obstacle_gate: float = 5.0) -> "CaptionRules":
        """Thresholds for positions in meters sampled at 2.5 Hz."""
        return cls(still_threshold=0.06, slow_threshold=0.8, obstacle_gate=obstacle_gate)


def caption_motion(displacement: float, rules: CaptionRules) -> CaptionToken:
    if displacement < 0 or not math.isfinite(displacement):
        raise ValueError(f"displacement must be a finite non-negative number, got {displacement}")
    if displacement < rules.still_threshold:
        text = "The person is standing still."
    elif displacement < rules.slow_threshold:
        text = "The person is walking slowly."
    else:
        text = "The person is walking."
    return CaptionToken.from_text(text)


def _nearest_on_segments(p, segments):
    a, b = segments[:, 0], segments[:, 1]
    ab = b - a
    denom = np.maximum((ab * ab).sum(-1), 1e-12)
    u = np.clip(((p - a) * ab).sum(-1) / denom, 0.0, 1.0)
    return a + u[:, None] * ab


def nearest_obstacle(agent_pos, obstacle_points, obstacle_segments=None):
    """Closest obstacle point to ``agent_pos`` and its distance, or (None, inf)."""
    p = np.asarray(agent_pos, dtype=float)
    cands = [np.asarray(obstacle_points, dtype=float).reshape(-1, 2)]
    if obstacle_segments is not None and len(obstacle_segments):
        cands.append(_nearest_on_segments(p, np.asarray(obstacle_segments, dtype=float).reshape(-1, 2, 2)))
    pts = np.concatenate(cands)
    if len(pts) == 0:
        return None, math.inf
    d = np.linalg.norm(pts - p, axis=1)
    k = int(np.argmin(d))
    return pts[k], float(d[k])


def bearing_deg(heading_vec, obstacle_vec) -> float:
    """Heading angle minus obstacle angle, degrees in (-180, 180].

    Positive values mean the obstacle lies clockwise of the heading, i.e. on
    the right in a y-up frame.
    """
    h = np.asarray(heading_vec, dtype=float)
    o = np.asarray(obstacle_vec, dtype=float)
    cross = h[0] * o[1] - h[1] * o[0]
    dot = h[0] * o[0] + h[1] * o[1]
    sigma = -math.degrees(math.atan2(cross, dot))
    return 180.0 if sigma == -180.0 else sigma


def caption_obstacle(agent_pos, heading_vec, obstacles, rules: CaptionRules,
                     obstacle_segments=None) -> CaptionToken:
    h = np.asarray(heading_vec, dtype=float)
    if h.shape != (2,) or not np.isfinite(h).all() or not np.any(h):
        raise ValueError("heading_vec must be a nonzero finite 2-vector")
    closest, dist = nearest_obstacle(agent_pos, obstacles, obstacle_segments)
    if closest is None or dist >= rules.obstacle_gate:
        return CaptionToken.from_text("There is no obstacle around.")
    obstacle_vec = closest - np.asarray(agent_pos, dtype=float)
    if not np.any(obstacle_vec):
        # standing on the obstacle: no usable bearing
        return CaptionToken.from_text("There is no obstacle in the heading direction of the person.")
    return classify_bearing(bearing_deg(h, obstacle_vec), rules)


def classify_bearing(sigma: float, rules: CaptionRules) -> CaptionToken:
    """Caption for an in-range obstacle at bearing ``sigma`` degrees; bin edges fall through."""
    inner, outer = rules.bearing_bins
    if inner < sigma < outer:
        text = "There is an obstacle on the right."
    elif -inner < sigma < inner:
        text = "There is an obstacle in front."
    elif -outer < sigma < -inner:
        text = "There is an obstacle on the left."
    else:
        text = "There is no obstacle in the heading direction of the person."
    return CaptionToken.from_text(text)


@dataclass(frozen=True)
class GeneratorConfig:
    n_agents: tuple[int, int] = (2, 8)
    group_probability: float = 0.3
    obstacle_count: int = 3
    goal_noise_std: float = 0.5
    pose_signal_gain: float = 1.0
    gaze_lead: float = 0.3
    still_probability: float = 0.1
    speed_range: tuple[float, float] = (0.4, 2.4)
    max_turn: float = math.pi / 2
    arena: float = 12.0
    t_obs: int = 8
    t_fut: int = 12
    frame_rate: float = 2.5
    substeps: int = 4
    d_pose: int = D_POSE
    obstacle_gate: float = 5.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.n_agents
        if lo < 1 or hi < lo:
            raise ValueError(f"n_agents range must satisfy 1 <= lo <= hi, got {self.n_agents}")
        for name in ("group_probability", "still_probability"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.obstacle_count < 0 or self.goal_noise_std < 0 or self.pose_signal_gain < 0:
            raise ValueError("obstacle_count, goal_noise_std and pose_signal_gain must be non-negative")
        if self.d_pose < 2:
            raise ValueError("d_pose must be at least 2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        for key in ("n_agents", "speed_range"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown generator fields: {sorted(unknown)}")
        return cls(**d)


def pose_lift(d_pose: int = D_POSE) -> np.ndarray:
    rng = np.random.default_rng(POSE_LIFT_SEED)
    return rng.normal(0.0, 0.5, size=(d_pose - 1, POSE_LIFT_INPUTS))


def _unit(v):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.where(n > 1e-12, v / np.maximum(n, 1e-12), 0.0)


@dataclass
class _Sim:
    pos: np.ndarray
    speed: np.ndarray
    goal: np.ndarray
    turn: np.ndarray
    turn_frame: np.ndarray
    facing: np.ndarray
    obstacles: np.ndarray
    history: list = field(default_factory=list)

    def velocities(self) -> np.ndarray:
        n = len(self.pos)
        desired = _unit(self.goal - self.pos)
        push = np.zeros_like(self.pos)
        if n > 1:
            diff = self.pos[:, None, :] - self.pos[None, :, :]
            d = np.linalg.norm(diff, axis=-1)
            np.fill_diagonal(d, np.inf)
            mag = np.where(d < 1.5, 2.0 * (1.5 - d) ** 2, 0.0)
            push += (mag[..., None] * _unit(diff)).sum(1)
        if len(self.obstacles):
            diff = self.pos[:, None, :] - self.obstacles[None, :, :]
            d = np.linalg.norm(diff, axis=-1)
            mag = np.where(d < 2.0, 3.0 * (2.0 - d) ** 2, 0.0)
            push += (mag[..., None] * _unit(diff)).sum(1)
        return self.speed[:, None] * _unit(desired + push)


def _spawn(cfg: GeneratorConfig, rng: np.random.Generator):
    n = int(rng.integers(cfg.n_agents[0], cfg.n_agents[1] + 1))
    half = cfg.arena / 2
    pos = np.zeros((n, 2))
    heading = np.zeros(n)
    speed = np.zeros(n)
    turn = np.zeros(n)
    group = np.arange(n)
    i = 0
    while i < n:
        pos[i] = rng.uniform(-half, half, size=2)
        heading[i] = rng.uniform(-math.pi, math.pi)
        speed[i] = 0.0 if rng.random() < cfg.still_probability else rng.uniform(*cfg.speed_range)
        turn[i] = rng.uniform(-cfg.max_turn, cfg.max_turn) if speed[i] > 0 else 0.0
        if i + 1 < n and rng.random() < cfg.group_probability:
            side = np.array([-math.sin(heading[i]), math.cos(heading[i])])
            pos[i + 1] = pos[i] + 0.7 * side
            heading[i + 1], speed[i + 1], turn[i + 1] = heading[i], speed[i], turn[i]
            group[i + 1] = i
            i += 2
        else:
            i += 1
    obstacles = rng.uniform(-half, half, size=(cfg.obstacle_count, 2))
    return n, pos, heading, speed, turn, group, obstacles


def generate_scene(config: GeneratorConfig) -> Scene:
    """Simulate one scene; the output is a pure function of ``config``."""
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    n, pos, heading, speed, turn, group, obstacles = _spawn(cfg, rng)
    goal_noise = rng.normal(0.0, cfg.goal_noise_std, size=(n, 2))
    turn_delay = rng.integers(0, 4, size=n)
    phase0 = rng.uniform(0, 2 * math.pi, size=n)
    for j in range(n):
        if group[j] != j:
            goal_noise[j] = goal_noise[group[j]]
            turn_delay[j] = turn_delay[group[j]]

    far = 60.0
    direction = np.stack([np.cos(heading), np.sin(heading)], -1)
    # one extra frame before the first observation so every observed frame has a displacement
    n_frames = cfg.t_obs + cfg.t_fut + 1
    last_obs = cfg.t_obs
    sim = _Sim(pos=pos.copy(), speed=speed, goal=pos + far * direction + goal_noise, turn=turn,
               turn_frame=last_obs + turn_delay, facing=heading.copy(), obstacles=obstacles)
    dt = 1.0 / cfg.frame_rate / cfg.substeps
    frames = [sim.pos.copy()]
    for f in range(1, n_frames):
        for j in range(n):
            if f - 1 == sim.turn_frame[j] and sim.turn[j] != 0.0:
                ang = heading[j] + sim.turn[j]
                sim.goal[j] = sim.pos[j] + far * np.array([math.cos(ang), math.sin(ang)]) + goal_noise[j]
        for _ in range(cfg.substeps):
            sim.pos = sim.pos + dt * sim.velocities()
        frames.append(sim.pos.copy())
    traj = np.stack(frames, 1)  # [n, n_frames, 2]

    disp = traj[:, 1:] - traj[:, :-1]  # displacement arriving at frame f+1
    obs_disp = disp[:, :cfg.t_obs]
    move_dir = np.where(np.linalg.norm(obs_disp, axis=-1) > 1e-9,
                        np.arctan2(obs_disp[..., 1], obs_disp[..., 0]), heading[:, None])
    ramp = np.clip(1.0 - (cfg.t_obs - 1 - np.arange(cfg.t_obs)) / 3.0, 0.0, 1.0)
    stored_heading = wrap_angle(move_dir + cfg.gaze_lead * turn[:, None] * ramp[None, :])

    lift = pose_lift(cfg.d_pose)
    rules = CaptionRules.metric(cfg.obstacle_gate)
    agents = []
    for j in range(n):
        poses, captions = [], []
        for t in range(cfg.t_obs):
            step = float(np.linalg.norm(obs_disp[j, t]))
            sp = step * cfg.frame_rate
            phase = phase0[j] + 2.0 * t * sp
            feats = np.array([sp / 2.0, cfg.pose_signal_gain * turn[j] / cfg.max_turn,
                              math.sin(phase), math.cos(phase), 1.0])
            theta = np.empty(cfg.d_pose)
            theta[0] = wrap_angle(move_dir[j, t])
            theta[1:] = math.pi * np.tanh(lift @ feats)
            poses.append(PoseFeature(theta, True))
            hv = obs_disp[j, t] if step > 1e-9 else np.array([math.cos(stored_heading[j, t]),
                                                              math.sin(stored_heading[j, t])])
            p = traj[j, t + 1]
            captions.append((caption_motion(step, rules), caption_obstacle(p, hv, obstacles, rules)))
        relations = []
        for k in range(n):
            if k != j and group[k] == group[j]:
                text = ("They are walking together." if speed[j] > 0
                        else "They are standing together and having conversation.")
                relations.append((k, CaptionToken.from_text(text)))
        agents.append(AgentState(
            id=j,
            trajectory_obs=Trajectory(traj[j, 1:cfg.t_obs + 1], np.ones(cfg.t_obs, bool)),
            trajectory_fut=Trajectory(traj[j, cfg.t_obs + 1:], np.ones(cfg.t_fut, bool)),
            heading=stored_heading[j],
            pose=tuple(poses),
            caption=tuple(captions),
            relations=tuple(relations),
        ))
    return Scene(agents=tuple(agents), obstacle_points=obstacles, frame_rate=cfg.frame_rate)


def future_turn(scene: Scene) -> np.ndarray:
    """Realized turn per agent: angle from last observed step to last future step."""
    out = []
    for a in scene.agents:
        v0 = a.trajectory_obs.positions[-1] - a.trajectory_obs.positions[-2]
        v1 = a.trajectory_fut.positions[-1] - a.trajectory_fut.positions[-2]
        if np.linalg.norm(v0) < 1e-9 or np.linalg.norm(v1) < 1e-9:
            out.append(0.0)
        else:
            out.append(float(wrap_angle(math.atan2(v1[1], v1[0]) - math.atan2(v0[1], v0[0]))))
    return np.array(out)


def scene_seeds(base_seed: int, count: int) -> list[int]:
    """Independent per-scene seeds derived from one base seed."""
    children = np.random.SeedSequence(base_seed).spawn(count)
    return [int(c.generate_state(1)[0]) for c in children]


def generate_dataset(config: GeneratorConfig, count: int) -> tuple[list[Scene], list[int]]:
    if count < 1:
        raise ValueError("count must be >= 1")
    seeds = scene_seeds(config.seed, count)
    cfgs = [GeneratorConfig(**{**config.to_dict(), "seed": s}) for s in seeds]
    return [generate_scene(c) for c in cfgs], seeds


__all__ = ["CaptionRules", "GeneratorConfig", "caption_motion", "caption_obstacle", "classify_bearing", "generate_scene",
           "generate_dataset", "future_turn", "nearest_obstacle", "bearing_deg", "CAPTION_INDEX"]
