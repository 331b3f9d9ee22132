import numpy as np
import pytest
import torch

from kdtraj.scene import (AgentState, CaptionToken, PoseFeature, Scene, Trajectory, bundle_from_scene)
from kdtraj.synth import GeneratorConfig, generate_dataset


def straight_agent(agent_id, start, velocity, t_obs=8, t_fut=12, relations=()):
    start = np.asarray(start, float)
    velocity = np.asarray(velocity, float)
    steps = np.arange(t_obs + t_fut)[:, None]
    path = start + steps * velocity
    heading = np.full(t_obs, np.arctan2(velocity[1], velocity[0]))
    theta = np.zeros(72)
    theta[0] = heading[0]
    return AgentState(
        id=agent_id,
        trajectory_obs=Trajectory(path[:t_obs], np.ones(t_obs, bool)),
        trajectory_fut=Trajectory(path[t_obs:], np.ones(t_fut, bool)),
        heading=heading,
        pose=tuple(PoseFeature(theta) for _ in range(t_obs)),
        caption=tuple((CaptionToken.from_id(1), CaptionToken.from_id(7)) for _ in range(t_obs)),
        relations=tuple(relations),
    )


@pytest.fixture
def two_agent_scene():
    rel = CaptionToken.from_text("They are walking together.")
    a = straight_agent(0, (0.0, 0.0), (0.4, 0.0), relations=[(1, rel)])
    b = straight_agent(1, (0.0, 0.7), (0.4, 0.0), relations=[(0, rel)])
    return Scene(agents=(a, b), obstacle_points=np.array([[3.0, -1.0]]))


@pytest.fixture(scope="session")
def synthetic_scenes():
    scenes, _ = generate_dataset(GeneratorConfig(seed=7), 24)
    return scenes


@pytest.fixture(scope="session")
def synthetic_bundles(synthetic_scenes):
    return [bundle_from_scene(s) for s in synthetic_scenes]


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


ACCEPTANCE = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line: call with (ok, detail)."""
    name = request.node.name

    def record(ok, detail=""):
        ACCEPTANCE.append((name, bool(ok), detail))
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
