import numpy as np
import pytest
import torch
from torch import nn
from hypothesis import HealthCheck, settings

from kinetraj.model import HybridModel, ModelConfig
from kinetraj.scenario import MapGrid, Scenario, make_track
from kinetraj.synthetic import GeneratorConfig, generate_synthetic

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

torch.set_num_threads(1)

# acceptance outcomes, printed once in the terminal summary
ACCEPTANCE: dict = {}


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def synth_small():
    cfg = GeneratorConfig(counts={"cv": 2, "turn": 2, "accel": 2, "s_curve": 2})
    return generate_synthetic(cfg, seed=3)


@pytest.fixture(scope="session")
def tiny_model_config():
    return dict(d_model=16, heads=2, ff_dim=32, encoder_layers=1, merge_layers=1,
                map_channels=(4, 8, 8, 16), raster_size=32)


def tiny_model(kind="CTRA", dtype=torch.float64, seed=0, **kw):
    torch.manual_seed(seed)
    cfg = ModelConfig(motion_model=kind, d_model=16, heads=2, ff_dim=32, encoder_layers=1,
                      merge_layers=1, map_channels=(4, 8, 8, 16), raster_size=32, **kw)
    return HybridModel(cfg).to(dtype)


def straight_scenario(speed=2.0, steps=50, split=20, freq=10.0, heading=0.0, others=()):
    """Ego on a straight line through the origin; ``others`` are (dx, dy) offsets
    of parallel agents."""
    t = np.arange(steps) / freq
    d = speed * t
    xy = np.column_stack([d * np.cos(heading), d * np.sin(heading)])
    tracks = [make_track("ego", "ego", range(steps), xy, steps, freq)]
    for i, (dx, dy) in enumerate(others):
        tracks.append(make_track(f"a{i}", "agent", range(steps), xy + [dx, dy], steps, freq))
    grid = MapGrid.all_driveable(np.concatenate([tr.positions for tr in tracks]))
    return Scenario("straight", freq, tuple(tracks), 0, grid, split)


class ConstantActionModel(nn.Module):
    """Stand-in network that emits one fixed action for every agent and step."""

    def __init__(self, kind="CTRA", action=(0.0, 0.0)):
        super().__init__()
        self.config = ModelConfig(motion_model=kind)
        self.action = nn.Parameter(torch.tensor(action, dtype=torch.float64))

    def forward(self, batch, steps):
        b, m = batch["agent_mask"].shape
        acts = self.action.expand(b, m, steps, 2)
        return {"actions": acts, "trajectory": torch.zeros(b, m, steps, 2, dtype=acts.dtype)}
