import numpy as np
import pytest
import torch

from riskcause.model import DrivingModel, ModelConfig
from riskcause.scene import BBox, Episode, Label, ObjectClass, Scenario, Tracklet
from riskcause.synthgen import GeneratorConfig, sample_episode


def small_config(**overrides) -> ModelConfig:
    kw = dict(
        backbone=((6, 3, 2), (8, 3, 2), (8, 3, 2), (8, 3, 1)),
        roi_size=(2, 2),
        hidden_size=8,
        head_widths=(12, 6),
    )
    kw.update(overrides)
    return ModelConfig(**kw)


def make_model(seed: int = 0, dtype=torch.float32, **overrides) -> DrivingModel:
    torch.manual_seed(seed)
    model = DrivingModel(small_config(**overrides)).to(dtype)
    model.eval()
    return model


def toy_episode(T: int = 3, H: int = 96, W: int = 96, seed: int = 0, boxes=None, label=Label.GO, cause_id=None) -> Episode:
    rng = np.random.default_rng(seed)
    frames = rng.random((T, H, W, 3)).astype(np.float32)
    if boxes is None:
        boxes = {1: (10, 10, 20, 20), 2: (40, 50, 52, 58), 3: (70, 20, 80, 34)}
    tracks = [
        Tracklet(i, ObjectClass.VEHICLE, {t: BBox(x1 + t, y1, x2 + t, y2) for t in range(T)})
        for i, (x1, y1, x2, y2) in boxes.items()
    ]
    return Episode(frames, tuple(tracks), label, cause_id, Scenario.FREE_FLOW, episode_id=f"toy_{seed}")


@pytest.fixture(scope="session")
def generated():
    gen = GeneratorConfig()
    return [sample_episode(gen, "test", i, 123) for i in range(16)]


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
