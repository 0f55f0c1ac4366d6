import numpy as np
import pytest

from dualpath.data import SyntheticSpec, synthesize
from dualpath.model import ModelDims

# architecture small enough for sub-second training runs
TINY_ARCH = dict(
    content_code_dim=8,
    emotion_code_dim=8,
    fused_dim=8,
    content_hidden_dim=32,
    emotion_hidden_dim=32,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_dims():
    return ModelDims(
        video_content_dim=12, music_content_dim=10, video_emotion_dim=6, music_emotion_dim=5,
        num_emotion_classes=4, **TINY_ARCH,
    )


def tiny_spec(**kw) -> SyntheticSpec:
    base = dict(
        num_pairs=40, video_content_dim=24, music_content_dim=20,
        video_emotion_dim=8, music_emotion_dim=6, seed=5,
    )
    base.update(kw)
    return SyntheticSpec(**base)


@pytest.fixture
def tiny_data():
    return synthesize(tiny_spec())[0]


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    def record(name: str, ok: bool, detail: str = "") -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
