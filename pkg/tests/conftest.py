import dataclasses

import pytest
import torch

from cfmsep.mmdit import ModelConfig
from cfmsep.synthworld import WorldConfig


@pytest.fixture(scope="session")
def world():
    return WorldConfig()


@pytest.fixture(scope="session")
def tiny_world():
    return WorldConfig(num_classes=3, audio_frames=6, latent_channels=2, video_tokens=2, video_dim=3,
                       sync_tokens=3, sync_dim=2, text_tokens=2, text_dim=3, seed=3)


@pytest.fixture(scope="session")
def tiny_model_cfg(tiny_world):
    return ModelConfig(hidden=8, heads=2, n_joint=2, n_audio=1, time_dim=8, mlp_ratio=2).for_world(tiny_world)


@pytest.fixture
def seeded():
    with torch.random.fork_rng():
        torch.manual_seed(0)
        yield


# ---- acceptance verdicts: one PASS/FAIL line per criterion in the terminal summary

_VERDICTS: dict[int, str] = {}


class Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.failures: list[str] = []
        self.details: list[str] = []

    def check(self, ok: bool, detail: str) -> None:
        self.details.append(detail)
        if not ok:
            self.failures.append(detail)

    def note(self, detail: str) -> None:
        self.details.append(detail)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, AssertionError):
            self.failures.append(f"{exc_type.__name__}: {exc}")
        status = "FAIL" if self.failures or exc is not None else "PASS"
        line = f"criterion {self.number:>2} {status}  {self.title}: " + "; ".join(self.details + (
            [] if not self.failures else ["failed: " + " | ".join(self.failures)]))
        _VERDICTS[self.number] = line
        print(line)
        if exc is None:
            assert not self.failures, line
        return False


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])
