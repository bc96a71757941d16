from datetime import datetime

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tstar import bundle, synth
from tstar.pipeline import PipelineConfig
from tstar.timegrid import SplitSpec
from tstar.transformer import TrainConfig

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def tiny_config(seed: int = 0, **kw) -> PipelineConfig:
    """A pipeline config small enough for unit tests (seconds, not minutes)."""
    stage = dict(epochs=2, batch_size=64, learning_rate=3e-3, dropout=0.1, n_layers=1, hidden_size=16,
                 steps_per_epoch=4)
    kw.setdefault("stage1", TrainConfig(**stage))
    kw.setdefault("stage2", TrainConfig(**stage))
    return PipelineConfig(lookback1=6, lookback2=8, seed=seed, **kw)


@pytest.fixture(scope="session")
def small_synth():
    return synth.generate(synth.SynthSpec(n_stations=4, days=21, seed=11, n_metro=2,
                                          holidays=(datetime(2023, 1, 16).date(),)))


@pytest.fixture(scope="session")
def small_bundle(small_synth):
    return bundle.from_synth(small_synth)


@pytest.fixture(scope="session")
def small_split():
    return SplitSpec(14 * 96, 21 * 96)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    """Log one acceptance verdict; the lines are repeated in the terminal summary."""
    line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {title} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
