import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lrti_vsr import autodiff as ad
from lrti_vsr.data import SyntheticSpec, generate
from lrti_vsr.model import ModelConfig

settings.register_profile("default", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _fresh_tape():
    ad.active_tape().clear()
    yield
    ad.active_tape().clear()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_cfg():
    return ModelConfig()


@pytest.fixture
def tiny_cfg():
    """Smaller than the toy config; used where 64-bit finite differences must stay cheap."""
    return ModelConfig(modules=2, blocks=1, dim=8, heads=2, window=4, scale=2, recon_channels=2)


def small_video(frames=6, seed=0, size=32, scale=4, sprites=2):
    return generate(SyntheticSpec(frames=frames, height=size, width=size, sprites=sprites, scale=scale, seed=seed))


ACCEPTANCE_RESULTS: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})"
    ACCEPTANCE_RESULTS[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[number])
