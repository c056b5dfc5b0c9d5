import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sfseg import FeatureSet, SfsegConfig
from sfseg.synth import MovingObject, SynthSpec, generate

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# (criterion number, passed, detail) rows filled in by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_features(rng, shape, channels=1, f_range=(0.0, 1.0)) -> FeatureSet:
    s = rng.random(shape, dtype=np.float32)
    lo, hi = f_range
    fs = [(lo + (hi - lo) * rng.random(shape)).astype(np.float32) for _ in range(channels)]
    return FeatureSet.from_arrays(s, *fs)


@pytest.fixture
def small_instance():
    spec = SynthSpec((3, 6, 6), MovingObject("box", (3, 3), start=(1.0, 1.0), velocity=(0.0, 1.0)), seed=5)
    return generate(spec)


@pytest.fixture
def default_cfg():
    return SfsegConfig()
