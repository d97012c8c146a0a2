import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from canonlift.scenes import DataConfig, generate_dataset
from canonlift.trainer import TrainConfig

settings.register_profile(
    "default", deadline=None, max_examples=50,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")


def small_data_config(**kw):
    base = dict(classes=["table_rot4", "bench_rot2"], count=2, grid=8, input_size=24,
                supervision_size=16, oracle_points=1024)
    base.update(kw)
    return DataConfig(**base)


def small_train_config(**kw):
    base = dict(grid=8, feature_dim=4, coord_hidden=16, feature_hidden=8, refine_hidden=8,
                head_hidden=8, ray_grid=8, depth_samples=6, output_size=16, epochs=1,
                batch_size=2, samples=4)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def small_data():
    return generate_dataset(small_data_config())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def record_criterion(n: int, ok: bool, detail: str) -> bool:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
