import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rocl import tensor_core as tc
from rocl.data import generate_toy_dataset
from rocl.model import ModelConfig, init_params

settings.register_profile("rocl", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("rocl")

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture(autouse=True)
def _default_precision():
    tc.set_precision("float32")
    yield
    tc.set_precision("float32")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(channels=(4, 8), input_dims=(3, 8, 8), feature_dim=8, projection_dim=6, num_classes=2)


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config, seed=7)


@pytest.fixture(scope="session")
def tiny_toy():
    return generate_toy_dataset(classes=2, samples_per_class=24, image_size=8, seed=3)
