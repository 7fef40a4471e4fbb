import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vitcompress.vit import ViTConfig, ViTModel

settings.register_profile("default", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TINY = ViTConfig(depth=2, dim=16, heads=2, head_dim=8, patch=4, img=16, classes=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def tiny_model():
    return ViTModel.init(TINY, seed=7)


def randomize(model, rng, scale=0.3):
    """Replace every parameter with noise so identities and zeros stop hiding bugs."""
    for _, p in model.named_parameters():
        p.data[...] = rng.normal(0, scale, p.shape).astype(np.float32)
    return model


@pytest.fixture(scope="session")
def desk_data():
    from vitcompress.data import synth_generate
    return synth_generate(0, 1500)


@pytest.fixture(scope="session")
def desk_baseline(desk_data):
    """Desk ViT pretrained on the stripe task; shared by the training tests."""
    from vitcompress.trainer import Schedule, evaluate, pretrain
    from vitcompress.vit import preset
    m = ViTModel.init(preset("desk"), 0)
    report = pretrain(m, desk_data, Schedule.desk(epochs=4), seed=0)
    acc, _ = evaluate(m, desk_data.split("test"))
    return m, acc, report


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
