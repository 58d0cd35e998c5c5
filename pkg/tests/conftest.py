"""Test fixtures."""
import os
import json
from datetime import timedelta

import pytest
import torch
from hypothesis import settings, Verbosity

from data import SceneGenConfig, build_protocol, generate_dataset, make_catalog
from model import ModelConfig, add_step, init_model


# register test flags for hypothesis; allows e.g. extended deadlines on CI
settings.register_profile("ci", deadline=timedelta(milliseconds=5000), max_examples=200)
settings.register_profile("dev", max_examples=20, deadline=None)
settings.register_profile("debug", max_examples=10, verbosity=Verbosity.verbose, deadline=None)
settings.load_profile(os.getenv(u"HYPOTHESIS_PROFILE", "dev"))

GOLDEN_DIR = os.path.join(os.path.dirname(__file__), 'golden')


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow end-to-end tests")
    parser.addoption("--update-golden", action="store_true", default=False, help="rewrite golden files")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def golden(request):
    """Compare a JSON-able value with tests/golden/<name>.json; --update-golden rewrites it."""
    update = request.config.getoption("--update-golden")

    def check(name, value):
        path = os.path.join(GOLDEN_DIR, f"{name}.json")
        if update or not os.path.exists(path):
            os.makedirs(GOLDEN_DIR, exist_ok=True)
            with open(path, 'w') as f:
                json.dump(value, f, indent=2, sort_keys=True)
            if not update:
                pytest.fail(f"golden file {name}.json was missing and has been recorded; "
                            f"review and commit it (or rerun with --update-golden)")
            return
        with open(path) as f:
            assert json.load(f) == json.loads(json.dumps(value))

    return check


@pytest.fixture
def tiny_scene():
    return SceneGenConfig(image_size=(32, 32), num_thing_classes=4, num_stuff_classes=2,
                          max_instances_per_image=2, seed=7)


@pytest.fixture
def tiny_catalog(tiny_scene):
    return make_catalog(tiny_scene)


@pytest.fixture
def tiny_dataset(tiny_scene):
    return generate_dataset(tiny_scene, 12)


@pytest.fixture
def tiny_protocol(tiny_catalog):
    return build_protocol(tiny_catalog, 4, 1)


@pytest.fixture
def tiny_model_config():
    return ModelConfig(image_size=(32, 32), embed_dim=8, num_layers=2, num_heads=2, pixel_embed_dim=8,
                       backbone_channels=(4, 8, 8), ffn_dim=16, mlp_hidden=8, mlp_depth=1, min_prompts=3)


@pytest.fixture
def tiny_model(tiny_model_config, tiny_catalog, tiny_protocol):
    return init_model(tiny_model_config, tiny_catalog, tiny_protocol, seed=0)


@pytest.fixture
def toy_model64(tiny_model_config, tiny_catalog, tiny_protocol):
    """float64 model holding two steps, base frozen."""
    state = init_model(tiny_model_config, tiny_catalog, tiny_protocol, seed=0).double()
    add_step(state, tiny_protocol.classes(2), seed=1)
    assert state.dtype == torch.float64
    return state
