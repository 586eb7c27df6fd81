import logging
import os

import pytest

import iogvqa
from iogvqa.config import SyntheticSpec, TrainingConfig
from iogvqa.data_synth import generate
from iogvqa.internal.configuration import Configuration


@pytest.fixture(autouse=True)
def reset_configuration():
    iogvqa._application = None
    old = iogvqa._global_configuration
    iogvqa._global_configuration = config = Configuration(parent=old)
    iogvqa.setup_configuration = config.setup_configuration
    iogvqa.get = config.get
    factory = logging.getLogRecordFactory()
    yield
    logging.setLogRecordFactory(factory)
    iogvqa._global_configuration = old
    iogvqa.setup_configuration = old.setup_configuration
    iogvqa.get = old.get


def pytest_collection_modifyitems(config, items):
    if os.environ.get('IOGVQA_SLOW') == '1':
        return
    skip = pytest.mark.skip(reason="set IOGVQA_SLOW=1 to run")
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope='function')
def small_spec():
    return SyntheticSpec(num_train=48, num_test=24, object_feature_dim=8, seed=3)


@pytest.fixture(scope='function')
def corpus(small_spec):
    return generate(small_spec)


@pytest.fixture(scope='function')
def tiny_config():
    return TrainingConfig(
        epochs=2,
        batch_size=16,
        hidden=8,
        d_a=4,
        d_w=6,
        object_dim=8,
        attention_d=4,
        noise_dim=4,
        teacher_epochs=1,
        val_fraction=0.25,
        log_every=1,
        seed=0,
    )
