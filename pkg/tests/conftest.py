import sys
import os
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

import numpy as np
import pytest

from config import TestingConfig
from data import SynthConfig, synth_generate
from models import ModelConfig, SymNet
from train import TrainConfig


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False,
                     help='run the desk-scale training acceptance tests')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: desk-scale training runs (need --runslow)')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


def make_model(dataset, seed=0, **overrides):
    """A SymNet with one-hot attribute embeddings sized for the dataset"""
    values = dict(feature_dim=dataset.feature_dim, attr_dim=dataset.n_attrs,
                  n_attrs=dataset.n_attrs, n_objects=dataset.n_objects)
    values.update(overrides)
    return SymNet(ModelConfig(**values), np.eye(dataset.n_attrs), seed=seed)


@pytest.fixture
def tiny_dataset():
    """3 attributes x 2 objects, 6 records per pair, single attribute"""
    return synth_generate(SynthConfig(n_attrs=3, n_objects=2, feature_dim=8, per_pair_count=6, seed=3))


@pytest.fixture
def unseen_dataset():
    """3 x 3 pairs with 2 held out for zero-shot evaluation"""
    return synth_generate(SynthConfig(n_attrs=3, n_objects=3, feature_dim=8, per_pair_count=6,
                                      n_unseen_pairs=2, seed=5))


@pytest.fixture
def multi_dataset():
    """Multi-attribute records over 5 attributes with attributes 0 and 1 planted together"""
    return synth_generate(SynthConfig(n_attrs=5, n_objects=2, feature_dim=10, per_pair_count=6,
                                      multi_attr=True, corr_structure=[(0, 1)], seed=4))


@pytest.fixture
def testing_cfg(tmp_path):
    return TrainConfig.from_object(TestingConfig).with_overrides({'output_dir': str(tmp_path / 'run')})
