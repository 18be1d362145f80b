"""
Общие фикстуры тестов: маленький синтетический набор и конфигурация
крошечной модели.
"""
import os
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

os.environ.setdefault('REID_LOG_FILE', os.path.join(tempfile.gettempdir(), 'animalreid-tests.log'))

import numpy as np
import pytest

from nettower import ModelConfig
from toydata import make_toy_dataset


@pytest.fixture(scope='session')
def toy_data(tmp_path_factory):
    """4+4 сущности по 4 изображения 32×32."""
    out_dir = tmp_path_factory.mktemp('toy')
    return make_toy_dataset(str(out_dir), train_entities=4, test_entities=4,
                            images_per_entity=4, size=32, seed=0)


@pytest.fixture
def tiny_config():
    return ModelConfig(backbone='toy', input_size=32, embed_dim=16, dve_dim=8, dropout=0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
