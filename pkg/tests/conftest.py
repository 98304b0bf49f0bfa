import pytest

from rsnet.checks import tiny_config
from rsnet.data import Dataset, SyntheticSceneSpec, generate_dataset
from rsnet.model import build_model

_RSNET_VARS = ("RSNET_SEED", "RSNET_LOG_LEVEL", "LOG_LEVEL", "RSNET_WORKERS", "RSNET_BATCH_SIZE", "RSNET_LR", "RSNET_CONFIG")


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    for name in _RSNET_VARS:
        monkeypatch.delenv(name, raising=False)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_model(tiny_cfg):
    return build_model(tiny_cfg, seed=0)


@pytest.fixture
def scene_spec():
    return SyntheticSceneSpec(image_size=64, ship_count=(1, 1), ship_length=(10.0, 20.0), ship_width=(4.0, 8.0), seed=3)


@pytest.fixture
def small_dataset(tmp_path, scene_spec):
    return Dataset.open(generate_dataset(scene_spec, 4, tmp_path / "data"))
