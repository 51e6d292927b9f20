import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from attnprune.config import ModelConfig


@pytest.fixture
def toy_config():
    return ModelConfig(layers=8, dim=64, heads=4, mlp_dim=256, vocab=512, max_seq=128)


@pytest.fixture
def small_config():
    return ModelConfig(layers=4, dim=32, heads=2, mlp_dim=64, vocab=128, max_seq=64)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def write_checkpoint(tmp_path):
    counter = [0]

    def _write(data: bytes) -> Path:
        counter[0] += 1
        path = tmp_path / f"ckpt_{counter[0]}.safetensors"
        path.write_bytes(data)
        return path

    return _write
