import json
from pathlib import Path

import numpy as np
import pytest

FIXTURES = Path(__file__).parent / "fixtures"


def load_corpus() -> list[dict]:
    return json.loads((FIXTURES / "parser_corpus.json").read_text())["molecules"]


@pytest.fixture(scope="session")
def corpus():
    return load_corpus()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_encoder(**overrides):
    from qvt.encoders import EncoderConfig

    base = dict(d_model=8, n_heads=2, n_blocks=1, max_seq_len=16, ffn_dim=8, gnn_hidden=6,
                cnn_channels=(2, 2, 2), image_size=15, fp_bits=64)
    base.update(overrides)
    return EncoderConfig(**base)
