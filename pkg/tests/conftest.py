"""
Pytest configuration and fixtures for pipmm tests.

This file contains shared test configuration, fixtures, and utilities
used across all test modules.
"""

import os
import shutil
import sys
import tempfile

import numpy as np
import pytest

# Add src to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from pipmm.bench.dataset import DataConfig, gen_dataset  # noqa: E402
from pipmm.bench.gradsuite import toy_model, toy_sample  # noqa: E402
from pipmm.config import RunConfig  # noqa: E402
from pipmm.models.adapter import AdapterConfig  # noqa: E402
from pipmm.models.bridge import BridgeConfig  # noqa: E402
from pipmm.models.pipeline import PIPConfig, PIPModel  # noqa: E402
from pipmm.models.text_model import LMConfig, Vocab  # noqa: E402
from pipmm.models.vit import ViTConfig  # noqa: E402


@pytest.fixture
def temp_dir():
    """Create a temporary directory for testing."""
    temp_dir = tempfile.mkdtemp()
    yield temp_dir

    # Cleanup
    shutil.rmtree(temp_dir, ignore_errors=True)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def vocab():
    return Vocab()


def small_pip_config(vocab, adapter_kind='linear_projector', bridge_kind='mlp',
                     compression='attn_topk', max_seq_len=96):
    """32x32 images, 4x4 patch grid, width 16 everywhere."""
    return PIPConfig(
        lm=LMConfig(vocab_size=vocab.size, d_llm=16, n_layers=1, n_heads=2,
                    max_seq_len=max_seq_len),
        vit=ViTConfig(image_height=32, image_width=32, patch=8, width=16, layers=2, heads=2),
        bridge=BridgeConfig(kind=bridge_kind, depth=2, d_in=16, d_out=16),
        adapter=AdapterConfig(kind=adapter_kind, d_vis=16, d_llm=16, num_queries=4, heads=2),
        max_answer_len=8,
        compression=compression,
    )


@pytest.fixture
def make_pip_config():
    return small_pip_config


@pytest.fixture
def pip_model(vocab):
    """Small untrained PIPModel with a linear projector."""
    return PIPModel(small_pip_config(vocab), vocab, seed=0)


@pytest.fixture
def resampler_model(vocab):
    return PIPModel(small_pip_config(vocab, 'query_resampler'), vocab, seed=0)


@pytest.fixture
def toy():
    """Gradient-check model at toy dimensions plus a matching sample."""
    return toy_model(0), toy_sample(0)


@pytest.fixture
def corpus():
    return gen_dataset(DataConfig(), seed=7, n=16)


@pytest.fixture
def small_run_config():
    """Run config small enough for end-to-end CLI tests."""
    return RunConfig.load(None, [
        'model.vit_width=16', 'model.d_llm=16', 'model.vit_layers=1', 'model.llm_layers=1',
        'model.bridge_depth=2', 'model.max_answer_len=32',
        'train.backbone_epochs=1', 'train.pretrain_epochs=1', 'train.finetune_epochs=1',
        'train.batch_size=4', 'train.eval_limit=4',
        'data.n=4', 'data.eval_n=4',
        'eval.seeds=0', 'eval.cost_runs=1', 'eval.max_new=2',
    ])


@pytest.fixture
def small_config_file(temp_dir, small_run_config):
    path = os.path.join(temp_dir, 'run.ini')
    with open(path, 'w', encoding='utf-8') as f:
        f.write(small_run_config.render())
    return path


# Test markers
def pytest_configure(config):
    """Configure pytest markers."""
    config.addinivalue_line(
        "markers", "slow: marks tests as slow (deselect with '-m \"not slow\"')"
    )
    config.addinivalue_line(
        "markers", "integration: marks tests that run the CLI end to end"
    )
