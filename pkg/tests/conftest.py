import numpy as np
import pytest

from bottleneck.data.synthetic import build_vocab, generate_synthetic
from bottleneck.model.backbone import Backbone
from bottleneck.model.processor import CacheProcessor
from bottleneck.schemas.config import BackboneConfig, ProcessorConfig, SynthTaskSpec


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return BackboneConfig(
        n_layers=2, n_heads=2, d_model=16, d_ff=32, vocab_size=32, max_positions=128
    )


@pytest.fixture
def backbone(tiny_config):
    return Backbone(tiny_config, seed=0)


@pytest.fixture
def processor_config():
    return ProcessorConfig(d_p=8, d_p_ff=16, heads=2, k=4)


@pytest.fixture
def processor(processor_config, tiny_config):
    return CacheProcessor(processor_config, tiny_config, seed=0)


@pytest.fixture
def task_spec():
    return SynthTaskSpec(modulus=5, chain_length=2, n_distractors=2, n_variables=3, vocab_size=32)


@pytest.fixture
def vocab(task_spec):
    return build_vocab(task_spec)


@pytest.fixture
def traces(task_spec):
    return generate_synthetic(task_spec, 8)


@pytest.fixture
def open_gate():
    """Give a processor non-zero output projections and a half-open gate."""

    def _open(processor: CacheProcessor, seed: int = 0, scale: float = 0.1) -> CacheProcessor:
        rng = np.random.default_rng(seed)
        for layer in processor.params.layers:
            layer.w_out.data = rng.normal(0.0, scale, layer.w_out.shape).astype(layer.w_out.dtype)
            layer.gate.data = np.zeros_like(layer.gate.data)
        return processor

    return _open
