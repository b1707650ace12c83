import numpy as np
import pytest

from bottleneck.data.synthetic import generate_splits
from bottleneck.enums import Schedule, Stage
from bottleneck.model.backbone import Backbone
from bottleneck.model.processor import CacheProcessor
from bottleneck.schemas.config import BackboneConfig, ProcessorConfig, SynthTaskSpec, TrainConfig
from bottleneck.training.loop import train_loop
from bottleneck.training.processor_train import next_step_cross_entropy


@pytest.mark.slow
def test_trained_processor_lowers_next_step_loss(tmp_path):
    task = SynthTaskSpec(modulus=7, chain_length=3, n_distractors=4, n_variables=4, vocab_size=48)
    train, heldout = generate_splits(task, 600, 60)
    config = BackboneConfig(n_layers=4, n_heads=4, d_model=64, d_ff=256, vocab_size=48, max_positions=256)

    closed, trained = [], []
    for seed in range(3):
        backbone = Backbone(config, seed=seed)
        sft = TrainConfig(
            stage=Stage.SFT, epochs=6, batch_size=16, lr=3e-3, schedule=Schedule.WARMUP_COSINE, seed=seed
        )
        train_loop(sft, backbone, train, tmp_path / f"sft{seed}")

        processor_config = ProcessorConfig(d_p=32, d_p_ff=64, heads=2, k=16)
        closed.append(
            next_step_cross_entropy(backbone, CacheProcessor(processor_config, config, seed=seed), heldout)
        )
        processor = CacheProcessor(processor_config, config, seed=seed)
        stage = TrainConfig(stage=Stage.PROCESSOR, epochs=1, batch_size=8, lr=1e-3, k=16, seed=seed)
        train_loop(stage, backbone, train, tmp_path / f"proc{seed}", processor)
        trained.append(next_step_cross_entropy(backbone, processor, heldout))

    assert np.median(trained) <= 0.99 * np.median(closed)
