import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from ..core.config import settings
from ..enums import Stage
from ..harness.checkpoint import save_backbone, save_processor
from ..model.backbone import Backbone
from ..model.processor import CacheProcessor
from ..schemas.config import BaselineConfig, TrainConfig
from ..schemas.trace import Trace
from .optim import Adam, learning_rate
from .processor_train import processor_train_step
from .sft import prepare_sft_traces, sft_step

logger = logging.getLogger(__name__)

EpochCallback = Callable[[int], None]


@dataclass
class TrainResult:
    checkpoints: list[Path] = field(default_factory=list)
    metrics_path: Optional[Path] = None
    losses: list[float] = field(default_factory=list)


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _metrics_header(processor: Optional[CacheProcessor]) -> list[str]:
    gates = [] if processor is None else [f"sigma_g_{i}" for i in range(len(processor.params.layers))]
    return ["step", "epoch", "loss", "lr", *gates, "wall_time"]


def train_loop(
    config: TrainConfig,
    backbone: Backbone,
    traces: Sequence[Trace],
    output_dir: Path,
    processor: Optional[CacheProcessor] = None,
    baseline: Optional[BaselineConfig] = None,
    on_epoch_end: Optional[EpochCallback] = None,
) -> TrainResult:
    """
    Train the backbone (SFT) or the processor on a frozen backbone.

    A checkpoint is written before the first epoch and after every
    `checkpoint_every` epochs; one metrics row is appended per optimizer step.
    Batch order is fully determined by `config.seed`.

    Args:
        config (TrainConfig): Stage, optimizer and schedule settings.
        backbone (Backbone): Backbone to train or to keep frozen.
        traces (Sequence[Trace]): Training traces.
        output_dir (Path): Directory for checkpoints and the metrics CSV.
        processor (CacheProcessor | None, optional): Required for the processor stage.
        baseline (BaselineConfig | None, optional): Token-mediated baseline for SFT.
        on_epoch_end (EpochCallback | None, optional): Called with the epoch
            number after each epoch's checkpoint.

    Returns:
        TrainResult: Checkpoint paths, metrics path and per-step losses.

    Raises:
        ValueError: If the processor stage has no processor.
        RuntimeError: If a checkpoint cannot be written; the message names the
            last checkpoint that was saved.
    """
    if config.stage == Stage.PROCESSOR:
        if processor is None:
            raise ValueError("processor stage needs a processor and a trained backbone")
        backbone.freeze()
        processor.k = config.k
        params = processor.params.parameters()
        optimizer = Adam(
            params, lr=config.lr, weight_decay=config.weight_decay, no_decay=processor.params.gates()
        )
        data = list(traces)
    else:
        backbone.unfreeze()
        optimizer = Adam(backbone.params.parameters(), lr=config.lr, weight_decay=config.weight_decay)
        data = prepare_sft_traces(traces, baseline)

    too_long = [t for t in data if len(t.tokens) > config.max_len]
    if too_long:
        logger.warning("skipping %d traces longer than %d tokens", len(too_long), config.max_len)
        data = [t for t in data if len(t.tokens) <= config.max_len]

    output_dir.mkdir(parents=True, exist_ok=True)
    result = TrainResult(metrics_path=output_dir / settings.metrics_filename)
    tag = config.stage.value

    def checkpoint(epoch: int) -> None:
        path = output_dir / f"{tag}-epoch{epoch}"
        try:
            if processor is not None and config.stage == Stage.PROCESSOR:
                save_processor(path, processor, epoch=epoch, step=step)
            else:
                save_backbone(path, backbone, epoch=epoch, step=step)
        except RuntimeError as e:
            last = result.checkpoints[-1] if result.checkpoints else "none"
            raise RuntimeError(
                f"Aborting {tag} training at epoch {epoch}, step {step}: {e}; "
                f"last saved checkpoint: {last}"
            ) from e
        result.checkpoints.append(path)

    rng = np.random.default_rng(config.seed)
    steps_per_epoch = math.ceil(len(data) / config.batch_size) if data else 0
    total_steps = steps_per_epoch * config.epochs
    step = 0
    started = time.perf_counter()
    checkpoint(0)

    with open(result.metrics_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(_metrics_header(processor if config.stage == Stage.PROCESSOR else None))
        for epoch in range(1, config.epochs + 1):
            for batch_indices in _batches(len(data), config.batch_size, rng):
                batch = [data[i] for i in batch_indices]
                lr = learning_rate(step, total_steps, config.lr, config.schedule, config.warmup_ratio)
                if config.stage == Stage.PROCESSOR:
                    loss = processor_train_step(
                        backbone, processor, optimizer, batch, lr, config.trigger, config.R
                    )
                    gates = processor.params.gate_values()
                else:
                    loss = sft_step(backbone, optimizer, batch, lr, baseline)
                    gates = []
                step += 1
                if loss is None:
                    continue
                result.losses.append(loss)
                writer.writerow(
                    [step, epoch, repr(loss), repr(lr), *map(repr, gates),
                     f"{time.perf_counter() - started:.3f}"]
                )
                if step % settings.log_every == 0:
                    logger.info("%s epoch %d step %d loss %.4f", tag, epoch, step, loss)
            f.flush()
            if epoch % settings.checkpoint_every == 0 or epoch == config.epochs:
                checkpoint(epoch)
            if on_epoch_end is not None:
                on_epoch_end(epoch)
    logger.info("%s training finished after %d steps", tag, step)
    return result
