"""
Processor training on step-chunked traces with truncated backpropagation.

For each boundary n the cache entering the invocation is detached, the
processor rewrites it for chunk s_n, and the cross-entropy of chunk s_{n+1} is
computed while attending to the rewritten cache. Only the invocation ->
next-chunk-loss path carries gradient.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..enums import TriggerMode
from ..model.backbone import Backbone
from ..model.cache import CacheState
from ..model.processor import CacheProcessor
from ..numerics import ops
from ..numerics.tensor import Tape, Tensor, grad_enabled, no_grad
from ..schemas.trace import Trace
from .optim import Adam

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StepChunk:
    trace_id: str
    n: int
    span: tuple[int, int]
    next_span: tuple[int, int]


@dataclass
class ChunkInput:
    """Detached state entering one chunk: the cache before its invocation and the boundary logits."""

    cache: CacheState
    boundary_logits: Tensor


@dataclass
class ProcessorStepResult:
    loss: Tensor
    step_losses: list[float]
    inputs: list[ChunkInput] = field(default_factory=list)


def chunk_spans(
    trace: Trace, trigger: TriggerMode = TriggerMode.NEWLINE, R: Optional[int] = None
) -> list[tuple[int, int]]:
    """
    The prompt followed by the completion's chunks: its reasoning steps, or
    windows of R tokens in every_R mode.
    """
    spans = [(0, trace.prompt_len)]
    if trigger == TriggerMode.EVERY_R:
        if R is None or R < 1:
            raise ValueError("R must be at least 1 when trigger is every_R")
        end = len(trace.tokens)
        spans += [(s, min(s + R, end)) for s in range(trace.prompt_len, end, R)]
    else:
        spans += list(trace.step_spans)
    return spans


def step_chunks(
    trace: Trace, trigger: TriggerMode = TriggerMode.NEWLINE, R: Optional[int] = None
) -> list[StepChunk]:
    spans = chunk_spans(trace, trigger, R)
    trace_id = str(trace.meta.get("id", ""))
    return [
        StepChunk(trace_id=trace_id, n=n, span=spans[n], next_span=spans[n + 1])
        for n in range(len(spans) - 1)
    ]


def _last_row(logits: Tensor) -> Tensor:
    rows, vocab = logits.shape
    return ops.reshape(ops.slice_axis(logits, rows - 1, rows), (1, vocab))


def processor_step(
    backbone: Backbone,
    processor: Optional[CacheProcessor],
    trace: Trace,
    trigger: TriggerMode = TriggerMode.NEWLINE,
    R: Optional[int] = None,
    replay: Optional[Sequence[ChunkInput]] = None,
) -> Optional[ProcessorStepResult]:
    """
    Next-chunk loss of one trace with the processor rewriting at each boundary.

    The prediction of a chunk's first token comes from the logits at the end
    of the previous chunk, which were computed before the rewrite. With
    `processor=None` no rewrite happens, giving the frozen-backbone
    teacher-forced loss.

    Args:
        backbone (Backbone): Frozen backbone.
        processor (CacheProcessor | None): Processor to train.
        trace (Trace): Teacher-forced trace.
        trigger (TriggerMode, optional): Chunking rule.
        R (int | None, optional): Window size for every_R.
        replay (Sequence[ChunkInput] | None, optional): Chunk inputs of an
            earlier call, used in place of the running cache. The loss then
            depends on the processor only through each chunk's own invocation,
            which is the objective the truncated gradient differentiates.

    Returns:
        ProcessorStepResult | None: Mean over chunks of the per-chunk mean
            cross-entropy, or None when the trace has no completion chunk.

    Raises:
        ValueError: If gradients are enabled and the backbone is not frozen, or
            `replay` does not have one input per chunk.
    """
    if grad_enabled() and not backbone.params.frozen:
        raise ValueError("processor training needs a frozen backbone")
    chunks = step_chunks(trace, trigger, R)
    if not chunks:
        return None
    if replay is not None and len(replay) != len(chunks):
        raise ValueError(f"replay has {len(replay)} chunk inputs for {len(chunks)} chunks")
    tokens = trace.tokens

    if replay is None:
        cache = backbone.new_cache()
        with no_grad():
            start, end = chunks[0].span
            boundary_logits = _last_row(backbone.forward(cache, tokens[start:end]))

    losses: list[Tensor] = []
    inputs: list[ChunkInput] = []
    for n, chunk in enumerate(chunks):
        if replay is not None:
            cache, boundary_logits = replay[n].cache.detach(), replay[n].boundary_logits
        else:
            cache = cache.detach()
        inputs.append(ChunkInput(cache.detach(), boundary_logits))
        if processor is not None:
            processor.invoke(cache, chunk.span)
        else:
            cache.start_step()
        start, end = chunk.next_span
        targets = tokens[start:end]
        logits = backbone.forward(cache, targets)
        if end - start > 1:
            predictions = ops.concat([boundary_logits, ops.slice_axis(logits, 0, end - start - 1)])
        else:
            predictions = boundary_logits
        losses.append(ops.cross_entropy(predictions, targets))
        boundary_logits = ops.stop_gradient(_last_row(logits))

    total = losses[0]
    for loss in losses[1:]:
        total = total + loss
    total = ops.scale(total, 1.0 / len(losses))
    return ProcessorStepResult(
        loss=total, step_losses=[loss.item() for loss in losses], inputs=inputs
    )


def processor_train_step(
    backbone: Backbone,
    processor: CacheProcessor,
    optimizer: Adam,
    batch: Sequence[Trace],
    lr: Optional[float] = None,
    trigger: TriggerMode = TriggerMode.NEWLINE,
    R: Optional[int] = None,
) -> Optional[float]:
    """
    One processor update over a batch; traces without a completion chunk are skipped.

    Returns:
        float | None: Mean batch loss before the update.
    """
    with Tape() as tape:
        losses = []
        for trace in batch:
            result = processor_step(backbone, processor, trace, trigger, R)
            if result is None:
                logger.warning("Skipping trace %s: fewer than 2 chunks", trace.meta.get("id", "?"))
                continue
            losses.append(result.loss)
        if not losses:
            return None
        total = losses[0]
        for loss in losses[1:]:
            total = total + loss
        total = ops.scale(total, 1.0 / len(losses))
        optimizer.zero_grad()
        tape.backward(total, leaves=processor.params.parameters())
    optimizer.step(lr)
    return total.item()


def next_step_cross_entropy(
    backbone: Backbone,
    processor: Optional[CacheProcessor],
    traces: Sequence[Trace],
    trigger: TriggerMode = TriggerMode.NEWLINE,
    R: Optional[int] = None,
) -> float:
    """Mean over traces of the teacher-forced next-chunk loss, without gradients."""
    values = []
    with no_grad():
        for trace in traces:
            result = processor_step(backbone, processor, trace, trigger, R)
            if result is not None:
                values.append(result.loss.item())
    return float(np.mean(values)) if values else float("nan")
