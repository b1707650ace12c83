import logging
from typing import Optional, Sequence

from ..enums import BaselineKind
from ..model.backbone import Backbone
from ..model.baselines import insert_pause_tokens, latent_rollout_logits
from ..numerics import ops
from ..numerics.tensor import Tape, Tensor
from ..schemas.config import BaselineConfig
from ..schemas.trace import Trace
from .optim import Adam

logger = logging.getLogger(__name__)


def prepare_sft_traces(traces: Sequence[Trace], baseline: Optional[BaselineConfig]) -> list[Trace]:
    """Insert pause tokens when training the pause baseline; otherwise return the traces."""
    if baseline is not None and baseline.kind == BaselineKind.PAUSE:
        return [insert_pause_tokens(trace, baseline.n_special) for trace in traces]
    return list(traces)


def completion_loss(
    backbone: Backbone, trace: Trace, baseline: Optional[BaselineConfig] = None
) -> Optional[Tensor]:
    """
    Mean next-token cross-entropy over the completion of one trace.

    Prompt positions (pauses included) carry no loss. With a latent-rollout
    baseline the rollout runs between prompt and completion.

    Returns:
        Tensor | None: Scalar loss, or None when the trace has no completion.
    """
    p, total = trace.prompt_len, len(trace.tokens)
    if p == total:
        return None
    if p == 0:
        raise ValueError("trace needs a non-empty prompt to predict its completion")
    if baseline is not None and baseline.kind == BaselineKind.LATENT_ROLLOUT:
        logits = latent_rollout_logits(backbone, trace, baseline.n_special)
        return ops.cross_entropy(logits, trace.completion)
    logits = backbone.forward(backbone.new_cache(), trace.tokens[:-1])
    return ops.cross_entropy(ops.slice_axis(logits, p - 1, total - 1), trace.completion)


def sft_step(
    backbone: Backbone,
    optimizer: Adam,
    batch: Sequence[Trace],
    lr: Optional[float] = None,
    baseline: Optional[BaselineConfig] = None,
) -> Optional[float]:
    """
    One SFT update: mean over traces of their completion loss.

    Prompt-only traces are skipped with a warning; a batch with nothing to
    learn from returns None and leaves the weights untouched.

    Returns:
        float | None: The batch loss before the update.
    """
    if backbone.params.frozen:
        raise ValueError("sft_step needs a trainable backbone")
    with Tape() as tape:
        losses = []
        for trace in batch:
            loss = completion_loss(backbone, trace, baseline)
            if loss is None:
                logger.warning("Skipping trace %s: empty completion", trace.meta.get("id", "?"))
                continue
            losses.append(loss)
        if not losses:
            return None
        total = losses[0]
        for loss in losses[1:]:
            total = total + loss
        total = ops.scale(total, 1.0 / len(losses))
        optimizer.zero_grad()
        tape.backward(total)
    optimizer.step(lr)
    return total.item()
