"""
Token-mediated baselines: pause tokens after the prompt, and latent rollout
that feeds o_t back as the next input embedding.
"""

from typing import Sequence

import numpy as np

from ..core.config import settings
from ..data.vocab import EOS, PAUSE
from ..numerics import ops
from ..numerics.tensor import Tensor, no_grad
from ..schemas.trace import Trace
from .backbone import Backbone
from .cache import CacheState


def insert_pause_tokens(trace: Trace, n: int, max_len: int = settings.max_trace_len) -> Trace:
    """
    Append `n` PAUSE tokens to the prompt.

    The pauses become part of the prompt, so they carry no loss and every
    step span shifts by `n`.

    Raises:
        ValueError: If the result is longer than `max_len`.
    """
    if n < 0:
        raise ValueError(f"pause count must be non-negative, got {n}")
    if n == 0:
        return trace
    if len(trace.tokens) + n > max_len:
        raise ValueError(f"trace with {n} pause tokens exceeds max length {max_len}")
    p = trace.prompt_len
    return Trace(
        tokens=[*trace.tokens[:p], *([PAUSE] * n), *trace.tokens[p:]],
        prompt_len=p + n,
        step_spans=[(start + n, end + n) for start, end in trace.step_spans],
        meta={**trace.meta, "pause_tokens": trace.meta.get("pause_tokens", 0) + n},
    )


def remove_pause_tokens(trace: Trace) -> Trace:
    """Undo `insert_pause_tokens`, using the count recorded in `meta`."""
    n = trace.meta.get("pause_tokens", 0)
    if n == 0:
        return trace
    p = trace.prompt_len
    if trace.tokens[p - n : p] != [PAUSE] * n:
        raise ValueError("trace does not end its prompt with the recorded pause tokens")
    meta = {key: value for key, value in trace.meta.items() if key != "pause_tokens"}
    return Trace(
        tokens=[*trace.tokens[: p - n], *trace.tokens[p:]],
        prompt_len=p - n,
        step_spans=[(start - n, end - n) for start, end in trace.step_spans],
        meta=meta,
    )


def pause_loss_mask(trace: Trace) -> np.ndarray:
    """Boolean per position; False on prompt positions, which include the pauses."""
    mask = np.zeros(len(trace.tokens), dtype=bool)
    mask[trace.prompt_len :] = True
    return mask


def latent_rollout(backbone: Backbone, cache: CacheState, n_latent: int) -> None:
    """Run `n_latent` positions whose input embedding is the previous o_t; no LM head."""
    d_model = backbone.config.d_model
    for _ in range(n_latent):
        backbone.forward_embeddings(cache, ops.reshape(cache.last_hidden, (1, d_model)))


def latent_rollout_logits(backbone: Backbone, trace: Trace, n_latent: int) -> Tensor:
    """
    Teacher-forced completion logits [len(completion), V] with a latent rollout
    after the prompt.
    """
    prompt, completion = trace.prompt, trace.completion
    cache = backbone.new_cache()
    backbone.forward_embeddings(cache, backbone.embed(prompt), prompt)
    latent_rollout(backbone, cache, n_latent)
    first = backbone.head(ops.reshape(cache.last_hidden, (1, backbone.config.d_model)))
    if len(completion) == 1:
        return first
    rest = backbone.forward(cache, completion[:-1])
    return ops.concat([first, rest], axis=0)


def latent_rollout_decode(
    backbone: Backbone,
    prompt: Sequence[int],
    n_latent: int,
    max_new: int,
    eos_id: int = EOS,
) -> list[int]:
    """
    Greedy decoding after `n_latent` latent steps past the prompt.

    Returns:
        list[int]: Prompt followed by generated ids; latent steps emit nothing.
    """
    if n_latent < 0:
        raise ValueError(f"n_latent must be non-negative, got {n_latent}")
    if n_latent == 0:
        return backbone.greedy_generate(prompt, max_new, eos_id=eos_id)
    tokens = list(prompt)
    with no_grad():
        cache = backbone.new_cache()
        backbone.forward_embeddings(cache, backbone.embed(tokens), tokens)
        latent_rollout(backbone, cache, n_latent)
        d_model = backbone.config.d_model
        logits = backbone.head(ops.reshape(cache.last_hidden, (1, d_model)))
        for _ in range(max_new):
            token = int(np.argmax(logits.data[-1]))
            tokens.append(token)
            if token == eos_id or cache.length >= backbone.config.max_positions:
                break
            logits = backbone.forward(cache, [token])
    return tokens
