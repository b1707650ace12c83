import pytest

from bottleneck.data.vocab import BOS, NEWLINE, PAUSE
from bottleneck.model.baselines import (
    insert_pause_tokens,
    latent_rollout,
    latent_rollout_decode,
    latent_rollout_logits,
    pause_loss_mask,
    remove_pause_tokens,
)
from bottleneck.numerics.tensor import no_grad


def test_pause_tokens_extend_the_prompt(traces):
    trace = traces[0]
    paused = insert_pause_tokens(trace, 3)
    p = trace.prompt_len
    assert paused.prompt_len == p + 3
    assert paused.tokens[p : p + 3] == [PAUSE] * 3
    assert paused.completion == trace.completion
    assert paused.step_spans[0] == (trace.step_spans[0][0] + 3, trace.step_spans[0][1] + 3)
    assert remove_pause_tokens(paused) == trace


def test_pause_count_edges(traces):
    assert insert_pause_tokens(traces[0], 0) is traces[0]
    with pytest.raises(ValueError):
        insert_pause_tokens(traces[0], -1)
    with pytest.raises(ValueError, match="max length"):
        insert_pause_tokens(traces[0], 10, max_len=len(traces[0].tokens) + 5)


def test_pauses_carry_no_loss(traces):
    paused = insert_pause_tokens(traces[0], 4)
    mask = pause_loss_mask(paused)
    assert not mask[: paused.prompt_len].any()
    assert mask[paused.prompt_len :].all()


def test_latent_rollout_skips_the_head(backbone):
    with no_grad():
        cache, _ = backbone.prefill([BOS, 5, 6, NEWLINE])
        calls = backbone.head_calls
        latent_rollout(backbone, cache, 5)
    assert backbone.head_calls == calls
    assert cache.length == 9
    assert cache.tokens[-5:] == [-1] * 5


def test_latent_rollout_logits_cover_the_completion(backbone, traces):
    trace = traces[0]
    with no_grad():
        logits = latent_rollout_logits(backbone, trace, 3)
    assert logits.shape == (len(trace.completion), backbone.config.vocab_size)


def test_latent_decode_without_latents_is_plain_greedy(backbone):
    prompt = [BOS, 5, 6, NEWLINE]
    assert latent_rollout_decode(backbone, prompt, 0, 10) == backbone.greedy_generate(prompt, 10)


def test_latent_decode_emits_only_real_tokens(backbone):
    prompt = [BOS, 5, 6, NEWLINE]
    out = latent_rollout_decode(backbone, prompt, 4, 6, eos_id=-1)
    assert out[:4] == prompt
    assert len(out) == 10
    assert all(0 <= t < backbone.config.vocab_size for t in out)
    with pytest.raises(ValueError):
        latent_rollout_decode(backbone, prompt, -1, 6)
