import numpy as np
import pytest
from numpy.testing import assert_array_equal

from bottleneck.data.vocab import BOS, NEWLINE
from bottleneck.enums import TriggerMode
from bottleneck.model.backbone import Backbone
from bottleneck.model.processor import (
    CacheProcessor,
    ProcessorHook,
    apply_rewrite,
    block_forward,
    form_kv_tokens,
    parameter_report,
)
from bottleneck.model.selection import build_selection
from bottleneck.numerics.tensor import ShapeError, Tensor, no_grad, use_dtype
from bottleneck.schemas.config import BackboneConfig, ProcessorConfig


def _step_cache(backbone, prompt, step):
    cache, _ = backbone.prefill(prompt)
    cache.start_step()
    backbone.forward(cache, step)
    return cache


def test_form_kv_tokens_layout(backbone, processor):
    cache = _step_cache(backbone, [BOS, 5, 6, 7, NEWLINE], [8, 9, NEWLINE])
    selection = build_selection(cache, (5, 8), k=2)
    x = form_kv_tokens(cache, selection, 0)
    c = backbone.config
    merged = selection.layers[0].merged
    assert x.shape == (merged.size, 2 * c.n_heads * c.d_k)
    width = c.n_heads * c.d_k
    assert_array_equal(x.data[:, :width], cache.keys[0].data[merged].reshape(-1, width))
    assert_array_equal(x.data[:, width:], cache.values[0].data[merged].reshape(-1, width))
    assert np.all(np.diff(merged) > 0)


def test_zero_initialized_processor_is_a_no_op(backbone, processor):
    cache = _step_cache(backbone, [BOS, 5, 6, 7, NEWLINE], [8, 9, NEWLINE])
    keys = [k.data.copy() for k in cache.keys]
    values = [v.data.copy() for v in cache.values]
    processor.invoke(cache, (5, 8))
    for layer in range(cache.n_layers):
        assert_array_equal(cache.keys[layer].data, keys[layer])
        assert_array_equal(cache.values[layer].data, values[layer])


def test_invoke_releases_rows_and_moves_boundary(backbone, processor):
    cache = _step_cache(backbone, [BOS, 5, 6, NEWLINE], [8, NEWLINE])
    record = processor.invoke(cache, (4, 6))
    assert record.index == 0
    assert record.step_span == (4, 6)
    assert cache.boundary == 6
    assert all(not rows for rows in cache.attention_rows)
    assert len(record.gate_values) == backbone.config.n_layers
    assert record.snapshots is None


def test_rows_outside_selection_are_untouched(open_gate):
    rng = np.random.default_rng(11)
    for trial in range(200):
        n_heads = int(rng.integers(1, 4))
        d_k = 2 * int(rng.integers(1, 3))
        config = BackboneConfig(
            n_layers=int(rng.integers(1, 4)),
            n_heads=n_heads,
            d_model=n_heads * d_k,
            d_ff=8,
            vocab_size=16,
            max_positions=64,
        )
        backbone = Backbone(config, seed=trial)
        processor = open_gate(
            CacheProcessor(ProcessorConfig(d_p=4, d_p_ff=8, heads=2, k=int(rng.integers(0, 6))), config, seed=trial),
            seed=trial,
        )
        prompt_len = int(rng.integers(2, 16))
        step_len = int(rng.integers(1, 8))
        tokens = rng.integers(0, 16, size=prompt_len + step_len).tolist()
        cache = _step_cache(backbone, tokens[:prompt_len], tokens[prompt_len:])

        before_k = [k.data.copy() for k in cache.keys]
        before_v = [v.data.copy() for v in cache.values]
        with no_grad():
            record = processor.invoke(cache, (prompt_len, prompt_len + step_len))
        for layer, chosen in enumerate(record.selection.layers):
            outside = np.setdiff1d(np.arange(cache.length), chosen.merged)
            assert_array_equal(cache.keys[layer].data[outside], before_k[layer][outside])
            assert_array_equal(cache.values[layer].data[outside], before_v[layer][outside])
            assert chosen.recalled.size == min(processor.k, prompt_len)


def test_block_is_permutation_equivariant(processor_config, tiny_config):
    rng = np.random.default_rng(5)
    with use_dtype("float64"), no_grad():
        processor = CacheProcessor(processor_config, tiny_config, seed=3)
        params = processor.params.layers[0]
        for _ in range(100):
            rows = int(rng.integers(1, 24))
            u = rng.normal(0.0, 1.0, (rows, processor.config.d_p))
            perm = rng.permutation(rows)
            out = block_forward(params, Tensor(u), processor.config.heads).data
            permuted = block_forward(params, Tensor(u[perm]), processor.config.heads).data
            assert np.max(np.abs(permuted - out[perm])) <= 1e-6


def test_apply_rewrite_rejects_misaligned_deltas(backbone, processor):
    cache = _step_cache(backbone, [BOS, 5, 6, NEWLINE], [8, NEWLINE])
    selection = build_selection(cache, (4, 6), k=2)
    c = backbone.config
    bad = [(Tensor(np.zeros((1, c.n_heads, c.d_k))), Tensor(np.zeros((1, c.n_heads, c.d_k))))] * c.n_layers
    with pytest.raises(ShapeError, match="not aligned"):
        apply_rewrite(cache, selection, bad, processor.params.gates())


def test_instrumented_invoke_captures_snapshots(backbone, processor, open_gate):
    open_gate(processor)
    processor.instrument = True
    cache = _step_cache(backbone, [BOS, 5, 6, 7, NEWLINE], [8, 9, NEWLINE])
    record = processor.invoke(cache, (5, 8))
    assert len(record.snapshots) == backbone.config.n_layers
    snap = record.snapshots[0]
    assert_array_equal(snap.indices, record.selection.layers[0].merged)
    assert_array_equal(snap.post_keys, cache.keys[0].data[snap.indices])
    assert not np.array_equal(snap.pre_keys, snap.post_keys)
    assert snap.recalled.sum() == min(processor.k, 5)


def test_hook_fires_at_prompt_and_each_newline(backbone, processor, monkeypatch):
    vocab_size = backbone.config.vocab_size
    script = iter([7, NEWLINE, 8, 9, NEWLINE, 10] + [11] * 20)

    def head(hidden):
        logits = np.zeros((hidden.shape[0], vocab_size))
        logits[:, next(script)] = 1.0
        return Tensor(logits)

    monkeypatch.setattr(backbone, "head", head)
    hook = ProcessorHook(processor, TriggerMode.NEWLINE)
    out = backbone.greedy_generate([BOS, 5, 6, NEWLINE], max_new=6, hooks=[hook])
    assert out[4:] == [7, NEWLINE, 8, 9, NEWLINE, 10]
    assert hook.invocations == 3
    assert [r.step_span for r in hook.records] == [(0, 4), (4, 6), (6, 9)]


def test_hook_every_r_windows(backbone, processor):
    hook = ProcessorHook(processor, TriggerMode.EVERY_R, R=3)
    backbone.greedy_generate([BOS, 5, 6], max_new=7, hooks=[hook], eos_id=-1)
    assert [r.step_span for r in hook.records] == [(0, 3), (3, 6), (6, 9)]


def test_hook_none_trigger_never_invokes(backbone, processor):
    hook = ProcessorHook(processor, TriggerMode.NONE)
    backbone.greedy_generate([BOS, 5, 6], max_new=5, hooks=[hook], eos_id=-1)
    assert hook.invocations == 0


def test_prompt_newlines_trigger_rewrites_each_prompt_segment(backbone, processor):
    hook = ProcessorHook(processor, TriggerMode.NEWLINE, prompt_newlines_trigger=True)
    cache, _ = backbone.prefill([BOS, 5, NEWLINE, 6, 7, NEWLINE])
    hook.on_prompt(cache)
    assert [r.step_span for r in hook.records] == [(0, 3), (3, 6)]
    assert cache.boundary == 6


def test_processor_config_validation():
    with pytest.raises(ValueError):
        ProcessorConfig(d_p=16, d_p_ff=8)
    with pytest.raises(ValueError):
        ProcessorConfig(d_p=9, d_p_ff=16, heads=2)
    with pytest.raises(ValueError):
        ProcessorConfig(k=-1)


def test_parameter_report(backbone, processor):
    report = parameter_report(processor, backbone.params.count())
    assert report["processor_params"] == processor.params.count()
    assert 0 < report["ratio"]


def test_closed_processor_leaves_generation_unchanged(backbone, processor):
    rng = np.random.default_rng(8)
    for _ in range(100):
        prompt = [BOS] + rng.integers(5, 32, size=int(rng.integers(1, 12))).tolist() + [NEWLINE]
        vanilla = backbone.greedy_generate(prompt, max_new=8)
        hook = ProcessorHook(processor, TriggerMode.NEWLINE)
        assert backbone.greedy_generate(prompt, max_new=8, hooks=[hook]) == vanilla
        assert hook.invocations >= 1
