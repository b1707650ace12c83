import numpy as np
import pytest
from numpy.testing import assert_allclose

from bottleneck.data.vocab import EOS
from bottleneck.model.backbone import Backbone
from bottleneck.numerics.tensor import Tensor
from bottleneck.schemas.config import BackboneConfig


def test_prefill_matches_sequential_decode(backbone):
    rng = np.random.default_rng(0)
    for _ in range(50):
        prompt = rng.integers(0, backbone.config.vocab_size, size=rng.integers(2, 20)).tolist()
        full = backbone.forward(backbone.new_cache(), prompt)

        cache, logits = backbone.prefill(prompt[:1])
        rows = [logits.data]
        for token in prompt[1:]:
            cache, logits = backbone.decode_step(cache, token)
            rows.append(logits.data)
        assert_allclose(np.stack(rows), full.data, atol=1e-5)


def test_cache_shapes_and_attention_rows(backbone):
    cache, _ = backbone.prefill([1, 5, 6, 2])
    c = backbone.config
    assert cache.length == 4
    assert all(k.shape == (4, c.n_heads, c.d_k) for k in cache.keys)
    assert cache.tokens == [1, 5, 6, 2]
    for rows in cache.attention_rows:
        assert sorted(rows) == [0, 1, 2, 3]
        assert rows[2].shape == (c.n_heads, 3)
        assert_allclose(rows[2].sum(axis=-1), 1.0, rtol=1e-5)
    assert cache.last_hidden.shape == (c.d_model,)


def test_prefill_rejects_empty_prompt(backbone):
    with pytest.raises(ValueError):
        backbone.prefill([])


def test_forward_rejects_overlong_sequence():
    backbone = Backbone(BackboneConfig(d_model=8, n_heads=2, d_ff=16, vocab_size=16, max_positions=4))
    with pytest.raises(ValueError, match="max positions"):
        backbone.prefill([1, 2, 3, 4, 5])


def test_config_rejects_bad_head_split():
    with pytest.raises(ValueError):
        BackboneConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError, match="even"):
        BackboneConfig(d_model=6, n_heads=2)


def _constant_head(vocab_size: int, winners: list[int]):
    def head(hidden: Tensor) -> Tensor:
        row = np.zeros(vocab_size)
        row[winners] = 1.0
        return Tensor(np.tile(row, (hidden.shape[0], 1)))

    return head


def test_greedy_ties_go_to_lowest_id(backbone, monkeypatch):
    monkeypatch.setattr(backbone, "head", _constant_head(backbone.config.vocab_size, [9, 7, 12]))
    out = backbone.greedy_generate([1, 5], max_new=3)
    assert out == [1, 5, 7, 7, 7]


def test_greedy_stops_at_eos(backbone, monkeypatch):
    monkeypatch.setattr(backbone, "head", _constant_head(backbone.config.vocab_size, [EOS]))
    assert backbone.greedy_generate([1, 5], max_new=10) == [1, 5, EOS]


def test_greedy_stops_at_max_positions(monkeypatch):
    config = BackboneConfig(d_model=8, n_heads=2, d_ff=16, vocab_size=16, max_positions=6)
    backbone = Backbone(config)
    monkeypatch.setattr(backbone, "head", _constant_head(16, [9]))
    out = backbone.greedy_generate([1, 5, 6], max_new=50)
    assert len(out) == 7


def test_greedy_hooks_see_every_decoded_token(backbone):
    seen = []

    class Recorder:
        def on_prompt(self, cache):
            seen.append(("prompt", cache.length))

        def after_token(self, cache, token):
            seen.append((token, cache.length))

    out = backbone.greedy_generate([1, 5, 6], max_new=4, hooks=[Recorder()], eos_id=-1)
    assert seen[0] == ("prompt", 3)
    assert [token for token, _ in seen[1:]] == out[3:]
    assert [length for _, length in seen[1:]] == [4, 5, 6, 7]


def test_head_call_counter(backbone):
    cache, _ = backbone.prefill([1, 2, 3])
    backbone.decode_step(cache, 4)
    assert backbone.head_calls == 2


def test_freeze_clears_gradients(backbone):
    backbone.freeze()
    assert backbone.params.frozen
    assert not any(t.requires_grad for t in backbone.params.parameters())
    backbone.unfreeze()
    assert not backbone.params.frozen
    assert all(t.requires_grad for t in backbone.params.parameters())


def test_parameter_count(tiny_config):
    c = tiny_config
    per_layer = 2 * c.d_model + 4 * c.d_model**2 + 2 * c.d_model * c.d_ff
    expected = 2 * c.vocab_size * c.d_model + c.d_model + c.n_layers * per_layer
    assert Backbone(c).params.count() == expected
