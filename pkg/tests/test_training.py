import csv

import numpy as np
import pytest

from bottleneck.data.traces import make_trace
from bottleneck.data.vocab import BOS, EOS, NEWLINE
from bottleneck.enums import Schedule, Stage, TriggerMode
from bottleneck.model import processor as processor_module
from bottleneck.model.backbone import Backbone
from bottleneck.model.processor import CacheProcessor
from bottleneck.numerics import ops
from bottleneck.numerics.gradcheck import finite_diff_check
from bottleneck.numerics.tensor import Tape, Tensor, use_dtype
from bottleneck.schemas.config import BackboneConfig, ProcessorConfig, TrainConfig
from bottleneck.training.loop import train_loop
from bottleneck.training.optim import Adam, learning_rate
from bottleneck.training.processor_train import (
    chunk_spans,
    next_step_cross_entropy,
    processor_step,
    processor_train_step,
    step_chunks,
)
from bottleneck.training.sft import completion_loss, sft_step


def test_chunks_follow_steps(traces):
    trace = traces[0]
    spans = chunk_spans(trace)
    assert spans[0] == (0, trace.prompt_len)
    assert spans[1:] == trace.step_spans
    chunks = step_chunks(trace)
    assert len(chunks) == len(trace.step_spans)
    assert all(c.next_span[0] == c.span[1] for c in chunks)


def test_every_r_chunks_are_fixed_windows():
    trace = make_trace([BOS, 5, NEWLINE, 6, 7, 8, 9, 10, 11, EOS], 3)
    assert chunk_spans(trace, TriggerMode.EVERY_R, R=3) == [(0, 3), (3, 6), (6, 9), (9, 10)]
    with pytest.raises(ValueError):
        chunk_spans(trace, TriggerMode.EVERY_R, R=0)


def test_prompt_only_trace_has_no_step(backbone, processor):
    backbone.freeze()
    trace = make_trace([BOS, 5, NEWLINE], 3)
    assert processor_step(backbone, processor, trace) is None


def test_processor_step_needs_frozen_backbone(backbone, processor, traces):
    with pytest.raises(ValueError, match="frozen"):
        processor_step(backbone, processor, traces[0])


def test_processor_step_gradients_match_finite_differences(traces, open_gate):
    config = BackboneConfig(n_layers=2, n_heads=2, d_model=16, d_ff=32, vocab_size=32, max_positions=128)
    trace = traces[0]
    assert len(trace.step_spans) == 3
    with use_dtype("float64"):
        backbone = Backbone(config, seed=1)
        backbone.freeze()
        processor = open_gate(
            CacheProcessor(ProcessorConfig(d_p=8, d_p_ff=16, heads=2, k=64), config, seed=1), scale=0.5
        )
        base = processor_step(backbone, processor, trace)
        error = finite_diff_check(
            lambda: processor_step(backbone, processor, trace, replay=base.inputs).loss,
            processor.params.parameters(),
            eps=1e-3,
            order=4,
        )
    assert error <= 1e-4


def test_replay_reproduces_loss_and_gradients(backbone, processor, traces, open_gate):
    backbone.freeze()
    open_gate(processor)
    params = processor.params.parameters()

    def run(**kwargs):
        for p in params:
            p.zero_grad()
        with Tape() as tape:
            result = processor_step(backbone, processor, traces[0], **kwargs)
            tape.backward(result.loss, leaves=params)
        return result, [p.grad.copy() for p in params]

    plain, plain_grads = run()
    replayed, replayed_grads = run(replay=plain.inputs)
    assert len(plain.inputs) == len(step_chunks(traces[0]))
    assert replayed.step_losses == plain.step_losses
    for expected, actual in zip(plain_grads, replayed_grads):
        np.testing.assert_array_equal(actual, expected)


def test_replay_needs_one_input_per_chunk(backbone, processor, traces):
    backbone.freeze()
    base = processor_step(backbone, processor, traces[0])
    with pytest.raises(ValueError, match="chunk inputs"):
        processor_step(backbone, processor, traces[0], replay=base.inputs[:-1])


def test_next_chunk_loss_ignores_earlier_invocations(backbone, processor, traces, open_gate, monkeypatch):
    backbone.freeze()
    open_gate(processor)
    n_layers = backbone.config.n_layers
    probes: list[Tensor] = []
    losses: list[Tensor] = []
    form = processor_module.form_kv_tokens
    cross_entropy = ops.cross_entropy

    def probed(cache, selection, layer):
        x = form(cache, selection, layer)
        probe = Tensor(np.zeros(x.shape), requires_grad=True, dtype=x.dtype)
        probes.append(probe)
        return x + probe

    def recorded(*args, **kwargs):
        loss = cross_entropy(*args, **kwargs)
        losses.append(loss)
        return loss

    monkeypatch.setattr(processor_module, "form_kv_tokens", probed)
    monkeypatch.setattr(ops, "cross_entropy", recorded)

    def run(pick):
        probes.clear()
        losses.clear()
        with Tape() as tape:
            processor_step(backbone, processor, traces[0])
            tape.backward(pick(losses), leaves=probes)
        return [probes[i * n_layers : (i + 1) * n_layers] for i in range(len(probes) // n_layers)]

    per_invocation = run(lambda ls: ls[1] + ls[2])
    assert len(per_invocation) == 3
    for probe in per_invocation[0]:
        assert np.array_equal(probe.grad, np.zeros_like(probe.data))
    assert any(np.any(probe.grad != 0) for probe in per_invocation[1])

    per_invocation = run(lambda ls: ls[0])
    assert any(np.any(probe.grad != 0) for probe in per_invocation[0])
    assert all(np.array_equal(p.grad, np.zeros_like(p.data)) for p in per_invocation[2])
    assert all(t.grad is None for t in backbone.params.parameters())


def test_processor_train_step_leaves_backbone_untouched(backbone, processor, traces, open_gate):
    backbone.freeze()
    open_gate(processor)
    before = {name: t.data.copy() for name, t in backbone.params.named().items()}
    gate_before = processor.params.layers[0].gate.data.copy()
    optimizer = Adam(processor.params.parameters(), lr=1e-2, no_decay=processor.params.gates())
    loss = processor_train_step(backbone, processor, optimizer, traces[:2])
    assert np.isfinite(loss)
    for name, t in backbone.params.named().items():
        assert np.array_equal(t.data, before[name]), name
        assert t.grad is None
    assert not np.array_equal(processor.params.layers[0].gate.data, gate_before)


def test_closed_processor_matches_frozen_backbone_loss(backbone, processor, traces):
    with_processor = next_step_cross_entropy(backbone, processor, traces[:3])
    without = next_step_cross_entropy(backbone, None, traces[:3])
    assert with_processor == pytest.approx(without, rel=1e-6)


def test_adam_skips_decay_on_excluded_tensors():
    decayed = Tensor(np.ones(3), requires_grad=True)
    kept = Tensor(np.ones(3), requires_grad=True)
    optimizer = Adam([decayed, kept], lr=0.1, weight_decay=0.5, no_decay=[kept])
    decayed.grad = np.zeros(3)
    kept.grad = np.zeros(3)
    optimizer.step()
    assert np.allclose(decayed.data, 1.0 - 0.1 * 0.5)
    assert np.array_equal(kept.data, np.ones(3, dtype=np.float32))


def test_learning_rate_schedules():
    assert learning_rate(7, 100, 0.1, Schedule.CONSTANT) == 0.1
    rates = [learning_rate(s, 100, 0.1, Schedule.WARMUP_COSINE, 0.1) for s in range(100)]
    assert rates[0] == pytest.approx(0.01)
    assert rates[9] == pytest.approx(0.1)
    assert all(a >= b for a, b in zip(rates[9:], rates[10:]))
    assert rates[-1] < 0.001


def test_sft_reduces_completion_loss(backbone, traces):
    optimizer = Adam(backbone.params.parameters(), lr=1e-2)
    batch = traces[:2]
    first = sft_step(backbone, optimizer, batch)
    for _ in range(30):
        last = sft_step(backbone, optimizer, batch)
    assert last < first


def test_sft_rejects_frozen_backbone(backbone, traces):
    backbone.freeze()
    with pytest.raises(ValueError, match="trainable"):
        sft_step(backbone, Adam(backbone.params.parameters()), traces[:1])


def test_completion_loss_skips_prompt_only(backbone):
    assert completion_loss(backbone, make_trace([BOS, 5, NEWLINE], 3)) is None


def test_train_loop_writes_checkpoints_and_metrics(backbone, traces, tmp_path):
    config = TrainConfig(stage=Stage.SFT, epochs=2, batch_size=4, lr=1e-3)
    seen = []
    result = train_loop(config, backbone, traces, tmp_path, on_epoch_end=seen.append)
    assert [p.name for p in result.checkpoints] == ["sft-epoch0", "sft-epoch1", "sft-epoch2"]
    assert all(p.exists() for p in result.checkpoints)
    assert seen == [1, 2]
    with open(result.metrics_path, newline="") as f:
        rows = list(csv.DictReader(f))
    assert [int(r["step"]) for r in rows] == [1, 2, 3, 4]
    assert list(rows[0]) == ["step", "epoch", "loss", "lr", "wall_time"]


def test_processor_stage_freezes_backbone_and_logs_gates(backbone, processor, traces, tmp_path):
    config = TrainConfig(stage=Stage.PROCESSOR, epochs=1, batch_size=8, k=2)
    result = train_loop(config, backbone, traces, tmp_path, processor=processor)
    assert backbone.params.frozen
    assert processor.k == 2
    with open(result.metrics_path, newline="") as f:
        header = next(csv.reader(f))
    assert header[-3:] == ["sigma_g_0", "sigma_g_1", "wall_time"]
    assert result.checkpoints[-1].name == "processor-epoch1"


def test_processor_stage_needs_processor(backbone, traces, tmp_path):
    with pytest.raises(ValueError):
        train_loop(TrainConfig(stage=Stage.PROCESSOR), backbone, traces, tmp_path)


def test_train_loop_skips_overlong_traces(backbone, traces, tmp_path, caplog):
    config = TrainConfig(stage=Stage.SFT, epochs=1, batch_size=4, max_len=1)
    with caplog.at_level("WARNING"):
        result = train_loop(config, backbone, traces, tmp_path)
    assert "longer than 1 tokens" in caplog.text
    assert result.losses == []
    assert [p.name for p in result.checkpoints] == ["sft-epoch0", "sft-epoch1"]
