import json

import pytest

from bottleneck.data.synthetic import (
    evaluate_prompt,
    extract_answer,
    generate_splits,
    generate_synthetic,
    gold_answer,
)
from bottleneck.data.traces import load_traces, make_trace, save_traces, segment_steps
from bottleneck.data.vocab import BOS, EOS, NEWLINE, PAD, PAUSE, Vocab
from bottleneck.schemas.config import SynthTaskSpec
from bottleneck.schemas.trace import Trace


def test_segment_steps_splits_after_each_newline():
    tokens = [BOS, 7, NEWLINE, 8, 9, NEWLINE, 10, NEWLINE, 11, EOS]
    assert segment_steps(tokens, 3) == [(3, 6), (6, 8), (8, 10)]


def test_segment_steps_trailing_newline_and_empty_completion():
    assert segment_steps([BOS, 5, NEWLINE], 1) == [(1, 3)]
    assert segment_steps([BOS, 5], 2) == []


def test_segment_steps_rejects_bad_prompt_len():
    with pytest.raises(ValueError):
        segment_steps([BOS], 2)


def test_trace_validator_rejects_gaps():
    with pytest.raises(ValueError):
        Trace(tokens=[BOS, 5, NEWLINE, 6], prompt_len=1, step_spans=[(1, 3)])


def test_vocab_reserved_ids_and_too_small():
    vocab = Vocab.build(modulus=5, n_variables=2, vocab_size=40)
    assert [vocab.index[s] for s in ("<pad>", "<bos>", "\n", "<eos>", "<pause>")] == [
        PAD, BOS, NEWLINE, EOS, PAUSE,
    ]
    assert len(vocab) == 40
    with pytest.raises(ValueError, match="too small"):
        Vocab.build(modulus=100, n_variables=2, vocab_size=40)


def test_vocab_encode_treats_newline_as_word():
    vocab = Vocab.build(modulus=5, n_variables=2, vocab_size=40)
    ids = vocab.encode("a = 3\nanswer 3")
    assert ids[3] == NEWLINE
    assert vocab.decode(ids) == "a = 3 \n answer 3"
    with pytest.raises(ValueError, match="Unknown symbol"):
        vocab.encode("zebra")


def test_generated_traces_are_correct(task_spec, vocab):
    for trace in generate_synthetic(task_spec, 50):
        assert evaluate_prompt(trace.prompt, vocab, task_spec.modulus) == trace.meta["answer"]
        assert extract_answer(trace.completion, vocab) == gold_answer(trace)
        assert trace.step_spans == segment_steps(trace.tokens, trace.prompt_len)
        assert len(trace.step_spans) == task_spec.chain_length + 1


def test_generation_is_deterministic(task_spec):
    first = generate_synthetic(task_spec, 10)
    second = generate_synthetic(task_spec, 10)
    assert [t.tokens for t in first] == [t.tokens for t in second]


def test_splits_are_disjoint_by_problem(task_spec):
    train, heldout = generate_splits(task_spec, 60, 20)
    train_ids = {t.meta["id"] for t in train}
    heldout_ids = [t.meta["id"] for t in heldout]
    assert len(set(heldout_ids)) == 20
    assert train_ids.isdisjoint(heldout_ids)


def test_splits_give_up_when_problem_space_is_exhausted():
    spec = SynthTaskSpec(
        modulus=2, chain_length=1, n_distractors=0, n_variables=1, vocab_size=32, operators=("+",)
    )
    with pytest.raises(ValueError, match="held-out"):
        generate_splits(spec, 10, 50)


def test_synth_spec_validation():
    with pytest.raises(ValueError):
        SynthTaskSpec(modulus=1)
    with pytest.raises(ValueError):
        SynthTaskSpec(operators=("/",))
    with pytest.raises(ValueError):
        SynthTaskSpec(n_variables=1, n_distractors=2)


def test_extract_answer_uses_last_non_empty_line(vocab):
    completion = vocab.encode("a = 1 + 1 = 2\n answer 2 \n") + [EOS]
    assert extract_answer(completion, vocab) == "answer 2"
    assert extract_answer([EOS], vocab) == ""


def test_save_and_load_traces(tmp_path, traces):
    path = tmp_path / "traces.jsonl"
    save_traces(path, traces)
    assert load_traces(path, vocab_size=32) == traces
    assert b"\r\n" not in path.read_bytes()


def test_load_traces_names_offending_line(tmp_path, traces):
    path = tmp_path / "bad.jsonl"
    good = traces[0].model_dump_json()
    bad = json.loads(good)
    bad["tokens"][-1] = 99
    path.write_text(good + "\n" + json.dumps(bad) + "\n", encoding="utf-8")
    with pytest.raises(ValueError, match=r"bad\.jsonl:2"):
        load_traces(path, vocab_size=32)


def test_load_traces_rejects_spans_that_ignore_newlines(tmp_path):
    trace = make_trace([BOS, 5, NEWLINE, 6, NEWLINE, 7], 1)
    record = trace.model_dump()
    record["step_spans"] = [[1, 5], [5, 6]]
    path = tmp_path / "spans.jsonl"
    path.write_text(json.dumps(record) + "\n", encoding="utf-8")
    with pytest.raises(ValueError, match="spans.jsonl:1"):
        load_traces(path)
