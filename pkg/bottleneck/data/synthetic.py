"""
Modular-chain arithmetic task.

A prompt fixes one variable's start value, lists update facts (relevant ones
for the asked variable interleaved with distractors on other variables) and asks
for the final value. The completion applies one relevant update per line and
ends with an answer line:

    <bos> let a = 3 ; b + 1 ; a + 4 ; a + 5 ; ask a \\n
    a = 3 + 4 = 7 \\n a = 7 + 5 = 2 \\n answer 2 <eos>
"""

import logging
import random
from typing import Iterator, Sequence

from ..core.config import settings
from ..schemas.config import SynthTaskSpec
from ..schemas.trace import Trace
from .traces import make_trace
from .vocab import EOS, NEWLINE, Vocab, variable_names

logger = logging.getLogger(__name__)

_MAX_ATTEMPTS_PER_PROBLEM = 50


def apply_op(value: int, op: str, operand: int, modulus: int) -> int:
    if op == "+":
        return (value + operand) % modulus
    if op == "-":
        return (value - operand) % modulus
    if op == "*":
        return (value * operand) % modulus
    raise ValueError(f"Unknown operator: {op}")


def build_vocab(spec: SynthTaskSpec) -> Vocab:
    return Vocab.build(spec.modulus, spec.n_variables, spec.vocab_size)


def _problem_words(spec: SynthTaskSpec, rng: random.Random) -> tuple[list[str], list[str], dict]:
    names = variable_names(spec.n_variables)
    target = rng.choice(names)
    others = [name for name in names if name != target]
    start = rng.randrange(spec.modulus)
    updates = [
        (rng.choice(spec.operators), rng.randrange(spec.modulus))
        for _ in range(spec.chain_length)
    ]
    distractors = [
        (rng.choice(others), rng.choice(spec.operators), rng.randrange(spec.modulus))
        for _ in range(spec.n_distractors)
    ]
    total = len(updates) + len(distractors)
    distractor_slots = set(rng.sample(range(total), len(distractors)))
    relevant, noise = iter(updates), iter(distractors)
    facts = []
    for slot in range(total):
        if slot in distractor_slots:
            facts.append(next(noise))
        else:
            op, operand = next(relevant)
            facts.append((target, op, operand))

    prompt = ["<bos>", "let", target, "=", str(start), ";"]
    for name, op, operand in facts:
        prompt += [name, op, str(operand), ";"]
    prompt += ["ask", target, "\n"]

    completion: list[str] = []
    value = start
    for op, operand in updates:
        new_value = apply_op(value, op, operand, spec.modulus)
        completion += [target, "=", str(value), op, str(operand), "=", str(new_value), "\n"]
        value = new_value
    completion += ["answer", str(value), "<eos>"]

    meta = {
        "id": " ".join(prompt[1:-1]),
        "answer": value,
        "variable": target,
        "start": start,
        "updates": [[op, operand] for op, operand in updates],
    }
    return prompt, completion, meta


def _problem_stream(spec: SynthTaskSpec, vocab: Vocab) -> Iterator[Trace]:
    rng = random.Random(spec.seed)
    while True:
        prompt, completion, meta = _problem_words(spec, rng)
        tokens = vocab.encode(prompt + completion)
        if len(tokens) > settings.max_trace_len:
            raise ValueError(
                f"trace length {len(tokens)} exceeds max {settings.max_trace_len}; "
                "reduce chain_length or n_distractors"
            )
        yield make_trace(tokens, len(prompt), **meta)


def generate_synthetic(spec: SynthTaskSpec, n: int) -> list[Trace]:
    """
    Generate `n` traces deterministically from `spec.seed`.

    Args:
        spec (SynthTaskSpec): Task parameters.
        n (int): Number of traces.

    Returns:
        list[Trace]: Traces whose answers are correct mod m.

    Raises:
        ValueError: If the vocabulary cannot hold the task symbols or a trace
            is longer than the maximum trace length.
    """
    vocab = build_vocab(spec)
    stream = _problem_stream(spec, vocab)
    return [next(stream) for _ in range(n)]


def generate_splits(
    spec: SynthTaskSpec, n_train: int, n_heldout: int
) -> tuple[list[Trace], list[Trace]]:
    """
    Generate a training split and a held-out split with no prompt in common.

    Held-out problems are distinct from each other and from every training
    problem.

    Raises:
        ValueError: If the problem space is too small to fill the held-out split.
    """
    vocab = build_vocab(spec)
    stream = _problem_stream(spec, vocab)
    train = [next(stream) for _ in range(n_train)]
    seen = {trace.meta["id"] for trace in train}
    heldout: list[Trace] = []
    attempts = 0
    while len(heldout) < n_heldout:
        attempts += 1
        if attempts > _MAX_ATTEMPTS_PER_PROBLEM * max(n_heldout, 1):
            raise ValueError(
                f"could only find {len(heldout)} of {n_heldout} unseen held-out problems"
            )
        trace = next(stream)
        if trace.meta["id"] in seen:
            continue
        seen.add(trace.meta["id"])
        heldout.append(trace)
    logger.info("Generated %d train and %d held-out traces", len(train), len(heldout))
    return train, heldout


def evaluate_prompt(prompt: Sequence[int], vocab: Vocab, modulus: int) -> int:
    """
    Compute the asked variable's final value by parsing the prompt tokens.

    Works from the prompt alone, independently of how it was generated.

    Raises:
        ValueError: If the prompt does not follow the task grammar.
    """
    words = [vocab.symbols[i] for i in prompt]
    if words[:2] != ["<bos>", "let"] or words[-1] != "\n" or words[-3] != "ask":
        raise ValueError(f"not a task prompt: {' '.join(words)!r}")
    target = words[-2]
    body = " ".join(words[2:-3]).split(";")
    statements = [s.split() for s in body if s.strip()]
    name, eq, start = statements[0]
    if name != target or eq != "=":
        raise ValueError(f"prompt does not initialize {target!r}")
    value = int(start) % modulus
    for name, op, operand in statements[1:]:
        if name == target:
            value = apply_op(value, op, int(operand), modulus)
    return value


def completion_lines(tokens: Sequence[int], vocab: Vocab) -> list[str]:
    lines, current = [], []
    for token in tokens:
        if token == NEWLINE:
            lines.append(" ".join(current))
            current = []
        elif token != EOS:
            current.append(vocab.symbols[token])
    lines.append(" ".join(current))
    return lines


def extract_answer(completion: Sequence[int], vocab: Vocab) -> str:
    """
    Return the final non-empty completion line with whitespace normalized.
    """
    for line in reversed(completion_lines(completion, vocab)):
        normalized = " ".join(line.split())
        if normalized:
            return normalized
    return ""


def gold_answer(trace: Trace) -> str:
    return f"answer {trace.meta['answer']}"
