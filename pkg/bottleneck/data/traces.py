import logging
from pathlib import Path
from typing import Iterable, Optional, Sequence

from pydantic import ValidationError

from ..schemas.trace import Trace
from .vocab import NEWLINE

logger = logging.getLogger(__name__)


def segment_steps(tokens: Sequence[int], prompt_len: int) -> list[tuple[int, int]]:
    """
    Split a completion into reasoning steps.

    A step ends right after each NEWLINE in `tokens[prompt_len:]`; a trailing
    run without NEWLINE is the final step.

    Args:
        tokens (Sequence[int]): Full trace.
        prompt_len (int): Length of the prompt prefix.

    Returns:
        list[tuple[int, int]]: Half-open spans covering the completion.

    Raises:
        ValueError: If prompt_len is outside [0, len(tokens)].
    """
    if not 0 <= prompt_len <= len(tokens):
        raise ValueError(f"prompt_len {prompt_len} outside [0, {len(tokens)}]")
    spans: list[tuple[int, int]] = []
    start = prompt_len
    for position in range(prompt_len, len(tokens)):
        if tokens[position] == NEWLINE:
            spans.append((start, position + 1))
            start = position + 1
    if start < len(tokens):
        spans.append((start, len(tokens)))
    return spans


def make_trace(tokens: Sequence[int], prompt_len: int, **meta) -> Trace:
    tokens = list(tokens)
    return Trace(
        tokens=tokens,
        prompt_len=prompt_len,
        step_spans=segment_steps(tokens, prompt_len),
        meta=meta,
    )


def load_traces(path: Path, vocab_size: Optional[int] = None) -> list[Trace]:
    """
    Read a JSONL trace file.

    Args:
        path (Path): File with one trace object per line.
        vocab_size (int | None, optional): When given, every id must be below it.

    Returns:
        list[Trace]: Parsed traces in file order.

    Raises:
        ValueError: On the first malformed record, naming its line number.
    """
    traces: list[Trace] = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                trace = Trace.model_validate_json(line)
            except ValidationError as e:
                raise ValueError(f"{path}:{lineno}: invalid trace record: {e}") from e
            if vocab_size is not None and trace.tokens and max(trace.tokens) >= vocab_size:
                raise ValueError(
                    f"{path}:{lineno}: token id {max(trace.tokens)} >= vocab size {vocab_size}"
                )
            expected = segment_steps(trace.tokens, trace.prompt_len)
            if trace.step_spans != expected:
                raise ValueError(
                    f"{path}:{lineno}: step_spans {trace.step_spans} disagree with "
                    f"NEWLINE positions {expected}"
                )
            traces.append(trace)
    logger.debug("Loaded %d traces from %s", len(traces), path)
    return traces


def save_traces(path: Path, traces: Iterable[Trace]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for trace in traces:
            f.write(trace.model_dump_json())
            f.write("\n")
