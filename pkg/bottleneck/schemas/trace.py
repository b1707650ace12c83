from typing import Any

from pydantic import BaseModel, Field, model_validator

from ..data.vocab import NEWLINE


class Trace(BaseModel):
    """
    One tokenized problem: prompt followed by a step-segmented completion.

    `step_spans` are half-open intervals that partition
    `[prompt_len, len(tokens))`; every span but the last ends with NEWLINE.
    """

    tokens: list[int]
    prompt_len: int
    step_spans: list[tuple[int, int]] = Field(default_factory=list)
    meta: dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="after")
    def check_spans(self):
        if not 0 <= self.prompt_len <= len(self.tokens):
            raise ValueError(
                f"prompt_len {self.prompt_len} outside [0, {len(self.tokens)}]"
            )
        if any(t < 0 for t in self.tokens):
            raise ValueError("token ids must be non-negative")
        cursor = self.prompt_len
        for i, (start, end) in enumerate(self.step_spans):
            if start != cursor or end <= start:
                raise ValueError(f"step span {i} ({start}, {end}) is not contiguous from {cursor}")
            if i < len(self.step_spans) - 1 and self.tokens[end - 1] != NEWLINE:
                raise ValueError(f"step span {i} ({start}, {end}) does not end with NEWLINE")
            cursor = end
        if cursor != len(self.tokens):
            raise ValueError(f"step spans cover up to {cursor}, trace has {len(self.tokens)} tokens")
        return self

    @property
    def completion(self) -> list[int]:
        return self.tokens[self.prompt_len :]

    @property
    def prompt(self) -> list[int]:
        return self.tokens[: self.prompt_len]
