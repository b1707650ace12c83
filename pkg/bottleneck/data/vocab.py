"""
Closed word-level vocabulary for the synthetic task.

Reserved ids come first and never move; task symbols follow in a fixed order,
then `<unused{i}>` fillers pad the table to the configured size.
"""

from dataclasses import dataclass, field
from typing import Iterable, Sequence

PAD, BOS, NEWLINE, EOS, PAUSE = 0, 1, 2, 3, 4
RESERVED_SYMBOLS = ("<pad>", "<bos>", "\n", "<eos>", "<pause>")
KEYWORDS = ("let", "ask", "answer", "=", ";")
OPERATORS = ("+", "-", "*")


def variable_names(count: int) -> list[str]:
    return [chr(ord("a") + i) for i in range(count)]


@dataclass
class Vocab:
    symbols: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.symbols[: len(RESERVED_SYMBOLS)]) != RESERVED_SYMBOLS:
            raise ValueError("vocabulary must start with the reserved symbols")
        self.index = {symbol: i for i, symbol in enumerate(self.symbols)}
        if len(self.index) != len(self.symbols):
            raise ValueError("vocabulary symbols must be distinct")

    @classmethod
    def build(cls, modulus: int, n_variables: int, vocab_size: int) -> "Vocab":
        """
        Build the task vocabulary.

        Args:
            modulus (int): Number of distinct values `0 .. m-1`.
            n_variables (int): Number of variable names.
            vocab_size (int): Total size V; the table is padded up to it.

        Returns:
            Vocab: Vocabulary with dense ids in [0, V).

        Raises:
            ValueError: If V cannot hold every required symbol.
        """
        symbols = [
            *RESERVED_SYMBOLS,
            *KEYWORDS,
            *OPERATORS,
            *variable_names(n_variables),
            *(str(value) for value in range(modulus)),
        ]
        if len(symbols) > vocab_size:
            raise ValueError(
                f"vocab_size {vocab_size} is too small to encode {modulus} distinct values; "
                f"need at least {len(symbols)}"
            )
        symbols += [f"<unused{i}>" for i in range(vocab_size - len(symbols))]
        return cls(symbols)

    def __len__(self) -> int:
        return len(self.symbols)

    def encode(self, words: str | Iterable[str]) -> list[int]:
        """
        Map words to ids. A string is split on spaces; a literal newline is a word.
        """
        if isinstance(words, str):
            words = [w for w in words.replace("\n", " \n ").split(" ") if w]
        try:
            return [self.index[w] for w in words]
        except KeyError as e:
            raise ValueError(f"Unknown symbol: {e.args[0]!r}") from e

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.symbols[i] for i in ids)
