"""Output symbol inventory shared by the transducer and the external LM."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

BLANK_ID = 0


@dataclass(frozen=True)
class Vocab:
    """Non-blank symbols get ids ``1..len(symbols)``; blank is always 0.

    ``sos_id`` (``len(symbols) + 1``) exists only on the LM side.
    """

    symbols: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "symbols", tuple(self.symbols))
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("vocabulary symbols must be unique")
        if any(not s or any(c.isspace() for c in s) for s in self.symbols):
            raise ValueError("symbols must be non-empty and contain no whitespace")

    blank_id = BLANK_ID

    @property
    def size(self) -> int:
        return len(self.symbols)

    @property
    def sos_id(self) -> int:
        return len(self.symbols) + 1

    @property
    def num_outputs(self) -> int:
        return len(self.symbols) + 1

    def id(self, symbol: str) -> int:
        return self.symbols.index(symbol) + 1

    def symbol(self, idx: int) -> str:
        if idx == BLANK_ID:
            return "<blk>"
        if idx == self.sos_id:
            return "<sos>"
        return self.symbols[idx - 1]

    def encode(self, symbols) -> list[int]:
        lookup = {s: i + 1 for i, s in enumerate(self.symbols)}
        return [lookup[s] for s in symbols]

    def decode(self, ids) -> list[str]:
        return [self.symbol(int(i)) for i in ids]

    @classmethod
    def default(cls, size: int) -> "Vocab":
        return cls(tuple(f"s{i}" for i in range(1, size + 1)))

    def save(self, path) -> None:
        Path(path).write_text("".join(s + "\n" for s in self.symbols), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(line for line in lines if line != ""))
