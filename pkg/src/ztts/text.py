"""Text front end: a pluggable tokenizer interface with a rule-based
grapheme fallback, plus the vocabulary file format (one token per line,
id = line number)."""

from __future__ import annotations

from pathlib import Path
from typing import Callable, Iterable

SPACE_TOKEN = "<sp>"


class GraphemeTokenizer:
    """Lowercased character tokens; whitespace runs become one space token,
    anything outside letters, digits, and apostrophes is dropped."""

    def tokenize(self, text: str) -> list[str]:
        tokens: list[str] = []
        for word in text.lower().split():
            cleaned = [ch for ch in word if ch.isalnum() or ch == "'"]
            if not cleaned:
                continue
            if tokens:
                tokens.append(SPACE_TOKEN)
            tokens.extend(cleaned)
        return tokens


TOKENIZERS: dict[str, Callable[[], object]] = {
    "grapheme": GraphemeTokenizer,
}


def get_tokenizer(name: str):
    if name not in TOKENIZERS:
        raise ValueError(f"unknown tokenizer {name!r}; available: {sorted(TOKENIZERS)}")
    return TOKENIZERS[name]()


class Vocabulary:
    """Fixed token inventory; ids are stable line numbers."""

    def __init__(self, tokens: list[str]):
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_corpus(cls, token_sequences: Iterable[list[str]]) -> "Vocabulary":
        seen = set()
        for seq in token_sequences:
            seen.update(seq)
        return cls(sorted(seen))

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        path = Path(path)
        if not path.exists():
            raise OSError(f"vocabulary file not found: {path}")
        tokens = [line.rstrip("\n") for line in path.read_text().splitlines()]
        return cls([t for t in tokens if t])

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(t + "\n" for t in self.tokens))

    def encode(self, tokens: list[str]) -> list[int]:
        try:
            return [self.index[t] for t in tokens]
        except KeyError as exc:
            raise ValueError(f"token {exc.args[0]!r} not in vocabulary") from exc
