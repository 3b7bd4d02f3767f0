from __future__ import annotations

from typing import Iterable, Sequence

from .exceptions import DataError

PAD = "[PAD]"
MASK = "[MASK]"
SPECIAL_TOKENS = (PAD, MASK)


class Vocabulary:
    """Closed word-level vocabulary; ids 0 and 1 are PAD and MASK."""

    def __init__(self, words: Iterable[str]):
        tokens = list(SPECIAL_TOKENS)
        seen = set(tokens)
        for w in words:
            if w not in seen:
                seen.add(w)
                tokens.append(w)
        self.tokens: tuple[str, ...] = tuple(tokens)
        self._index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, word: str) -> bool:
        return word in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and other.tokens == self.tokens

    @property
    def pad_id(self) -> int:
        return self._index[PAD]

    @property
    def mask_id(self) -> int:
        return self._index[MASK]

    def id(self, word: str) -> int:
        try:
            return self._index[word]
        except KeyError:
            raise DataError(f"word {word!r} is not in the vocabulary") from None

    def encode(self, text: str | Sequence[str]) -> list[int]:
        words = text.split() if isinstance(text, str) else text
        return [self.id(w) for w in words]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]
