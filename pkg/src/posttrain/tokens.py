"""Token counting hook and counter-based randomness shared by the corpus tools."""

from __future__ import annotations

import hashlib
import re
from typing import Protocol, Sequence

_TOKEN_RE = re.compile(r"\S+")


class Tokenizer(Protocol):
    def tokenize(self, text: str) -> list[str]: ...

    def truncate(self, text: str, n_tokens: int) -> str: ...


class WhitespaceTokenizer:
    """Whitespace-delimited tokens; truncation keeps the original spacing."""

    def tokenize(self, text: str) -> list[str]:
        return text.split()

    def truncate(self, text: str, n_tokens: int) -> str:
        if n_tokens <= 0:
            return ""
        for i, match in enumerate(_TOKEN_RE.finditer(text), start=1):
            if i == n_tokens:
                return text[: match.end()]
        return text

    def __repr__(self) -> str:
        return "WhitespaceTokenizer()"


DEFAULT_TOKENIZER = WhitespaceTokenizer()


def keyed_uniform(seed: int, stream: str, index: int) -> float:
    """Uniform draw in [0, 1) addressed by ``(seed, stream, index)``.

    Per-sample draws depend only on the sample's global position, so a corpus
    processed in shards gives the same result as one processed whole.
    """
    digest = hashlib.blake2b(f"{seed}:{stream}:{index}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big") / 2.0**64


def keyed_choice(seed: int, stream: str, index: int, options: Sequence):
    return options[int(keyed_uniform(seed, stream, index) * len(options))]
