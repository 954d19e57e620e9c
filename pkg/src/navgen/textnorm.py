"""Text normalization shared by the word tokenizer and the text metrics."""

import re

_WORD_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


def split_words(text: str) -> list[str]:
    """Lower-case and split into word/punctuation tokens.

    "Turn left." -> ["turn", "left", "."]
    """
    return _WORD_RE.findall(text.lower())


def join_words(words) -> str:
    return " ".join(words)
