"""Transcript normalisation and the CTC vocabulary."""

import re
import string
from dataclasses import dataclass, field
from pathlib import Path

BLANK_TOKEN = "<blank>"
PIPE = "|"
DEFAULT_ALPHABET = string.ascii_lowercase[:8]
LETTERS = string.ascii_lowercase

_WHITESPACE = re.compile(r"\s+")


class TranscriptError(ValueError):
    pass


def normalize_transcript(raw, alphabet=LETTERS, strict=True):
    """Lowercase, strip punctuation and join words with pipes.

    Punctuation is anything that is not a letter, digit or whitespace, so
    apostrophes vanish ("Don't" -> "dont"). An existing pipe counts as a word
    break, which keeps the function idempotent. Characters left over that are
    outside ``alphabet`` raise in strict mode and are dropped otherwise.
    """
    text = raw.lower().replace(PIPE, " ")
    text = "".join(ch for ch in text if ch.isalnum() or ch.isspace())
    allowed = set(alphabet)
    bad = sorted({ch for ch in text if not ch.isspace() and ch not in allowed})
    if bad:
        if strict:
            raise TranscriptError(f"characters outside alphabet: {''.join(bad)!r}")
        text = "".join(ch for ch in text if ch.isspace() or ch in allowed)
    return PIPE.join(_WHITESPACE.split(text.strip())) if text.strip() else ""


@dataclass(frozen=True)
class Vocab:
    symbols: tuple
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        symbols = tuple(self.symbols)
        if not symbols or symbols[0] != BLANK_TOKEN:
            raise ValueError(f"vocabulary must start with {BLANK_TOKEN!r}")
        if len(set(symbols)) != len(symbols):
            raise ValueError("vocabulary symbols must be unique")
        if symbols.count(PIPE) != 1:
            raise ValueError("vocabulary must contain the pipe symbol exactly once")
        object.__setattr__(self, "symbols", symbols)
        object.__setattr__(self, "index", {s: i for i, s in enumerate(symbols)})

    @classmethod
    def from_alphabet(cls, alphabet=DEFAULT_ALPHABET):
        return cls((BLANK_TOKEN, *alphabet, PIPE))

    @property
    def blank(self):
        return 0

    @property
    def pipe_id(self):
        return self.index[PIPE]

    @property
    def alphabet(self):
        return "".join(s for s in self.symbols[1:] if s != PIPE)

    def __len__(self):
        return len(self.symbols)

    def save(self, path):
        Path(path).write_text("\n".join(self.symbols) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(line for line in lines if line))


def encode(normalized, vocab):
    ids = []
    for pos, ch in enumerate(normalized):
        i = vocab.index.get(ch)
        if i is None or i == vocab.blank:
            raise TranscriptError(f"unknown character {ch!r} at position {pos}")
        ids.append(i)
    return ids


def decode(ids, vocab):
    out = []
    for pos, i in enumerate(ids):
        i = int(i)
        if i == vocab.blank:
            raise TranscriptError(f"blank id at position {pos} cannot be decoded")
        if not 0 < i < len(vocab):
            raise TranscriptError(f"id {i} at position {pos} out of range")
        out.append(vocab.symbols[i])
    return "".join(out)
