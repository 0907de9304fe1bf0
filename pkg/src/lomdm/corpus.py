"""Character-level corpora and the synthetic key=value grammar."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import RandomStream, Vocabulary

PAD = "\x00"
PAD_DISPLAY = "_"


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Corpus:
    """Sequences of equal length plus the character table they were encoded with.

    Token ids are positions in ``alphabet``; alphabets built from text are sorted
    by codepoint, so the pad character comes first.
    """

    sequences: np.ndarray
    alphabet: str

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(len(self.alphabet))

    @property
    def length(self) -> int:
        return int(self.sequences.shape[1])

    @property
    def pad_id(self) -> int:
        return self.alphabet.index(PAD)

    def decode(self, seq, mask_char: str = "?") -> str:
        chars = []
        for tok in np.asarray(seq).tolist():
            if tok == self.vocab.mask_id:
                chars.append(mask_char)
            else:
                ch = self.alphabet[tok]
                chars.append(PAD_DISPLAY if ch == PAD else ch)
        return "".join(chars)

    def encode(self, text: str) -> np.ndarray:
        index = {c: i for i, c in enumerate(self.alphabet)}
        try:
            ids = [index[c] for c in text]
        except KeyError as exc:
            raise CorpusError(f"character {exc.args[0]!r} is not in the corpus alphabet") from None
        ids += [self.pad_id] * (self.length - len(ids))
        return np.asarray(ids[: self.length], dtype=np.int64)

    def split(self, n_valid: int) -> tuple["Corpus", "Corpus"]:
        return (Corpus(self.sequences[n_valid:], self.alphabet), Corpus(self.sequences[:n_valid], self.alphabet))


def corpus_from_text(text: str, length: int, max_vocab: int | None = None, alphabet: str | None = None) -> Corpus:
    if length < 1:
        raise CorpusError("sequence length must be positive")
    lines = [ln for ln in text.splitlines() if ln]
    if not lines:
        raise CorpusError("corpus is empty")
    if PAD in text:
        raise CorpusError("corpus contains the reserved pad character")
    if alphabet is None:
        alphabet = "".join(sorted(set("".join(lines)) | {PAD}))
    if max_vocab is not None and len(alphabet) > max_vocab:
        raise CorpusError(f"corpus needs {len(alphabet)} symbols including pad, cap is {max_vocab}")
    index = {c: i for i, c in enumerate(alphabet)}
    rows = []
    for ln in lines:
        for start in range(0, len(ln), length):
            piece = ln[start:start + length]
            try:
                ids = [index[c] for c in piece]
            except KeyError as exc:
                raise CorpusError(f"character {exc.args[0]!r} is not in the alphabet") from None
            rows.append(ids + [index[PAD]] * (length - len(ids)))
    return Corpus(np.asarray(rows, dtype=np.int64), alphabet)


def ingest_corpus(path, length: int, max_vocab: int | None = None) -> Corpus:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise CorpusError(f"{path}: not valid UTF-8 ({exc.reason})") from None
    return corpus_from_text(text, length, max_vocab)


# ---------------------------------------------------------------------------
# synthetic grammar

KEYS = "abcdefgh"
VALUE_OF = {"a": "p", "b": "p", "c": "q", "d": "q", "e": "r", "f": "r", "g": "s", "h": "s"}
GRAMMAR_ALPHABET = "".join(sorted(set(KEYS) | set(VALUE_OF.values()) | {"=", ",", PAD}))


def grammar_lines(n: int, seed: int, grammar: str = "kv", records: int = 4) -> list[str]:
    """Lines of ``records`` entries ``k=v,`` where the value is a fixed, non-injective function of the key.

    Keys determine values, but a value leaves its key ambiguous, so revealing keys
    before values is the easier generation order.
    """
    if grammar != "kv":
        raise CorpusError(f"unknown grammar {grammar!r}")
    rng = RandomStream(seed).child("grammar", 0).generator
    keys = rng.integers(0, len(KEYS), size=(n, records))
    return ["".join(f"{KEYS[k]}={VALUE_OF[KEYS[k]]}," for k in row) for row in keys]


def synthetic_corpus(n: int, seed: int, grammar: str = "kv", records: int = 4) -> Corpus:
    lines = grammar_lines(n, seed, grammar, records)
    return corpus_from_text("\n".join(lines), 4 * records, alphabet=GRAMMAR_ALPHABET)


def grammar_valid(text: str) -> bool:
    """True when ``text`` is a well-formed run of ``k=v,`` records."""
    if len(text) % 4:
        return False
    for i in range(0, len(text), 4):
        k, eq, v, comma = text[i:i + 4]
        if eq != "=" or comma != "," or VALUE_OF.get(k) != v:
            return False
    return True
