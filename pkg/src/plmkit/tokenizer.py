"""Whitespace tokenizer with a frequency-truncated vocabulary.

Deliberately minimal (no subwords): words are whitespace-separated tokens,
out-of-vocabulary words map to [UNK], and every encode is wrapped in
[BOS] ... [EOS]. This keeps encoding fully deterministic and makes
character-offset bookkeeping exact for word-aligned spans.
"""

from __future__ import annotations

import re
from collections import Counter
from pathlib import Path
from typing import Iterable, Sequence

PAD_TOKEN = "[PAD]"
UNK_TOKEN = "[UNK]"
BOS_TOKEN = "[BOS]"
EOS_TOKEN = "[EOS]"
MASK_TOKEN = "[MASK]"
SPECIAL_TOKENS = (PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN, MASK_TOKEN)

_WORD_RE = re.compile(r"\S+")


class Tokenizer:
    """Maps whitespace-separated words to integer ids and back."""

    def __init__(self, words: Sequence[str]):
        vocab = list(SPECIAL_TOKENS) + [w for w in words if w not in SPECIAL_TOKENS]
        self.id_to_word: list[str] = vocab
        self.word_to_id: dict[str, int] = {w: i for i, w in enumerate(vocab)}
        if len(self.word_to_id) != len(vocab):
            raise ValueError("duplicate words in vocabulary")

    pad_id = 0
    unk_id = 1
    bos_id = 2
    eos_id = 3
    mask_id = 4

    @property
    def vocab_size(self) -> int:
        return len(self.id_to_word)

    def __len__(self) -> int:
        return len(self.id_to_word)

    def __contains__(self, word: str) -> bool:
        return word in self.word_to_id

    def lookup(self, word: str) -> int:
        return self.word_to_id.get(word, self.unk_id)

    def tokenize(self, text: str) -> list[str]:
        return text.split()

    def iter_tokens_with_offsets(self, text: str):
        """Yield (token, (start, end)) character spans, end exclusive."""
        for m in _WORD_RE.finditer(text):
            yield m.group(), (m.start(), m.end())

    def encode(self, text: str, pair: str | None = None, add_specials: bool = True) -> list[int]:
        """Encode text (optionally a text pair) to ids.

        With specials: [BOS] a... [EOS] for single text, and
        [BOS] a... [EOS] b... [EOS] for a pair.
        """
        ids = [self.lookup(w) for w in self.tokenize(text)]
        if not add_specials:
            if pair is not None:
                raise ValueError("pair encoding requires special tokens")
            return ids
        out = [self.bos_id] + ids + [self.eos_id]
        if pair is not None:
            out += [self.lookup(w) for w in self.tokenize(pair)] + [self.eos_id]
        return out

    def encode_with_offsets(self, text: str) -> tuple[list[int], list[tuple[int, int] | None]]:
        """Encode to [BOS] ids [EOS] plus per-token character spans.

        Offsets are (start, end) with end exclusive, indexing into `text`;
        special tokens carry None.
        """
        ids: list[int] = [self.bos_id]
        offsets: list[tuple[int, int] | None] = [None]
        for m in _WORD_RE.finditer(text):
            ids.append(self.lookup(m.group()))
            offsets.append((m.start(), m.end()))
        ids.append(self.eos_id)
        offsets.append(None)
        return ids, offsets

    def decode(self, ids: Iterable[int], skip_specials: bool = True) -> str:
        hidden = {self.pad_id, self.bos_id, self.eos_id} if skip_specials else set()
        return " ".join(self.id_to_word[i] for i in ids if i not in hidden)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.id_to_word) + "\n")

    @classmethod
    def from_vocab_file(cls, path: str | Path) -> "Tokenizer":
        lines = Path(path).read_text().splitlines()
        if lines[: len(SPECIAL_TOKENS)] != list(SPECIAL_TOKENS):
            raise ValueError(f"vocab file {path} does not start with the special tokens")
        return cls(lines[len(SPECIAL_TOKENS):])


def build_tokenizer(corpus: Sequence[str], max_vocab: int) -> Tokenizer:
    """Build a tokenizer from the max_vocab most frequent words in corpus.

    Frequency ties break lexicographically, so the vocabulary is a pure
    function of the corpus contents.
    """
    if max_vocab < 0:
        raise ValueError("max_vocab must be non-negative")
    counts: Counter[str] = Counter()
    for text in corpus:
        counts.update(text.split())
    for special in SPECIAL_TOKENS:
        counts.pop(special, None)
    if not counts:
        raise ValueError("empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Tokenizer([w for w, _ in ranked[:max_vocab]])
