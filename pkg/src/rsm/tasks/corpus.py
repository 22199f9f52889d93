"""Word-level corpora and batched next-word streams."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .sequences import DataError

UNK = "<unk>"
EOS = "<eos>"


def tokenize(text: str, eos: bool = True) -> list[str]:
    """Whitespace tokens; every non-empty line ends with an end-of-sentence token."""
    out = []
    for line in text.splitlines():
        words = line.split()
        if words:
            out.extend(words)
            if eos:
                out.append(EOS)
    return out


def build_vocab(words, max_size: int = 10_000) -> list[str]:
    """Most frequent words first (ties alphabetical), with <unk> and <eos> reserved."""
    counts = Counter(w for w in words if w not in (UNK, EOS))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    vocab = [UNK, EOS] + [w for w, _ in ranked[: max_size - 2]]
    return vocab


def save_vocab(path, vocab) -> None:
    Path(path).write_text("".join(w + "\n" for w in vocab), encoding="utf-8")


def load_vocab(path) -> list[str]:
    vocab = Path(path).read_text(encoding="utf-8").split("\n")
    if vocab and vocab[-1] == "":
        vocab.pop()
    if UNK not in vocab:
        raise DataError(f"{path}: vocabulary lacks {UNK}")
    if len(set(vocab)) != len(vocab):
        raise DataError(f"{path}: duplicate vocabulary entries")
    return vocab


@dataclass
class Corpus:
    vocab: list
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        self.index = {w: i for i, w in enumerate(self.vocab)}

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def encode(self, words) -> np.ndarray:
        unk = self.index[UNK]
        return np.array([self.index.get(w, unk) for w in words], dtype=np.int64)

    def decode(self, ids) -> list[str]:
        return [self.vocab[int(i)] for i in ids]

    @classmethod
    def from_texts(cls, train: str, valid: str = "", test: str = "", vocab=None,
                   max_vocab: int = 10_000) -> "Corpus":
        tr = tokenize(train)
        if not tr:
            raise DataError("empty training text")
        vocab = list(vocab) if vocab is not None else build_vocab(tr, max_vocab)
        c = cls(vocab, np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64))
        c.train, c.valid, c.test = c.encode(tr), c.encode(tokenize(valid)), c.encode(tokenize(test))
        return c

    @classmethod
    def from_dir(cls, directory, max_vocab: int = 10_000) -> "Corpus":
        """Reads ptb.{train,valid,test}.txt (or train/valid/test.txt) and optional vocab.txt."""
        d = Path(directory)
        texts = {}
        for split in ("train", "valid", "test"):
            for name in (f"ptb.{split}.txt", f"{split}.txt"):
                if (d / name).exists():
                    texts[split] = (d / name).read_text(encoding="utf-8")
                    break
            else:
                raise DataError(f"no {split} split in {d}")
        vocab = load_vocab(d / "vocab.txt") if (d / "vocab.txt").exists() else None
        return cls.from_texts(texts["train"], texts["valid"], texts["test"], vocab, max_vocab)


def one_hot(ids, size: int) -> np.ndarray:
    out = np.zeros((len(ids), size), dtype=np.float32)
    out[np.arange(len(ids)), np.asarray(ids)] = 1.0
    return out


def random_codes(vocab_size: int, width: int, active: int, rng) -> np.ndarray:
    """Fixed random binary code per word with ``active`` ones (distinct rows)."""
    if active > width:
        raise ValueError("active bits exceed width")
    codes = np.zeros((vocab_size, width), dtype=np.float32)
    seen = set()
    for w in range(vocab_size):
        while True:
            bits = tuple(sorted(rng.permutation(width)[:active].tolist()))
            if bits not in seen:
                break
        seen.add(bits)
        codes[w, list(bits)] = 1.0
    return codes


class LmStream:
    """Batch rows read the token stream from evenly spaced offsets.

    Row r starts at shift + r * stride and moves forward one token per step,
    wrapping around the end of the stream, so ``stride`` steps visit every
    token once. ``shift`` is drawn from ``rng``. Forgetting is left to the
    model (its forget draw is independent of the stream).
    """

    def __init__(self, ids, batch: int, vocab_size: int, rng=None, codes=None):
        self.codes = codes
        ids = np.asarray(ids, dtype=np.int64)
        if len(ids) < batch + 1:
            raise DataError("stream shorter than batch")
        self.ids = ids
        self.vocab_size = vocab_size
        self.stride = len(ids) // batch
        shift = rng.integers(len(ids)) if rng is not None else 0
        self.pos = (shift + np.arange(batch) * self.stride) % len(ids)
        self.steps = 0

    @property
    def epoch(self) -> float:
        return self.steps / self.stride

    def step(self):
        """(current word codes, next word codes, next ids); one-hot unless ``codes``."""
        cur = self.ids[self.pos]
        nxt = self.ids[(self.pos + 1) % len(self.ids)]
        self.pos = (self.pos + 1) % len(self.ids)
        self.steps += 1
        if self.codes is not None:
            return self.codes[cur], self.codes[nxt], nxt
        return one_hot(cur, self.vocab_size), one_hot(nxt, self.vocab_size), nxt


def lm_stream(corpus_ids, batch: int, vocab_size: int, rng=None, codes=None) -> LmStream:
    return LmStream(corpus_ids, batch, vocab_size, rng, codes)


def synthetic_text(n_tokens: int, vocab: int, rng, branching: int = 3, mean_len: int = 12,
                   order: int = 2) -> str:
    """Sentences from a sparse random Markov chain over words w0..w{vocab-1}.

    Each context (the last ``order`` words, 1 or 2) has ``branching``
    possible successors, so context helps prediction and a unigram model is
    clearly beatable. With a large vocabulary the second-order chain rarely
    revisits a context; ``order=1`` keeps the structure learnable from a
    short stream.
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    words = [f"w{i}" for i in range(vocab)]
    table = {}
    lines, line = [], []
    prev, cur = 0, 1
    for _ in range(n_tokens):
        key = (prev, cur) if order == 2 else cur
        if key not in table:
            table[key] = rng.integers(vocab, (branching,))
        nxt = int(table[key][rng.integers(branching)])
        line.append(words[nxt])
        prev, cur = cur, nxt
        if rng.random() < 1.0 / mean_len:
            lines.append(" ".join(line))
            line = []
    if line:
        lines.append(" ".join(line))
    return "\n".join(lines) + "\n"
