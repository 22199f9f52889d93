"""Interpolated Kneser-Ney n-grams, a decaying word cache, and linear ensembles.

Lower orders use continuation counts (number of distinct left neighbours);
the unigram level interpolates with a uniform distribution over the whole
vocabulary so every word keeps nonzero probability. Histories shorter than
order - 1 (the start of a stream) are scored by the lower-order model.
"""

from __future__ import annotations

import csv
import itertools
import math
from collections import defaultdict

import numpy as np

from .kernels import NumericError


class NgramModel:
    def __init__(self, tokens, vocab_size: int, order: int = 5, discount=0.75):
        tokens = [int(t) for t in tokens]
        if not tokens:
            raise ValueError("cannot train on an empty corpus")
        if order < 1:
            raise ValueError("order must be >= 1")
        if max(tokens) >= vocab_size or min(tokens) < 0:
            raise ValueError("token id outside vocabulary")
        self.order = order
        self.vocab_size = vocab_size
        d = [discount] * order if np.isscalar(discount) else list(discount)
        if len(d) != order or not all(0 < x < 1 for x in d):
            raise ValueError("need one discount in (0, 1) per order")
        self.discount = d

        # raw counts of every order (kept for dumps and the top-order table)
        self.counts = [None] + [defaultdict(int) for _ in range(order)]
        for m in range(1, order + 1):
            table = self.counts[m]
            for i in range(len(tokens) - m + 1):
                table[tuple(tokens[i:i + m])] += 1

        # table[m][gram]: raw count at the top order, continuation count below
        self.table = [None] * (order + 1)
        self.table[order] = dict(self.counts[order])
        for m in range(1, order):
            cont = defaultdict(int)
            for gram in self.counts[m + 1]:
                cont[gram[1:]] += 1
            self.table[m] = dict(cont)

        # per-history totals and number of distinct followers
        self.total = [None] + [defaultdict(int) for _ in range(order)]
        self.types = [None] + [defaultdict(int) for _ in range(order)]
        for m in range(1, order + 1):
            for gram, c in self.table[m].items():
                self.total[m][gram[:-1]] += c
                self.types[m][gram[:-1]] += 1
        self._cache = {}

    def _prob(self, word: int, hist: tuple) -> float:
        m = len(hist) + 1
        key = (word, hist)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        lower = 1.0 / self.vocab_size if m == 1 else self._prob(word, hist[1:])
        total = self.total[m].get(hist, 0)
        if total == 0:
            p = lower
        else:
            d = self.discount[m - 1]
            c = self.table[m].get(hist + (word,), 0)
            p = max(c - d, 0.0) / total + d * self.types[m][hist] / total * lower
        if len(self._cache) < 2_000_000:
            self._cache[key] = p
        return p

    def prob(self, word: int, history=()) -> float:
        """P(word | history); only the last order-1 history tokens are used."""
        hist = tuple(int(t) for t in history)[-(self.order - 1):] if self.order > 1 else ()
        return self._prob(int(word), hist)

    def distribution(self, history=()) -> np.ndarray:
        return np.array([self.prob(w, history) for w in range(self.vocab_size)])

    def stream_probs(self, tokens, context=()) -> np.ndarray:
        """P(token_t | preceding tokens) for every position of a stream.

        ``context`` supplies tokens that precede the stream (e.g. the end of
        the training text); it is not scored.
        """
        seq = [int(t) for t in context] + [int(t) for t in tokens]
        start = len(seq) - len(tokens)
        n = self.order - 1
        return np.array([self.prob(seq[i], seq[max(0, i - n):i]) for i in range(start, len(seq))])

    def dump(self, path, words=None) -> None:
        """One line per n-gram: order TAB tokens TAB count."""
        name = (lambda t: words[t]) if words is not None else str
        with open(path, "w", encoding="utf-8") as fh:
            for m in range(1, self.order + 1):
                for gram in sorted(self.counts[m]):
                    fh.write(f"{m}\t{' '.join(name(t) for t in gram)}\t{self.counts[m][gram]}\n")


def kn5_train(tokens, vocab_size: int, discount: float = 0.75) -> NgramModel:
    return NgramModel(tokens, vocab_size, order=5, discount=discount)


def unigram_probs(tokens, vocab_size: int) -> np.ndarray:
    """Add-one unigram distribution; a reference point for training curves."""
    counts = np.bincount(np.asarray(tokens, dtype=np.int64), minlength=vocab_size) + 1.0
    return counts / counts.sum()


class CacheState:
    """Exponentially decaying word counts.

    Every observation multiplies all masses by ``decay`` and adds 1 to the
    observed word. Decay is applied lazily through a shared scale so an
    update costs O(1).
    """

    def __init__(self, vocab_size: int, decay: float = 0.99):
        if not 0 < decay < 1:
            raise ValueError("decay must lie in (0, 1)")
        self.vocab_size = vocab_size
        self.decay = decay
        self._raw = np.zeros(vocab_size)
        self._scale = 1.0
        self.total = 0.0

    @property
    def masses(self) -> np.ndarray:
        return self._raw * self._scale

    def update(self, word: int) -> None:
        self._scale *= self.decay
        if self._scale < 1e-200:
            self._raw *= self._scale
            self._scale = 1.0
        self._raw[word] += 1.0 / self._scale
        self.total = self.total * self.decay + 1.0

    def prob(self, word: int) -> float:
        if self.total == 0:
            return 1.0 / self.vocab_size
        return float(self._raw[word] * self._scale / self.total)

    def distribution(self) -> np.ndarray:
        if self.total == 0:
            return np.full(self.vocab_size, 1.0 / self.vocab_size)
        m = self.masses
        return m / m.sum()


def cache_update(state: CacheState, word: int) -> None:
    state.update(word)


def cache_distribution(state: CacheState) -> np.ndarray:
    return state.distribution()


def cache_stream_probs(tokens, vocab_size: int, decay: float = 0.99, context=()) -> np.ndarray:
    """Probability the cache assigns to each token before observing it."""
    cache = CacheState(vocab_size, decay)
    for w in context:
        cache.update(int(w))
    out = np.empty(len(tokens))
    for i, w in enumerate(tokens):
        out[i] = cache.prob(int(w))
        cache.update(int(w))
    return out


def interpolate(components, tol: float = 1e-9) -> np.ndarray:
    """Convex combination of [(probabilities, weight), ...].

    Works on full distributions or on per-token probability arrays alike;
    the string "uniform" may stand in for a probability array together with
    ``vocab_size`` given as a third tuple item, e.g. ("uniform", 0.07, V).
    """
    weights = [c[1] for c in components]
    if any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > tol:
        raise ValueError(f"weights must be >= 0 and sum to 1, got {weights}")
    out = 0.0
    for comp in components:
        probs, w = comp[0], comp[1]
        if isinstance(probs, str):
            if probs != "uniform":
                raise ValueError(f"unknown component {probs!r}")
            probs = 1.0 / comp[2]
        out = out + w * np.asarray(probs, dtype=np.float64)
    return out


class PerplexityMeter:
    """Streams token probabilities; the result does not depend on chunking."""

    def __init__(self):
        self._logs = []
        self.count = 0

    def add(self, probs) -> None:
        probs = np.asarray(probs, dtype=np.float64).reshape(-1)
        bad = np.nonzero(~(probs > 0))[0]
        if len(bad):
            raise NumericError(f"zero probability at stream position {self.count + int(bad[0])}")
        self._logs.extend(np.log(probs).tolist())
        self.count += len(probs)

    def value(self) -> float:
        if not self.count:
            raise ValueError("no tokens scored")
        return math.exp(-math.fsum(self._logs) / self.count)


def perplexity(probs) -> float:
    meter = PerplexityMeter()
    meter.add(probs)
    return meter.value()


def simplex_grid(n: int, step: float):
    """All weight vectors on the simplex with the given step, in lexicographic order."""
    m = round(1.0 / step)
    if abs(m * step - 1.0) > 1e-9:
        raise ValueError("grid step must divide 1")
    for head in itertools.product(range(m + 1), repeat=n - 1):
        rest = m - sum(head)
        if rest >= 0:
            yield tuple(h / m for h in head) + (rest / m,)


def tune_weights(component_probs, step: float = 0.05):
    """Exhaustive simplex search minimising perplexity of the mixture.

    ``component_probs`` is [n_components, n_tokens] of per-token
    probabilities. Returns (weights, perplexity, n_evaluations); ties keep
    the earliest grid point.
    """
    probs = np.asarray(component_probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] < 2:
        raise ValueError("need at least two components")
    best, best_w, evals = math.inf, None, 0
    grid = list(simplex_grid(probs.shape[0], step))
    for i in range(0, len(grid), 256):
        chunk = np.array(grid[i:i + 256])
        mix = chunk @ probs
        with np.errstate(divide="ignore"):
            nll = -np.log(mix).mean(axis=1)
        for w, v in zip(grid[i:i + 256], nll):
            evals += 1
            if v < best:
                best, best_w = v, w
    if best_w is None:
        raise NumericError("every grid point assigns zero probability to some token")
    return np.array(best_w), math.exp(best), evals


def write_report(path, tokens, names, component_probs, ensemble_probs, words=None) -> None:
    """CSV: position, token, -log p per component, ensemble."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(["position", "token"] + [f"nll_{n}" for n in names] + ["nll_ensemble"])
        comps = np.asarray(component_probs, dtype=np.float64)
        for i, tok in enumerate(tokens):
            label = words[tok] if words is not None else int(tok)
            row = [-math.log(p) if p > 0 else math.inf for p in comps[:, i]]
            out.writerow([i, label] + [f"{v:.6f}" for v in row]
                         + [f"{-math.log(ensemble_probs[i]):.6f}"])
