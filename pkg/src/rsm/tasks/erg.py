"""Embedded Reber grammar: generator, streaming batches and scoring.

A sample is ``B F <reber> F E`` where F is T or P chosen at the opening
fork; the inner Reber string also uses T and P, so predicting the closing
F requires remembering the opening one across the whole distraction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SYMBOLS = "BTPSXVE"
INDEX = {s: i for i, s in enumerate(SYMBOLS)}
N_SYMBOLS = len(SYMBOLS)

# inner Reber graph: state -> [(symbol, next_state)], None marks accept
REBER = {
    0: [("B", 1)],
    1: [("T", 2), ("P", 3)],
    2: [("S", 2), ("X", 4)],
    3: [("T", 3), ("V", 5)],
    4: [("X", 3), ("S", 6)],
    5: [("P", 4), ("V", 6)],
    6: [("E", None)],
}


@dataclass
class ErgSample:
    symbols: str
    legal_next: list  # frozenset of legal successors after each symbol
    fork_position: int  # index whose successor is the closing fork symbol

    def __len__(self):
        return len(self.symbols)


def erg_sample(rng) -> ErgSample:
    """Draw one embedded Reber string with a fair coin at every fork."""
    fork = "T" if rng.random() < 0.5 else "P"
    out = ["B", fork]
    legal = [frozenset("TP"), frozenset("B")]
    state = 0
    while state is not None:
        edges = REBER[state]
        sym, state = edges[0] if len(edges) == 1 else edges[int(rng.random() < 0.5)]
        out.append(sym)
        legal.append(frozenset(s for s, _ in REBER[state]) if state is not None else frozenset(fork))
    fork_position = len(out) - 1
    out.append(fork)
    legal.append(frozenset("E"))
    out.append("E")
    legal.append(frozenset("B"))  # stream continues with the next sample
    return ErgSample("".join(out), legal, fork_position)


def one_hot(symbols, n=N_SYMBOLS) -> np.ndarray:
    idx = [INDEX[s] if isinstance(s, str) else int(s) for s in symbols]
    out = np.zeros((len(idx), n), dtype=np.float32)
    out[np.arange(len(idx)), idx] = 1
    return out


class ErgStream:
    """Per-row endless concatenation of samples.

    After each ``step()``, ``starts`` flags the rows whose current symbol
    opened a new sample, so a caller can reset those rows first.
    """

    def __init__(self, batch: int, rng):
        self.rng = rng
        self.rows = [erg_sample(rng) for _ in range(batch)]
        self.pos = [0] * batch
        self.starts = np.zeros(batch, dtype=bool)

    def step(self):
        """Advance every row one symbol.

        Returns (current one-hot [b,7], next one-hot [b,7], next label [b]).
        """
        cur, nxt = [], []
        self.starts = np.array([p == 0 for p in self.pos])
        for r, sample in enumerate(self.rows):
            p = self.pos[r]
            cur.append(sample.symbols[p])
            if p + 1 < len(sample):
                self.pos[r] = p + 1
            else:
                self.rows[r] = erg_sample(self.rng)
                self.pos[r] = 0
            nxt.append(self.rows[r].symbols[self.pos[r]])
        labels = np.array([INDEX[s] for s in nxt])
        return one_hot(cur), one_hot(labels), labels


def legal_set_predicted(probs: np.ndarray, legal: frozenset) -> bool:
    """True iff exactly the legal symbols exceed 0.5 / |legal|."""
    threshold = 0.5 / len(legal)
    predicted = {SYMBOLS[i] for i in np.flatnonzero(probs > threshold)}
    return predicted == set(legal)


@dataclass
class ErgReport:
    accuracy: float
    fork_accuracy: float
    n: int


def erg_evaluate(model, n_sequences: int, rng, batch: int | None = None,
                 reset: bool = False) -> ErgReport:
    """Sequence accuracy of ``model`` on freshly drawn samples.

    ``model.predict(x)`` takes a one-hot batch and returns next-symbol
    probabilities while advancing its own state; ``model.batch`` gives the
    row count. A sample counts only if every transition from its first
    symbol up to and including the closing fork is predicted exactly.
    With ``reset`` a row's state is zeroed (``model.reset_rows``) as each
    sample begins.
    """
    batch = batch or model.batch
    queue = [erg_sample(rng) for _ in range(n_sequences)]
    queue.reverse()
    current = [queue.pop() if queue else None for _ in range(batch)]
    pos = [0] * batch
    ok = [True] * batch
    correct = fork_correct = done = 0
    while any(s is not None for s in current):
        syms = [s.symbols[pos[r]] if s is not None else "B" for r, s in enumerate(current)]
        if reset:
            model.reset_rows(np.array([p == 0 for p in pos]))
        probs = model.predict(one_hot(syms))
        for r, s in enumerate(current):
            if s is None:
                continue
            p = pos[r]
            if p < len(s) - 1:  # successor of the final E belongs to the next sample
                hit = legal_set_predicted(probs[r], s.legal_next[p])
                ok[r] &= hit
                if p == s.fork_position:
                    fork_correct += hit
            pos[r] += 1
            if pos[r] == len(s):
                correct += ok[r]
                done += 1
                current[r] = queue.pop() if queue else None
                pos[r], ok[r] = 0, True
    return ErgReport(correct / done, fork_correct / done, done)


def reber_regex() -> str:
    """Regular expression for the embedded grammar, derived by hand from the graph."""
    tail = "(?:XT*VP)*(?:S|XT*VV)"
    inner = f"B(?:TS*X{tail}|PT*V(?:V|P{tail}))E"
    return f"^B(?:T{inner}T|P{inner}P)E$"
