"""Bouncing balls in a box: simulation, rendering, dataset files, scoring.

Constants follow the widely used 30x30, three-ball setup: a 10-unit box,
radius 1.2 and a combined speed of 0.5 units per frame split over the balls.
Motion is force-free, so symplectic Euler reduces to x += v*dt; walls mirror
the position and flip the normal velocity, and equal-mass ball contacts
exchange the normal velocity components.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"BBV1"


@dataclass
class BallsWorld:
    n_balls: int = 3
    radius: float = 1.2
    box: float = 10.0
    res: int = 30
    speed: float = 0.5  # norm of the stacked velocity matrix, units per frame
    substeps: int = 2
    pos: np.ndarray = field(default=None, repr=False)
    vel: np.ndarray = field(default=None, repr=False)

    def place(self, rng, max_tries: int = 10_000) -> None:
        """Rejection-sample non-overlapping positions and random headings."""
        lo, hi = self.radius, self.box - self.radius
        for _ in range(max_tries):
            pos = lo + (hi - lo) * rng.random((self.n_balls, 2))
            d = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
            if np.all(d[np.triu_indices(self.n_balls, 1)] > 2 * self.radius):
                break
        else:
            raise RuntimeError("could not place balls without overlap")
        vel = rng.normal((self.n_balls, 2))
        self.pos = pos
        self.vel = vel / np.linalg.norm(vel) * self.speed

    def kinetic_energy(self) -> float:
        return 0.5 * float(np.sum(self.vel ** 2))

    def advance(self) -> None:
        """One frame of motion, in ``substeps`` collision-checked increments."""
        dt = 1.0 / self.substeps
        lo, hi = self.radius, self.box - self.radius
        for _ in range(self.substeps):
            self.pos += dt * self.vel
            below, above = self.pos < lo, self.pos > hi
            self.pos[below] = 2 * lo - self.pos[below]
            self.pos[above] = 2 * hi - self.pos[above]
            self.vel[below] = np.abs(self.vel[below])
            self.vel[above] = -np.abs(self.vel[above])
            for i in range(self.n_balls):
                for j in range(i):
                    self._collide(i, j)

    def _collide(self, i: int, j: int) -> None:
        w = self.pos[i] - self.pos[j]
        dist = np.linalg.norm(w)
        if dist >= 2 * self.radius or dist == 0:
            return
        w = w / dist
        vi, vj = self.vel[i] @ w, self.vel[j] @ w
        if vi - vj >= 0:  # already separating
            return
        self.vel[i] += (vj - vi) * w
        self.vel[j] += (vi - vj) * w

    def render(self) -> np.ndarray:
        """Anti-aliased discs from 4x4 supersampling, clipped to [0, 1]."""
        ss = 4
        n = self.res * ss
        coords = (np.arange(n) + 0.5) * (self.box / n)
        frame = np.zeros((n, n))
        r2 = self.radius ** 2
        for cy, cx in self.pos:
            dy = (coords - cy) ** 2
            dx = (coords - cx) ** 2
            frame += (dy[:, None] + dx[None, :]) <= r2
        frame = np.minimum(frame, 1.0)
        return frame.reshape(self.res, ss, self.res, ss).mean(axis=(1, 3)).astype(np.float32)


def balls_simulate(world: BallsWorld, n_frames: int, rng=None) -> np.ndarray:
    """Render ``n_frames`` frames, placing the balls first if ``rng`` is given."""
    if rng is not None:
        world.place(rng)
    out = np.empty((n_frames, world.res, world.res), dtype=np.float32)
    for t in range(n_frames):
        out[t] = world.render()
        world.advance()
    return out


def balls_dataset(n_sequences: int, n_frames: int, rng, **world_kw) -> np.ndarray:
    return np.stack([balls_simulate(BallsWorld(**world_kw), n_frames, rng)
                     for _ in range(n_sequences)])


class BallsStream:
    """Endless batches of consecutive frames; each row restarts independently.

    ``step()`` returns (frame, next_frame, reset_rows), where reset_rows
    flags rows whose frame is the first of a new sequence.
    """

    def __init__(self, batch: int, rng, seq_len: int = 100, **world_kw):
        self.rng = rng
        self.seq_len = seq_len
        self.world_kw = world_kw
        self.seqs = [self._new() for _ in range(batch)]
        self.pos = np.zeros(batch, dtype=int)

    def _new(self):
        return balls_simulate(BallsWorld(**self.world_kw), self.seq_len, self.rng)

    def step(self):
        reset = self.pos == 0
        cur = np.stack([s[p] for s, p in zip(self.seqs, self.pos)])
        nxt = np.stack([s[p + 1] for s, p in zip(self.seqs, self.pos)])
        self.pos += 1
        for r in np.nonzero(self.pos >= self.seq_len - 1)[0]:
            self.seqs[r] = self._new()
            self.pos[r] = 0
        return cur, nxt, reset


# files --------------------------------------------------------------------

def write_bbv1(path, frames: np.ndarray) -> None:
    """frames: [n_sequences, frames, height, width] float32."""
    frames = np.asarray(frames, dtype="<f4")
    if frames.ndim != 4:
        raise ValueError("expected [sequences, frames, height, width]")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<4I", *frames.shape))
        fh.write(frames.tobytes())


def read_bbv1(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 20:
        raise ValueError(f"{path}: truncated header")
    shape = struct.unpack("<4I", raw[4:20])
    need = 20 + 4 * int(np.prod(shape))
    if len(raw) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=20).reshape(shape).astype(np.float32)


def write_pgm(path, frame: np.ndarray) -> None:
    """8-bit binary PGM of a [0,1] frame."""
    img = np.clip(np.rint(np.asarray(frame) * 255), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


# scoring ------------------------------------------------------------------

@dataclass
class NfError:
    mean: float
    stderr: float
    baseline_mean: float
    baseline_stderr: float


def _mean_stderr(per_seq: np.ndarray) -> tuple[float, float]:
    n = len(per_seq)
    sd = float(np.std(per_seq, ddof=1)) if n > 1 else 0.0
    return float(np.mean(per_seq)), sd / float(np.sqrt(n))


def balls_nf_error(predict, test_set: np.ndarray, burn_in: int = 0) -> NfError:
    """Next-frame error: per-frame sum of squared pixel errors.

    ``predict(frames)`` maps [n, T, H, W] to predictions [n, T-1, H, W] of
    frames 1..T-1 from the frames before them. Errors are averaged over
    frames, then mean and standard error are taken over sequences. The
    previous-frame baseline is scored on the same transitions. The first
    ``burn_in`` transitions of every sequence are excluded from both.
    """
    test_set = np.asarray(test_set, dtype=np.float64)
    target = test_set[:, 1 + burn_in:]
    pred = np.asarray(predict(test_set.astype(np.float32)), dtype=np.float64)[:, burn_in:]
    if pred.shape != target.shape:
        raise ValueError(f"predictions {pred.shape} != targets {target.shape}")
    err = ((pred - target) ** 2).sum(axis=(2, 3)).mean(axis=1)
    base = ((test_set[:, burn_in:-1] - target) ** 2).sum(axis=(2, 3)).mean(axis=1)
    return NfError(*_mean_stderr(err), *_mean_stderr(base))


def pixel_energy(frames: np.ndarray) -> np.ndarray:
    """Total intensity of each frame (sum over the last two axes)."""
    return np.asarray(frames, dtype=np.float64).sum(axis=(-2, -1))
