"""Label cycles rendered as streams of randomly chosen exemplar images."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049


class DataError(ValueError):
    pass


def parse_cycle(text: str) -> list[int]:
    """'0,1,2, 0,2,1' -> [0, 1, 2, 0, 2, 1]"""
    try:
        return [int(tok) for tok in text.replace(" ", "").split(",") if tok]
    except ValueError as exc:
        raise DataError(f"bad label cycle {text!r}") from exc


def markov_order(cycle) -> int:
    """Shortest history (ending at the current label) that fixes the next label.

    Brute force over every phase of the repeating cycle.
    """
    n = len(cycle)
    if n == 0:
        raise DataError("empty cycle")
    for k in range(1, n + 1):
        seen = {}
        for i in range(n):
            hist = tuple(cycle[(i - j) % n] for j in range(k))
            if seen.setdefault(hist, cycle[(i + 1) % n]) != cycle[(i + 1) % n]:
                break
        else:
            return k
    raise DataError("cycle is not predictable from any finite history")


@dataclass
class SequenceTask:
    label_cycle: list
    pools: dict = field(repr=False)  # label -> [n, features] float32
    markov_order: int | None = None

    def __post_init__(self):
        found = markov_order(self.label_cycle)
        if self.markov_order is None:
            self.markov_order = found
        elif self.markov_order != found:
            raise DataError(f"declared order {self.markov_order}, brute force finds {found}")
        for lab in set(self.label_cycle):
            if lab not in self.pools or len(self.pools[lab]) == 0:
                raise DataError(f"no exemplars for label {lab}")

    @property
    def n_labels(self) -> int:
        return max(self.pools) + 1

    @property
    def n_features(self) -> int:
        return next(iter(self.pools.values())).shape[1]


class ImageSequenceStream:
    """Endless batched walk through the cycle, one random exemplar per step.

    Rows start at random phases and are never reset. ``step()`` returns
    (image, next_image, next_label, label).
    """

    def __init__(self, task: SequenceTask, batch: int, rng):
        self.task = task
        self.rng = rng
        self.phase = rng.integers(len(task.label_cycle), (batch,))
        self.current = self._draw(self._labels(self.phase))

    def _labels(self, phase):
        return np.asarray(self.task.label_cycle)[phase % len(self.task.label_cycle)]

    def _draw(self, labels):
        out = np.empty((len(labels), self.task.n_features), dtype=np.float32)
        for r, lab in enumerate(labels):
            pool = self.task.pools[int(lab)]
            out[r] = pool[self.rng.integers(len(pool))]
        return out

    def step(self):
        labels = self._labels(self.phase)
        self.phase = (self.phase + 1) % len(self.task.label_cycle)
        next_labels = self._labels(self.phase)
        image = self.current
        self.current = self._draw(next_labels)
        return image, self.current, next_labels, labels


def image_sequence_stream(task: SequenceTask, rng, batch: int = 1) -> ImageSequenceStream:
    return ImageSequenceStream(task, batch, rng)


# IDX files ------------------------------------------------------------------

def _open_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def read_idx(path, magic: int) -> np.ndarray:
    """Parse an unsigned-byte IDX file with the given magic number."""
    raw = _open_bytes(path)
    if len(raw) < 8:
        raise DataError(f"{path}: truncated header")
    found, = struct.unpack(">I", raw[:4])
    if found != magic:
        raise DataError(f"{path}: bad magic {found}, expected {magic}")
    ndim = raw[3]
    if len(raw) < 4 + 4 * ndim:
        raise DataError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    start = 4 + 4 * ndim
    need = int(np.prod(dims))
    if len(raw) - start < need:
        raise DataError(f"{path}: truncated, {len(raw) - start} of {need} data bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=start).reshape(dims)


def write_idx(path, data: np.ndarray) -> None:
    """Write uint8 data as IDX (magic 2049 for 1-D, 2051 for 3-D)."""
    data = np.ascontiguousarray(data, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">HBB", 0, 0x08, data.ndim))
        fh.write(struct.pack(f">{data.ndim}I", *data.shape))
        fh.write(data.tobytes())


def mnist_ingest(images_path, labels_path) -> dict:
    """Images scaled to [0, 1], flattened to 784 and grouped by label."""
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
        raise DataError(f"image/label files disagree: {images.shape} vs {labels.shape}")
    flat = images.reshape(len(images), -1).astype(np.float32) / 255.0
    return {int(lab): flat[labels == lab] for lab in np.unique(labels)}


def find_mnist(directory) -> tuple[Path, Path, Path, Path]:
    """Locate the four standard MNIST files (optionally gzipped) in a directory."""
    d = Path(directory)
    names = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte",
             "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"]
    found = []
    for name in names:
        for cand in (d / name, d / (name + ".gz"), d / name.replace("-idx", ".idx")):
            if cand.exists():
                found.append(cand)
                break
        else:
            raise DataError(f"{name} not found in {d}")
    return tuple(found)


def synthetic_pools(n_labels: int, per_label: int, rng, side: int = 28, flip: float = 0.1,
                    density: float = 0.2) -> dict:
    """Noisy binary prototypes, one per label; a stand-in when no image data is present."""
    protos = rng.random((n_labels, side * side)) < density
    pools = {}
    for lab in range(n_labels):
        noise = rng.random((per_label, side * side)) < flip
        pools[lab] = (protos[lab][None] ^ noise).astype(np.float32)
    return pools
