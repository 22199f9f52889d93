"""Training and evaluation loops for the four tasks.

Every task exposes the same small interface: ``step()`` trains on one batch
and returns (rsm_loss, classifier_loss); ``evaluate()`` returns a dict of
metrics computed on a clone so the training state is untouched; the model
round-trips through checkpoints. Resuming rebuilds the data stream from the
seed and replays it to the saved step, so a resumed run matches an
uninterrupted one exactly.
"""

from __future__ import annotations

import csv
import math
import time
from pathlib import Path

import numpy as np

from . import checkpoint, config as config_mod
from .classifier import classify, init_mlp
from .classifier import train_step as mlp_train_step
from .conv import ConvStack, build_stack, self_loop_generate
from .kernels import Optimizer
from .layer import RsmConfig
from .model import MemoryModel
from .ngram import (
    cache_stream_probs,
    interpolate,
    kn5_train,
    perplexity,
    tune_weights,
    unigram_probs,
)
from .prng import Xoshiro256
from .tasks.balls import BallsStream, balls_dataset, balls_nf_error, pixel_energy
from .tasks.corpus import Corpus, LmStream, synthetic_text
from .tasks.erg import N_SYMBOLS, ErgStream, erg_evaluate
from .tasks.sequences import (
    DataError,
    SequenceTask,
    find_mnist,
    image_sequence_stream,
    mnist_ingest,
    parse_cycle,
    synthetic_pools,
)

EVAL_SEED_OFFSET = 1_000_003


def seeds(seed: int):
    """(model rng, stream rng) as independent substreams of one seed."""
    root = Xoshiro256(seed)
    return root.spawn(), root.spawn()


def eval_rng(seed: int, salt: int = 0) -> Xoshiro256:
    return Xoshiro256(seed + EVAL_SEED_OFFSET + salt)


def rsm_config(cfg, input_size: int) -> RsmConfig:
    r = cfg.rsm
    return RsmConfig(input_size=input_size, groups=r.groups, cells=r.cells, k=r.k, gamma=r.gamma,
                     epsilon=r.epsilon, mu=r.mu, recurrent_dropout=r.recurrent_dropout)


def memory_model(cfg, input_size: int, labels: int, rng) -> MemoryModel:
    c = cfg.classifier
    return MemoryModel(rsm_config(cfg, input_size), hidden=c.hidden, labels=labels,
                       batch=cfg.run.batch, rng=rng, lr=cfg.run.lr, l2=c.l2, slope=c.slope,
                       classifier_dropout=c.dropout, classifier_input=c.input)


class Task:
    metric_names: tuple = ()

    def __init__(self, cfg):
        self.cfg = cfg
        self.step_count = 0

    def step(self):
        raise NotImplementedError

    def skip(self):
        """Advance the data stream by one step without training."""
        raise NotImplementedError

    def evaluate(self) -> dict:
        raise NotImplementedError

    def model_checkpoint(self) -> tuple[dict, dict]:
        return self.model.to_checkpoint()

    def load_model(self, config: dict, tensors: dict) -> None:
        self.model = MemoryModel.from_checkpoint(config, tensors)


# ERG --------------------------------------------------------------------------

class ErgTask(Task):
    metric_names = ("accuracy", "fork_accuracy")

    def __init__(self, cfg):
        super().__init__(cfg)
        model_rng, stream_rng = seeds(cfg.run.seed)
        self.model = memory_model(cfg, N_SYMBOLS, N_SYMBOLS, model_rng)
        self.stream = ErgStream(cfg.run.batch, stream_rng)

    def step(self):
        x, nx, labels = self.stream.step()
        if self.cfg.run.reset_on_sample:
            self.model.reset_rows(self.stream.starts)
        return self.model.train_step(x, nx, labels)

    def skip(self):
        self.stream.step()

    def evaluate(self) -> dict:
        rep = erg_evaluate(self.model.eval_clone(), self.cfg.data.eval_sequences,
                           eval_rng(self.cfg.run.seed), reset=self.cfg.run.reset_on_sample)
        return {"accuracy": rep.accuracy, "fork_accuracy": rep.fork_accuracy}


# image sequences ----------------------------------------------------------------

def load_pools(cfg, rng):
    """(train pools, test pools): MNIST from data.dir or synthetic prototypes."""
    if cfg.data.dir:
        tr_i, tr_l, te_i, te_l = find_mnist(cfg.data.dir)
        return mnist_ingest(tr_i, tr_l), mnist_ingest(te_i, te_l)
    if not cfg.data.synthetic:
        raise DataError("image_seq needs [data] dir with MNIST files (or synthetic = true)")
    pools = synthetic_pools(10, 600, rng)
    return ({k: v[:500] for k, v in pools.items()}, {k: v[500:] for k, v in pools.items()})


class ImageSeqTask(Task):
    metric_names = ("accuracy",)

    def __init__(self, cfg, pools=None):
        super().__init__(cfg)
        model_rng, stream_rng = seeds(cfg.run.seed)
        train_pools, self.test_pools = pools or load_pools(cfg, Xoshiro256(cfg.run.seed + 7))
        self.cycle = parse_cycle(cfg.data.cycle)
        self.task = SequenceTask(self.cycle, train_pools)
        n_labels = max(10, self.task.n_labels)
        self.model = memory_model(cfg, self.task.n_features, n_labels, model_rng)
        self.stream = image_sequence_stream(self.task, stream_rng, cfg.run.batch)

    def step(self):
        img, nxt, next_labels, _ = self.stream.step()
        return self.model.train_step(img, nxt, next_labels)

    def skip(self):
        self.stream.step()

    def evaluate(self) -> dict:
        return {"accuracy": sequence_accuracy(self.model, self.cycle, self.test_pools,
                                              self.cfg.data.eval_sequences,
                                              eval_rng(self.cfg.run.seed))}


def sequence_accuracy(model: MemoryModel, cycle, pools, n_predictions: int, rng) -> float:
    """Next-label accuracy on a fresh stream after one cycle of warm-up."""
    clone = model.eval_clone()
    stream = image_sequence_stream(SequenceTask(list(cycle), pools), rng, clone.batch)
    for _ in range(len(cycle)):
        img, _, _, _ = stream.step()
        clone.predict(img)
    correct = total = 0
    while total < n_predictions:
        img, _, next_labels, _ = stream.step()
        probs = clone.predict(img)
        correct += int(np.sum(probs.argmax(1) == next_labels))
        total += len(next_labels)
    return correct / total


def plain_classifier_accuracy(train_pools, test_pools, hidden: int, steps: int, batch: int,
                              rng, lr: float = 0.0005, l2: float = 1e-5) -> float:
    """Same classifier trained to label the current image directly."""
    labels = sorted(train_pools)
    xs = np.concatenate([train_pools[k] for k in labels])
    ys = np.concatenate([np.full(len(train_pools[k]), k) for k in labels])
    mlp = init_mlp(xs.shape[1], hidden, max(labels) + 1, rng, l2=l2)
    opt = Optimizer(lr=lr)
    for _ in range(steps):
        idx = rng.integers(len(xs), (batch,))
        mlp_train_step(mlp, xs[idx], ys[idx], opt)
    tx = np.concatenate([test_pools[k] for k in labels])
    ty = np.concatenate([np.full(len(test_pools[k]), k) for k in labels])
    pred = np.concatenate([classify(mlp, tx[i:i + 1000])[1].argmax(1) for i in range(0, len(tx), 1000)])
    return float(np.mean(pred == ty))


# bouncing balls ------------------------------------------------------------------

def balls_layers(cfg):
    l1 = {k: getattr(cfg.layer1, k) for k in ("groups", "cells", "k", "gamma", "epsilon", "field",
                                            "stride", "pool")}
    l2 = None
    if cfg.layer2.enabled:
        l2 = {k: getattr(cfg.layer2, k) for k in ("groups", "cells", "k", "gamma", "epsilon",
                                                "field", "stride")}
    return l1, l2


def to_canvas(frames: np.ndarray, canvas: int) -> np.ndarray:
    """Embed [..., H, W] frames top-left in a zero canvas and add a channel axis."""
    h, w = frames.shape[-2:]
    out = np.zeros(frames.shape[:-2] + (canvas, canvas, 1), dtype=np.float32)
    out[..., :h, :w, 0] = frames
    return out


class StackPredictor:
    """Runs a clone of a conv stack over whole sequences, batched by sequence."""

    def __init__(self, stack: ConvStack, canvas: int, res: int = 30):
        self.stack, self.canvas, self.res = stack, canvas, res

    def __call__(self, frames: np.ndarray) -> np.ndarray:
        s = self.stack.eval_clone()
        s.reset(frames.shape[0])
        preds = []
        for t in range(frames.shape[1] - 1):
            p, _ = s.step(to_canvas(frames[:, t], self.canvas))
            preds.append(p[:, :self.res, :self.res, 0])
        return np.stack(preds, axis=1)


class BallsTask(Task):
    metric_names = ("nf_error", "baseline_error")

    def __init__(self, cfg):
        super().__init__(cfg)
        model_rng, stream_rng = seeds(cfg.run.seed)
        l1, l2 = balls_layers(cfg)
        c = cfg.data.canvas
        self.model = build_stack(l1, l2, c, c, cfg.run.batch, model_rng, cfg.run.lr)
        self.stream = BallsStream(cfg.run.batch, stream_rng, seq_len=cfg.data.frames)
        self._test = None

    def step(self):
        cur, nxt, reset = self.stream.step()
        if reset.any():
            self.model.reset(rows=reset)
        c = self.cfg.data.canvas
        _, losses = self.model.step(to_canvas(cur, c), to_canvas(nxt, c), training=True)
        return losses["lower"], losses.get("upper", math.nan)

    def skip(self):
        self.stream.step()

    def test_set(self):
        if self._test is None:
            self._test = balls_dataset(self.cfg.data.eval_sequences, self.cfg.data.frames,
                                       eval_rng(self.cfg.run.seed))
        return self._test

    def evaluate(self) -> dict:
        rep = balls_nf_error(StackPredictor(self.model, self.cfg.data.canvas), self.test_set(),
                             burn_in=self.cfg.data.burn_in)
        return {"nf_error": rep.mean, "baseline_error": rep.baseline_mean}

    def model_checkpoint(self):
        return self.model.to_checkpoint()

    def load_model(self, config, tensors):
        self.model = ConvStack.from_checkpoint(config, tensors)


def balls_generate(stack: ConvStack, canvas: int, priming: int, n_steps: int, rng, res: int = 30):
    """(ground truth [priming + n_steps], generated [n_steps]) for one fresh sequence."""
    truth = balls_dataset(1, priming + n_steps, rng)[0]
    prime = to_canvas(truth[:priming], canvas)[:, None]  # [T, 1, H, W, 1]
    s = stack.eval_clone()
    s.reset(1)
    gen = self_loop_generate(s, prime, n_steps)[:, 0, :res, :res, 0]
    return truth, gen


def energy_ratio(truth: np.ndarray, generated: np.ndarray) -> np.ndarray:
    """Generated pixel energy over true energy, frame by frame."""
    return pixel_energy(generated) / pixel_energy(truth)


# language model ---------------------------------------------------------------------

def load_corpus(cfg, rng) -> Corpus:
    if cfg.data.dir:
        return Corpus.from_dir(cfg.data.dir)
    if not cfg.data.synthetic:
        raise DataError("lm needs [data] dir with PTB text files (or synthetic = true)")
    text = synthetic_text(60_000, 300, rng)
    lines = text.splitlines()
    n = len(lines)
    return Corpus.from_texts("\n".join(lines[: int(n * 0.8)]),
                             "\n".join(lines[int(n * 0.8): int(n * 0.9)]),
                             "\n".join(lines[int(n * 0.9):]))


class LmTask(Task):
    metric_names = ("train_ppl", "unigram_ppl", "valid_rsm_ppl")

    def __init__(self, cfg, corpus=None):
        super().__init__(cfg)
        model_rng, stream_rng = seeds(cfg.run.seed)
        self.corpus = corpus or load_corpus(cfg, Xoshiro256(cfg.run.seed + 11))
        train = self.corpus.train
        if cfg.data.train_tokens:
            train = train[: cfg.data.train_tokens]
        self.train_ids = train
        v = self.corpus.vocab_size
        self.model = memory_model(cfg, v, v, model_rng)
        self.stream = LmStream(train, cfg.run.batch, v, stream_rng)
        self.unigram = unigram_probs(train, v)
        self._recent = []

    def step(self):
        x, nx, ids = self.stream.step()
        losses = self.model.train_step(x, nx, ids)
        self._recent.append(losses[1])
        return losses

    def skip(self):
        self.stream.step()

    def model_checkpoint(self):
        config, tensors = self.model.to_checkpoint()
        config = dict(config, **{"lm.recent_loss": " ".join(repr(float(v)) for v in self._recent)})
        return config, tensors

    def load_model(self, config, tensors):
        self._recent = [float(v) for v in config.get("lm.recent_loss", "").split()]
        self.model = MemoryModel.from_checkpoint(config, tensors)

    def evaluate(self) -> dict:
        recent, self._recent = self._recent, []
        train_ppl = math.exp(float(np.mean(recent))) if recent else math.nan
        uni = perplexity(self.unigram[self.train_ids])
        valid = self.corpus.valid if len(self.corpus.valid) else self.corpus.test
        probs = rsm_stream_probs(self.model, valid[:5000], self.corpus.vocab_size,
                                 min(self.cfg.run.batch, 50))
        rsm = interpolate([(probs, 1 - self.cfg.lm.uniform_mass),
                           ("uniform", self.cfg.lm.uniform_mass, self.corpus.vocab_size)])
        return {"train_ppl": train_ppl, "unigram_ppl": uni, "valid_rsm_ppl": perplexity(rsm)}


def rsm_stream_probs(model: MemoryModel, ids, vocab_size: int, batch: int) -> np.ndarray:
    """Probability of each token of ``ids`` under the RSM classifier.

    The stream is cut into ``batch`` contiguous segments read in parallel
    from zeroed state; the first token of each segment is scored from the
    empty state.
    """
    ids = np.asarray(ids, dtype=np.int64)
    n = len(ids)
    batch = max(1, min(batch, n))
    seg = -(-n // batch)
    starts = np.arange(batch) * seg
    ends = np.minimum(starts + seg, n)
    clone = model.eval_clone(batch)
    clone.reset(batch)
    out = np.empty(n)
    live = starts < n
    first = classify(clone.mlp, clone.features())[1]
    out[starts[live]] = first[live, ids[starts[live]]]
    rows = np.arange(batch)
    for t in range(seg - 1):
        pos = starts + t
        x = np.zeros((batch, vocab_size), np.float32)
        ok = pos < ends
        x[rows[ok], ids[pos[ok]]] = 1.0
        probs = clone.predict(x)
        nxt = pos + 1
        ok = nxt < ends
        out[nxt[ok]] = probs[rows[ok], ids[nxt[ok]]]
    return out


def lm_report(task: LmTask, split: str = "test", tune_split: str = "valid",
              max_tokens: int = 0) -> dict:
    """Component and ensemble perplexities; weights tuned on ``tune_split``."""
    cfg, corpus = task.cfg, task.corpus
    v = corpus.vocab_size
    kn = kn5_train(task.train_ids, v, cfg.lm.discount)

    def components(ids, context):
        rsm = rsm_stream_probs(task.model, ids, v, min(cfg.run.batch, 50))
        rsm_u = interpolate([(rsm, 1 - cfg.lm.uniform_mass), ("uniform", cfg.lm.uniform_mass, v)])
        return {
            "rsm": rsm_u,
            "kn5": kn.stream_probs(ids, context=context),
            "cache": interpolate([(cache_stream_probs(ids, v, cfg.lm.cache_decay), 0.99),
                                  ("uniform", 0.01, v)]),
        }

    def ids_of(name):
        ids = getattr(corpus, name)
        return ids[:max_tokens] if max_tokens else ids

    tune_ids, eval_ids = ids_of(tune_split), ids_of(split)
    tune = components(tune_ids, task.train_ids[-4:])
    names = list(tune)
    w, _, _ = tune_weights([tune[n] for n in names], cfg.lm.grid_step)
    w_nc, _, _ = tune_weights([tune["rsm"], tune["kn5"]], cfg.lm.grid_step)
    ev = components(eval_ids, task.train_ids[-4:])
    row = {f"{n}_ppl": perplexity(ev[n]) for n in names}
    row["rsm_kn5_ppl"] = perplexity(interpolate([(ev["rsm"], w_nc[0]), (ev["kn5"], w_nc[1])]))
    row["ensemble_ppl"] = perplexity(interpolate([(ev[n], wi) for n, wi in zip(names, w)]))
    row.update({f"w_{n}": float(wi) for n, wi in zip(names, w)})
    return row


TASK_CLASSES = {"erg": ErgTask, "image_seq": ImageSeqTask, "balls": BallsTask, "lm": LmTask}


def make_task(cfg) -> Task:
    return TASK_CLASSES[cfg.task](cfg)


# checkpoints & loop ----------------------------------------------------------------

def save_checkpoint(path, task: Task) -> None:
    config, tensors = task.model_checkpoint()
    config = dict(config)
    config["train.step"] = str(task.step_count)
    config.update({f"cfg.{k}": v for k, v in task.cfg.flat().items()})
    checkpoint.save(path, config, tensors)


def restore(task: Task, path, replay: bool = True) -> None:
    config, tensors = checkpoint.load(path)
    if config.get("cfg.run.task") != task.cfg.task:
        raise checkpoint.CheckpointError(
            f"checkpoint is for task {config.get('cfg.run.task')!r}, config says {task.cfg.task!r}")
    mine = task.cfg.flat()
    for key in ("rsm.groups", "rsm.cells", "layer1.groups", "layer2.groups", "classifier.hidden"):
        if config.get(f"cfg.{key}") != mine[key]:
            raise checkpoint.CheckpointError(f"checkpoint {key}={config.get('cfg.' + key)} "
                                             f"does not match config {mine[key]}")
    model_cfg = {k: v for k, v in config.items() if not k.startswith(("cfg.", "train."))}
    task.load_model(model_cfg, tensors)
    step = int(config["train.step"])
    if replay:
        for _ in range(step):
            task.skip()
    task.step_count = step


class MetricsLog:
    def __init__(self, path, metric_names, append: bool = False):
        self.path = Path(path)
        self.columns = ["step", *metric_names, "rsm_loss", "classifier_loss", "wall_ms"]
        fresh = not (append and self.path.exists())
        self.fh = open(self.path, "w" if fresh else "a", newline="", encoding="utf-8")
        self.writer = csv.writer(self.fh)
        if fresh:
            self.writer.writerow(self.columns)

    def write(self, step, metrics: dict, rsm_loss, clf_loss, wall_ms=None) -> None:
        row = [step] + [_num(metrics.get(n)) for n in self.columns[1:-3]]
        row += [_num(rsm_loss), _num(clf_loss), "" if wall_ms is None else f"{wall_ms:.1f}"]
        self.writer.writerow(row)
        self.fh.flush()

    def close(self):
        self.fh.close()


def _num(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v))


def train(cfg, out_dir, resume=None, task: Task | None = None, echo=None) -> Task:
    """Run the streaming loop to ``cfg.run.steps`` and return the task."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    task = task or make_task(cfg)
    if resume:
        restore(task, resume)
    (out / "config.ini").write_text(cfg.to_ini(), encoding="utf-8")
    log = MetricsLog(out / "metrics.csv", task.metric_names, append=bool(resume))
    r = cfg.run
    rl, cl = [], []
    t0 = time.perf_counter()
    try:
        while task.step_count < r.steps:
            rsm_loss, clf_loss = task.step()
            task.step_count += 1
            rl.append(rsm_loss)
            cl.append(np.nan if clf_loss is None else clf_loss)
            s = task.step_count
            do_eval = (r.eval_every and s % r.eval_every == 0) or s == r.steps
            if s % r.log_every == 0 or do_eval:
                metrics = task.evaluate() if do_eval else {}
                wall = (time.perf_counter() - t0) * 1000 / len(rl)
                clf_mean = float(np.mean(cl)) if not np.all(np.isnan(cl)) else math.nan
                log.write(s, metrics, float(np.mean(rl)), clf_mean, wall if r.record_time else None)
                if echo:
                    echo(s, metrics, float(np.mean(rl)), clf_mean)
                rl, cl = [], []
                t0 = time.perf_counter()
            if r.checkpoint_every and s % r.checkpoint_every == 0:
                save_checkpoint(out / f"step{s:07d}.rsm", task)
        save_checkpoint(out / "final.rsm", task)
    finally:
        log.close()
    return task


def load_task(cfg, path) -> Task:
    """A task whose model comes from a checkpoint (no stream replay)."""
    task = make_task(cfg)
    restore(task, path, replay=False)
    return task


def read_config(path, seed=None):
    cfg = config_mod.load(path)
    if seed is not None:
        cfg.run.seed = int(seed)
    return cfg
