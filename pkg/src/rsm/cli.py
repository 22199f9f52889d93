"""Command line: rsm {train,eval,generate,datagen} --config PATH [--seed N] [--out DIR].

Exit codes: 0 success, 2 configuration error, 3 data or checkpoint error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import train as tr
from .checkpoint import CheckpointError
from .config import ConfigError
from .prng import Xoshiro256
from .tasks.balls import balls_dataset, read_bbv1, write_bbv1, write_pgm
from .tasks.corpus import Corpus, save_vocab, synthetic_text
from .tasks.erg import erg_sample
from .tasks.sequences import DataError, synthetic_pools, write_idx

EXIT_CONFIG = 2
EXIT_DATA = 3


def _echo(step, metrics, rsm_loss, clf_loss):
    shown = " ".join(f"{k}={v:.4f}" for k, v in metrics.items())
    print(f"step {step} rsm_loss={rsm_loss:.5f} classifier_loss={clf_loss:.4f} {shown}".rstrip(),
          flush=True)


def cmd_train(args, cfg) -> None:
    tr.train(cfg, args.out, resume=args.resume, echo=None if args.quiet else _echo)
    print(f"wrote {Path(args.out) / 'final.rsm'}")


def _latest_checkpoint(out: Path) -> Path:
    final = out / "final.rsm"
    if final.exists():
        return final
    steps = sorted(out.glob("step*.rsm"))
    if not steps:
        raise CheckpointError(f"no checkpoint in {out}; pass --checkpoint")
    return steps[-1]


def cmd_eval(args, cfg) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.untrained:
        task = tr.make_task(cfg)
    else:
        task = tr.load_task(cfg, args.checkpoint or _latest_checkpoint(out))
    if cfg.task == "lm":
        row = tr.lm_report(task, max_tokens=args.max_tokens)
    else:
        row = task.evaluate()
    if cfg.task == "balls":
        rep = tr.balls_nf_error(tr.StackPredictor(task.model, cfg.data.canvas), task.test_set(),
                                burn_in=cfg.data.burn_in)
        row = {"nf_error": rep.mean, "nf_stderr": rep.stderr,
               "baseline_error": rep.baseline_mean, "baseline_stderr": rep.baseline_stderr}
    path = out / "eval.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(row))
        w.writerow([repr(float(v)) for v in row.values()])
    print(",".join(row))
    print(",".join(f"{float(v):.6g}" for v in row.values()))


def cmd_generate(args, cfg) -> None:
    if cfg.task != "balls":
        raise ConfigError(f"generate needs a balls config, got task {cfg.task!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    task = tr.load_task(cfg, args.checkpoint or _latest_checkpoint(out))
    n = cfg.data.generate if args.frames is None else args.frames
    rng = tr.eval_rng(cfg.run.seed, salt=1)
    truth, gen = tr.balls_generate(task.model, cfg.data.canvas, cfg.data.priming, n, rng)
    write_bbv1(out / "priming.bbv", truth[None, :cfg.data.priming])
    write_bbv1(out / "truth.bbv", truth[None])
    write_bbv1(out / "generated.bbv", gen[None])
    frames_dir = out / "frames"
    frames_dir.mkdir(exist_ok=True)
    for t, frame in enumerate(truth[:cfg.data.priming]):
        write_pgm(frames_dir / f"prime_{t:04d}.pgm", frame)
    for t, frame in enumerate(gen):
        write_pgm(frames_dir / f"gen_{t:04d}.pgm", frame)
    if n:
        ratio = tr.energy_ratio(truth[cfg.data.priming:], gen)
        print(f"energy ratio generated/truth: min {ratio.min():.3f} max {ratio.max():.3f}")
    print(f"wrote {cfg.data.priming} priming and {n} generated frames to {out}")


def cmd_datagen(args, cfg) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = Xoshiro256(cfg.run.seed)
    meta = {"task": cfg.task, "seed": cfg.run.seed}
    if cfg.task == "balls":
        n = args.count or cfg.data.eval_sequences
        data = balls_dataset(n, cfg.data.frames, rng)
        write_bbv1(out / "balls.bbv", data)
        meta.update(sequences=n, frames=cfg.data.frames, height=data.shape[2], width=data.shape[3])
    elif cfg.task == "erg":
        n = args.count or cfg.data.eval_sequences
        lines = ["".join(erg_sample(rng).symbols) for _ in range(n)]
        (out / "erg.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        meta.update(sequences=n)
    elif cfg.task == "lm":
        if cfg.data.dir:
            corpus = Corpus.from_dir(cfg.data.dir)
        else:
            text = synthetic_text(args.count or 60_000, 300, rng)
            lines = text.splitlines()
            a, b = int(len(lines) * 0.8), int(len(lines) * 0.9)
            for name, part in (("train", lines[:a]), ("valid", lines[a:b]), ("test", lines[b:])):
                (out / f"{name}.txt").write_text("\n".join(part) + "\n", encoding="utf-8")
            corpus = Corpus.from_dir(out)
        save_vocab(out / "vocab.txt", corpus.vocab)
        for name in ("train", "valid", "test"):
            np.asarray(getattr(corpus, name), dtype="<i4").tofile(out / f"{name}.ids")
        meta.update(vocab=corpus.vocab_size, **{f"{n}_tokens": len(getattr(corpus, n))
                                                for n in ("train", "valid", "test")})
    else:
        per = args.count or 600
        pools = synthetic_pools(10, per, rng)
        split = int(per * 5 / 6)
        for prefix, sl in (("train", slice(0, split)), ("t10k", slice(split, per))):
            imgs = np.concatenate([pools[k][sl] for k in range(10)])
            labs = np.concatenate([np.full(len(pools[k][sl]), k) for k in range(10)])
            write_idx(out / f"{prefix}-images-idx3-ubyte",
                      (imgs * 255).astype(np.uint8).reshape(-1, 28, 28))
            write_idx(out / f"{prefix}-labels-idx1-ubyte", labs.astype(np.uint8))
        meta.update(per_label=per)
    (out / "datagen.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n",
                                      encoding="utf-8")
    print(json.dumps(meta, sort_keys=True))


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "generate": cmd_generate, "datagen": cmd_datagen}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rsm", description="Recurrent Sparse Memory workbench")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="INI run configuration")
        s.add_argument("--seed", type=int, default=None, help="overrides [run] seed")
        s.add_argument("--out", default="runs/out", help="output directory")
        if name == "train":
            s.add_argument("--resume", default=None, help="checkpoint to continue from")
            s.add_argument("--quiet", action="store_true")
        if name in ("eval", "generate"):
            s.add_argument("--checkpoint", default=None,
                           help="default: final.rsm (or the latest step*.rsm) in --out")
        if name == "eval":
            s.add_argument("--untrained", action="store_true",
                           help="evaluate a freshly initialised model")
            s.add_argument("--max-tokens", type=int, default=0, help="lm: truncate eval streams")
        if name == "generate":
            s.add_argument("--frames", type=int, default=None, help="default: [data] generate")
        if name == "datagen":
            s.add_argument("--count", type=int, default=0,
                           help="sequences, tokens or exemplars per label")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = tr.read_config(args.config, args.seed)
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
