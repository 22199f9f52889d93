"""Run configuration: INI files with typed sections and per-task defaults.

Unknown sections or keys are errors, so a misspelt hyperparameter fails
loudly instead of silently running with a default.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

TASKS = ("erg", "image_seq", "balls", "lm")


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    task: str = "erg"
    seed: int = 0
    steps: int = 50_000
    batch: int = 400
    lr: float = 0.0005
    log_every: int = 100
    eval_every: int = 2500
    checkpoint_every: int = 0  # 0: only at the end
    record_time: bool = True  # false leaves wall_ms empty so metrics files are reproducible
    reset_on_sample: bool = False  # erg: zero a row's state when a new sample begins


@dataclass
class RsmSection:
    groups: int = 200
    cells: int = 6
    k: int = 25
    gamma: float = 0.98
    epsilon: float = 0.0
    mu: float = 0.0
    recurrent_dropout: float = 0.0


@dataclass
class ClassifierSection:
    hidden: int = 500
    l2: float = 1e-5
    slope: float = 0.2
    dropout: bool = False  # classifier sees the dropped-out recurrent input
    input: str = "xR"  # xR (normalised recurrent input) or psi (raw integrated activity)


@dataclass
class ConvLayerSection:
    enabled: bool = True
    groups: int = 64
    cells: int = 8
    k: int = 3
    gamma: float = 0.0
    epsilon: float = 0.0
    field: int = 5
    stride: int = 2
    pool: int = 1


@dataclass
class DataSection:
    dir: str = ""  # MNIST IDX files or PTB text files
    cycle: str = "0,1,2,3,4,5,6,7,8,9"
    eval_sequences: int = 1000
    canvas: int = 31  # balls frames are embedded top-left in a canvas this size
    frames: int = 100  # balls sequence length
    priming: int = 50
    generate: int = 150
    burn_in: int = 3
    train_tokens: int = 0  # 0: whole training split
    synthetic: bool = False  # fall back to generated exemplars/corpus when dir is empty


@dataclass
class LmSection:
    discount: float = 0.75
    cache_decay: float = 0.99
    uniform_mass: float = 0.07
    grid_step: float = 0.05


SECTIONS = {
    "run": RunSection,
    "rsm": RsmSection,
    "classifier": ClassifierSection,
    "layer1": ConvLayerSection,
    "layer2": ConvLayerSection,
    "data": DataSection,
    "lm": LmSection,
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    rsm: RsmSection = field(default_factory=RsmSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    layer1: ConvLayerSection = field(default_factory=ConvLayerSection)
    layer2: ConvLayerSection = field(default_factory=ConvLayerSection)
    data: DataSection = field(default_factory=DataSection)
    lm: LmSection = field(default_factory=LmSection)

    @property
    def task(self) -> str:
        return self.run.task

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for name in SECTIONS:
            parser[name] = {k: _fmt(v) for k, v in asdict(getattr(self, name)).items()}
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            lines.extend(f"{k} = {v}" for k, v in parser[name].items())
            lines.append("")
        return "\n".join(lines)

    def flat(self) -> dict:
        return {f"{s}.{k}": _fmt(v) for s in SECTIONS for k, v in asdict(getattr(self, s)).items()}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def defaults(task: str) -> RunConfig:
    """Hyperparameters of the published runs for each task."""
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {', '.join(TASKS)}")
    cfg = RunConfig()
    if task == "erg":
        cfg.run = RunSection(task=task, batch=400, steps=50_000, eval_every=2500,
                             reset_on_sample=True)
        cfg.rsm = RsmSection(groups=200, cells=6, k=25, gamma=0.98, epsilon=0.0)
        cfg.classifier = ClassifierSection(hidden=500)
    elif task == "image_seq":
        cfg.run = RunSection(task=task, batch=300, steps=20_000, eval_every=1000)
        cfg.rsm = RsmSection(groups=200, cells=6, k=25, gamma=0.5, epsilon=0.0)
        cfg.classifier = ClassifierSection(hidden=1200)
        cfg.data = DataSection(eval_sequences=3000)
    elif task == "lm":
        cfg.run = RunSection(task=task, batch=300, steps=1000, eval_every=500)
        cfg.rsm = RsmSection(groups=600, cells=8, k=20, gamma=0.8, epsilon=0.85, mu=0.01,
                             recurrent_dropout=0.5)
        cfg.classifier = ClassifierSection(hidden=1200, dropout=False, input="psi")
    else:
        cfg.run = RunSection(task=task, batch=256, steps=20_000, eval_every=1000)
        cfg.layer1 = ConvLayerSection(groups=64, cells=8, k=3, gamma=0.0, epsilon=0.0, field=5,
                                      stride=2, pool=2)
        cfg.layer2 = ConvLayerSection(groups=128, cells=8, k=5, gamma=0.0, epsilon=0.0, field=3,
                                      stride=2, pool=1)
        cfg.data = DataSection(eval_sequences=50)
    return cfg


def _coerce(section: str, key: str, raw: str, kind):
    try:
        if kind is bool or kind == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {kind}") from exc


def parse(text: str, overrides: dict | None = None) -> RunConfig:
    """Build a config from INI text on top of the defaults of its [run] task."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    for name in parser.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
    task = parser.get("run", "task", fallback="erg").strip()
    cfg = defaults(task)
    for name in parser.sections():
        section = getattr(cfg, name)
        known = {f.name: f.type for f in fields(section)}
        updates = {}
        for key, raw in parser[name].items():
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            updates[key] = _coerce(name, key, raw, known[key])
        setattr(cfg, name, replace(section, **updates))
    for dotted, value in (overrides or {}).items():
        name, _, key = dotted.partition(".")
        section = getattr(cfg, name, None)
        if section is None or key not in {f.name for f in fields(section)}:
            raise ConfigError(f"unknown override {dotted!r}")
        setattr(cfg, name, replace(section, **{key: value}))
    validate(cfg)
    return cfg


def load(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse(text)


def validate(cfg: RunConfig) -> None:
    r = cfg.run
    if r.task not in TASKS:
        raise ConfigError(f"unknown task {r.task!r}")
    for name in ("steps", "batch", "log_every"):
        if getattr(r, name) < 1:
            raise ConfigError(f"[run] {name} must be positive")
    if r.eval_every < 0 or r.checkpoint_every < 0:
        raise ConfigError("[run] eval_every and checkpoint_every must be >= 0")
    if r.lr <= 0:
        raise ConfigError("[run] lr must be positive")
    if not 1 <= cfg.rsm.k <= cfg.rsm.groups:
        raise ConfigError("[rsm] k must lie in [1, groups]")
    if cfg.classifier.input not in ("xR", "psi"):
        raise ConfigError("[classifier] input must be xR or psi")
    if not 0 <= cfg.lm.uniform_mass < 1:
        raise ConfigError("[lm] uniform_mass must lie in [0, 1)")
    if cfg.data.priming < 1:
        raise ConfigError("[data] priming must be >= 1")
