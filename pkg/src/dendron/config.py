"""Run configuration: a flat key=value file with [stream], [model], [train], [output]."""
from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field

from . import streams
from .learner import LearnerConfig, Strategy

DATA_DIR_ENV = "DENDRON_DATA_DIR"

STREAM_KINDS = ("synthetic", "permuted", "split", "clustered_split", "multidomain")

# default multidomain datasets: (features, classes, samples per class, separation)
MULTIDOMAIN_SPECS = ((24, 3, 200, 5.0), (32, 4, 200, 5.0), (40, 5, 200, 5.0))


class ConfigError(ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class StreamConfig:
    kind: str = "permuted"
    source: str = "synthetic"
    tasks: int = 5
    seed: int = 0
    train_per_task: int = 2000
    test_per_task: int = 1000
    features: int = 64
    classes: int = 10
    classes_per_task: int = 2
    samples_per_class: int = 300
    separation: float = 6.0
    clusters: int = 2
    subspace_dim: int = 4
    order: str = "0,1,2"
    data_dir: str = "data"


@dataclass
class RunConfig:
    stream: StreamConfig = field(default_factory=StreamConfig)
    strategy: Strategy = Strategy.TREE
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    seed: int = 0
    output_dir: str = "runs/out"


_MODEL_KEYS = ("strategy", "entropy_threshold", "max_depth", "width", "backbone_blocks",
               "node_shared_blocks", "node_task_blocks", "backbone_mode", "survival_min")
_TRAIN_KEYS = ("optimizer", "lr", "batch_size", "epochs", "replay_capacity", "seed")
_SECTIONS = {
    "stream": tuple(f.name for f in dataclasses.fields(StreamConfig)),
    "model": _MODEL_KEYS,
    "train": _TRAIN_KEYS,
    "output": ("output_dir",),
}


def _coerce(key, raw, default):
    try:
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {type(default).__name__}") from None
    return raw.strip()


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError("<file>", str(e).splitlines()[0]) from None
    values = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"[{section}]", "unknown section")
        for key, raw in parser.items(section):
            if key not in _SECTIONS[section]:
                raise ConfigError(f"{section}.{key}", "unknown key")
            values[(section, key)] = raw

    stream_kw = {}
    for f in dataclasses.fields(StreamConfig):
        if ("stream", f.name) in values:
            stream_kw[f.name] = _coerce(f"stream.{f.name}", values["stream", f.name], f.default)
    stream = StreamConfig(**stream_kw)
    if stream.kind not in STREAM_KINDS:
        raise ConfigError("stream.kind", f"must be one of {STREAM_KINDS}")
    if stream.source not in ("synthetic", "mnist"):
        raise ConfigError("stream.source", "must be 'synthetic' or 'mnist'")

    defaults = LearnerConfig()
    learner_kw = {}
    for section, keys in (("model", _MODEL_KEYS), ("train", _TRAIN_KEYS)):
        for key in keys:
            if key in ("strategy", "seed") or (section, key) not in values:
                continue
            learner_kw[key] = _coerce(f"{section}.{key}", values[section, key],
                                      getattr(defaults, key))
    try:
        learner = LearnerConfig(**learner_kw)
    except ValueError as e:
        raise ConfigError("model/train", str(e)) from None

    strategy = values.get(("model", "strategy"), "tree").strip()
    try:
        strategy = Strategy(strategy)
    except ValueError:
        raise ConfigError("model.strategy", f"unknown strategy {strategy!r}") from None
    seed = _coerce("train.seed", values.get(("train", "seed"), "0"), 0)
    output_dir = values.get(("output", "output_dir"), RunConfig.output_dir).strip()
    return RunConfig(stream, strategy, learner, seed, output_dir)


def load_config(path) -> RunConfig:
    with open(path) as f:
        cfg = parse_config(f.read())
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        cfg.stream.data_dir = env
    return cfg


def resolved_text(cfg: RunConfig) -> str:
    """Every setting with defaults filled in, in the input file format."""
    lines = ["[stream]"]
    lines += [f"{f.name} = {getattr(cfg.stream, f.name)}" for f in dataclasses.fields(StreamConfig)]
    lines += ["", "[model]", f"strategy = {cfg.strategy.value}"]
    lines += [f"{k} = {getattr(cfg.learner, k)}" for k in _MODEL_KEYS if k != "strategy"]
    lines += ["", "[train]"]
    lines += [f"{k} = {getattr(cfg.learner, k)}" for k in _TRAIN_KEYS if k != "seed"]
    lines += [f"seed = {cfg.seed}", "", "[output]", f"output_dir = {cfg.output_dir}", ""]
    return "\n".join(lines)


def _base_pair(sc: StreamConfig, classes):
    if sc.source == "mnist":
        return streams.load_mnist(sc.data_dir)
    per_class = max(sc.samples_per_class, -(-sc.train_per_task // classes))
    stream = streams.make_synthetic_stream(1, classes, sc.features, per_class, sc.separation,
                                           sc.seed, test_per_class=per_class)
    return stream[0]


def build_stream(sc: StreamConfig) -> streams.TaskStream:
    if sc.kind == "synthetic":
        return streams.make_synthetic_stream(sc.tasks, sc.classes, sc.features,
                                             sc.samples_per_class, sc.separation, sc.seed)
    if sc.kind == "permuted":
        base = streams.subsample(_base_pair(sc, sc.classes), sc.train_per_task,
                                 sc.test_per_task, sc.seed)
        return streams.make_permuted_stream(base, sc.tasks, sc.seed + 1)
    if sc.kind == "split":
        return streams.make_split_stream(_base_pair(sc, sc.classes), sc.classes_per_task,
                                         sc.seed + 1)
    if sc.kind == "clustered_split":
        per_cluster = sc.tasks * sc.classes_per_task // sc.clusters
        if per_cluster * sc.clusters != sc.tasks * sc.classes_per_task:
            raise ConfigError("stream.tasks", "tasks must split evenly across clusters")
        return streams.make_clustered_split_stream(
            sc.clusters, per_cluster, sc.classes_per_task, sc.features, sc.subspace_dim,
            sc.samples_per_class, sc.separation, sc.seed)
    if sc.kind == "multidomain":
        try:
            order = [int(i) for i in sc.order.split(",")]
        except ValueError:
            raise ConfigError("stream.order", f"bad order {sc.order!r}") from None
        if sorted(order) != list(range(len(MULTIDOMAIN_SPECS))):
            raise ConfigError("stream.order", f"must be a permutation of 0..{len(MULTIDOMAIN_SPECS) - 1}")
        return streams.make_multidomain_stream(MULTIDOMAIN_SPECS, sc.seed, order)
    raise ConfigError("stream.kind", f"unknown kind {sc.kind!r}")
