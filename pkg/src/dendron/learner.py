"""Run a task stream under one continual-learning strategy.

Tree strategies (TREE, SEQUENTIAL, PARALLEL) grow one node per task and only
differ in where the node attaches. The baselines are: FINETUNE (one network
with one classifier, everything retrained), REPLAY (FINETUNE plus a
per-task reservoir mixed into each batch) and SEPARATE (an independent
one-node tree per task).
"""
from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field

import numpy as np

from . import ndnn
from .metrics import AccuracyMatrix
from .ndnn import Affine, LayerStack, Nonlinearity, ResidualBlock, RngState
from .router import EntropyReport, select_attachment
from .tree import (
    BACKBONE,
    ModelTree,
    ParamCost,
    TreeConfig,
    grow_node,
    param_cost,
    path_for,
    predict,
    survival_schedule,
)


class Strategy(str, enum.Enum):
    TREE = "tree"
    SEQUENTIAL = "sequential"
    PARALLEL = "parallel"
    FINETUNE = "finetune"
    SEPARATE = "separate"
    REPLAY = "replay"

    @property
    def grows_tree(self):
        return self in (Strategy.TREE, Strategy.SEQUENTIAL, Strategy.PARALLEL)


BACKBONE_MODES = ("train_on_first_task", "frozen_random")


class TrainingError(RuntimeError):
    def __init__(self, task_id, epoch, loss):
        super().__init__(f"training diverged on task {task_id}, epoch {epoch} (loss={loss})")
        self.task_id = task_id
        self.epoch = epoch


@dataclass
class LearnerConfig:
    width: int = 128
    backbone_blocks: int = 2
    node_shared_blocks: int = 1
    node_task_blocks: int = 1
    max_depth: int = 8
    survival_min: float = 0.8
    backbone_mode: str = "train_on_first_task"
    entropy_threshold: float = 0.75
    optimizer: str = "adam"
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 5
    replay_capacity: int = 50

    def __post_init__(self):
        if self.backbone_mode not in BACKBONE_MODES:
            raise ValueError(f"backbone_mode must be one of {BACKBONE_MODES}")
        if not 0.0 < self.entropy_threshold <= 1.0:
            raise ValueError("entropy_threshold must be in (0, 1]")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def tree_config(self, input_dim):
        return TreeConfig(
            input_dim=input_dim,
            width=self.width,
            backbone_blocks=self.backbone_blocks,
            node_shared_blocks=self.node_shared_blocks,
            node_task_blocks=self.node_task_blocks,
            max_depth=self.max_depth,
            survival_min=self.survival_min,
        )


@dataclass
class TaskRecord:
    task_id: int
    attached_to: int | None = None
    node_id: int | None = None
    fallback: bool = False
    report: EntropyReport | None = None
    epochs: int = 0
    final_loss: float = float("nan")
    wall_time: float = 0.0


@dataclass
class TrainLog:
    records: list[TaskRecord] = field(default_factory=list)


# --------------------------------------------------------------------------
# baseline models


class ReplayBuffer:
    """Per-task reservoir of at most ``capacity`` samples."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.features: dict[int, np.ndarray] = {}
        self.labels: dict[int, np.ndarray] = {}
        self.seen: dict[int, int] = {}

    def __len__(self):
        return sum(len(v) for v in self.labels.values())

    def add(self, task_id, features, labels, rng: RngState):
        xs = list(self.features.get(task_id, []))
        ys = list(self.labels.get(task_id, []))
        n = self.seen.get(task_id, 0)
        for x, y in zip(features, labels):
            if len(xs) < self.capacity:
                xs.append(x)
                ys.append(y)
            else:
                j = int(rng.integers(0, n + 1))
                if j < self.capacity:
                    xs[j] = x
                    ys[j] = y
            n += 1
        self.seen[task_id] = n
        if xs:
            self.features[task_id] = np.array(xs)
            self.labels[task_id] = np.array(ys, dtype=np.int64)

    def sample(self, n, rng: RngState, exclude=None):
        tasks = [t for t in sorted(self.labels) if t != exclude]
        if not tasks or n <= 0:
            return None
        x = np.concatenate([self.features[t] for t in tasks])
        y = np.concatenate([self.labels[t] for t in tasks])
        t = np.concatenate([np.full(len(self.labels[t]), t) for t in tasks])
        idx = rng.integers(0, len(y), size=min(n, len(y)))
        return x[idx], y[idx], t[idx]


class SingleNet:
    """One network retrained by every task, with a single shared classifier.

    The classifier is as wide as the largest class count seen so far (new
    columns are added when a task brings more classes); task j only reads
    its first ``C_j`` outputs.
    """

    def __init__(self, cfg: LearnerConfig, input_dim: int, rng: RngState):
        n_blocks = cfg.backbone_blocks + cfg.node_shared_blocks + cfg.node_task_blocks
        probs = survival_schedule(n_blocks, cfg.survival_min)
        self.n_backbone_blocks = cfg.backbone_blocks
        self.n_shared_blocks = cfg.node_shared_blocks
        self.width = cfg.width
        self.body = LayerStack(
            [Affine(input_dim, cfg.width), Nonlinearity("relu", cfg.width)]
            + [ResidualBlock(cfg.width, p) for p in probs]
        )
        self.body_params = self.body.init_params(rng)
        self.head = LayerStack([Affine(cfg.width, 1)])
        self.head_params = None
        self.class_counts: dict[int, int] = {}

    def add_task(self, task_id, class_count, rng):
        self.class_counts[task_id] = class_count
        have = 0 if self.head_params is None else self.head.output_width
        if class_count <= have:
            return
        fresh = Affine(self.width, class_count).init_params(rng)
        if self.head_params is not None:
            fresh[0].value[:, :have] = self.head_params[0].value
            fresh[1].value[:have] = self.head_params[1].value
        self.head = LayerStack([Affine(self.width, class_count)])
        self.head_params = fresh

    @property
    def params(self):
        return self.body_params + list(self.head_params or [])

    @property
    def trainable_params(self):
        return [p for p in self.params if not p.frozen]

    def unfreeze(self, backbone=True):
        n_backbone = 2 + 6 * self.n_backbone_blocks  # input affine + blocks
        for i, p in enumerate(self.params):
            p.frozen = i < n_backbone and not backbone

    def freeze_all(self):
        for p in self.params:
            p.frozen = True

    def predict(self, task_id, x):
        h = ndnn.forward(self.body, self.body_params, x, "eval")
        logits = ndnn.forward(self.head, self.head_params, h, "eval")
        return ndnn.softmax(logits[:, : self.class_counts[task_id]])

    def loss_backward(self, x, y, rng, task_ids):
        tape = ndnn.Tape()
        h = ndnn.forward(self.body, self.body_params, x, "train", rng, tape)
        logits = ndnn.forward(self.head, self.head_params, h, "train", rng, tape)
        n = len(y)
        dlogits = np.zeros_like(logits)
        loss = 0.0
        for t in np.unique(task_ids):
            mask = task_ids == t
            c = self.class_counts[int(t)]
            l, dl = ndnn.cross_entropy_loss(logits[mask, :c], y[mask])
            w = mask.sum() / n
            loss += w * l
            dlogits[np.ix_(mask, np.arange(c))] = dl * w
        tape.backward(dlogits)
        return float(loss)

    def param_cost(self, task_id) -> ParamCost:
        sizes = [p.size for p in self.body_params]
        n_backbone = 2 + 6 * self.n_backbone_blocks
        n_shared = n_backbone + 6 * self.n_shared_blocks
        head = sum(p.size for p in self.head_params)
        return ParamCost(sum(sizes[:n_backbone]), sum(sizes[n_backbone:n_shared]),
                         sum(sizes[n_shared:]) + head, 1)


class SeparateModels:
    """Independent one-node tree per task."""

    def __init__(self):
        self.trees: dict[int, ModelTree] = {}

    def predict(self, task_id, x):
        return predict(self.trees[task_id], task_id, x)

    def param_cost(self, task_id) -> ParamCost:
        return param_cost(self.trees[task_id], task_id)


def model_predict(model, task_id, x):
    if isinstance(model, ModelTree):
        return predict(model, task_id, x)
    return model.predict(task_id, x)


def model_param_cost(model, task_id) -> ParamCost:
    if isinstance(model, ModelTree):
        return param_cost(model, task_id)
    return model.param_cost(task_id)


# --------------------------------------------------------------------------
# training and evaluation


def train_task(net, features, labels, cfg: LearnerConfig, rng: RngState, task_id=0,
               replay: ReplayBuffer | None = None) -> float:
    """Train the non-frozen params of ``net``; returns the last epoch's mean loss.

    ``net`` needs ``trainable_params`` and ``loss_backward(x, y, rng, task_ids)``.
    With a replay buffer, every batch is topped up with an equal number of
    stored samples from earlier tasks.
    """
    params = net.trainable_params
    if not params:
        raise ValueError("nothing to train: every parameter is frozen")
    opt = ndnn.make_optimizer(cfg.optimizer, cfg.lr)
    n = len(labels)
    epoch_loss = float("nan")
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = features[idx], labels[idx]
            tb = np.full(len(idx), task_id)
            if replay is not None:
                drawn = replay.sample(len(idx), rng, exclude=task_id)
                if drawn is not None:
                    xb = np.concatenate([xb, drawn[0]])
                    yb = np.concatenate([yb, drawn[1]])
                    tb = np.concatenate([tb, drawn[2]])
            for p in params:
                p.zero_grad()
            loss = net.loss_backward(xb, yb, rng, task_ids=tb)
            if not np.isfinite(loss):
                raise TrainingError(task_id, epoch, loss)
            opt.step(params)
            losses.append(loss)
        epoch_loss = float(np.mean(losses))
    return epoch_loss


def evaluate(model, task_id, test) -> float:
    """Fraction of test samples whose argmax prediction equals the label."""
    probs = model_predict(model, task_id, test.features)
    return float(np.mean(np.argmax(probs, axis=1) == test.labels))


@dataclass
class RunResult:
    model: object
    matrix: AccuracyMatrix
    log: TrainLog
    strategy: Strategy


def run_stream(stream, strategy, config: LearnerConfig | None = None, seed: int = 0,
               on_task_end=None) -> RunResult:
    """Train every task of ``stream`` in order and fill the accuracy matrix.

    Row k of the matrix is measured right after task k finishes, on the test
    splits of tasks 0..k. ``on_task_end(k, model)`` is called after each row.
    """
    strategy = Strategy(strategy)
    cfg = config or LearnerConfig()
    if len(stream) == 0:
        raise ValueError("empty stream")
    root = RngState(seed)
    input_dim = stream[0][0].dim
    matrix = AccuracyMatrix(len(stream))
    log = TrainLog()

    if strategy.grows_tree:
        model = ModelTree(cfg.tree_config(input_dim), root.spawn(0))
        model.freeze_all()
    elif strategy is Strategy.SEPARATE:
        model = SeparateModels()
    else:
        model = SingleNet(cfg, input_dim, root.spawn(0))
        buffer = ReplayBuffer(cfg.replay_capacity) if strategy is Strategy.REPLAY else None

    task_ids = []
    for k, (train, test) in enumerate(stream):
        t0 = time.perf_counter()
        task = train.task_id
        rec = TaskRecord(task_id=task, epochs=cfg.epochs)
        init_rng, train_rng = root.spawn(1, k), root.spawn(2, k)

        if strategy.grows_tree:
            attach = BACKBONE
            if strategy is Strategy.TREE:
                attach, rec.report = select_attachment(model, train, cfg.entropy_threshold)
            elif strategy is Strategy.SEQUENTIAL and k > 0:
                prev = model.node_for_task(task_ids[-1])
                if prev.depth < model.max_depth:
                    attach = prev.node_id
                else:
                    rec.fallback = True
            rec.attached_to = attach
            rec.node_id = grow_node(model, attach, task, train.class_count, init_rng)
            if k == 0 and cfg.backbone_mode == "train_on_first_task":
                for p in model.backbone_params:
                    p.frozen = False
            path = path_for(model, task)
            rec.final_loss = train_task(path, train.features, train.labels, cfg,
                                        train_rng, task_id=task)
            model.freeze_all()
            model.register_trained(task)
        elif strategy is Strategy.SEPARATE:
            tree = ModelTree(cfg.tree_config(input_dim), root.spawn(0, k))
            if cfg.backbone_mode == "frozen_random":
                tree.freeze_all()
            rec.attached_to = BACKBONE
            rec.node_id = grow_node(tree, BACKBONE, task, train.class_count, init_rng)
            rec.final_loss = train_task(path_for(tree, task), train.features,
                                        train.labels, cfg, train_rng, task_id=task)
            tree.freeze_all()
            tree.register_trained(task)
            model.trees[task] = tree
        else:
            model.add_task(task, train.class_count, init_rng)
            model.unfreeze(backbone=cfg.backbone_mode != "frozen_random")
            rec.final_loss = train_task(model, train.features, train.labels, cfg, train_rng,
                                        task_id=task, replay=buffer)
            model.freeze_all()
            if buffer is not None:
                buffer.add(task, train.features, train.labels, root.spawn(3, k))

        task_ids.append(task)
        for j in range(k + 1):
            matrix.record(k, j, evaluate(model, stream[j][1].task_id, stream[j][1]))
        rec.wall_time = time.perf_counter() - t0
        log.records.append(rec)
        if on_task_end is not None:
            on_task_end(k, model)
    return RunResult(model, matrix, log, strategy)
