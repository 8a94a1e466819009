"""Tree of frozen parameter nodes grown one task at a time.

The backbone is shared by every task. Each node adds a shared stack that
later tasks may build on and a task stack ending in that task's classifier.
A task's network is the path backbone -> ancestor shared stacks -> node.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import ndnn
from .ndnn import Affine, LayerStack, Nonlinearity, Param, ResidualBlock, RngState

BACKBONE = -1
MANIFEST = "manifest.json"
FORMAT_VERSION = 1


class DepthLimitError(ValueError):
    pass


class IntegrityError(IOError):
    def __init__(self, path, reason):
        super().__init__(f"{path}: {reason}")
        self.path = path


@dataclass
class Node:
    node_id: int
    parent: int
    depth: int
    task_id: int
    class_count: int
    shared_stack: LayerStack
    task_stack: LayerStack
    shared_params: list
    task_params: list

    @property
    def params(self):
        return self.shared_params + self.task_params


@dataclass
class TreeConfig:
    input_dim: int
    width: int = 128
    backbone_blocks: int = 2
    node_shared_blocks: int = 1
    node_task_blocks: int = 1
    max_depth: int = 8
    survival_min: float = 0.8

    def __post_init__(self):
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if not 0.0 < self.survival_min <= 1.0:
            raise ValueError("survival_min must be in (0, 1]")


def survival_schedule(n_blocks: int, floor: float) -> list[float]:
    """Linear decay from 1.0 (shallowest block) to ``floor`` (deepest)."""
    if n_blocks == 1:
        return [1.0]
    return [1.0 - (1.0 - floor) * i / (n_blocks - 1) for i in range(n_blocks)]


class ModelTree:
    def __init__(self, config: TreeConfig, init_rng: RngState | None = None,
                 backbone_stack=None, backbone_params=None):
        self.config = config
        self.nodes: dict[int, Node] = {}
        self.trained_task_ids: list[int] = []
        self._task_to_node: dict[int, int] = {}
        if backbone_stack is None:
            c = config
            first_path = c.backbone_blocks + c.node_shared_blocks + c.node_task_blocks
            probs = survival_schedule(first_path, c.survival_min)[: c.backbone_blocks]
            backbone_stack = LayerStack(
                [Affine(c.input_dim, c.width), Nonlinearity("relu", c.width)]
                + [ResidualBlock(c.width, p) for p in probs]
            )
            backbone_params = backbone_stack.init_params(init_rng or RngState(0))
        self.backbone_stack = backbone_stack
        self.backbone_params = backbone_params

    @property
    def max_depth(self):
        return self.config.max_depth

    def __len__(self):
        return len(self.nodes)

    def depth_of(self, node_id):
        return 0 if node_id == BACKBONE else self.nodes[node_id].depth

    def node_for_task(self, task_id) -> Node:
        try:
            return self.nodes[self._task_to_node[task_id]]
        except KeyError:
            raise KeyError(f"task {task_id} is not in the tree") from None

    def ancestors(self, node_id) -> list[Node]:
        """Nodes from the root down to ``node_id`` inclusive."""
        chain = []
        while node_id != BACKBONE:
            node = self.nodes[node_id]
            chain.append(node)
            node_id = node.parent
        return chain[::-1]

    def parent_array(self) -> list[int]:
        return [self.nodes[i].parent for i in sorted(self.nodes)]

    def all_params(self) -> list[Param]:
        out = list(self.backbone_params)
        for i in sorted(self.nodes):
            out.extend(self.nodes[i].params)
        return out

    def freeze_all(self):
        for p in self.all_params():
            p.frozen = True

    def register_trained(self, task_id):
        if task_id not in self.trained_task_ids:
            self.trained_task_ids.append(task_id)


def grow_node(tree: ModelTree, attach_to: int, task_id: int, class_count: int,
              init_rng: RngState) -> int:
    """Append a fresh trainable node under ``attach_to`` (a node id or BACKBONE)."""
    if attach_to != BACKBONE and attach_to not in tree.nodes:
        raise KeyError(f"unknown attachment node {attach_to}")
    if task_id in tree._task_to_node:
        raise ValueError(f"task {task_id} already has a node")
    depth = tree.depth_of(attach_to) + 1
    if depth > tree.max_depth:
        raise DepthLimitError(
            f"attaching under node {attach_to} gives depth {depth} > max_depth {tree.max_depth}"
        )
    c = tree.config
    # survival probabilities are fixed at creation, scheduled over the path
    # that exists at this moment; frozen blocks never change them
    prefix = c.backbone_blocks + sum(len(n.shared_stack) for n in tree.ancestors(attach_to))
    total = prefix + c.node_shared_blocks + c.node_task_blocks
    probs = survival_schedule(total, c.survival_min)[prefix:]
    shared_stack = LayerStack([ResidualBlock(c.width, p) for p in probs[: c.node_shared_blocks]])
    task_stack = LayerStack(
        [ResidualBlock(c.width, p) for p in probs[c.node_shared_blocks:]]
        + [Affine(c.width, class_count)]
    )
    node_id = max(tree.nodes, default=-1) + 1
    tree.nodes[node_id] = Node(
        node_id=node_id,
        parent=attach_to,
        depth=depth,
        task_id=task_id,
        class_count=class_count,
        shared_stack=shared_stack,
        task_stack=task_stack,
        shared_params=shared_stack.init_params(init_rng),
        task_params=task_stack.init_params(init_rng),
    )
    tree._task_to_node[task_id] = node_id
    return node_id


class PathNetwork:
    """Segments backbone -> ancestor shared stacks -> task stack for one task."""

    def __init__(self, segments):
        self.segments = segments  # (label, stack, params)
        width = None
        for label, stack, _ in segments:
            if width is not None and stack.input_width != width:
                raise ndnn.DimensionError(0, stack.input_width, width)
            width = stack.output_width

    @property
    def params(self) -> list[Param]:
        return [p for _, _, ps in self.segments for p in ps]

    @property
    def trainable_params(self) -> list[Param]:
        return [p for p in self.params if not p.frozen]

    @property
    def input_width(self):
        return self.segments[0][1].input_width

    def forward(self, x, mode="eval", rng=None, tape=None):
        h = x
        offset = 0
        for _, stack, params in self.segments:
            h = ndnn.forward(stack, params, h, mode, rng, tape, layer_offset=offset)
            offset += len(stack)
        return h

    def loss_backward(self, x, y, rng, task_ids=None):
        """One training pass: returns the loss, grads accumulated on trainable params."""
        tape = ndnn.Tape()
        logits = self.forward(x, "train", rng, tape)
        loss, dlogits = ndnn.cross_entropy_loss(logits, y)
        tape.backward(dlogits)
        return loss


def path_for(tree: ModelTree, task_id: int) -> PathNetwork:
    node = tree.node_for_task(task_id)
    segments = [("backbone", tree.backbone_stack, tree.backbone_params)]
    for anc in tree.ancestors(node.node_id):
        segments.append((f"shared:{anc.node_id}", anc.shared_stack, anc.shared_params))
    segments.append((f"task:{node.node_id}", node.task_stack, node.task_params))
    return PathNetwork(segments)


def predict(tree: ModelTree, task_id: int, inputs) -> np.ndarray:
    """Class probabilities for ``task_id`` in evaluation mode."""
    return ndnn.softmax(path_for(tree, task_id).forward(inputs, "eval"))


def candidate_nodes(tree: ModelTree) -> list[int]:
    return [BACKBONE] + [i for i in sorted(tree.nodes) if tree.nodes[i].depth < tree.max_depth]


class ParamCost(NamedTuple):
    backbone_count: int
    shared_count: int
    task_count: int
    depth: int

    @property
    def total(self):
        return self.backbone_count + self.shared_count + self.task_count


def param_cost(tree: ModelTree, task_id: int) -> ParamCost:
    node = tree.node_for_task(task_id)
    backbone = sum(p.size for p in tree.backbone_params)
    shared = sum(p.size for n in tree.ancestors(node.node_id) for p in n.shared_params)
    task = sum(p.size for p in node.task_params)
    return ParamCost(backbone, shared, task, node.depth)


# --------------------------------------------------------------------------
# persistence


def write_blob(path, array) -> bytes:
    data = np.ascontiguousarray(array, dtype="<f8").ravel()
    raw = struct.pack("<Q", data.size) + data.tobytes()
    with open(path, "wb") as f:
        f.write(raw)
    return raw


def read_blob(path, shape) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise IntegrityError(path, f"cannot read blob ({e.strerror})") from e
    if len(raw) < 8:
        raise IntegrityError(path, "blob shorter than its length prefix")
    (n,) = struct.unpack("<Q", raw[:8])
    expected = int(np.prod(shape, dtype=np.int64))
    if n != expected or len(raw) != 8 + 8 * n:
        raise IntegrityError(path, f"blob holds {len(raw) - 8} bytes, prefix says {n} values, "
                                   f"shape needs {expected}")
    return np.frombuffer(raw, dtype="<f8", offset=8).astype(np.float64).reshape(shape)


def save_params(params, prefix, directory):
    entries = []
    for i, p in enumerate(params):
        fname = f"{prefix}_{i:03d}.bin"
        raw = write_blob(os.path.join(directory, fname), p.value)
        entries.append({
            "file": fname,
            "shape": list(p.value.shape),
            "frozen": bool(p.frozen),
            "sha256": hashlib.sha256(raw).hexdigest(),
        })
    return entries


def load_params(entries, directory):
    params = []
    for e in entries:
        path = os.path.join(directory, e["file"])
        value = read_blob(path, tuple(e["shape"]))
        with open(path, "rb") as f:
            if hashlib.sha256(f.read()).hexdigest() != e["sha256"]:
                raise IntegrityError(path, "checksum mismatch")
        params.append(Param(value.copy(), frozen=bool(e["frozen"])))
    return params


def save_tree(tree: ModelTree, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    manifest = {
        "format": FORMAT_VERSION,
        "config": tree.config.__dict__,
        "backbone": {
            "stack": tree.backbone_stack.to_list(),
            "params": save_params(tree.backbone_params, "backbone", directory),
        },
        "trained_task_ids": list(tree.trained_task_ids),
        "nodes": [],
    }
    for i in sorted(tree.nodes):
        n = tree.nodes[i]
        manifest["nodes"].append({
            "node_id": n.node_id,
            "parent": "BACKBONE" if n.parent == BACKBONE else n.parent,
            "depth": n.depth,
            "task_id": n.task_id,
            "class_count": n.class_count,
            "shared_stack": n.shared_stack.to_list(),
            "task_stack": n.task_stack.to_list(),
            "shared_params": save_params(n.shared_params, f"node{i:04d}_shared", directory),
            "task_params": save_params(n.task_params, f"node{i:04d}_task", directory),
        })
    with open(os.path.join(directory, MANIFEST), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_tree(directory) -> ModelTree:
    path = os.path.join(directory, MANIFEST)
    try:
        with open(path) as f:
            manifest = json.load(f)
        config = TreeConfig(**manifest["config"])
        bb = manifest["backbone"]
        tree = ModelTree(
            config,
            backbone_stack=LayerStack.from_list(bb["stack"]),
            backbone_params=load_params(bb["params"], directory),
        )
        for n in manifest["nodes"]:
            parent = BACKBONE if n["parent"] == "BACKBONE" else int(n["parent"])
            node = Node(
                node_id=int(n["node_id"]),
                parent=parent,
                depth=int(n["depth"]),
                task_id=int(n["task_id"]),
                class_count=int(n["class_count"]),
                shared_stack=LayerStack.from_list(n["shared_stack"]),
                task_stack=LayerStack.from_list(n["task_stack"]),
                shared_params=load_params(n["shared_params"], directory),
                task_params=load_params(n["task_params"], directory),
            )
            tree.nodes[node.node_id] = node
            tree._task_to_node[node.task_id] = node.node_id
        tree.trained_task_ids = [int(t) for t in manifest["trained_task_ids"]]
    except IntegrityError:
        raise
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise IntegrityError(path, f"corrupt manifest ({e})") from e
    for node in tree.nodes.values():
        if node.depth != tree.depth_of(node.parent) + 1:
            raise IntegrityError(path, f"node {node.node_id} has inconsistent depth")
    return tree


def render_tree(tree: ModelTree) -> str:
    """Indented parent/child listing, children ordered by node id."""
    children: dict[int, list[int]] = {}
    for i in sorted(tree.nodes):
        children.setdefault(tree.nodes[i].parent, []).append(i)
    lines = ["BACKBONE"]

    def walk(parent, indent):
        for i in children.get(parent, []):
            n = tree.nodes[i]
            lines.append(f"{'  ' * indent}node {n.node_id} task={n.task_id} depth={n.depth}")
            walk(i, indent + 1)

    walk(BACKBONE, 1)
    return "\n".join(lines)
