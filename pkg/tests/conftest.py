import contextlib
import time

import numpy as np
import pytest

from dendron.ndnn import Param, RngState
from dendron.tree import BACKBONE, ModelTree, TreeConfig, grow_node

_ACCEPTANCE = []


@contextlib.contextmanager
def criterion(number, text):
    """Record a pass/fail line for the acceptance summary."""
    t0 = time.perf_counter()
    try:
        yield
    except BaseException as e:
        _ACCEPTANCE.append((number, "FAIL", text, time.perf_counter() - t0, repr(e)[:160]))
        raise
    _ACCEPTANCE.append((number, "PASS", text, time.perf_counter() - t0, ""))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, status, text, secs, err in sorted(_ACCEPTANCE):
        line = f"[{status}] {number:>2}. {text} ({secs:.1f}s)"
        if err:
            line += f" -- {err}"
        terminalreporter.write_line(line)


def small_tree(parents=(), input_dim=5, width=6, classes=3, max_depth=8, seed=0):
    """Tree grown with the given parent list (node ids, BACKBONE = -1), all trained."""
    tree = ModelTree(TreeConfig(input_dim=input_dim, width=width, max_depth=max_depth),
                     RngState(seed))
    rng = RngState(seed + 1)
    for task, parent in enumerate(parents):
        grow_node(tree, parent, task, classes, rng)
        tree.register_trained(task)
    tree.freeze_all()
    return tree


def set_constant_output(tree, task_id, logits):
    """Make a task's classifier ignore its input and emit ``logits``."""
    node = tree.node_for_task(task_id)
    w, b = node.task_params[-2:]
    w.value[...] = 0.0
    b.value[...] = np.asarray(logits, dtype=np.float64)


@pytest.fixture
def rng():
    return RngState(1234)


FIG2_PARENTS = [BACKBONE, 0, 0, 0, 3, 4, 4, 4, 7]
