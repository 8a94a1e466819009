import hashlib
import json
import os

import numpy as np
import pytest
from conftest import FIG2_PARENTS, small_tree

from dendron.ndnn import DimensionError, RngState
from dendron.tree import (
    BACKBONE,
    DepthLimitError,
    IntegrityError,
    ModelTree,
    TreeConfig,
    candidate_nodes,
    grow_node,
    load_tree,
    param_cost,
    path_for,
    predict,
    read_blob,
    render_tree,
    save_tree,
    survival_schedule,
    write_blob,
)


def snapshot(tree):
    return [p.value.tobytes() for p in tree.all_params()]


def blob_hashes(directory):
    return {
        name: hashlib.sha256(open(os.path.join(directory, name), "rb").read()).hexdigest()
        for name in sorted(os.listdir(directory)) if name.endswith(".bin")
    }


# -- growth ---------------------------------------------------------------------


def test_first_node_attaches_to_backbone():
    tree = small_tree([BACKBONE])
    node = tree.nodes[0]
    assert (node.parent, node.depth, node.task_id) == (BACKBONE, 1, 0)


def test_fig2_shape():
    tree = small_tree(FIG2_PARENTS)
    assert tree.parent_array() == FIG2_PARENTS
    assert [tree.depth_of(i) for i in range(9)] == [1, 2, 2, 2, 3, 4, 4, 4, 5]


def test_depth_limit():
    tree = small_tree([BACKBONE, 0], max_depth=2)
    with pytest.raises(DepthLimitError):
        grow_node(tree, 1, 2, 3, RngState(0))
    assert len(tree) == 2


def test_grow_rejects_unknown_parent_and_duplicate_task():
    tree = small_tree([BACKBONE])
    with pytest.raises(KeyError):
        grow_node(tree, 7, 1, 3, RngState(0))
    with pytest.raises(ValueError):
        grow_node(tree, BACKBONE, 0, 3, RngState(0))


def test_new_node_is_trainable_and_others_stay_frozen():
    tree = small_tree([BACKBONE, 0])
    before = snapshot(tree)
    nid = grow_node(tree, 0, 2, 4, RngState(9))
    assert all(not p.frozen for p in tree.nodes[nid].params)
    others = [p for i, n in tree.nodes.items() if i != nid for p in n.params]
    assert all(p.frozen for p in others + tree.backbone_params)
    assert snapshot(tree)[: len(before)] == before


def test_survival_schedule():
    assert survival_schedule(1, 0.8) == [1.0]
    np.testing.assert_allclose(survival_schedule(5, 0.8), [1.0, 0.95, 0.9, 0.85, 0.8])


def test_node_survival_probs_continue_path_schedule():
    tree = small_tree([BACKBONE, 0])
    probs = [b.survival_prob for b in tree.backbone_stack.layers[2:]]
    probs += [tree.nodes[0].shared_stack.layers[0].survival_prob]
    assert probs[0] == 1.0
    assert all(a >= b for a, b in zip(probs, probs[1:]))
    # node 1 sits deeper, so its blocks end on the floor
    assert tree.nodes[1].task_stack.layers[0].survival_prob == pytest.approx(0.8)


# -- candidates -------------------------------------------------------------------


def test_candidates_empty_tree():
    tree = ModelTree(TreeConfig(input_dim=3, width=4))
    assert candidate_nodes(tree) == [BACKBONE]


def test_candidates_depth_one():
    assert candidate_nodes(small_tree([BACKBONE], max_depth=1)) == [BACKBONE]


def test_candidates_fig2_max_depth_4():
    parents = FIG2_PARENTS[:8]  # node 8 would sit at depth 5
    tree = small_tree(parents, max_depth=4)
    # exhaustive scan: walk each node to the root and count hops
    oracle = [BACKBONE]
    for i in range(len(parents)):
        d, p = 1, parents[i]
        while p != BACKBONE:
            d, p = d + 1, parents[p]
        if d < 4:
            oracle.append(i)
    assert candidate_nodes(tree) == oracle
    assert set(range(8)) - set(oracle) == {5, 6, 7}


# -- paths and prediction ---------------------------------------------------------


def test_path_segments():
    tree = small_tree(FIG2_PARENTS)
    labels = [s[0] for s in path_for(tree, 5).segments]
    assert labels == ["backbone", "shared:0", "shared:3", "shared:4", "shared:5", "task:5"]
    with pytest.raises(KeyError):
        path_for(tree, 42)


def test_predict_deterministic_and_read_only():
    tree = small_tree(FIG2_PARENTS)
    x = RngState(3).normal((20, 5))
    before = snapshot(tree)
    a = predict(tree, 7, x)
    b = predict(tree, 7, x)
    assert a.tobytes() == b.tobytes()
    assert snapshot(tree) == before
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-12)


def test_predict_dimension_mismatch():
    tree = small_tree([BACKBONE])
    with pytest.raises(DimensionError):
        predict(tree, 0, np.zeros((2, 4)))


def _standalone_block(ps, s, x):
    w1, b1, g, beta, w2, b2 = (p.value for p in ps)
    h = x @ w1 + b1
    mu = h.mean(axis=1, keepdims=True)
    h = (h - mu) / np.sqrt(((h - mu) ** 2).mean(axis=1, keepdims=True) + 1e-10) * g + beta
    return x + s * (np.maximum(h, 0.0) @ w2 + b2)


def test_predict_matches_standalone_network():
    tree = small_tree([BACKBONE], input_dim=4, width=4, classes=3, seed=5)
    # identity backbone projection so the oracle is easy to read
    w, b = tree.backbone_params[:2]
    w.value[...] = np.eye(4)
    b.value[...] = 1.0
    x = RngState(8).normal((6, 4))
    h = np.maximum(x + 1.0, 0.0)
    bb_blocks = tree.backbone_stack.layers[2:]
    ps = tree.backbone_params[2:]
    for k, blk in enumerate(bb_blocks):
        h = _standalone_block(ps[6 * k : 6 * k + 6], blk.survival_prob, h)
    node = tree.nodes[0]
    h = _standalone_block(node.shared_params, node.shared_stack.layers[0].survival_prob, h)
    h = _standalone_block(node.task_params[:6], node.task_stack.layers[0].survival_prob, h)
    logits = h @ node.task_params[6].value + node.task_params[7].value
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    np.testing.assert_allclose(predict(tree, 0, x), e / e.sum(axis=1, keepdims=True),
                               rtol=1e-12, atol=1e-15)


def test_later_growth_leaves_earlier_predictions_bit_identical():
    tree = small_tree([BACKBONE, 0])
    x = RngState(2).normal((10, 5))
    before = [predict(tree, t, x).tobytes() for t in (0, 1)]
    rng = RngState(4)
    for task, parent in ((2, 1), (3, BACKBONE), (4, 0)):
        grow_node(tree, parent, task, 3, rng)
        node = tree.node_for_task(task)
        for p in node.params:  # simulate training of the new node only
            p.value += 0.5
        tree.register_trained(task)
        tree.freeze_all()
    assert [predict(tree, t, x).tobytes() for t in (0, 1)] == before


# -- cost -------------------------------------------------------------------------


def test_param_cost_single_node():
    tree = small_tree([BACKBONE], input_dim=5, width=6, classes=3)
    block = 2 * (6 * 6 + 6) + 2 * 6
    cost = param_cost(tree, 0)
    assert cost.depth == 1
    assert cost.backbone_count == 5 * 6 + 6 + 2 * block
    assert cost.shared_count == block
    assert cost.task_count == block + 6 * 3 + 3


def test_param_cost_matches_size_walk():
    tree = small_tree(FIG2_PARENTS)
    for task in range(len(FIG2_PARENTS)):
        walk = sum(int(np.prod(p.value.shape)) for p in path_for(tree, task).params)
        assert param_cost(tree, task).total == walk


def test_shared_count_linear_in_depth():
    tree = small_tree([BACKBONE, 0, 1, 2, 3])
    shared = [param_cost(tree, t).shared_count for t in range(5)]
    assert [s // shared[0] for s in shared] == [1, 2, 3, 4, 5]
    assert all(s % shared[0] == 0 for s in shared)


# -- persistence ------------------------------------------------------------------


def test_blob_format(tmp_path):
    path = tmp_path / "a.bin"
    write_blob(path, np.array([[1.0, 2.0], [3.0, -0.5]]))
    raw = path.read_bytes()
    assert raw[:8] == (4).to_bytes(8, "little")
    assert np.frombuffer(raw[8:], "<f8").tolist() == [1.0, 2.0, 3.0, -0.5]
    np.testing.assert_array_equal(read_blob(path, (2, 2)), [[1.0, 2.0], [3.0, -0.5]])


def test_save_load_roundtrip(tmp_path):
    tree = small_tree(FIG2_PARENTS)
    save_tree(tree, tmp_path / "a")
    loaded = load_tree(tmp_path / "a")
    assert loaded.parent_array() == tree.parent_array()
    assert loaded.trained_task_ids == tree.trained_task_ids
    assert snapshot(loaded) == snapshot(tree)
    assert [p.frozen for p in loaded.all_params()] == [p.frozen for p in tree.all_params()]
    x = RngState(0).normal((100, 5))
    for t in range(len(FIG2_PARENTS)):
        assert predict(loaded, t, x).tobytes() == predict(tree, t, x).tobytes()
    save_tree(loaded, tmp_path / "b")
    assert blob_hashes(tmp_path / "a") == blob_hashes(tmp_path / "b")


def test_manifest_lists_backbone_parent(tmp_path):
    save_tree(small_tree([BACKBONE]), tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["nodes"][0]["parent"] == "BACKBONE"
    assert manifest["nodes"][0]["depth"] == 1


def test_corrupt_blob_names_file(tmp_path):
    save_tree(small_tree([BACKBONE]), tmp_path)
    victim = sorted(p for p in os.listdir(tmp_path) if p.endswith(".bin"))[0]
    raw = bytearray((tmp_path / victim).read_bytes())
    raw[-1] ^= 0xFF
    (tmp_path / victim).write_bytes(bytes(raw))
    with pytest.raises(IntegrityError) as err:
        load_tree(tmp_path)
    assert victim in str(err.value)


def test_missing_blob(tmp_path):
    save_tree(small_tree([BACKBONE]), tmp_path)
    victim = sorted(p for p in os.listdir(tmp_path) if p.endswith(".bin"))[-1]
    os.remove(tmp_path / victim)
    with pytest.raises(IntegrityError) as err:
        load_tree(tmp_path)
    assert victim in str(err.value)


def test_missing_manifest(tmp_path):
    with pytest.raises(IntegrityError):
        load_tree(tmp_path)


def test_render_tree():
    text = render_tree(small_tree([BACKBONE, 0, BACKBONE]))
    assert text.splitlines() == [
        "BACKBONE",
        "  node 0 task=0 depth=1",
        "    node 1 task=1 depth=2",
        "  node 2 task=2 depth=1",
    ]
