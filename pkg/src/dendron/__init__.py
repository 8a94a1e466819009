"""Depth-growing continual learning: a tree of frozen nodes routed by output entropy."""

from .learner import LearnerConfig, Strategy, run_stream
from .metrics import AccuracyMatrix, average_accuracy, cumulative_accuracy_curve, forgetting_measure
from .router import select_attachment
from .tree import BACKBONE, ModelTree, TreeConfig, grow_node, load_tree, path_for, predict, save_tree

__version__ = "0.1.0"
