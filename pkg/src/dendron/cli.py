"""Command-line driver: ``run <config>``, ``compare <dirs...>``, ``inspect-tree <dir>``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

from . import config as config_mod
from .learner import SeparateModels, SingleNet, TrainingError, model_param_cost, run_stream
from .metrics import average_accuracy, cumulative_accuracy_curve, forgetting_measure
from .tree import BACKBONE, IntegrityError, ModelTree, load_tree, render_tree, save_params, save_tree

log = logging.getLogger("dendron")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3


def fmt(x: float) -> str:
    return f"{x:.6f}"


def _node_label(node_id):
    if node_id is None:
        return ""
    return "BACKBONE" if node_id == BACKBONE else str(node_id)


def write_accuracy_matrix(path, matrix):
    t = matrix.n_tasks
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["after_task"] + [f"task_{j}" for j in range(t)])
        for k, row in enumerate(matrix.rows()):
            w.writerow([k] + [fmt(v) for v in row] + [""] * (t - k - 1))


def write_summary(path, result):
    matrix = result.matrix
    fm = forgetting_measure(matrix) if matrix.n_tasks >= 2 else None
    rows = [
        ("strategy", result.strategy.value),
        ("tasks", matrix.n_tasks),
        ("acc", fmt(average_accuracy(matrix))),
        ("fm", "" if fm is None else fmt(fm)),
    ]
    for rec in result.log.records:
        cost = model_param_cost(result.model, rec.task_id)
        prefix = f"task_{rec.task_id}"
        rows += [
            (f"{prefix}_depth", cost.depth),
            (f"{prefix}_backbone_params", cost.backbone_count),
            (f"{prefix}_shared_params", cost.shared_count),
            (f"{prefix}_task_params", cost.task_count),
            (f"{prefix}_total_params", cost.total),
        ]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["key", "value"])
        w.writerows(rows)


def write_curve(path, matrix):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["after_task", "cumulative_accuracy"])
        for k, v in cumulative_accuracy_curve(matrix):
            w.writerow([k, fmt(v)])


def write_routing(path, result):
    """One row per task: the lowest-ratio candidate and the attachment made."""
    header = ["task_id", "chosen", "threshold", "node_id", "entropy", "max_entropy", "ratio",
              "candidates"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for rec in result.log.records:
            rep = rec.report
            chosen = _node_label(rec.attached_to)
            if rep is None or not rep.candidates:
                threshold = fmt(rep.threshold) if rep is not None else ""
                w.writerow([rec.task_id, chosen, threshold, "", "", "", "", ""])
                continue
            best = min(rep.candidates, key=lambda c: (c.ratio, c.task_id))
            packed = ";".join(f"{c.node_id}:{fmt(c.ratio)}" for c in rep.candidates)
            w.writerow([rec.task_id, chosen, fmt(rep.threshold), best.node_id, fmt(best.entropy),
                        fmt(best.max_entropy), fmt(best.ratio), packed])


def save_model(model, directory):
    if isinstance(model, ModelTree):
        save_tree(model, directory)
    elif isinstance(model, SeparateModels):
        for task_id, tree in sorted(model.trees.items()):
            save_tree(tree, os.path.join(directory, f"task_{task_id}"))
    elif isinstance(model, SingleNet):
        os.makedirs(directory, exist_ok=True)
        manifest = {
            "body": model.body.to_list(),
            "head": model.head.to_list(),
            "class_counts": {str(k): v for k, v in model.class_counts.items()},
            "params": save_params(model.params, "param", directory),
        }
        with open(os.path.join(directory, "manifest.json"), "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")


def cmd_run(args) -> int:
    try:
        cfg = config_mod.load_config(args.config)
        stream = config_mod.build_stream(cfg.stream)
    except config_mod.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.output_dir or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    log.info("running %s on %d tasks -> %s", cfg.strategy.value, len(stream), out)
    try:
        result = run_stream(stream, cfg.strategy, cfg.learner, seed=cfg.seed)
    except TrainingError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    write_accuracy_matrix(os.path.join(out, "accuracy_matrix.csv"), result.matrix)
    write_summary(os.path.join(out, "summary.csv"), result)
    write_curve(os.path.join(out, "curve.csv"), result.matrix)
    write_routing(os.path.join(out, "routing.csv"), result)
    save_model(result.model, os.path.join(out, "tree"))
    with open(os.path.join(out, "config.resolved"), "w") as f:
        f.write(config_mod.resolved_text(cfg))
    print(f"acc={fmt(average_accuracy(result.matrix))}", end="")
    if result.matrix.n_tasks >= 2:
        print(f" fm={fmt(forgetting_measure(result.matrix))}", end="")
    print()
    return EXIT_OK


def read_summary(directory) -> dict:
    with open(os.path.join(directory, "summary.csv"), newline="") as f:
        return {row["key"]: row["value"] for row in csv.DictReader(f)}


def cmd_compare(args) -> int:
    rows = []
    for d in args.dirs:
        try:
            s = read_summary(d)
        except (OSError, KeyError) as e:
            print(f"missing or unreadable summary.csv in {d}: {e}", file=sys.stderr)
            return EXIT_CONFIG
        rows.append([d, s.get("strategy", ""), s.get("acc", ""), s.get("fm", "")])
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["run", "strategy", "acc", "fm"])
        w.writerows(rows)
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def cmd_inspect(args) -> int:
    directory = args.dir
    if not os.path.exists(os.path.join(directory, "manifest.json")):
        nested = os.path.join(directory, "tree")
        if os.path.exists(os.path.join(nested, "manifest.json")):
            directory = nested
    try:
        tree = load_tree(directory)
    except IntegrityError as e:
        print(f"cannot read tree: {e}", file=sys.stderr)
        return EXIT_CONFIG
    print(render_tree(tree))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="dendron", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="execute one run from a config file")
    r.add_argument("config")
    r.add_argument("--output-dir", help="override [output] output_dir")
    r.set_defaults(func=cmd_run)
    c = sub.add_parser("compare", help="merge summary.csv of several runs")
    c.add_argument("dirs", nargs="+")
    c.add_argument("--out", help="write the table here instead of stdout")
    c.set_defaults(func=cmd_compare)
    i = sub.add_parser("inspect-tree", help="print a saved tree")
    i.add_argument("dir")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
