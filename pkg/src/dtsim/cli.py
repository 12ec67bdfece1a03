"""Command-line interface.

Subcommands: simulate, compare, validate, compile, explain-transform.
Exit codes: 0 success, 1 input error, 2 OOM predicted (simulate only;
the report is still written).
"""

from __future__ import annotations

import argparse
import json
import sys

from .cluster import load_cluster
from .collective import infer_transform, layout_of, plan_volume
from .compiler import compile_graph
from .costs import annotate_costs, load_corrections, load_cost_table
from .errors import DtsimError
from .ir import derive_backward, load_model, validate_graph
from .simulator import report_to_json, simulate, to_chrome_trace
from .strategy import (
    construct_tree,
    dump_strategy,
    load_strategy,
    propagate,
    validate_strategy,
)


def _build_parser():
    p = argparse.ArgumentParser(
        prog="dtsim",
        description="Simulate iteration time, peak memory and OOM of "
        "distributed DNN training strategies.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, strategies="single"):
        sp.add_argument("--model", required=True)
        if strategies == "single":
            sp.add_argument("--strategy", required=True)
        else:
            sp.add_argument(
                "--strategy", action="append", required=True, dest="strategies"
            )
        sp.add_argument("--cluster", required=True)

    sp = sub.add_parser("simulate", help="simulate one strategy")
    common(sp)
    sp.add_argument("--costs", required=True)
    sp.add_argument("--corrections")
    sp.add_argument("--gamma", type=float, default=0.0)
    sp.add_argument("--output")
    sp.add_argument("--format", choices=("text", "json"), default="text")
    sp.add_argument("--dump-graph")
    sp.add_argument("--trace")

    sp = sub.add_parser("compare", help="rank several strategies by throughput")
    common(sp, strategies="multi")
    sp.add_argument("--costs", required=True)
    sp.add_argument("--corrections")
    sp.add_argument("--gamma", type=float, default=0.0)
    sp.add_argument("--output")
    sp.add_argument("--format", choices=("text", "json"), default="text")

    sp = sub.add_parser("validate", help="validate model + strategy files")
    common(sp)

    sp = sub.add_parser("compile", help="compile and dump the execution graph")
    common(sp)
    sp.add_argument("--dump", required=True)

    sp = sub.add_parser(
        "explain-transform",
        help="print the inferred communication plan for one tensor between "
        "the layouts of two strategy files",
    )
    sp.add_argument("--model", required=True)
    sp.add_argument("--cluster", required=True)
    sp.add_argument("--tensor", required=True)
    sp.add_argument("--src-strategy", required=True)
    sp.add_argument("--dst-strategy", required=True)
    return p


def _load_pipeline(args, strategy_path):
    model = derive_backward(load_model(args.model))
    diags = validate_graph(model)
    if diags:
        raise DtsimError("invalid model:\n  " + "\n  ".join(diags))
    cluster = load_cluster(args.cluster)
    tree = construct_tree(model)
    load_strategy(tree, strategy_path)
    propagate(tree)
    diags = validate_strategy(tree, cluster)
    if diags:
        raise DtsimError("invalid strategy:\n  " + "\n  ".join(diags))
    return model, tree, cluster


def _gamma(args):
    if args.gamma < 0:
        raise DtsimError("--gamma must be >= 0")
    return args.gamma


def _run_one(args, strategy_path):
    model, tree, cluster = _load_pipeline(args, strategy_path)
    graph = compile_graph(model, tree, cluster)
    table = load_cost_table(args.costs)
    corrections = load_corrections(args.corrections) if args.corrections else None
    annotate_costs(graph, table, cluster, corrections)
    report = simulate(graph, cluster, gamma=_gamma(args))
    return graph, report


def _write(path, text):
    if path:
        with open(path, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def _text_report(report):
    lines = []
    d = report.to_dict()
    lines.append(f"iteration time: {d['iteration_time_s']:.6e} s")
    lines.append(
        f"throughput: {d['throughput_samples_per_s']:.3f} samples/s "
        f"(batch {d['batch_size']}, {d['n_micro_batches']} micro-batches)"
    )
    lines.append("per-device memory:")
    lines.append(
        f"  {'dev':>4} {'peak MB':>12} {'resident MB':>12} {'oom':>5} "
        f"{'compute s':>12} {'feature s':>12} {'gradient s':>12}"
    )
    for dev in d["devices"]:
        lines.append(
            f"  {dev['device']:>4} {dev['peak_bytes'] / 1e6:>12.3f} "
            f"{dev['final_bytes'] / 1e6:>12.3f} "
            f"{'yes' if dev['oom'] else 'no':>5} "
            f"{dev['busy']['compute']:>12.6f} "
            f"{dev['busy']['feature_comm']:>12.6f} "
            f"{dev['busy']['gradient_comm']:>12.6f}"
        )
    b = d["behaviors"]
    lines.append(
        f"behaviors: {b['overlapped_tasks']} overlapped tasks, "
        f"{b['bandwidth_shared_tasks']} bandwidth-shared tasks, "
        f"max share factor {b['max_share_factor']:.2f}"
    )
    return "\n".join(lines) + "\n"


def cmd_simulate(args) -> int:
    graph, report = _run_one(args, args.strategy)
    if args.dump_graph:
        _write(args.dump_graph, json.dumps(graph.to_dict(), sort_keys=True, indent=2))
    if args.trace:
        _write(args.trace, json.dumps(to_chrome_trace(report), sort_keys=True))
    if args.format == "json":
        _write(args.output, report_to_json(report) + "\n")
    else:
        _write(args.output, _text_report(report))
    return 2 if report.any_oom else 0


def _strategy_label(tree, graph):
    """DPxMPxPP(n_micro) when derivable from the compiled graph."""
    pp = len(graph.stages)
    first_op = next(iter(tree.model.operators))
    cfg = tree.op_configs.get(first_op)
    if cfg is None:
        return "custom"
    dp = cfg.partition.get(tree.model.batch_dim, 1)
    mp = 1
    for l, d in cfg.partition.items():
        if l != tree.model.batch_dim:
            mp *= d
    return f"{dp}x{mp}x{pp}({graph.n_micro_batches})"


def cmd_compare(args) -> int:
    rows = []
    for path in args.strategies:
        model, tree, cluster = _load_pipeline(args, path)
        graph = compile_graph(model, tree, cluster)
        table = load_cost_table(args.costs)
        corrections = (
            load_corrections(args.corrections) if args.corrections else None
        )
        annotate_costs(graph, table, cluster, corrections)
        report = simulate(graph, cluster, gamma=_gamma(args))
        rows.append(
            {
                "strategy": path,
                "label": _strategy_label(tree, graph),
                "iteration_time_s": report.iteration_time,
                "throughput_samples_per_s": (
                    report.batch_size / report.iteration_time
                    if report.iteration_time > 0
                    else None
                ),
                "peak_bytes": max(report.peak_bytes.values()),
                "oom": report.any_oom,
            }
        )
    ranked = sorted(
        [r for r in rows if not r["oom"]],
        key=lambda r: (-r["throughput_samples_per_s"], r["strategy"]),
    )
    for i, r in enumerate(ranked):
        r["rank"] = i + 1
    for r in rows:
        r.setdefault("rank", None)
    if not ranked:
        sys.stderr.write("warning: every strategy is predicted to OOM\n")
    if args.format == "json":
        _write(args.output, json.dumps({"strategies": rows}, sort_keys=True, indent=2) + "\n")
    else:
        lines = [
            f"{'rank':>4} {'label':>14} {'iter s':>12} {'samples/s':>12} "
            f"{'peak MB':>10} {'oom':>4}  strategy"
        ]
        for r in sorted(rows, key=lambda r: (r["rank"] is None, r["rank"] or 0)):
            lines.append(
                f"{r['rank'] if r['rank'] else '-':>4} {r['label']:>14} "
                f"{r['iteration_time_s']:>12.6f} "
                f"{(r['throughput_samples_per_s'] or 0):>12.3f} "
                f"{r['peak_bytes'] / 1e6:>10.1f} "
                f"{'yes' if r['oom'] else 'no':>4}  {r['strategy']}"
            )
        _write(args.output, "\n".join(lines) + "\n")
    return 0


def cmd_validate(args) -> int:
    try:
        model = derive_backward(load_model(args.model))
    except DtsimError as e:
        sys.stderr.write(f"error: {e}\n")
        return 1
    diags = validate_graph(model)
    cluster = load_cluster(args.cluster)
    tree = construct_tree(model)
    load_strategy(tree, args.strategy)
    propagate(tree)
    diags += validate_strategy(tree, cluster)
    if diags:
        for d in diags:
            sys.stdout.write(f"{d}\n")
        return 1
    sys.stdout.write("ok\n")
    return 0


def cmd_compile(args) -> int:
    model, tree, cluster = _load_pipeline(args, args.strategy)
    graph = compile_graph(model, tree, cluster)
    _write(args.dump, json.dumps(graph.to_dict(), sort_keys=True, indent=2))
    return 0


def cmd_explain_transform(args) -> int:
    model = derive_backward(load_model(args.model))
    cluster = load_cluster(args.cluster)
    if args.tensor not in model.tensors:
        raise DtsimError(f"unknown tensor '{args.tensor}'")
    tensor = model.tensors[args.tensor]
    layouts = []
    for path in (args.src_strategy, args.dst_strategy):
        tree = construct_tree(model)
        load_strategy(tree, path)
        propagate(tree)
        layouts.append(layout_of(tensor, tree.tensor_configs[args.tensor]))
    plan = infer_transform(layouts[0], layouts[1])
    out = {
        "tensor": args.tensor,
        "steps": [
            {
                "primitive": s.primitive,
                "group": list(s.group),
                "bytes": s.nbytes,
            }
            for s in plan.steps
        ],
        "wire_bytes_per_level": plan_volume(plan, cluster),
    }
    sys.stdout.write(json.dumps(out, sort_keys=True, indent=2) + "\n")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "compare": cmd_compare,
    "validate": cmd_validate,
    "compile": cmd_compile,
    "explain-transform": cmd_explain_transform,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except DtsimError as e:
        sys.stderr.write(f"error: {e}\n")
        return 1
    except OSError as e:
        sys.stderr.write(f"error: {e}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
