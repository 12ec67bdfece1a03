"""Operator cost estimation.

Compute costs come from a user-supplied profile table keyed by
(cost_key, shard extents, device type); misses fall back to a peak-throughput
estimate for flop-countable types (matmul/conv via the contraction product,
elementwise at 1 flop/element, optimizer-step at 4 flops/element for the
momentum+variance update).  Embedding lookups always need table entries.

Communication costs use the alpha-beta model over the group's aggregate
channel bandwidth, with ring-algorithm terms and a per-primitive bandwidth
correction factor:

    all-reduce      2(n-1) a + 2S(n-1) / (nB)
    all-gather      (n-1) a  +  S(n-1) / (nB)
    reduce-scatter  (n-1) a  +  S(n-1) / (nB)
    all-to-all      (n-1) a  +  S(n-1) / (nB)
    broadcast       (n-1) a  +  S / B          (pipelined ring)
    send-recv       a        +  S / B

where a is the latency of the highest hierarchy level the group crosses and
B is the aggregate bandwidth times the primitive's correction factor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .cluster import ClusterSpec, bottleneck_alpha, channels
from .errors import CostError, SchemaError
from .ir import OP_TYPES

OPTIMIZER_FLOPS_PER_ELEMENT = 4


def _canon_extents(extents) -> tuple:
    return tuple(sorted(extents.items()))


@dataclass
class ComputeCostTable:
    entries: dict = field(default_factory=dict)
    peak_flops: dict = field(default_factory=dict)  # device type -> flop/s

    def add(self, cost_key, extents, device_type, micros):
        if micros <= 0:
            raise SchemaError("cost table", f"{cost_key}: duration must be > 0")
        self.entries[(cost_key, _canon_extents(extents), device_type)] = micros * 1e-6

    def lookup(self, cost_key, extents, device_type):
        return self.entries.get((cost_key, _canon_extents(extents), device_type))


def cost_table_from_obj(obj, source="<dict>") -> ComputeCostTable:
    table = ComputeCostTable()
    if not isinstance(obj, list):
        raise SchemaError(source, "cost table must be a JSON list")
    for i, item in enumerate(obj):
        where = f"{source}[{i}]"
        if "cost_key" in item:
            for k in ("extents", "device_type", "micros"):
                if k not in item:
                    raise SchemaError(where, f"missing '{k}'")
            table.add(item["cost_key"], item["extents"], item["device_type"], item["micros"])
        elif "peak_tflops" in item:
            if "device_type" not in item:
                raise SchemaError(where, "missing 'device_type'")
            table.peak_flops[item["device_type"]] = item["peak_tflops"] * 1e12
        else:
            raise SchemaError(where, "entry needs 'cost_key' or 'peak_tflops'")
    return table


def load_cost_table(path) -> ComputeCostTable:
    with open(path) as f:
        try:
            obj = json.load(f)
        except json.JSONDecodeError as e:
            raise SchemaError(str(path), f"invalid JSON: {e}") from e
    return cost_table_from_obj(obj, source=str(path))


def load_corrections(path) -> dict:
    with open(path) as f:
        obj = json.load(f)
    if not isinstance(obj, dict):
        raise SchemaError(str(path), "corrections file must be a JSON object")
    for prim, f_ in obj.items():
        if not 0 < f_ <= 1:
            raise SchemaError(str(path), f"correction for {prim} must be in (0, 1]")
    return obj


def flop_count(op_type, extents):
    """Standard flop formulas; None when the type needs a table entry."""
    kind = OP_TYPES.get(op_type, {}).get("flops")
    if kind is None:
        return None
    n = 1
    for _, e in sorted(extents.items()):
        n *= e
    if kind == "contraction":
        return 2 * n
    if kind == "elementwise":
        return n
    if kind == "optimizer":
        return OPTIMIZER_FLOPS_PER_ELEMENT * n
    return None


def compute_cost(task, table: ComputeCostTable, device_type: str) -> float:
    """Seconds for one compute task: exact table entry, else flops/peak."""
    hit = table.lookup(task.cost_key, task.extents, device_type)
    if hit is not None:
        return hit
    peak = table.peak_flops.get(device_type)
    if peak is not None:
        flops = flop_count(task.op_type, task.extents)
        if flops is not None:
            return flops / peak
    raise CostError([f"{task.cost_key}{dict(task.extents)}@{device_type}"])


def collective_cost(primitive, nbytes, group, cluster: ClusterSpec, corrections=None) -> float:
    n = len(set(group))
    if n < 2:
        raise ValueError("collective cost needs a group of >= 2 devices")
    corr = (corrections or {}).get(primitive, 1.0)
    bw = channels(cluster, group).aggregate * corr
    alpha = bottleneck_alpha(cluster, group)
    s = nbytes
    if primitive == "all-reduce":
        return 2 * (n - 1) * alpha + 2 * s * (n - 1) / (n * bw)
    if primitive in ("all-gather", "reduce-scatter", "all-to-all"):
        return (n - 1) * alpha + s * (n - 1) / (n * bw)
    if primitive == "broadcast":
        return (n - 1) * alpha + s / bw
    if primitive == "send-recv":
        return alpha + s / bw
    raise ValueError(f"unknown primitive '{primitive}'")


def annotate_costs(graph, table: ComputeCostTable, cluster: ClusterSpec, corrections=None):
    """Attach a base duration to every task; comm tasks also get their
    bottleneck level and solo bandwidth.  Missing compute entries are
    aggregated into a single CostError."""
    missing = []
    for task in graph.tasks.values():
        if task.kind == "compute":
            try:
                task.cost = compute_cost(task, table, cluster.device_type)
            except CostError as e:
                missing.extend(e.missing)
        else:
            task.cost = collective_cost(
                task.primitive, task.nbytes, task.group, cluster, corrections
            )
            task.level = channels(cluster, task.group).bottleneck_level
    if missing:
        seen = set()
        uniq = [m for m in missing if not (m in seen or seen.add(m))]
        raise CostError(uniq)
    return graph
