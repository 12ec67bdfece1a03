"""Hierarchical parallelization strategy: tree, configs and propagation.

Leaf nodes of the strategy tree mirror model layers and hold per-operator
computation configs and per-tensor memory configs; non-leaf nodes hold one
schedule config each.  A config pairs a *partition* (dim label -> parallel
degree, parts enumerated row-major in label insertion order) with a *map*
(one device group per part: singleton = shard, larger = replicate).

Propagation fills everything the user left unset:

 1. top-down: schedule configs inherit from the parent unless explicit;
 2. wildcard `"*"` op/tensor configs attached to a node seed every unset
    object in its subtree, with the partition restricted to the object's
    own dims (so e.g. a batch-partition wildcard replicates parameters);
 3. forward data pass: an unset operator copies its first configured
    input's memory config; unset tensors take the layout implied by their
    producer (or first consumer for producer-less tensors);
 4. backward data pass: an unset backward operator mirrors its forward
    partner's config restricted to its own dims, optimizer steps follow
    their parameter, and gradient tensors take their producer's implied
    layout.

Anything still unset afterwards is reported, never guessed.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

from .errors import SchemaError, StrategyError
from .ir import ModelGraph

ROOT_PATH = "root"


def _prod(xs):
    p = 1
    for x in xs:
        p *= x
    return p


@dataclass
class ParallelConfig:
    """partition + map for one operator or tensor."""

    partition: dict  # label -> degree, ordered
    map: tuple  # tuple of sorted device-id tuples, one per part
    explicit: bool = False

    @property
    def nparts(self) -> int:
        return _prod(self.partition.values())

    def part_indices(self):
        """Row-major index vectors aligned with partition label order."""
        return itertools.product(*[range(d) for d in self.partition.values()])

    def devices(self):
        devs = set()
        for grp in self.map:
            devs.update(grp)
        return tuple(sorted(devs))

    def key(self):
        return (tuple(self.partition.items()), self.map)

    def restrict(self, keep_labels) -> "ParallelConfig":
        """Project onto ``keep_labels``; dropped parts merge device sets."""
        keep = [l for l in self.partition if l in keep_labels]
        merged = {}
        labels = list(self.partition)
        for idx, grp in zip(self.part_indices(), self.map):
            kidx = tuple(i for l, i in zip(labels, idx) if l in keep)
            merged.setdefault(kidx, set()).update(grp)
        new_partition = {l: self.partition[l] for l in keep}
        order = itertools.product(*[range(new_partition[l]) for l in keep])
        new_map = tuple(tuple(sorted(merged[k])) for k in order)
        return ParallelConfig(new_partition, new_map, explicit=False)


class ComputationConfig(ParallelConfig):
    pass


class MemoryConfig(ParallelConfig):
    pass


@dataclass
class ScheduleConfig:
    n_micro_batch: int = 1
    max_ongoing_micro_batch: int = 1
    recomputation: bool = False
    explicit: bool = False

    def copy_inherited(self):
        return ScheduleConfig(
            self.n_micro_batch,
            self.max_ongoing_micro_batch,
            self.recomputation,
            explicit=False,
        )


@dataclass
class TreeNode:
    name: str
    path: str
    parent: "TreeNode | None" = None
    children: list = field(default_factory=list)
    layer: str | None = None  # leaf nodes reference a model layer
    schedule: ScheduleConfig | None = None
    wildcard_op: ParallelConfig | None = None
    wildcard_tensor: ParallelConfig | None = None

    @property
    def is_leaf(self) -> bool:
        return self.layer is not None

    def leaves(self):
        if self.is_leaf:
            yield self
        for c in self.children:
            yield from c.leaves()


class StrategyTree:
    def __init__(self, model: ModelGraph, root: TreeNode, by_path: dict):
        self.model = model
        self.root = root
        self.by_path = by_path
        self.op_configs: dict = {}  # op id -> ComputationConfig
        self.tensor_configs: dict = {}  # tensor id -> MemoryConfig
        self.notes: list = []

    def leaf_of(self, layer_name: str) -> TreeNode:
        return self.by_path[self._leaf_paths[layer_name]]

    def resolve(self, name: str) -> TreeNode:
        if name in self.by_path:
            return self.by_path[name]
        if name in self._leaf_paths:
            return self.by_path[self._leaf_paths[name]]
        raise StrategyError(f"unknown tree node '{name}'")


def construct_tree(model: ModelGraph) -> StrategyTree:
    """Build the config-free tree whose shape mirrors module paths."""
    root = TreeNode(name=ROOT_PATH, path=ROOT_PATH)
    by_path = {ROOT_PATH: root}
    leaf_paths = {}
    for layer in model.layers.values():
        node = root
        for part in layer.module_path:
            path = f"{node.path}/{part}"
            if path not in by_path:
                child = TreeNode(name=part, path=path, parent=node)
                node.children.append(child)
                by_path[path] = child
            node = by_path[path]
            if node.is_leaf:
                raise StrategyError(
                    f"module path '{path}' is both a layer and a module"
                )
        path = f"{node.path}/{layer.name}"
        if path in by_path:
            raise StrategyError(
                f"module path '{path}' is both a layer and a module"
            )
        leaf = TreeNode(name=layer.name, path=path, parent=node, layer=layer.name)
        node.children.append(leaf)
        by_path[path] = leaf
        leaf_paths[layer.name] = path
    tree = StrategyTree(model, root, by_path)
    tree._leaf_paths = leaf_paths
    return tree


def _parse_config(obj, where, cls):
    part = obj.get("partition", {})
    if not isinstance(part, dict) or not part:
        partition = {}
    else:
        partition = {}
        for l, d in part.items():
            if not isinstance(d, int) or d < 1:
                raise SchemaError(f"{where}.partition.{l}", "degree must be int >= 1")
            partition[l] = d
    raw_map = obj.get("map")
    if raw_map is None:
        raise SchemaError(where, "missing 'map'")
    pmap = tuple(tuple(sorted(g)) for g in raw_map)
    nparts = _prod(partition.values())
    if len(pmap) != nparts:
        raise StrategyError(
            f"{where}: map has {len(pmap)} entries but partition has "
            f"{nparts} parts"
        )
    for g in pmap:
        if not g:
            raise StrategyError(f"{where}: empty device group in map")
    return cls(partition, pmap, explicit=True)


def strategy_from_dict(tree: StrategyTree, obj, source="<dict>") -> StrategyTree:
    model = tree.model
    if not isinstance(obj, dict) or "nodes" not in obj:
        raise SchemaError(source, "strategy document must have a 'nodes' list")
    for ni, nobj in enumerate(obj["nodes"]):
        where = f"{source}.nodes[{ni}]"
        path = nobj.get("path")
        if not path:
            raise SchemaError(where, "missing 'path'")
        node = tree.resolve(path)
        if "schedule" in nobj:
            s = nobj["schedule"]
            sched = ScheduleConfig(
                n_micro_batch=s.get("n_micro_batch", 1),
                max_ongoing_micro_batch=s.get(
                    "max_ongoing_micro_batch", s.get("n_micro_batch", 1)
                ),
                recomputation=bool(s.get("recomputation", False)),
                explicit=True,
            )
            if sched.n_micro_batch < 1:
                raise StrategyError(f"{where}: n_micro_batch must be >= 1")
            if not 1 <= sched.max_ongoing_micro_batch <= sched.n_micro_batch:
                raise StrategyError(
                    f"{where}: max_ongoing_micro_batch must be in "
                    f"[1, {sched.n_micro_batch}]"
                )
            node.schedule = sched
        for name, cobj in sorted(nobj.get("ops", {}).items()):
            cfg = _parse_config(cobj, f"{where}.ops.{name}", ComputationConfig)
            if name == "*":
                node.wildcard_op = cfg
                continue
            op_id = name if name in model.operators else f"{node.layer}.{name}"
            if op_id not in model.operators:
                raise StrategyError(f"{where}: unknown operator '{name}'")
            op = model.operators[op_id]
            for l in cfg.partition:
                if l not in op.parallelizable_dims:
                    raise StrategyError(
                        f"{where}: dim '{l}' is not a parallelizable dim of "
                        f"operator '{op_id}'"
                    )
            tree.op_configs[op_id] = cfg
        for name, cobj in sorted(nobj.get("tensors", {}).items()):
            cfg = _parse_config(cobj, f"{where}.tensors.{name}", MemoryConfig)
            if name == "*":
                node.wildcard_tensor = cfg
                continue
            if name not in model.tensors:
                raise StrategyError(f"{where}: unknown tensor '{name}'")
            t = model.tensors[name]
            for l in cfg.partition:
                if l not in t.labels:
                    raise StrategyError(
                        f"{where}: dim '{l}' is not a dim of tensor '{name}'"
                    )
            tree.tensor_configs[name] = cfg
    return tree


def load_strategy(tree: StrategyTree, path) -> StrategyTree:
    with open(path) as f:
        try:
            obj = json.load(f)
        except json.JSONDecodeError as e:
            raise SchemaError(str(path), f"invalid JSON: {e}") from e
    return strategy_from_dict(tree, obj, source=str(path))


def _first_configured_input(tree, op):
    for tid in op.inputs:
        cfg = tree.tensor_configs.get(tid)
        if cfg is not None:
            return tid, cfg
    return None, None


def propagate(tree: StrategyTree) -> StrategyTree:
    """Fill every unset config; deterministic and idempotent."""
    model = tree.model
    if tree.root.schedule is None:
        raise StrategyError("root node has no schedule config")

    # 1. schedule inheritance, top-down
    stack = [tree.root]
    while stack:
        node = stack.pop()
        for c in node.children:
            if c.schedule is None or not c.schedule.explicit:
                c.schedule = node.schedule.copy_inherited()
            stack.append(c)

    # 2. wildcard defaults, nearest ancestor wins
    def apply_wildcards(node, wop, wtensor):
        wop = node.wildcard_op or wop
        wtensor = node.wildcard_tensor or wtensor
        if node.is_leaf:
            layer = model.layers[node.layer]
            if wop is not None:
                for oid in layer.forward_ops + layer.backward_ops:
                    if oid not in tree.op_configs:
                        op = model.operators[oid]
                        cfg = wop.restrict(op.parallelizable_dims)
                        tree.op_configs[oid] = ComputationConfig(
                            cfg.partition, cfg.map
                        )
            if wtensor is not None:
                for tid in layer.tensors:
                    if tid not in tree.tensor_configs:
                        t = model.tensors[tid]
                        cfg = wtensor.restrict(t.labels)
                        tree.tensor_configs[tid] = MemoryConfig(
                            cfg.partition, cfg.map
                        )
        for c in node.children:
            apply_wildcards(c, wop, wtensor)

    apply_wildcards(tree.root, None, None)

    # 3 + 4. data-dependency passes: forward graph, then backward graph
    def fill_around(op):
        op_cfg = tree.op_configs[op.id]
        for tid in op.inputs:
            t = model.tensors[tid]
            if tid not in tree.tensor_configs and not t.producers:
                cfg = op_cfg.restrict(t.labels)
                tree.tensor_configs[tid] = MemoryConfig(cfg.partition, cfg.map)
        for tid in op.outputs:
            if tid not in tree.tensor_configs:
                t = model.tensors[tid]
                cfg = op_cfg.restrict(t.labels)
                tree.tensor_configs[tid] = MemoryConfig(cfg.partition, cfg.map)

    for oid in model.topo_ops(phases=("forward",)):
        op = model.operators[oid]
        if oid not in tree.op_configs:
            src_tid, src_cfg = _first_configured_input(tree, op)
            if src_cfg is not None:
                cfg = src_cfg.restrict(op.parallelizable_dims)
                tree.op_configs[oid] = ComputationConfig(cfg.partition, cfg.map)
                for other in op.inputs:
                    ocfg = tree.tensor_configs.get(other)
                    if (
                        other != src_tid
                        and ocfg is not None
                        and ocfg.key() != src_cfg.restrict(
                            model.tensors[other].labels
                        ).key()
                    ):
                        tree.notes.append(
                            f"op {oid}: input '{other}' layout differs from "
                            f"inferred config; a transformation will be inserted"
                        )
        if oid in tree.op_configs:
            fill_around(op)

    if model.has_backward:
        for oid in model.topo_ops(phases=("backward", "optimizer")):
            op = model.operators[oid]
            if oid not in tree.op_configs:
                partner = (
                    tree.op_configs.get(op.forward_partner)
                    if op.forward_partner
                    else None
                )
                if partner is not None:
                    cfg = partner.restrict(op.parallelizable_dims)
                else:
                    _, src_cfg = _first_configured_input(tree, op)
                    cfg = (
                        src_cfg.restrict(op.parallelizable_dims)
                        if src_cfg is not None
                        else None
                    )
                if cfg is not None:
                    tree.op_configs[op.id] = ComputationConfig(
                        cfg.partition, cfg.map
                    )
            if oid in tree.op_configs:
                fill_around(op)

    unset_ops = sorted(set(model.operators) - set(tree.op_configs))
    unset_tensors = sorted(set(model.tensors) - set(tree.tensor_configs))
    if unset_ops or unset_tensors:
        raise StrategyError(
            "underdetermined strategy; no config reachable for: "
            + ", ".join(unset_ops + unset_tensors)
        )
    return tree


def dev_group(node: TreeNode, tree: StrategyTree):
    """Union of device ids appearing in the node's descendant configs."""
    devs = set()
    for leaf in node.leaves():
        layer = tree.model.layers[leaf.layer]
        for oid in layer.forward_ops + layer.backward_ops:
            cfg = tree.op_configs.get(oid)
            if cfg is None:
                raise StrategyError(
                    f"dev_group: unconfigured descendant operator '{oid}'"
                )
            devs.update(cfg.devices())
        for tid in layer.tensors:
            cfg = tree.tensor_configs.get(tid)
            if cfg is None:
                raise StrategyError(
                    f"dev_group: unconfigured descendant tensor '{tid}'"
                )
            devs.update(cfg.devices())
    return tuple(sorted(devs))


def validate_strategy(tree: StrategyTree, cluster=None):
    """Diagnostics for every TYPE invariant violation; empty list = valid."""
    model = tree.model
    diags = []
    ndevs = cluster.n_devices if cluster is not None else None

    def check_cfg(cfg, labels, extents, what):
        nparts = cfg.nparts
        if len(cfg.map) != nparts:
            diags.append(
                f"{what}: map has {len(cfg.map)} entries, partition has "
                f"{nparts} parts"
            )
        sizes = {len(g) for g in cfg.map}
        if len(sizes) > 1:
            diags.append(f"{what}: replica groups have unequal sizes {sorted(sizes)}")
        for l, d in cfg.partition.items():
            if l not in labels:
                diags.append(f"{what}: partitioned dim '{l}' not in dims {labels}")
            else:
                extent = extents[labels.index(l)]
                if extent % d != 0:
                    diags.append(
                        f"{what}: degree {d} does not divide extent {extent} "
                        f"of dim '{l}'"
                    )
        if ndevs is not None:
            for g in cfg.map:
                for d in g:
                    if not 0 <= d < ndevs:
                        diags.append(f"{what}: device {d} not in cluster (0..{ndevs - 1})")

    for oid, cfg in sorted(tree.op_configs.items()):
        op = model.operators[oid]
        labels = list(op.parallelizable_dims)
        extents = [op.dims[l] for l in labels]
        check_cfg(cfg, labels, extents, f"op {oid}")
    for tid, cfg in sorted(tree.tensor_configs.items()):
        t = model.tensors[tid]
        check_cfg(cfg, list(t.labels), list(t.extents), f"tensor {tid}")

    # reduction-dim partition feeding an explicit differently-placed output
    for oid, cfg in sorted(tree.op_configs.items()):
        op = model.operators[oid]
        red = [l for l in op.reduction_dims(model) if l in cfg.partition and cfg.partition[l] > 1]
        if not red:
            continue
        for tid in op.outputs:
            tcfg = tree.tensor_configs.get(tid)
            if tcfg is not None and tcfg.explicit and set(tcfg.devices()) != set(cfg.devices()):
                diags.append(
                    f"op {oid}: partitions reduction dims {red} but output "
                    f"'{tid}' is explicitly placed on a different device set; "
                    f"an aggregate-then-redistribute transformation is inserted"
                )

    def check_sched(node):
        s = node.schedule
        if s is not None:
            if s.n_micro_batch < 1:
                diags.append(f"node {node.path}: n_micro_batch < 1")
            elif not 1 <= s.max_ongoing_micro_batch <= s.n_micro_batch:
                diags.append(
                    f"node {node.path}: max_ongoing_micro_batch outside "
                    f"[1, n_micro_batch]"
                )
            elif model.batch_size % s.n_micro_batch != 0:
                diags.append(
                    f"node {node.path}: n_micro_batch {s.n_micro_batch} does "
                    f"not divide batch extent {model.batch_size}"
                )
        for c in node.children:
            check_sched(c)

    check_sched(tree.root)
    return diags


def dump_strategy(tree: StrategyTree):
    """Emit the fully propagated strategy in the load schema."""
    model = tree.model
    nodes = []

    def walk(node):
        entry = {"path": node.path}
        if not node.is_leaf and node.schedule is not None:
            s = node.schedule
            entry["schedule"] = {
                "n_micro_batch": s.n_micro_batch,
                "max_ongoing_micro_batch": s.max_ongoing_micro_batch,
                "recomputation": s.recomputation,
            }
        if node.is_leaf:
            layer = model.layers[node.layer]
            ops = {}
            for oid in layer.forward_ops + layer.backward_ops:
                cfg = tree.op_configs.get(oid)
                if cfg is not None:
                    ops[oid] = {
                        "partition": dict(cfg.partition),
                        "map": [list(g) for g in cfg.map],
                    }
            tens = {}
            for tid in layer.tensors:
                cfg = tree.tensor_configs.get(tid)
                if cfg is not None:
                    tens[tid] = {
                        "partition": dict(cfg.partition),
                        "map": [list(g) for g in cfg.map],
                    }
            if ops:
                entry["ops"] = ops
            if tens:
                entry["tensors"] = tens
        if len(entry) > 1:
            nodes.append(entry)
        for c in node.children:
            walk(c)

    walk(tree.root)
    return {"nodes": nodes}
