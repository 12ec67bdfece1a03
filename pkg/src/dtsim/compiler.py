"""Execution graph compiler.

Lowers (ModelGraph, StrategyTree, ClusterSpec) to a device-placed task graph:

 1. divide the strategy tree into pipeline stages (BFS; a node divides when
    its children cluster into >= 2 device-disjoint groups);
 2. split every operator into per-device compute tasks per its computation
    config;
 3. materialize tensor shards and insert inferred communication tasks
    wherever a producer-implied layout, the tensor's memory config and a
    consumer-implied layout disagree;
 4. duplicate forward work of recomputation-enabled stages and point their
    backward reads at the recomputed activations;
 5. clone batch-bearing work per micro-batch (batch extents divided);
    parameter-gradient synchronization and optimizer steps stay
    once-per-iteration, after the last micro-batch's accumulation;
 6. wire control dependencies: forward instance k+max_ongoing waits for
    backward instance k, and recompute instances wait for the downstream
    stage's backward so they run right before their own backward.

Communication on persistent tensors (e.g. ZeRO parameter all-gather) is
instantiated once per iteration and the gathered replicas stay live for the
iteration; reduce-class synchronization of parameter gradients is modeled
in place (the output shard aliases the same-device accumulator).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .cluster import ClusterSpec
from .collective import (
    CommPlan,
    Holding,
    PlacementLayout,
    implied_layout,
    infer_transform,
    layout_of,
    part_rect,
    rect_bytes,
    rect_subtract,
    verify_plan,
)
from .errors import CompileError
from .ir import KIND_GRADIENT, KIND_OPT_STATE, KIND_PARAMETER, ModelGraph
from .strategy import ScheduleConfig, StrategyTree, dev_group

KIND_COMPUTE = "compute"
KIND_FEATURE_COMM = "feature-comm"
KIND_GRADIENT_COMM = "gradient-comm"


@dataclass
class TaskNode:
    id: str
    kind: str
    phase: str  # forward | backward | recompute
    stage: str
    device: int | None = None
    group: tuple | None = None
    primitive: str | None = None
    nbytes: int = 0
    cost_key: str | None = None
    op_type: str | None = None
    op_id: str | None = None
    tensor: str | None = None  # comm tasks: the tensor being moved
    extents: dict | None = None
    micro_batch: int | None = None
    subgraph: str | None = None
    reads: tuple = ()
    writes: tuple = ()
    seq: int = 0
    cost: float = 0.0
    level: str | None = None
    in_place: bool = False

    @property
    def devices(self):
        return (self.device,) if self.device is not None else self.group


@dataclass
class Shard:
    id: str
    tensor: str
    device: int
    rect: tuple
    summand: tuple | None
    nbytes: int
    kind: str
    persistent: bool = False
    micro_batch: int | None = None
    alias_of: str | None = None
    batch_axis: int | None = None  # index of the batch dim in rect, if any


@dataclass
class ExecSubgraph:
    id: str
    phase: str  # forward | backward | recompute
    origin: str  # stage id
    micro_batch: int | None
    devices: tuple
    tasks: list = field(default_factory=list)


@dataclass
class Stage:
    id: str
    paths: tuple  # strategy-tree node paths forming this stage
    layers: tuple
    devices: tuple
    schedule: ScheduleConfig


@dataclass
class ExecutionGraph:
    tasks: dict = field(default_factory=dict)
    shards: dict = field(default_factory=dict)
    subgraphs: dict = field(default_factory=dict)
    stages: list = field(default_factory=list)
    data_edges: list = field(default_factory=list)
    control_edges: list = field(default_factory=list)
    batch_size: int = 0
    n_micro_batches: int = 1
    devices: tuple = ()

    def edge_set(self):
        return sorted(set(self.data_edges) | set(self.control_edges))

    def successors(self):
        succ = {tid: [] for tid in self.tasks}
        for a, b in self.edge_set():
            succ[a].append(b)
        return succ

    def predecessors_count(self):
        npred = {tid: 0 for tid in self.tasks}
        for _, b in self.edge_set():
            npred[b] += 1
        return npred

    def to_dict(self):
        return {
            "batch_size": self.batch_size,
            "n_micro_batches": self.n_micro_batches,
            "tasks": [
                {
                    "id": t.id,
                    "kind": t.kind,
                    "phase": t.phase,
                    "stage": t.stage,
                    "device": t.device,
                    "group": list(t.group) if t.group else None,
                    "primitive": t.primitive,
                    "nbytes": t.nbytes,
                    "cost_key": t.cost_key,
                    "extents": t.extents,
                    "micro_batch": t.micro_batch,
                    "subgraph": t.subgraph,
                    "reads": list(t.reads),
                    "writes": list(t.writes),
                }
                for t in sorted(self.tasks.values(), key=lambda t: t.seq)
            ],
            "shards": [
                {
                    "id": s.id,
                    "tensor": s.tensor,
                    "device": s.device,
                    "rect": [list(r) for r in s.rect],
                    "bytes": s.nbytes,
                    "persistent": s.persistent,
                    "micro_batch": s.micro_batch,
                }
                for s in sorted(self.shards.values(), key=lambda s: s.id)
            ],
            "subgraphs": [
                {
                    "id": g.id,
                    "phase": g.phase,
                    "origin": g.origin,
                    "micro_batch": g.micro_batch,
                    "devices": list(g.devices),
                    "tasks": sorted(g.tasks),
                }
                for g in sorted(self.subgraphs.values(), key=lambda g: g.id)
            ],
            "edges": {
                "data": sorted(self.data_edges),
                "control": sorted(self.control_edges),
            },
        }


def divide_subgraphs(tree: StrategyTree):
    """BFS division of the tree into device-disjoint units.

    Returns a list of (nodes, devices): each unit is one or more sibling
    tree nodes.  A node divides when its children's device groups cluster
    into >= 2 pairwise-disjoint sets; children sharing devices merge into
    one unit.
    """
    result = []
    queue = [(tree.root,)]
    while queue:
        nodes = queue.pop(0)
        if len(nodes) == 1 and not nodes[0].is_leaf:
            node = nodes[0]
            groups = [(c, set(dev_group(c, tree))) for c in node.children]
            clusters = []
            for child, devs in groups:
                merged = [child]
                merged_devs = set(devs)
                keep = []
                for cnodes, cdevs in clusters:
                    if cdevs & merged_devs:
                        merged = cnodes + merged
                        merged_devs |= cdevs
                    else:
                        keep.append((cnodes, cdevs))
                clusters = keep + [(merged, merged_devs)]
            clusters.sort(key=lambda c: min(n.path for n in c[0]))
            if len(clusters) >= 2:
                for cnodes, _ in clusters:
                    if len(cnodes) == 1 and not cnodes[0].is_leaf:
                        queue.append(tuple(cnodes))
                    else:
                        result.append(tuple(cnodes))
            else:
                result.append(nodes)
        else:
            result.append(nodes)
    out = []
    for nodes in result:
        devs = set()
        for n in nodes:
            devs.update(dev_group(n, tree))
        out.append((nodes, tuple(sorted(devs))))
    return out


def _stage_schedule(nodes, tree):
    if len(nodes) == 1:
        return nodes[0].schedule
    parent = nodes[0].parent
    return parent.schedule if parent is not None else tree.root.schedule


def build_stages(tree: StrategyTree, model: ModelGraph):
    units = divide_subgraphs(tree)
    layer_pos = {name: i for i, name in enumerate(model.layers)}
    staged = []
    for nodes, devs in units:
        layers = []
        for n in nodes:
            for leaf in n.leaves():
                layers.append(leaf.layer)
        layers.sort(key=lambda l: layer_pos[l])
        staged.append((min(layer_pos[l] for l in layers), nodes, layers, devs))
    staged.sort(key=lambda s: s[0])
    stages = []
    for i, (_, nodes, layers, devs) in enumerate(staged):
        sched = _stage_schedule(nodes, tree)
        stages.append(
            Stage(
                id=f"stage{i}",
                paths=tuple(n.path for n in nodes),
                layers=tuple(layers),
                devices=devs,
                schedule=sched,
            )
        )
    micro = {s.schedule.n_micro_batch for s in stages}
    if len(micro) > 1:
        raise CompileError(
            f"stages disagree on n_micro_batch: {sorted(micro)}; "
            f"cross-stage micro-batch wiring requires a common count"
        )
    return stages


def split_operator(op, cfg):
    """Per-device compute task descriptors for one operator."""
    tasks = []
    extents_full = dict(op.dims)
    shard_extents = {
        l: extents_full[l] // cfg.partition.get(l, 1) for l in extents_full
    }
    for l, d in cfg.partition.items():
        if l in extents_full and extents_full[l] % d != 0:
            raise CompileError(
                f"op {op.id}: degree {d} does not divide extent "
                f"{extents_full[l]} of dim '{l}'"
            )
    for flat, (idx, grp) in enumerate(zip(cfg.part_indices(), cfg.map)):
        by_label = dict(zip(cfg.partition.keys(), idx))
        for dev in grp:
            tasks.append(
                {
                    "op": op,
                    "part": flat,
                    "part_idx": by_label,
                    "device": dev,
                    "extents": dict(shard_extents),
                }
            )
    return tasks


class _Builder:
    def __init__(self, model, tree, cluster, verify_plans=False):
        self.model = model
        self.tree = tree
        self.cluster = cluster
        self.verify_plans = verify_plans
        self.graph = ExecutionGraph(batch_size=model.batch_size)
        self.seq = 0
        self.stage_of_layer = {}
        self.stages = []
        self.requirements = {}  # task id -> list of (tensor, device, rect)
        self.productions = {}  # tensor -> list of (task id, holding)
        self.consumer_cfgs = {}  # tensor -> list of (op id, cfg)
        self.shards_by_key = {}
        self.coverage = {}  # tensor -> device -> list of (rect, shard id)

    def next_seq(self):
        self.seq += 1
        return self.seq

    # -- task / shard creation ------------------------------------------

    def add_task(self, task: TaskNode):
        if task.id in self.graph.tasks:
            raise CompileError(f"duplicate task id '{task.id}'")
        task.seq = self.next_seq()
        self.graph.tasks[task.id] = task
        return task

    def shard_key(self, tensor_id, device, rect, summand):
        return (tensor_id, device, rect, summand)

    def get_or_create_shard(self, tensor, device, rect, summand=None):
        key = self.shard_key(tensor.id, device, rect, summand)
        if key in self.shards_by_key:
            return self.shards_by_key[key]
        rect_s = "x".join(f"{lo}-{hi}" for lo, hi in rect)
        sm = "" if summand is None else ":p" + "_".join(map(str, summand))
        sid = f"{tensor.id}@{device}:{rect_s}{sm}"
        batch_axis = None
        if self.model.batch_dim in tensor.labels:
            batch_axis = tensor.labels.index(self.model.batch_dim)
        shard = Shard(
            id=sid,
            tensor=tensor.id,
            device=device,
            rect=rect,
            summand=summand,
            nbytes=rect_bytes(rect, tensor.elem_bytes),
            kind=tensor.kind,
            batch_axis=batch_axis,
        )
        self.graph.shards[sid] = shard
        self.shards_by_key[key] = shard
        return shard

    # -- pass 1: compute tasks -------------------------------------------

    def build_compute_tasks(self):
        model, tree = self.model, self.tree
        for oid in model.topo_ops():
            op = model.operators[oid]
            cfg = tree.op_configs[oid]
            stage = self.stage_of_layer[op.layer]
            phase = "forward" if op.phase == "forward" else "backward"
            for desc in split_operator(op, cfg):
                dev = desc["device"]
                tid = f"c:{oid}:p{desc['part']}:d{dev}"
                task = TaskNode(
                    id=tid,
                    kind=KIND_COMPUTE,
                    phase=phase,
                    stage=stage.id,
                    device=dev,
                    cost_key=op.cost_key,
                    op_type=op.type,
                    op_id=oid,
                    extents=desc["extents"],
                )
                self.add_task(task)
                reqs = []
                for tin in op.inputs:
                    t = model.tensors[tin]
                    rect = part_rect(t, cfg.partition, desc["part_idx"])
                    reqs.append((tin, dev, rect))
                self.requirements[tid] = reqs
                for tout in op.outputs:
                    t = model.tensors[tout]
                    rect = part_rect(t, cfg.partition, desc["part_idx"])
                    dropped = [
                        l
                        for l in cfg.partition
                        if l not in t.labels and cfg.partition[l] > 1
                    ]
                    summand = (
                        tuple(desc["part_idx"][l] for l in dropped)
                        if dropped
                        else None
                    )
                    family = rect if dropped else None
                    self.productions.setdefault(tout, []).append(
                        (tid, Holding(dev, rect, summand, family))
                    )
            for tin in op.inputs:
                self.consumer_cfgs.setdefault(tin, []).append((oid, cfg))

    # -- pass 2: shards and communication ---------------------------------

    def comm_class(self, tensor):
        if tensor.kind == KIND_GRADIENT and tensor.grad_of is not None:
            if self.model.tensors[tensor.grad_of].kind == KIND_PARAMETER:
                return KIND_GRADIENT_COMM
        return KIND_FEATURE_COMM

    def _consumer_phase_stage(self, tensor):
        """(phase, stage) a tensor's comm tasks belong to: first consumer's,
        else its producer's."""
        if tensor.consumers:
            op = self.model.operators[tensor.consumers[0]]
            phase = "forward" if op.phase == "forward" else "backward"
            return phase, self.stage_of_layer[op.layer].id
        if tensor.producers:
            op = self.model.operators[tensor.producers[0]]
            phase = "forward" if op.phase == "forward" else "backward"
            return phase, self.stage_of_layer[op.layer].id
        return "forward", self.stages[0].id

    def emit_plan(self, tensor, plan: CommPlan, tag):
        """Create comm tasks for a plan; update the tensor's coverage."""
        coverage = self.coverage.setdefault(tensor.id, {})
        cls = self.comm_class(tensor)
        phase, stage = self._consumer_phase_stage(tensor)
        in_place_ok = cls == KIND_GRADIENT_COMM
        prefix = "fc" if cls == KIND_FEATURE_COMM else "gc"
        for si, step in enumerate(plan.steps):
            tid = f"{prefix}:{tensor.id}:{tag}:s{si}"
            reads = []
            for h in step.reads:
                reads.extend(
                    self.resolve_read(tensor, h.device, h.rect, h.summand)
                )
            writes = []
            in_place = in_place_ok and step.primitive in (
                "all-reduce",
                "reduce-scatter",
            )
            read_by_dev = {}
            for h in step.reads:
                read_by_dev.setdefault(h.device, h)
            for h in step.writes:
                shard = self.get_or_create_shard(
                    tensor, h.device, h.rect, h.summand
                )
                if in_place and h.device in read_by_dev:
                    src_h = read_by_dev[h.device]
                    src_shard = self.shards_by_key.get(
                        self.shard_key(tensor.id, h.device, src_h.rect, src_h.summand)
                    )
                    if src_shard is not None and shard.alias_of is None and shard.id != src_shard.id:
                        shard.alias_of = src_shard.id
                writes.append(shard.id)
                coverage.setdefault(h.device, []).append((h.rect, shard.id))
            task = TaskNode(
                id=tid,
                kind=cls,
                phase=phase,
                stage=stage,
                group=step.group,
                primitive=step.primitive,
                nbytes=step.nbytes,
                tensor=tensor.id,
                reads=tuple(dict.fromkeys(reads)),
                writes=tuple(dict.fromkeys(writes)),
                in_place=in_place,
            )
            self.add_task(task)

    def resolve_read(self, tensor, device, rect, summand=None):
        """Shard ids on ``device`` covering ``rect`` (exact match first)."""
        key = self.shard_key(tensor.id, device, rect, summand)
        if key in self.shards_by_key:
            return [self.shards_by_key[key].id]
        if summand is not None:
            raise CompileError(
                f"tensor {tensor.id}: partial shard {key} not materialized"
            )
        cover = []
        remaining = [rect]
        for rect2, sid in self.coverage.get(tensor.id, {}).get(device, []):
            nxt = []
            used = False
            for frag in remaining:
                left = rect_subtract(frag, [rect2])
                if len(left) == 1 and left[0] == frag:
                    nxt.append(frag)
                else:
                    used = True
                    nxt.extend(left)
            if used:
                cover.append(sid)
            remaining = nxt
            if not remaining:
                break
        if remaining:
            raise CompileError(
                f"tensor {tensor.id}: no shards on device {device} cover "
                f"rect {rect}"
            )
        return cover

    def build_tensor_shards(self):
        model, tree = self.model, self.tree
        for tname in model.tensors:
            tensor = model.tensors[tname]
            mem_cfg = tree.tensor_configs[tname]
            l_mem = layout_of(tensor, mem_cfg)
            coverage = self.coverage.setdefault(tname, {})

            producers = self.productions.get(tname, [])
            if producers:
                prod_cfgs = {tree.op_configs[p].key() for p in tensor.producers}
                if len(prod_cfgs) > 1:
                    raise CompileError(
                        f"tensor {tname}: producers imply divergent layouts; "
                        f"give them a common explicit config"
                    )
                prod_op = model.operators[tensor.producers[0]]
                l_prod = implied_layout(
                    tensor, tree.op_configs[prod_op.id], "output"
                )
                for task_id, holding in producers:
                    shard = self.get_or_create_shard(
                        tensor, holding.device, holding.rect, holding.summand
                    )
                    task = self.graph.tasks[task_id]
                    task.writes = tuple(
                        dict.fromkeys(task.writes + (shard.id,))
                    )
                    if holding.summand is None:
                        coverage.setdefault(holding.device, []).append(
                            (holding.rect, shard.id)
                        )
                if set(l_prod.holdings) != set(l_mem.holdings):
                    plan = infer_transform(l_prod, l_mem)
                    if self.verify_plans and not verify_plan(l_prod, l_mem, plan):
                        raise CompileError(
                            f"tensor {tname}: store plan failed verification"
                        )
                    self.emit_plan(tensor, plan, "store")
            else:
                for h in l_mem.holdings:
                    shard = self.get_or_create_shard(
                        tensor, h.device, h.rect, h.summand
                    )
                    coverage.setdefault(h.device, []).append((h.rect, shard.id))

            # mark the memory-config holdings of persistent-kind tensors
            persistent_kind = tensor.kind in (KIND_PARAMETER, KIND_OPT_STATE) or (
                tensor.kind == KIND_GRADIENT
                and tensor.grad_of is not None
                and model.tensors[tensor.grad_of].kind == KIND_PARAMETER
            )
            if persistent_kind:
                for h in l_mem.holdings:
                    key = self.shard_key(tname, h.device, h.rect, h.summand)
                    if key in self.shards_by_key:
                        self.shards_by_key[key].persistent = True

            # consumer-side transformations, one per distinct needed layout
            seen_layouts = set()
            for oid, cfg in self.consumer_cfgs.get(tname, []):
                lkey = cfg.restrict(tensor.labels).key()
                if lkey in seen_layouts:
                    continue
                seen_layouts.add(lkey)
                l_need = implied_layout(tensor, cfg, "input")
                missing = False
                for h in l_need.holdings:
                    held = [r for r, _ in coverage.get(h.device, [])]
                    if rect_subtract(h.rect, held):
                        missing = True
                        break
                if not missing:
                    continue
                cur_holdings = tuple(
                    sorted(
                        {
                            Holding(dev, r, None, None)
                            for dev, rs in coverage.items()
                            for r, _ in rs
                        },
                        key=lambda h: (h.device, h.rect),
                    )
                )
                l_cur = PlacementLayout(
                    tensor=tname,
                    labels=tensor.labels,
                    extents=tensor.extents,
                    elem_bytes=tensor.elem_bytes,
                    holdings=cur_holdings,
                )
                plan = infer_transform(l_cur, l_need)
                if self.verify_plans and not verify_plan(l_cur, l_need, plan):
                    raise CompileError(
                        f"tensor {tname}: consumer plan failed verification"
                    )
                self.emit_plan(tensor, plan, f"use{len(seen_layouts) - 1}")

        # resolve compute-task reads against final shard coverage
        for tid, reqs in self.requirements.items():
            task = self.graph.tasks[tid]
            reads = []
            for tname, dev, rect in reqs:
                reads.extend(
                    self.resolve_read(self.model.tensors[tname], dev, rect)
                )
            task.reads = tuple(dict.fromkeys(reads))

    # -- pass 3: recomputation duplication --------------------------------

    def duplicate_recompute(self):
        model = self.model
        for stage in self.stages:
            if not stage.schedule.recomputation:
                continue
            stage_layers = set(stage.layers)
            fwd_tasks = [
                t
                for t in sorted(
                    self.graph.tasks.values(), key=lambda t: t.seq
                )
                if t.stage == stage.id and t.phase == "forward"
            ]
            # intra-stage tasks only: every read produced within the stage
            # or persistent/initial; boundary receives are not re-communicated
            fwd_ids = {t.id for t in fwd_tasks}
            produced_by = {}
            for t in self.graph.tasks.values():
                for sid in t.writes:
                    produced_by.setdefault(sid, set()).add(t.id)

            def intra(task):
                # boundary receives are kept, not re-communicated
                if task.kind != KIND_COMPUTE:
                    t = model.tensors[task.tensor]
                    return bool(t.producers) and all(
                        model.operators[p].layer in stage_layers
                        for p in t.producers
                    )
                return True

            clone_set = [t for t in fwd_tasks if intra(t)]
            clone_ids = {t.id for t in clone_set}
            shard_clone = {}

            def cloned_shard(sid):
                if sid in shard_clone:
                    return shard_clone[sid]
                s = self.graph.shards[sid]
                writers = produced_by.get(sid, set())
                if not writers or not writers & clone_ids:
                    return sid  # produced outside the clone set: read original
                new = Shard(
                    id=s.id + ":r",
                    tensor=s.tensor,
                    device=s.device,
                    rect=s.rect,
                    summand=s.summand,
                    nbytes=s.nbytes,
                    kind=s.kind,
                    persistent=False,
                    batch_axis=s.batch_axis,
                )
                self.graph.shards[new.id] = new
                shard_clone[sid] = new.id
                return new.id

            for t in clone_set:
                clone = TaskNode(
                    id=t.id + ":r",
                    kind=t.kind,
                    phase="recompute",
                    stage=t.stage,
                    device=t.device,
                    group=t.group,
                    primitive=t.primitive,
                    nbytes=t.nbytes,
                    cost_key=t.cost_key,
                    op_type=t.op_type,
                    op_id=t.op_id,
                    tensor=t.tensor,
                    extents=dict(t.extents) if t.extents else None,
                    reads=tuple(cloned_shard(s) for s in t.reads),
                    writes=tuple(cloned_shard(s) for s in t.writes),
                )
                self.add_task(clone)

            # backward reads of stage-forward activations -> recomputed copies
            for t in self.graph.tasks.values():
                if t.stage != stage.id or t.phase != "backward":
                    continue
                new_reads = []
                for sid in t.reads:
                    s = self.graph.shards[sid]
                    if (
                        s.kind == "activation"
                        and sid in shard_clone
                    ):
                        new_reads.append(shard_clone[sid])
                    else:
                        new_reads.append(sid)
                t.reads = tuple(dict.fromkeys(new_reads))

    # -- pass 4: micro-batch instantiation ---------------------------------

    def instantiate_micro_batches(self):
        graph = self.graph
        n = self.stages[0].schedule.n_micro_batch
        graph.n_micro_batches = n
        bdim = self.model.batch_dim

        old_tasks = sorted(graph.tasks.values(), key=lambda t: t.seq)
        old_shards = dict(graph.shards)

        def shard_has_batch(s: Shard):
            return s.batch_axis is not None

        def task_has_batch(t: TaskNode):
            return any(
                shard_has_batch(old_shards[s]) for s in t.reads + t.writes
            )

        if n == 1:
            for t in graph.tasks.values():
                if task_has_batch(t):
                    t.micro_batch = 0
                    for sid in t.reads + t.writes:
                        s = graph.shards[sid]
                        if shard_has_batch(s):
                            s.micro_batch = 0
            return

        graph.tasks = {}
        graph.shards = {}
        self.shards_by_key = {}
        self.seq = 0
        sliced = {}

        def slice_shard(s: Shard, k: int):
            if (s.id, k) in sliced:
                return sliced[(s.id, k)]
            ax = s.batch_axis
            lo, hi = s.rect[ax]
            if (hi - lo) % n != 0:
                raise CompileError(
                    f"shard {s.id}: batch range {hi - lo} not divisible by "
                    f"n_micro_batch {n}"
                )
            h = (hi - lo) // n
            rect = list(s.rect)
            rect[ax] = (lo + k * h, lo + (k + 1) * h)
            new = Shard(
                id=f"{s.id}:mb{k}",
                tensor=s.tensor,
                device=s.device,
                rect=tuple(rect),
                summand=s.summand,
                nbytes=s.nbytes // n,
                kind=s.kind,
                persistent=s.persistent,
                micro_batch=k,
                alias_of=f"{s.alias_of}:mb{k}" if s.alias_of else None,
                batch_axis=ax,
            )
            graph.shards[new.id] = new
            sliced[(s.id, k)] = new
            return new

        def keep_shard(s: Shard):
            if s.id not in graph.shards:
                graph.shards[s.id] = s
            return s

        for t in old_tasks:
            if task_has_batch(t):
                for k in range(n):
                    extents = dict(t.extents) if t.extents else None
                    if extents and bdim in extents:
                        if extents[bdim] % n != 0:
                            raise CompileError(
                                f"task {t.id}: batch extent {extents[bdim]} "
                                f"not divisible by n_micro_batch {n}"
                            )
                        extents[bdim] //= n
                    reads = tuple(
                        slice_shard(old_shards[s], k).id
                        if shard_has_batch(old_shards[s])
                        else keep_shard(old_shards[s]).id
                        for s in t.reads
                    )
                    writes = tuple(
                        slice_shard(old_shards[s], k).id
                        if shard_has_batch(old_shards[s])
                        else keep_shard(old_shards[s]).id
                        for s in t.writes
                    )
                    clone = TaskNode(
                        id=f"{t.id}:mb{k}",
                        kind=t.kind,
                        phase=t.phase,
                        stage=t.stage,
                        device=t.device,
                        group=t.group,
                        primitive=t.primitive,
                        nbytes=t.nbytes // n if t.kind != KIND_COMPUTE else 0,
                        cost_key=t.cost_key,
                        op_type=t.op_type,
                        op_id=t.op_id,
                        tensor=t.tensor,
                        extents=extents,
                        micro_batch=k,
                        reads=reads,
                        writes=writes,
                        in_place=t.in_place,
                    )
                    self.add_task(clone)
            else:
                for sid in t.reads + t.writes:
                    keep_shard(old_shards[sid])
                t.micro_batch = None
                t.seq = 0
                self.add_task(t)
        # shards never touched by any task (unused initial data) survive
        for s in old_shards.values():
            if s.id not in graph.shards and not shard_has_batch(s):
                graph.shards[s.id] = s

    # -- pass 5: subgraph instances and control deps -----------------------

    def assemble_subgraphs(self):
        graph = self.graph
        for t in graph.tasks.values():
            stage = t.stage
            mb = t.micro_batch
            if mb is None:
                gid = f"{stage}:opt"
                phase = "backward"
            else:
                gid = f"{stage}:{t.phase}:mb{mb}"
                phase = t.phase
            if gid not in graph.subgraphs:
                stage_obj = next(s for s in self.stages if s.id == stage)
                graph.subgraphs[gid] = ExecSubgraph(
                    id=gid,
                    phase=phase,
                    origin=stage,
                    micro_batch=mb,
                    devices=stage_obj.devices,
                )
            graph.subgraphs[gid].tasks.append(t.id)
            t.subgraph = gid

    def wire_data_edges(self):
        graph = self.graph
        writers = {}
        for t in sorted(graph.tasks.values(), key=lambda t: t.seq):
            for sid in t.writes:
                writers.setdefault(sid, []).append(t.id)
        edges = []
        for t in sorted(graph.tasks.values(), key=lambda t: t.seq):
            for sid in t.reads:
                for w in writers.get(sid, []):
                    if w != t.id:
                        edges.append((w, t.id))
        graph.data_edges = sorted(set(edges))

    def _instance_entries_exits(self):
        graph = self.graph
        intra_pred = {tid: 0 for tid in graph.tasks}
        intra_succ = {tid: 0 for tid in graph.tasks}
        sub_of = {tid: graph.tasks[tid].subgraph for tid in graph.tasks}
        for a, b in graph.data_edges:
            if sub_of[a] == sub_of[b]:
                intra_pred[b] += 1
                intra_succ[a] += 1
        entries = {}
        exits = {}
        for gid, sg in graph.subgraphs.items():
            entries[gid] = [t for t in sg.tasks if intra_pred[t] == 0]
            exits[gid] = [t for t in sg.tasks if intra_succ[t] == 0]
        return entries, exits

    def wire_control_deps(self):
        graph = self.graph
        entries, exits = self._instance_entries_exits()
        n = graph.n_micro_batches
        edges = []

        def link(src_gid, dst_gid):
            if src_gid in graph.subgraphs and dst_gid in graph.subgraphs:
                for a in exits[src_gid]:
                    for b in entries[dst_gid]:
                        edges.append((a, b))

        # stage-level forward data deps (which stage feeds which)
        downstream = {s.id: set() for s in self.stages}
        stage_of = {}
        for s in self.stages:
            for l in s.layers:
                stage_of[l] = s.id
        for t in self.model.tensors.values():
            for p in t.producers:
                for c in t.consumers:
                    sp = stage_of[self.model.operators[p].layer]
                    sc = stage_of[self.model.operators[c].layer]
                    if (
                        sp != sc
                        and self.model.operators[p].phase == "forward"
                        and self.model.operators[c].phase == "forward"
                    ):
                        downstream[sp].add(sc)

        for stage in self.stages:
            mo = stage.schedule.max_ongoing_micro_batch
            for k in range(n - mo):
                link(
                    f"{stage.id}:backward:mb{k}",
                    f"{stage.id}:forward:mb{k + mo}",
                )
            if stage.schedule.recomputation:
                for k in range(n):
                    rc = f"{stage.id}:recompute:mb{k}"
                    if rc not in graph.subgraphs:
                        continue
                    succs = sorted(downstream[stage.id])
                    linked = False
                    for sc in succs:
                        bw = f"{sc}:backward:mb{k}"
                        if bw in graph.subgraphs:
                            link(bw, rc)
                            linked = True
                    if not linked:
                        link(f"{stage.id}:forward:mb{k}", rc)
        graph.control_edges = sorted(set(edges))

    def check_acyclic(self):
        graph = self.graph
        edges = set(graph.data_edges) | set(graph.control_edges)
        succ = {tid: [] for tid in graph.tasks}
        npred = {tid: 0 for tid in graph.tasks}
        for a, b in sorted(edges):
            succ[a].append(b)
            npred[b] += 1
        queue = sorted(t for t, c in npred.items() if c == 0)
        seen = 0
        while queue:
            tid = queue.pop()
            seen += 1
            for s in succ[tid]:
                npred[s] -= 1
                if npred[s] == 0:
                    queue.append(s)
        if seen != len(graph.tasks):
            remaining = sorted(t for t, c in npred.items() if c > 0)
            rem_set = set(remaining)
            offending = None
            for a, b in sorted(set(graph.control_edges)):
                if a in rem_set and b in rem_set:
                    offending = (a, b)
                    break
            raise CompileError(
                f"execution graph has a cycle among {len(remaining)} tasks"
                + (f"; offending control edge {offending}" if offending else "")
                + f"; e.g. {remaining[:5]}"
            )


def compile_graph(
    model: ModelGraph,
    tree: StrategyTree,
    cluster: ClusterSpec | None = None,
    verify_plans: bool = False,
) -> ExecutionGraph:
    if not model.has_backward:
        raise CompileError("model has no backward graph; run derive_backward")
    b = _Builder(model, tree, cluster, verify_plans)
    b.stages = build_stages(tree, model)
    for s in b.stages:
        for l in s.layers:
            b.stage_of_layer[l] = s
    b.graph.stages = b.stages
    b.build_compute_tasks()
    b.build_tensor_shards()
    b.duplicate_recompute()
    b.instantiate_micro_batches()
    b.assemble_subgraphs()
    b.wire_data_edges()
    b.wire_control_deps()
    b.check_acyclic()
    devs = set()
    for t in b.graph.tasks.values():
        devs.update(t.devices)
    for s in b.graph.shards.values():
        devs.add(s.device)
    b.graph.devices = tuple(sorted(devs))
    return b.graph
