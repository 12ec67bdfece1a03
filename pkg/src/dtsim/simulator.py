"""Event-driven execution simulator with runtime-behavior detection.

Two-level structure: a scheduler ranks execution subgraph instances
(backward first, round-robin across origins, forward instances that enable
a backward preferred), and per-device executors run three queues - compute,
feature communication, gradient communication - with at most one in-flight
task per queue.  Communication tasks occupy their queue slot on every
member device (rendezvous dispatch).

Runtime behaviors are recomputed at every dispatch/completion event:

* bandwidth sharing - concurrent communication tasks crossing a common
  physical link divide its bandwidth equally; a task's remaining work
  drains at min over crossed links of (link bandwidth / sharers) relative
  to its solo bandwidth (fluid model, exact at event boundaries);
* comp-comm overlap - a compute task with a gradient-comm task in flight
  on its device (and vice versa, on any group member) gets its remaining
  duration multiplied by (1 + gamma) once, at the detection event;
  feature communication neither pays nor causes the penalty.

Memory is tracked by reference counting: a shard's allocation unit is
charged at its first writer's dispatch (producer-less shards at t=0) and
released when its last reader completes; in-place gradient synchronization
resizes its unit instead of allocating.  Everything is deterministic:
ties break on stable task sequence numbers, and repeated runs produce
bit-identical reports.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field

from .cluster import ClusterSpec, crossed_links
from .compiler import ExecutionGraph, KIND_COMPUTE, KIND_FEATURE_COMM, KIND_GRADIENT_COMM
from .errors import SimulationDeadlock

QUEUE_OF = {
    KIND_COMPUTE: "compute",
    KIND_FEATURE_COMM: "feature_comm",
    KIND_GRADIENT_COMM: "gradient_comm",
}


@dataclass
class InstanceInfo:
    id: str
    origin: str
    phase: str
    micro_batch: int | None
    tasks_left: int
    preds: tuple = ()


@dataclass
class SchedulerState:
    """View used by subgraph selection; also constructible in tests."""

    instances: dict = field(default_factory=dict)  # id -> InstanceInfo
    last_backward_origin: str | None = None

    def enables_backward(self, inst: InstanceInfo) -> bool:
        if inst.phase != "forward":
            return False
        bw = f"{inst.origin}:backward:mb{inst.micro_batch}"
        binfo = self.instances.get(bw)
        if binfo is None:
            return False
        unmet = [
            p
            for p in binfo.preds
            if p != inst.id and self.instances[p].tasks_left > 0
        ]
        return not unmet


def select_next_subgraph(sched: SchedulerState, ready_ids):
    """Pick the next subgraph instance to run among ``ready_ids``.

    Backward (and recompute) instances win over forward; among backward,
    origins rotate round-robin after the last chosen one; among forward,
    instances whose completion unblocks a backward instance come first.
    Ties break on lowest (origin, micro_batch).
    """
    ready = [sched.instances[i] for i in sorted(ready_ids)]
    if not ready:
        return None
    bw = [i for i in ready if i.phase in ("backward", "recompute")]
    if bw:
        origins = sorted({i.origin for i in bw})
        if sched.last_backward_origin in origins and len(origins) > 1:
            k = origins.index(sched.last_backward_origin)
            rotation = origins[k + 1 :] + origins[: k + 1]
        else:
            rotation = origins
        for origin in rotation:
            cands = [i for i in bw if i.origin == origin]
            if cands:
                best = min(cands, key=lambda i: (i.micro_batch or 0, i.id))
                return best.id
    fwd = sorted(
        ready,
        key=lambda i: (
            not sched.enables_backward(i),
            i.origin,
            i.micro_batch if i.micro_batch is not None else 0,
            i.id,
        ),
    )
    return fwd[0].id


@dataclass
class MemoryUnit:
    id: str
    nbytes: int
    device: int
    persistent: bool = False
    pending: int = 0
    allocated: bool = False
    released: bool = False


class MemoryTracker:
    """Per-device byte accounting with shard reference counts."""

    def __init__(self):
        self.units = {}
        self.unit_of = {}  # shard id -> unit id
        self.current = {}
        self.peak = {}
        self.peak_event = {}
        self.persistent_bytes = {}

    def register(self, graph: ExecutionGraph):
        readers = {sid: 0 for sid in graph.shards}
        for t in graph.tasks.values():
            for sid in t.reads:
                readers[sid] += 1
        for s in sorted(graph.shards.values(), key=lambda s: s.id):
            root = s
            while root.alias_of is not None:
                root = graph.shards[root.alias_of]
            uid = root.id
            if uid not in self.units:
                self.units[uid] = MemoryUnit(
                    id=uid, nbytes=root.nbytes, device=root.device
                )
            unit = self.units[uid]
            self.unit_of[s.id] = uid
            unit.pending += readers[s.id]
            if s.persistent and not unit.persistent:
                unit.persistent = True
                unit.pending += 1
                self.persistent_bytes[s.device] = (
                    self.persistent_bytes.get(s.device, 0) + s.nbytes
                )
        for dev in sorted({u.device for u in self.units.values()}):
            self.current.setdefault(dev, 0)
            self.peak.setdefault(dev, 0)

    def allocate(self, shard_id, time):
        unit = self.units[self.unit_of[shard_id]]
        if unit.allocated or unit.released:
            return
        if not unit.persistent and unit.pending == 0:
            return  # nothing will ever read it; model as never resident
        unit.allocated = True
        dev = unit.device
        self.current[dev] = self.current.get(dev, 0) + unit.nbytes
        if self.current[dev] > self.peak.get(dev, 0):
            self.peak[dev] = self.current[dev]
            self.peak_event[dev] = (time, unit.id)

    def resize(self, shard_id, new_bytes):
        unit = self.units[self.unit_of[shard_id]]
        if not unit.allocated or unit.released:
            return
        delta = new_bytes - unit.nbytes
        unit.nbytes = new_bytes
        self.current[unit.device] += delta

    def consume(self, shard_id):
        unit = self.units[self.unit_of[shard_id]]
        unit.pending -= 1
        if unit.pending <= 0 and unit.allocated and not unit.released:
            unit.released = True
            self.current[unit.device] -= unit.nbytes

    def release_if_unread(self, shard_id):
        unit = self.units[self.unit_of[shard_id]]
        if unit.pending <= 0 and unit.allocated and not unit.released:
            unit.released = True
            self.current[unit.device] -= unit.nbytes


def predict_oom(mem: MemoryTracker, cluster: ClusterSpec):
    """Per-device verdicts: OOM iff peak strictly exceeds device memory."""
    out = {}
    for dev in sorted(mem.peak):
        peak = mem.peak[dev]
        out[dev] = {
            "peak_bytes": peak,
            "oom": peak > cluster.device_memory,
            "peak_event": mem.peak_event.get(dev),
        }
    return out


@dataclass
class TimelineEvent:
    task: str
    kind: str
    devices: tuple
    start: float
    end: float
    share_factor: float
    overlapped: bool


@dataclass
class SimReport:
    iteration_time: float
    peak_bytes: dict
    oom: dict
    current_bytes: dict
    persistent_bytes: dict
    busy: dict  # dev -> queue -> seconds
    events: list
    behaviors: dict
    n_micro_batches: int
    batch_size: int

    @property
    def any_oom(self):
        return any(self.oom.values())

    def to_dict(self):
        devices = []
        for dev in sorted(self.peak_bytes):
            devices.append(
                {
                    "device": dev,
                    "peak_bytes": self.peak_bytes[dev],
                    "oom": self.oom[dev],
                    "final_bytes": self.current_bytes[dev],
                    "persistent_bytes": self.persistent_bytes.get(dev, 0),
                    "busy": {
                        q: self.busy[dev][q]
                        for q in ("compute", "feature_comm", "gradient_comm")
                    },
                }
            )
        return {
            "iteration_time_s": self.iteration_time,
            "throughput_samples_per_s": (
                self.batch_size / self.iteration_time
                if self.iteration_time > 0
                else None
            ),
            "batch_size": self.batch_size,
            "n_micro_batches": self.n_micro_batches,
            "devices": devices,
            "behaviors": self.behaviors,
            "events": [
                {
                    "task": e.task,
                    "kind": e.kind,
                    "devices": list(e.devices),
                    "start": e.start,
                    "end": e.end,
                    "share_factor": e.share_factor,
                    "overlapped": e.overlapped,
                }
                for e in self.events
            ],
        }


def to_chrome_trace(report: SimReport):
    """Chrome trace-event JSON (``chrome://tracing`` / Perfetto)."""
    trace = []
    for e in report.events:
        for dev in e.devices:
            trace.append(
                {
                    "name": e.task,
                    "ph": "X",
                    "ts": e.start * 1e6,
                    "dur": (e.end - e.start) * 1e6,
                    "pid": dev,
                    "tid": {"compute": 0, "feature-comm": 1, "gradient-comm": 2}[
                        e.kind
                    ]
                    if e.kind in ("compute", "feature-comm", "gradient-comm")
                    else 3,
                    "args": {
                        "share_factor": e.share_factor,
                        "overlapped": e.overlapped,
                    },
                }
            )
    return {"traceEvents": trace}


class _RunState:
    __slots__ = (
        "remaining",
        "rate",
        "start",
        "last",
        "version",
        "overlapped",
        "share_max",
        "links",
        "solo_bw",
    )

    def __init__(self, cost):
        self.remaining = cost
        self.rate = 1.0
        self.start = 0.0
        self.last = 0.0
        self.version = 0
        self.overlapped = False
        self.share_max = 1.0
        self.links = None
        self.solo_bw = None


def simulate(
    graph: ExecutionGraph,
    cluster: ClusterSpec,
    gamma: float = 0.0,
    collect_timeline: bool = True,
) -> SimReport:
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    tasks = graph.tasks
    npred = graph.predecessors_count()
    succ = graph.successors()

    mem = MemoryTracker()
    mem.register(graph)

    # instance bookkeeping for the scheduler
    sched = SchedulerState()
    inst_of = {}
    for gid, sg in graph.subgraphs.items():
        sched.instances[gid] = InstanceInfo(
            id=gid,
            origin=sg.origin,
            phase=sg.phase,
            micro_batch=sg.micro_batch,
            tasks_left=len(sg.tasks),
        )
        for tid in sg.tasks:
            inst_of[tid] = gid
    inst_preds = {gid: set() for gid in graph.subgraphs}
    for a, b in graph.edge_set():
        ia, ib = inst_of[a], inst_of[b]
        if ia != ib:
            inst_preds[ib].add(ia)
    for gid in inst_preds:
        sched.instances[gid].preds = tuple(sorted(inst_preds[gid]))

    # per-device queues
    devices = sorted(
        set(graph.devices)
        | {d for t in tasks.values() for d in t.devices}
    )
    slot = {(d, q): None for d in devices for q in QUEUE_OF.values()}
    ready_compute = {d: [] for d in devices}  # heap of (seq, task id)
    pending_comm = {"feature_comm": [], "gradient_comm": []}
    run = {}

    # Persistent producer-less shards (parameters, optimizer states) are
    # resident from t=0; transient producer-less ones (inputs, loss-gradient
    # seeds) allocate lazily at their first reader's dispatch.
    writers = {}
    for t in tasks.values():
        for sid in t.writes:
            writers.setdefault(sid, []).append(t.id)
    for sid in sorted(graph.shards):
        if sid not in writers and graph.shards[sid].persistent:
            mem.allocate(sid, 0.0)

    events = []  # heap of (time, order, task id, version)
    order = 0
    now = 0.0
    done = 0
    in_flight = set()
    timeline = []
    n_overlapped = 0
    n_shared = 0
    max_share = 1.0

    def mark_ready(tid):
        t = tasks[tid]
        if t.kind == KIND_COMPUTE:
            heapq.heappush(ready_compute[t.device], (t.seq, tid))
        else:
            heapq.heappush(pending_comm[QUEUE_OF[t.kind]], (t.seq, tid))

    for tid in sorted(tasks, key=lambda t: tasks[t].seq):
        if npred[tid] == 0:
            mark_ready(tid)

    def dispatch():
        nonlocal order
        started = []
        # communication first: rendezvous over free class slots
        for q in ("gradient_comm", "feature_comm"):
            heap = pending_comm[q]
            deferred = []
            while heap:
                seq, tid = heapq.heappop(heap)
                t = tasks[tid]
                if all(slot[(d, q)] is None for d in t.group):
                    for d in t.group:
                        slot[(d, q)] = tid
                    started.append(tid)
                else:
                    deferred.append((seq, tid))
            for item in deferred:
                heapq.heappush(heap, item)
        # compute: scheduler policy per device
        for d in devices:
            if slot[(d, "compute")] is not None:
                continue
            heap = ready_compute[d]
            if not heap:
                continue
            by_inst = {}
            for seq, tid in heap:
                by_inst.setdefault(inst_of[tid], []).append((seq, tid))
            pick_inst = select_next_subgraph(sched, list(by_inst))
            seq, tid = min(by_inst[pick_inst])
            heap.remove((seq, tid))
            heapq.heapify(heap)
            inst = sched.instances[pick_inst]
            if inst.phase in ("backward", "recompute"):
                sched.last_backward_origin = inst.origin
            slot[(d, "compute")] = tid
            started.append(tid)
        # start bookkeeping
        for tid in started:
            t = tasks[tid]
            st = _RunState(t.cost)
            st.start = now
            st.last = now
            if t.kind != KIND_COMPUTE:
                st.links = []
                for lvl, inst in crossed_links(cluster, t.group):
                    st.links.append((lvl, inst, cluster.level_bandwidth(lvl)))
                st.solo_bw = min(bw for _, _, bw in st.links)
            run[tid] = st
            in_flight.add(tid)
            for sid in t.writes:
                mem.allocate(sid, now)
            for sid in t.reads:
                mem.allocate(sid, now)  # lazy producer-less transients
        return started

    def settle():
        for tid in in_flight:
            st = run[tid]
            if now > st.last:
                st.remaining -= st.rate * (now - st.last)
                if st.remaining < 0:
                    st.remaining = 0.0
                st.last = now

    def refresh_behaviors():
        nonlocal n_overlapped, max_share
        changed = set()
        # fluid fair sharing over link instances
        comms = [tid for tid in in_flight if tasks[tid].kind != KIND_COMPUTE]
        counts = {}
        for tid in comms:
            for lvl, inst, _ in run[tid].links:
                counts[(lvl, inst)] = counts.get((lvl, inst), 0) + 1
        for tid in comms:
            st = run[tid]
            eff = min(bw / counts[(lvl, inst)] for lvl, inst, bw in st.links)
            rate = eff / st.solo_bw
            factor = st.solo_bw / eff
            if factor > st.share_max:
                st.share_max = factor
            if factor > max_share:
                max_share = factor
            if rate != st.rate:
                st.rate = rate
                changed.add(tid)
        # comp-comm overlap
        if gamma > 0:
            grads_by_dev = {}
            for tid in comms:
                if tasks[tid].kind == KIND_GRADIENT_COMM:
                    for d in tasks[tid].group:
                        grads_by_dev.setdefault(d, []).append(tid)
            for tid in sorted(in_flight):
                t = tasks[tid]
                st = run[tid]
                if st.overlapped:
                    continue
                hit = False
                if t.kind == KIND_COMPUTE:
                    hit = bool(grads_by_dev.get(t.device))
                elif t.kind == KIND_GRADIENT_COMM:
                    hit = any(
                        slot[(d, "compute")] is not None for d in t.group
                    )
                if hit:
                    st.overlapped = True
                    st.remaining *= 1.0 + gamma
                    changed.add(tid)
                    n_overlapped += 1
        return changed

    def schedule_end(tid):
        nonlocal order
        st = run[tid]
        st.version += 1
        end = now + (st.remaining / st.rate if st.rate > 0 else float("inf"))
        order += 1
        heapq.heappush(events, (end, order, tid, st.version))

    def finish(tid):
        nonlocal done, n_shared
        t = tasks[tid]
        st = run[tid]
        in_flight.discard(tid)
        for d in t.devices:
            q = QUEUE_OF[t.kind]
            if slot[(d, q)] == tid:
                slot[(d, q)] = None
        busy_add(t, st)
        if collect_timeline:
            timeline.append(
                TimelineEvent(
                    task=tid,
                    kind=t.kind,
                    devices=t.devices,
                    start=st.start,
                    end=now,
                    share_factor=st.share_max,
                    overlapped=st.overlapped,
                )
            )
        if st.share_max > 1.0:
            n_shared += 1
        # memory: consume reads, finalize writes
        if t.in_place:
            for sid in t.writes:
                mem.resize(sid, graph.shards[sid].nbytes)
        for sid in t.reads:
            mem.consume(sid)
        for sid in t.writes:
            mem.release_if_unread(sid)
        done += 1
        inst = sched.instances[inst_of[tid]]
        inst.tasks_left -= 1
        for s in succ[tid]:
            npred[s] -= 1
            if npred[s] == 0:
                mark_ready(s)

    busy = {d: {"compute": 0.0, "feature_comm": 0.0, "gradient_comm": 0.0} for d in devices}

    def busy_add(t, st):
        for d in t.devices:
            busy[d][QUEUE_OF[t.kind]] += now - st.start

    started = dispatch()
    refresh_behaviors()
    for tid in started:
        schedule_end(tid)

    makespan = 0.0
    while events:
        time, _, tid, version = heapq.heappop(events)
        if tid not in run or run[tid].version != version or tid not in in_flight:
            continue
        batch = [tid]
        while events and events[0][0] == time:
            _, _, tid2, v2 = heapq.heappop(events)
            if tid2 in in_flight and run[tid2].version == v2:
                batch.append(tid2)
        now = time
        makespan = max(makespan, now)
        settle()
        for t_done in batch:
            finish(t_done)
        started = dispatch()
        changed = refresh_behaviors()
        for t_new in started:
            schedule_end(t_new)
        for t_chg in changed:
            if t_chg in in_flight and t_chg not in started:
                schedule_end(t_chg)

    if done != len(tasks):
        frontier = sorted(t for t in tasks if t not in run or t in in_flight)
        raise SimulationDeadlock(frontier)

    oom = predict_oom(mem, cluster)
    return SimReport(
        iteration_time=makespan,
        peak_bytes={d: mem.peak.get(d, 0) for d in sorted(mem.peak)},
        oom={d: v["oom"] for d, v in oom.items()},
        current_bytes={d: mem.current.get(d, 0) for d in sorted(mem.current)},
        persistent_bytes=dict(sorted(mem.persistent_bytes.items())),
        busy=busy,
        events=sorted(timeline, key=lambda e: (e.start, e.task)),
        behaviors={
            "overlapped_tasks": n_overlapped,
            "bandwidth_shared_tasks": n_shared,
            "max_share_factor": max_share,
        },
        n_micro_batches=graph.n_micro_batches,
        batch_size=graph.batch_size,
    )


def report_to_json(report: SimReport, include_events=True) -> str:
    d = report.to_dict()
    if not include_events:
        d.pop("events")
    return json.dumps(d, sort_keys=True, indent=2)
