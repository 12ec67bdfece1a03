"""Independent scheduling oracles.

``list_schedule`` is a plain greedy resource-constrained list scheduler
with the same tie-breaks as the simulator (per device, lowest task seq
among ready; all completions at a timestamp processed before dispatch;
communication rendezvous claims every member queue slot).  It knows nothing
about fluid bandwidth sharing or overlap factors, so it is only comparable
to simulations with gamma=0 and no concurrent link sharing.

``enumerate_makespans`` explores every work-conserving dispatch order of a
small graph and returns the set of reachable makespans.
"""

from itertools import product

QUEUE_OF = {
    "compute": "compute",
    "feature-comm": "feature_comm",
    "gradient-comm": "gradient_comm",
}


def _prep(graph):
    tasks = graph.tasks
    npred = graph.predecessors_count()
    succ = graph.successors()
    return tasks, npred, succ


def list_schedule(graph):
    """Makespan of the greedy schedule; independent of the simulator."""
    tasks, npred, succ = _prep(graph)
    devices = sorted(
        set(graph.devices) | {d for t in tasks.values() for d in t.devices}
    )
    slot = {(d, q): None for d in devices for q in QUEUE_OF.values()}
    ready = {tid for tid, c in npred.items() if c == 0}
    ends = {}  # in-flight task -> end time
    t = 0.0
    done = 0
    makespan = 0.0
    while done < len(tasks):
        # comm rendezvous first, then per-device compute, mirroring dispatch
        started = True
        while started:
            started = False
            for kind in ("gradient-comm", "feature-comm"):
                q = QUEUE_OF[kind]
                cands = sorted(
                    (tasks[tid].seq, tid)
                    for tid in ready
                    if tasks[tid].kind == kind
                )
                for _, tid in cands:
                    grp = tasks[tid].group
                    if all(slot[(d, q)] is None for d in grp):
                        for d in grp:
                            slot[(d, q)] = tid
                        ready.discard(tid)
                        ends[tid] = t + tasks[tid].cost
                        started = True
            for d in devices:
                if slot[(d, "compute")] is not None:
                    continue
                cands = sorted(
                    (tasks[tid].seq, tid)
                    for tid in ready
                    if tasks[tid].kind == "compute" and tasks[tid].device == d
                )
                if cands:
                    _, tid = cands[0]
                    slot[(d, "compute")] = tid
                    ready.discard(tid)
                    ends[tid] = t + tasks[tid].cost
                    started = True
        if not ends:
            raise RuntimeError("oracle deadlock")
        t = min(ends.values())
        finished = sorted(tid for tid, e in ends.items() if e == t)
        for tid in finished:
            del ends[tid]
            task = tasks[tid]
            qn = QUEUE_OF[task.kind]
            for d in task.devices:
                if slot[(d, qn)] == tid:
                    slot[(d, qn)] = None
            makespan = max(makespan, t)
            done += 1
            for s in succ[tid]:
                npred[s] -= 1
                if npred[s] == 0:
                    ready.add(s)
    return makespan


def enumerate_makespans(graph, limit=200000):
    """All makespans reachable by work-conserving schedules (compute only)."""
    tasks, npred0, succ = _prep(graph)
    ids = sorted(tasks, key=lambda t: tasks[t].seq)
    index = {tid: i for i, tid in enumerate(ids)}
    results = set()
    visits = 0

    def advance(done_mask, running, npred, t):
        nonlocal visits
        visits += 1
        if visits > limit:
            raise RuntimeError("enumeration limit exceeded")
        if len(running) == 0 and done_mask == (1 << len(ids)) - 1:
            results.add(t)
            return
        # dispatch choices per free device
        ready_by_dev = {}
        busy_devs = {tasks[tid].device for tid in running}
        for tid in ids:
            i = index[tid]
            if done_mask >> i & 1 or tid in running or npred[tid] > 0:
                continue
            d = tasks[tid].device
            if d not in busy_devs:
                ready_by_dev.setdefault(d, []).append(tid)
        choices = [opts for _, opts in sorted(ready_by_dev.items())]
        if choices:
            for pick in product(*choices):
                new_running = dict(running)
                for tid in pick:
                    new_running[tid] = t + tasks[tid].cost
                advance(done_mask, new_running, npred, t)
            return
        if not running:
            raise RuntimeError("enumeration deadlock")
        # no dispatch possible: advance time to next completion
        t2 = min(running.values())
        finished = [tid for tid, e in running.items() if e == t2]
        new_running = {tid: e for tid, e in running.items() if e > t2}
        new_npred = dict(npred)
        new_mask = done_mask
        for tid in finished:
            new_mask |= 1 << index[tid]
            for s in succ[tid]:
                new_npred[s] -= 1
        advance(new_mask, new_running, new_npred, t2)

    advance(0, {}, dict(npred0), 0.0)
    return results
