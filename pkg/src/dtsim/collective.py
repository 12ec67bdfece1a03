"""Tensor placement layouts and collective communication inference.

A *layout* records which index hyper-rectangle of a tensor each device
holds, and whether a holding is a complete value or an unreduced partial
summand (produced when an operator partitions one of its reduction dims).
``infer_transform`` produces the communication plan converting a source
layout into a destination layout using an ordered pattern table:

  1. partial -> replicated on the same devices:            all-reduce
  2. partial -> sharded on the same devices:               reduce-scatter
  3. sharded -> replicated on the same devices:            all-gather
  4. sharded -> sharded along different dims, same devices: all-to-all
  5. replicated on G -> replicated on G' > G:              broadcast
  6. anything else:                                        send-recv

First match wins; when both a single collective and a cheaper multi-step
plan exist the table's answer is taken as-is.  Partial layouts on a group
disjoint from the destination decompose as a reduce-class step on the
producing group followed by redistribution.  Replicated partials reduce in
per-replica subgroups (one holder of each summand per subgroup).

``verify_plan`` is the independent element-movement oracle: it simulates
per-element (coordinate-compressed) data movement with explicit partial-sum
bookkeeping and accepts a plan only if the final holdings cover the
destination with correctly reduced values.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

from .errors import CompileError

# A rect is one (start, stop) pair per tensor dim, aligned with dim order.


def rect_full(extents):
    return tuple((0, e) for e in extents)


def rect_volume(rect):
    v = 1
    for lo, hi in rect:
        v *= hi - lo
    return v


def rect_bytes(rect, elem_bytes):
    return rect_volume(rect) * elem_bytes


def rect_contains(outer, inner):
    return all(o[0] <= i[0] and i[1] <= o[1] for o, i in zip(outer, inner))


def rect_intersect(a, b):
    out = []
    for (a0, a1), (b0, b1) in zip(a, b):
        lo, hi = max(a0, b0), min(a1, b1)
        if lo >= hi:
            return None
        out.append((lo, hi))
    return tuple(out)


def rect_subtract(rect, holes):
    """Decompose ``rect`` minus the union of ``holes`` into disjoint rects."""
    pieces = [rect]
    for hole in holes:
        nxt = []
        for r in pieces:
            inter = rect_intersect(r, hole)
            if inter is None:
                nxt.append(r)
                continue
            cur = list(r)
            for axis, ((r0, r1), (h0, h1)) in enumerate(zip(r, inter)):
                if r0 < h0:
                    piece = list(cur)
                    piece[axis] = (r0, h0)
                    nxt.append(tuple(piece))
                if h1 < r1:
                    piece = list(cur)
                    piece[axis] = (h1, r1)
                    nxt.append(tuple(piece))
                cur[axis] = (h0, h1)
        pieces = nxt
    return pieces


def rects_cover(rect, pieces):
    return not rect_subtract(rect, pieces)


@dataclass(frozen=True)
class Holding:
    device: int
    rect: tuple
    summand: tuple | None = None  # None = complete value
    family: tuple | None = None  # partial family key (the family's rect)


@dataclass(frozen=True)
class PlacementLayout:
    tensor: str
    labels: tuple
    extents: tuple
    elem_bytes: int
    holdings: tuple  # sorted tuple of Holding

    def complete(self):
        return [h for h in self.holdings if h.summand is None]

    def partials(self):
        return [h for h in self.holdings if h.summand is not None]

    def families(self):
        """family rect -> {summand -> sorted holder devices}."""
        fams = {}
        for h in self.partials():
            fams.setdefault(h.family, {}).setdefault(h.summand, []).append(h.device)
        for by_summand in fams.values():
            for devs in by_summand.values():
                devs.sort()
        return fams

    def devices(self):
        return tuple(sorted({h.device for h in self.holdings}))

    def coverage(self, device):
        return [h.rect for h in self.holdings if h.device == device and h.summand is None]


def _make_layout(tensor, holdings):
    return PlacementLayout(
        tensor=tensor.id,
        labels=tensor.labels,
        extents=tensor.extents,
        elem_bytes=tensor.elem_bytes,
        holdings=tuple(sorted(holdings, key=lambda h: (h.device, h.rect, h.summand or ()))),
    )


def part_rect(tensor, partition, idx_by_label):
    """Sub-rect of ``tensor`` selected by per-label part indices."""
    rect = []
    for d in tensor.dims:
        if d.label in partition and d.label in idx_by_label:
            deg = partition[d.label]
            if d.extent % deg != 0:
                raise CompileError(
                    f"tensor {tensor.id}: degree {deg} does not divide "
                    f"extent {d.extent} of dim '{d.label}'"
                )
            chunk = d.extent // deg
            i = idx_by_label[d.label]
            rect.append((i * chunk, (i + 1) * chunk))
        else:
            rect.append((0, d.extent))
    return tuple(rect)


def layout_of(tensor, cfg) -> PlacementLayout:
    """Layout realized by a memory config: shards and exact replicas."""
    cfg = cfg.restrict(tensor.labels)
    labels = list(cfg.partition)
    holdings = []
    for idx, grp in zip(cfg.part_indices(), cfg.map):
        rect = part_rect(tensor, cfg.partition, dict(zip(labels, idx)))
        for d in grp:
            holdings.append(Holding(device=d, rect=rect))
    return _make_layout(tensor, holdings)


def implied_layout(tensor, cfg, side) -> PlacementLayout:
    """Layout implied for an operator's input or output by its computation
    config.  Outputs partitioned along a reduction dim become partials."""
    if side == "input":
        return layout_of(tensor, cfg)
    labels = list(cfg.partition)
    kept = [l for l in labels if l in tensor.labels]
    # a degree-1 "partition" of a reduction dim yields one summand, i.e. a
    # complete value, so only degree>1 dropped labels create partials
    dropped = [
        l for l in labels if l not in tensor.labels and cfg.partition[l] > 1
    ]
    holdings = []
    for idx, grp in zip(cfg.part_indices(), cfg.map):
        by_label = dict(zip(labels, idx))
        rect = part_rect(tensor, {l: cfg.partition[l] for l in kept}, by_label)
        summand = tuple(by_label[l] for l in dropped) if dropped else None
        for d in grp:
            holdings.append(
                Holding(
                    device=d,
                    rect=rect,
                    summand=summand,
                    family=rect if dropped else None,
                )
            )
    return _make_layout(tensor, holdings)


@dataclass(frozen=True)
class CommStep:
    primitive: str
    group: tuple  # sorted device ids
    nbytes: int
    rect: tuple | None = None
    root: int | None = None
    targets: tuple = ()  # reduce-scatter: ((device, rect), ...)
    transfers: tuple = ()  # a2a/send-recv: ((src, dst, rect, summand), ...)
    reads: tuple = ()  # holdings consumed/required
    writes: tuple = ()  # new holdings produced


@dataclass
class CommPlan:
    tensor: str
    steps: list = field(default_factory=list)

    @property
    def empty(self):
        return not self.steps


class _State:
    """Mutable holding set used while building a plan."""

    def __init__(self, layout: PlacementLayout):
        self.elem_bytes = layout.elem_bytes
        self.extents = layout.extents
        self.complete = {}  # device -> list of rects
        for h in layout.complete():
            self.complete.setdefault(h.device, []).append(h.rect)
        self.families = layout.families()

    def cover(self, device, rect):
        return rects_cover(rect, self.complete.get(device, []))

    def missing(self, device, rect):
        return rect_subtract(rect, self.complete.get(device, []))

    def add(self, device, rect):
        self.complete.setdefault(device, []).append(rect)


def _resolve_partials(state: _State, dst: PlacementLayout, tensor_id, steps):
    """Reduce every partial family in place (pattern rows 1 and 2)."""
    dst_complete = {}
    for h in dst.complete():
        dst_complete.setdefault(h.device, []).append(h.rect)

    for family in sorted(state.families):
        by_summand = state.families[family]
        summands = sorted(by_summand)
        holders = sorted({d for devs in by_summand.values() for d in devs})
        nbytes = rect_bytes(family, state.elem_bytes)

        # row 2: destination shards this family's rect across exactly the
        # holding devices, one shard per device -> reduce-scatter
        shard_of = {}
        ok_rs = len(holders) == len(summands) and all(
            len(devs) == 1 for devs in by_summand.values()
        )
        if ok_rs:
            pieces = []
            for d in holders:
                rects = [
                    r
                    for r in dst_complete.get(d, [])
                    if rect_intersect(r, family) is not None
                ]
                if len(rects) != 1 or not rect_contains(family, rects[0]):
                    ok_rs = False
                    break
                shard_of[d] = rects[0]
                pieces.append(rects[0])
            if ok_rs:
                ok_rs = rects_cover(family, pieces) and sum(
                    rect_volume(p) for p in pieces
                ) == rect_volume(family)
        if ok_rs:
            reads = tuple(
                Holding(d, family, s, family)
                for s in summands
                for d in by_summand[s]
            )
            writes = tuple(Holding(d, shard_of[d], None) for d in holders)
            steps.append(
                CommStep(
                    primitive="reduce-scatter",
                    group=tuple(holders),
                    nbytes=nbytes,
                    rect=family,
                    targets=tuple(sorted(shard_of.items())),
                    reads=reads,
                    writes=writes,
                )
            )
            for d in holders:
                state.add(d, shard_of[d])
            continue

        # row 1 (and partial-on-disjoint-group prefix): all-reduce within
        # per-replica subgroups so each subgroup sums every summand once
        nrep = min(len(by_summand[s]) for s in summands)
        for k in range(nrep):
            sub = tuple(sorted({by_summand[s][k] for s in summands}))
            if len(sub) < 2:
                # all summands on one device: purely local accumulation
                state.add(sub[0], family)
                continue
            reads = tuple(
                Holding(by_summand[s][k], family, s, family) for s in summands
            )
            writes = tuple(Holding(d, family, None) for d in sub)
            steps.append(
                CommStep(
                    primitive="all-reduce",
                    group=sub,
                    nbytes=nbytes,
                    rect=family,
                    reads=reads,
                    writes=writes,
                )
            )
            for d in sub:
                state.add(d, family)
    state.families = {}


def _dst_satisfied(state: _State, dst: PlacementLayout):
    return all(state.cover(h.device, h.rect) for h in dst.complete())


def infer_transform(src: PlacementLayout, dst: PlacementLayout) -> CommPlan:
    """Infer the collective plan converting ``src`` into ``dst``."""
    if src.tensor != dst.tensor:
        raise CompileError(
            f"infer_transform across tensors '{src.tensor}' vs '{dst.tensor}'"
        )
    if dst.partials():
        raise CompileError(
            f"tensor {dst.tensor}: destination layouts cannot be partial"
        )
    plan = CommPlan(tensor=src.tensor)
    state = _State(src)
    if _dst_satisfied(state, dst) and not state.families:
        return plan

    if state.families:
        _resolve_partials(state, dst, src.tensor, plan.steps)
    if _dst_satisfied(state, dst):
        return plan

    # row 3: all-gather per replicated destination rect whose pieces are
    # spread over exactly the destination devices
    demand = {}  # rect -> sorted devices wanting it
    for h in dst.complete():
        demand.setdefault(h.rect, set()).add(h.device)
    for rect in sorted(demand):
        devs = tuple(sorted(demand[rect]))
        if len(devs) < 2:
            continue
        if all(state.cover(d, rect) for d in devs):
            continue
        contributions = []
        holders = set()
        for d in devs:
            for r in state.complete.get(d, []):
                inter = rect_intersect(r, rect)
                if inter is not None:
                    contributions.append((d, inter))
                    holders.add(d)
        if holders == set(devs) and rects_cover(
            rect, [r for _, r in contributions]
        ):
            reads = tuple(Holding(d, r, None) for d, r in sorted(contributions))
            writes = tuple(
                Holding(d, r, None)
                for d in devs
                for _, r in sorted(contributions)
                if not state.cover(d, r)
            )
            plan.steps.append(
                CommStep(
                    primitive="all-gather",
                    group=devs,
                    nbytes=rect_bytes(rect, state.elem_bytes),
                    rect=rect,
                    reads=reads,
                    writes=writes,
                )
            )
            for d in devs:
                state.add(d, rect)
    if _dst_satisfied(state, dst):
        return plan

    # row 4: one complete rect per device resharded onto the same devices
    src_per_dev = {
        d: rs for d, rs in sorted(state.complete.items()) if rs
    }
    dst_per_dev = {}
    for h in dst.complete():
        dst_per_dev.setdefault(h.device, []).append(h.rect)
    full = rect_full(state.extents)
    if (
        sorted(src_per_dev) == sorted(dst_per_dev)
        and all(len(rs) == 1 for rs in src_per_dev.values())
        and all(len(rs) == 1 for rs in dst_per_dev.values())
        and rects_cover(full, [rs[0] for rs in src_per_dev.values()])
        and rects_cover(full, [rs[0] for rs in dst_per_dev.values()])
        and sum(rect_volume(rs[0]) for rs in src_per_dev.values()) == rect_volume(full)
        and sum(rect_volume(rs[0]) for rs in dst_per_dev.values()) == rect_volume(full)
    ):
        group = tuple(sorted(src_per_dev))
        transfers = []
        for d in group:
            want = dst_per_dev[d][0]
            for b in group:
                if b == d:
                    continue
                inter = rect_intersect(want, src_per_dev[b][0])
                if inter is not None:
                    transfers.append((b, d, inter, None))
        if transfers:
            reads = tuple(Holding(b, r, None) for b, _, r, _ in sorted(transfers))
            writes = tuple(Holding(d, r, None) for _, d, r, _ in sorted(transfers))
            plan.steps.append(
                CommStep(
                    primitive="all-to-all",
                    group=group,
                    nbytes=rect_bytes(full, state.elem_bytes),
                    rect=full,
                    transfers=tuple(sorted(transfers)),
                    reads=reads,
                    writes=writes,
                )
            )
            for _, d, r, _ in transfers:
                state.add(d, r)
    if _dst_satisfied(state, dst):
        return plan

    # row 5: replicated rect widening to a superset group -> broadcast
    for rect in sorted(demand):
        devs = tuple(sorted(demand[rect]))
        have = [d for d in devs if state.cover(d, rect)]
        lack = [d for d in devs if not state.cover(d, rect)]
        if not lack:
            continue
        sources = sorted(
            d for d, rs in state.complete.items() if rects_cover(rect, rs)
        )
        if not sources or not have:
            continue
        root = sources[0]
        group = tuple(sorted(set(lack) | {root}))
        reads = tuple(
            Holding(root, r, None)
            for r in state.complete.get(root, [])
            if rect_intersect(r, rect) is not None
        )
        writes = tuple(Holding(d, rect, None) for d in sorted(lack))
        plan.steps.append(
            CommStep(
                primitive="broadcast",
                group=group,
                nbytes=rect_bytes(rect, state.elem_bytes),
                rect=rect,
                root=root,
                reads=reads,
                writes=writes,
            )
        )
        for d in lack:
            state.add(d, rect)
    if _dst_satisfied(state, dst):
        return plan

    # row 6: point-to-point fallback moving exactly the missing bytes
    def emit_transfer(src_dev, dst_dev, rect):
        plan.steps.append(
            CommStep(
                primitive="send-recv",
                group=tuple(sorted((src_dev, dst_dev))),
                nbytes=rect_bytes(rect, state.elem_bytes),
                rect=rect,
                transfers=((src_dev, dst_dev, rect, None),),
                reads=(Holding(src_dev, rect, None),),
                writes=(Holding(dst_dev, rect, None),),
            )
        )
        state.add(dst_dev, rect)

    for h in sorted(dst.complete(), key=lambda h: (h.device, h.rect)):
        remaining = state.missing(h.device, h.rect)
        sources = sorted(d for d in state.complete if d != h.device)
        for src_dev in sources:
            if not remaining:
                break
            nxt = []
            for frag in remaining:
                frags = [frag]
                for r in list(state.complete.get(src_dev, [])):
                    carved = []
                    for f in frags:
                        inter = rect_intersect(r, f)
                        if inter is None:
                            carved.append(f)
                        else:
                            emit_transfer(src_dev, h.device, inter)
                            carved.extend(rect_subtract(f, [inter]))
                    frags = carved
                    if not frags:
                        break
                nxt.extend(frags)
            remaining = nxt
        if remaining:
            raise CompileError(
                f"tensor {dst.tensor}: destination holding on device "
                f"{h.device} rect {h.rect} is not coverable from the "
                f"source layout"
            )
    assert _dst_satisfied(state, dst)
    return plan


# ---------------------------------------------------------------------------
# element-movement oracle


def _cell_grid(extents, rects):
    """Coordinate-compressed grid: per-dim boundary lists."""
    bounds = [sorted({0, e}) for e in extents]
    for rect in rects:
        for axis, (lo, hi) in enumerate(rect):
            bs = set(bounds[axis])
            bs.update((lo, hi))
            bounds[axis] = sorted(bs)
    return bounds


def _cells_in(rect, bounds):
    per_axis = []
    for axis, (lo, hi) in enumerate(rect):
        segs = []
        bs = bounds[axis]
        for i in range(len(bs) - 1):
            if bs[i] >= lo and bs[i + 1] <= hi:
                segs.append(i)
        per_axis.append(segs)
    return itertools.product(*per_axis)


def verify_plan(src: PlacementLayout, dst: PlacementLayout, plan: CommPlan) -> bool:
    """True iff executing ``plan`` transforms ``src`` into (a covering of)
    ``dst`` with every partial family reduced exactly once."""
    rects = [h.rect for h in src.holdings] + [h.rect for h in dst.holdings]
    for step in plan.steps:
        if step.rect is not None:
            rects.append(step.rect)
        rects.extend(r for _, r in step.targets)
        rects.extend(r for _, _, r, _ in step.transfers)
    bounds = _cell_grid(src.extents, rects)

    full_summands = {}
    state = {}  # device -> cell -> set of tags; tag None | (family, summand)
    for h in src.holdings:
        tag = None if h.summand is None else (h.family, h.summand)
        if h.summand is not None:
            full_summands.setdefault(h.family, set()).add(h.summand)
        for cell in _cells_in(h.rect, bounds):
            state.setdefault(h.device, {}).setdefault(cell, set()).add(tag)

    # A family whose every summand already sits on one device is not a
    # distributed partial: that device accumulates locally.  Any other
    # partial set is resolved only by a reduce-class step over its group;
    # in particular copies obtained by gathering never become complete.
    local_families = {}
    for h in src.holdings:
        if h.summand is not None:
            local_families.setdefault((h.family, h.device), set()).add(h.summand)
    for (family, device), summands in sorted(local_families.items()):
        if summands == full_summands[family]:
            for cell in _cells_in(family, bounds):
                state[device][cell].add(None)

    def has_complete(device, cell):
        return None in state.get(device, {}).get(cell, set())

    def reduce_contributions(step):
        """Per-member buffer contributions of a reduce-class step.

        Declared in ``step.reads`` (a member may pre-accumulate several
        locally held summands); without declared reads, each member must
        hold exactly one partial tag.  Returns the (device, family, summand)
        list, or None if the step is illegal at this point."""
        if step.reads:
            contributions = []
            for h in step.reads:
                if h.summand is None:
                    return None  # reducing complete values double-counts
                contributions.append((h.device, h.family, h.summand))
        else:
            contributions = []
            for d in step.group:
                cells = list(_cells_in(step.rect, bounds))
                tags = state.get(d, {}).get(cells[0], set()) if cells else set()
                part = [t for t in tags if t is not None]
                if len(part) != 1:
                    return None
                contributions.append((d, part[0][0], part[0][1]))
        devs = {c[0] for c in contributions}
        if devs != set(step.group):
            return None  # every rank contributes, no outsiders
        fams = {c[1] for c in contributions}
        if len(fams) != 1:
            return None
        (fam,) = fams
        summands = [c[2] for c in contributions]
        if len(set(summands)) != len(summands):
            return None  # a summand counted twice
        if set(summands) != full_summands.get(fam, set()):
            return None  # partial set not fully covered
        for d, f, s in contributions:
            for cell in _cells_in(step.rect, bounds):
                if (f, s) not in state.get(d, {}).get(cell, set()):
                    return None
        return contributions

    def apply_reduce(step, contributions):
        for d, f, s in contributions:
            for cell in _cells_in(step.rect, bounds):
                state[d][cell].discard((f, s))

    for step in plan.steps:
        if step.primitive == "all-reduce":
            contributions = reduce_contributions(step)
            if contributions is None:
                return False
            apply_reduce(step, contributions)
            for d in step.group:
                for cell in _cells_in(step.rect, bounds):
                    state.setdefault(d, {}).setdefault(cell, set()).add(None)
        elif step.primitive == "reduce-scatter":
            contributions = reduce_contributions(step)
            if contributions is None:
                return False
            apply_reduce(step, contributions)
            for d, trect in dict(step.targets).items():
                for cell in _cells_in(trect, bounds):
                    state.setdefault(d, {}).setdefault(cell, set()).add(None)
        elif step.primitive == "all-gather":
            gathered = {}
            for d in step.group:
                for cell in _cells_in(step.rect, bounds):
                    for tag in state.get(d, {}).get(cell, set()):
                        gathered.setdefault(cell, set()).add(tag)
            for cell in _cells_in(step.rect, bounds):
                if not gathered.get(cell):
                    return False  # nobody contributed this cell
            for d in step.group:
                cells = state.setdefault(d, {})
                for cell, tags in gathered.items():
                    cells.setdefault(cell, set()).update(tags)
        elif step.primitive == "broadcast":
            for cell in _cells_in(step.rect, bounds):
                if not has_complete(step.root, cell):
                    return False
            for d in step.group:
                if d == step.root:
                    continue
                cells = state.setdefault(d, {})
                for cell in _cells_in(step.rect, bounds):
                    cells.setdefault(cell, set()).add(None)
        elif step.primitive in ("all-to-all", "send-recv"):
            for srcd, dstd, rect, summand in step.transfers:
                tag = None if summand is None else (step.rect, summand)
                for cell in _cells_in(rect, bounds):
                    tags = state.get(srcd, {}).get(cell, set())
                    if summand is None:
                        if not has_complete(srcd, cell):
                            return False
                        state.setdefault(dstd, {}).setdefault(cell, set()).add(None)
                    else:
                        if tag not in tags:
                            return False
                        state.setdefault(dstd, {}).setdefault(cell, set()).add(tag)
        else:
            return False

    for h in dst.holdings:
        cells = state.get(h.device, {})
        for cell in _cells_in(h.rect, bounds):
            if h.summand is None:
                if not has_complete(h.device, cell):
                    return False
            elif (h.family, h.summand) not in cells.get(cell, set()):
                return False
    return True


def plan_volume(plan: CommPlan, cluster):
    """Per-hierarchy-level wire bytes of a plan (ring algorithmic volumes)."""
    from .cluster import crossed_links

    volumes = {}
    for step in plan.steps:
        n = len(step.group)
        s = step.nbytes
        if step.primitive == "all-reduce":
            v = 2 * s * (n - 1) / n
        elif step.primitive in ("all-gather", "reduce-scatter", "all-to-all"):
            v = s * (n - 1) / n
        else:  # broadcast, send-recv
            v = s
        for level in sorted({lvl for lvl, _ in crossed_links(cluster, step.group)}):
            volumes[level] = volumes.get(level, 0.0) + v
    return volumes
