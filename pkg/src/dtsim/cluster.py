"""Cluster description and the physical-link hierarchy.

The hierarchy has four levels, top-down: NIC, inter-socket link, intra-node
fabric, per-device port.  Every device pair resolves to exactly one lowest
common level.  Channel detection is a hierarchy-bottleneck heuristic: a
group's aggregate bandwidth is the minimum, over the levels its traffic
crosses, of (level bandwidth x links available at that level); this stands
in for NCCL's graph search, which the acceptance suite does not require.

Link *instances* are per-node (NIC, inter-socket, fabric) or per-device
(port) resources; bandwidth sharing counts how many concurrent groups cross
each instance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import SchemaError

LEVEL_NIC = "nic"
LEVEL_INTER_SOCKET = "inter_socket"
LEVEL_INTRA_NODE = "intra_node"
LEVEL_PORT = "port"

# top-down order; index = rank (lower rank = higher in the hierarchy)
LEVELS = (LEVEL_NIC, LEVEL_INTER_SOCKET, LEVEL_INTRA_NODE, LEVEL_PORT)

DEFAULT_ALPHA = {
    LEVEL_NIC: 5e-6,
    LEVEL_INTER_SOCKET: 1e-6,
    LEVEL_INTRA_NODE: 1e-6,
    LEVEL_PORT: 1e-6,
}


@dataclass(frozen=True)
class Channel:
    level: str
    bandwidth: float  # bytes/s


@dataclass
class ChannelSet:
    channels: tuple
    bottleneck_level: str

    @property
    def aggregate(self) -> float:
        return sum(c.bandwidth for c in self.channels)


@dataclass
class ClusterSpec:
    n_nodes: int
    devices_per_node: int
    device_type: str
    device_memory: int  # bytes
    bandwidth: dict  # level -> bytes/s
    alpha: dict  # level -> seconds
    links_per_level: dict  # level -> multiplicity
    sockets_per_node: int = 1
    socket_assignment: tuple = ()  # local device index -> socket

    @property
    def n_devices(self) -> int:
        return self.n_nodes * self.devices_per_node

    def node_of(self, dev: int) -> int:
        return dev // self.devices_per_node

    def socket_of(self, dev: int) -> int:
        return self.socket_assignment[dev % self.devices_per_node]

    def level_bandwidth(self, level: str) -> float:
        return self.bandwidth[level] * self.links_per_level.get(level, 1)


def cluster_from_dict(obj, source="<dict>") -> ClusterSpec:
    if not isinstance(obj, dict):
        raise SchemaError(source, "cluster document must be a JSON object")

    def req(key, typ=None):
        if key not in obj:
            raise SchemaError(source, f"missing required field '{key}'")
        v = obj[key]
        if typ and not isinstance(v, typ):
            raise SchemaError(f"{source}.{key}", f"expected {typ.__name__}")
        return v

    n_nodes = req("n_nodes", int)
    devices_per_node = req("devices_per_node", int)
    if n_nodes < 1 or devices_per_node < 1:
        raise SchemaError(source, "n_nodes and devices_per_node must be >= 1")
    device_memory = req("device_memory")
    if device_memory <= 0:
        raise SchemaError(f"{source}.device_memory", "must be > 0")

    intra = req("intra_node_link", dict)
    if intra.get("class", "pcie") not in ("pcie", "nvlink"):
        raise SchemaError(
            f"{source}.intra_node_link.class", "must be 'pcie' or 'nvlink'"
        )
    intra_bw = intra.get("bandwidth", 0)
    if intra_bw <= 0:
        raise SchemaError(f"{source}.intra_node_link.bandwidth", "must be > 0")

    bandwidth = {
        LEVEL_INTRA_NODE: float(intra_bw),
        LEVEL_PORT: float(intra.get("port_bandwidth", intra_bw)),
    }
    alpha = dict(DEFAULT_ALPHA)
    alpha[LEVEL_INTRA_NODE] = float(intra.get("alpha", alpha[LEVEL_INTRA_NODE]))
    alpha[LEVEL_PORT] = alpha[LEVEL_INTRA_NODE]

    nic = obj.get("nic")
    if n_nodes > 1:
        if not nic or nic.get("bandwidth", 0) <= 0:
            raise SchemaError(
                f"{source}.nic",
                "nic bandwidth must be > 0 when n_nodes > 1",
            )
    if nic and nic.get("bandwidth", 0) > 0:
        bandwidth[LEVEL_NIC] = float(nic["bandwidth"])
        alpha[LEVEL_NIC] = float(nic.get("alpha", alpha[LEVEL_NIC]))

    sockets_per_node = obj.get("sockets_per_node", 1)
    inter = obj.get("inter_socket_link")
    if sockets_per_node > 1:
        if not inter or inter.get("bandwidth", 0) <= 0:
            raise SchemaError(
                f"{source}.inter_socket_link",
                "required with positive bandwidth when sockets_per_node > 1",
            )
        bandwidth[LEVEL_INTER_SOCKET] = float(inter["bandwidth"])
        alpha[LEVEL_INTER_SOCKET] = float(
            inter.get("alpha", alpha[LEVEL_INTER_SOCKET])
        )

    assignment = obj.get("socket_assignment")
    if assignment is None:
        per = (devices_per_node + sockets_per_node - 1) // sockets_per_node
        assignment = [min(i // per, sockets_per_node - 1) for i in range(devices_per_node)]
    if len(assignment) != devices_per_node:
        raise SchemaError(
            f"{source}.socket_assignment",
            f"must list exactly {devices_per_node} entries",
        )
    for i, s in enumerate(assignment):
        if not 0 <= s < sockets_per_node:
            raise SchemaError(
                f"{source}.socket_assignment[{i}]",
                f"socket {s} out of range 0..{sockets_per_node - 1}",
            )

    links = {l: 1 for l in LEVELS}
    for l, k in obj.get("links_per_level", {}).items():
        if l not in LEVELS:
            raise SchemaError(f"{source}.links_per_level", f"unknown level '{l}'")
        if not isinstance(k, int) or k < 1:
            raise SchemaError(f"{source}.links_per_level.{l}", "must be int >= 1")
        links[l] = k

    return ClusterSpec(
        n_nodes=n_nodes,
        devices_per_node=devices_per_node,
        device_type=req("device_type", str),
        device_memory=int(device_memory),
        bandwidth=bandwidth,
        alpha=alpha,
        links_per_level=links,
        sockets_per_node=sockets_per_node,
        socket_assignment=tuple(assignment),
    )


def load_cluster(path) -> ClusterSpec:
    with open(path) as f:
        try:
            obj = json.load(f)
        except json.JSONDecodeError as e:
            raise SchemaError(str(path), f"invalid JSON: {e}") from e
    return cluster_from_dict(obj, source=str(path))


def lowest_common_level(cluster: ClusterSpec, d1: int, d2: int) -> str:
    if cluster.node_of(d1) != cluster.node_of(d2):
        return LEVEL_NIC
    if cluster.sockets_per_node > 1 and cluster.socket_of(d1) != cluster.socket_of(d2):
        return LEVEL_INTER_SOCKET
    return LEVEL_INTRA_NODE


def crossed_links(cluster: ClusterSpec, group):
    """Link instances a group's traffic crosses, as (level, instance) pairs.

    Instances are node ids for NIC/inter-socket/fabric and device ids for
    ports.  A group spanning several nodes crosses each touched node's NIC
    and fabric; members on different sockets of one node cross that node's
    inter-socket link; every member crosses its own port.
    """
    group = tuple(sorted(set(group)))
    by_node = {}
    for d in group:
        by_node.setdefault(cluster.node_of(d), []).append(d)
    spans_nodes = len(by_node) > 1
    out = []
    for node, members in sorted(by_node.items()):
        if spans_nodes:
            out.append((LEVEL_NIC, node))
        if cluster.sockets_per_node > 1:
            sockets = {cluster.socket_of(d) for d in members}
            if len(sockets) > 1:
                out.append((LEVEL_INTER_SOCKET, node))
        if len(members) > 1 or spans_nodes:
            out.append((LEVEL_INTRA_NODE, node))
    for d in group:
        out.append((LEVEL_PORT, d))
    return out


def channels(cluster: ClusterSpec, group) -> ChannelSet:
    """Communication channels of a device group (hierarchy-bottleneck)."""
    group = tuple(sorted(set(group)))
    if len(group) < 2:
        raise ValueError("channel detection needs a group of >= 2 devices")
    crossed = {lvl for lvl, _ in crossed_links(cluster, group)}
    best_level = None
    best_bw = None
    for lvl in LEVELS:  # top-down; on ties the higher level wins
        if lvl not in crossed:
            continue
        bw = cluster.level_bandwidth(lvl)
        if best_bw is None or bw < best_bw:
            best_bw = bw
            best_level = lvl
    nlinks = cluster.links_per_level.get(best_level, 1)
    per_link = cluster.bandwidth[best_level]
    return ChannelSet(
        channels=tuple(Channel(best_level, per_link) for _ in range(nlinks)),
        bottleneck_level=best_level,
    )


def bottleneck_alpha(cluster: ClusterSpec, group) -> float:
    """Latency of the highest (slowest-hop) level the group crosses."""
    crossed = {lvl for lvl, _ in crossed_links(cluster, group)}
    for lvl in LEVELS:
        if lvl in crossed:
            return cluster.alpha[lvl]
    return cluster.alpha[LEVEL_PORT]


def shared_links(cluster: ClusterSpec, groups):
    """Per-level share counts for each group in ``groups``.

    Counts, for every link instance, how many of the given groups cross it;
    a group's share count at a level is the maximum over the instances it
    crosses there.  With a single group this is all-ones.
    """
    per_group_links = [crossed_links(cluster, g) for g in groups]
    counter = {}
    for links in per_group_links:
        for inst in links:
            counter[inst] = counter.get(inst, 0) + 1
    result = []
    for links in per_group_links:
        counts = {lvl: 1 for lvl in LEVELS}
        for lvl, inst in links:
            counts[lvl] = max(counts[lvl], counter[(lvl, inst)])
        result.append(counts)
    return result
