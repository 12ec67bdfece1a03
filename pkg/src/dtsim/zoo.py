"""Synthetic model, strategy, cluster and cost-table builders.

Everything returns plain dicts in the on-disk JSON schemas, so fixtures can
be written to files for the CLI or fed straight to the ``*_from_dict``
loaders.  Sizes are chosen so the partition degrees used in tests divide
every extent.
"""

from __future__ import annotations


def _dim(label, extent):
    return {"label": label, "extent": extent}


def chain_mlp(n_layers=2, batch=8, width=64, dtype_bytes=4, with_relu=False):
    """Chain of square matmuls; widths alternate labels h/o so each layer
    reduces over the previous layer's output dim."""
    layers = []
    prev = "x"
    in_label = "h"
    for i in range(n_layers):
        out_label = "o" if in_label == "h" else "h"
        name = f"l{i}"
        tensors = []
        if i == 0:
            tensors.append(
                {
                    "name": "x",
                    "dims": [_dim("b", batch), _dim(in_label, width)],
                    "dtype_bytes": dtype_bytes,
                    "kind": "activation",
                }
            )
        tensors.append(
            {
                "name": f"w{i}",
                "dims": [_dim(out_label, width), _dim(in_label, width)],
                "dtype_bytes": dtype_bytes,
                "kind": "parameter",
            }
        )
        tensors.append(
            {
                "name": f"y{i}",
                "dims": [_dim("b", batch), _dim(out_label, width)],
                "dtype_bytes": dtype_bytes,
                "kind": "activation",
            }
        )
        ops = [
            {
                "name": "mm",
                "type": "matmul",
                "inputs": [prev, f"w{i}"],
                "outputs": [f"y{i}"],
                "cost_key": f"l{i}.mm",
            }
        ]
        prev = f"y{i}"
        if with_relu:
            tensors.append(
                {
                    "name": f"a{i}",
                    "dims": [_dim("b", batch), _dim(out_label, width)],
                    "dtype_bytes": dtype_bytes,
                    "kind": "activation",
                }
            )
            ops.append(
                {
                    "name": "act",
                    "type": "elementwise",
                    "inputs": [f"y{i}"],
                    "outputs": [f"a{i}"],
                    "cost_key": f"l{i}.act",
                }
            )
            prev = f"a{i}"
        layers.append(
            {"name": name, "module_path": [], "ops": ops, "tensors": tensors}
        )
        in_label = out_label
    return {"batch_size": batch, "layers": layers}


def fig3_model(batch=8, width=16):
    """Six-layer chain a-f; d, e, f nested under module S1."""
    model = chain_mlp(n_layers=6, batch=batch, width=width)
    names = ["a", "b", "c", "d", "e", "f"]
    for i, layer in enumerate(model["layers"]):
        layer["name"] = names[i]
        if i >= 3:
            layer["module_path"] = ["S1"]
    return model


def with_stages(model, n_stages):
    """Rewrite module paths so contiguous layer chunks form pipeline stages."""
    layers = model["layers"]
    per = (len(layers) + n_stages - 1) // n_stages
    for i, layer in enumerate(layers):
        layer["module_path"] = [f"st{min(i // per, n_stages - 1)}"]
    return model


def gpt2_like(n_blocks=2, batch=8, seq=32, hidden=64, dtype_bytes=2):
    """Transformer-shaped chain: per block qkv/proj matmuls and a 4x MLP,
    with elementwise glue.  Attention score math is folded into the
    projections; good enough for strategy comparison fixtures."""
    ffn = 4 * hidden
    layers = []
    prev = "x"
    for i in range(n_blocks):
        name = f"blk{i}"
        t = []
        if i == 0:
            t.append(
                {
                    "name": "x",
                    "dims": [_dim("b", batch), _dim("s", seq), _dim("h", hidden)],
                    "dtype_bytes": dtype_bytes,
                    "kind": "activation",
                }
            )
        t += [
            {
                "name": f"{name}.wqkv",
                "dims": [_dim("a", 3 * hidden), _dim("h", hidden)],
                "dtype_bytes": dtype_bytes,
                "kind": "parameter",
            },
            {
                "name": f"{name}.qkv",
                "dims": [_dim("b", batch), _dim("s", seq), _dim("a", 3 * hidden)],
                "dtype_bytes": dtype_bytes,
                "kind": "activation",
            },
            {
                "name": f"{name}.wproj",
                "dims": [_dim("h", hidden), _dim("a", 3 * hidden)],
                "dtype_bytes": dtype_bytes,
                "kind": "parameter",
            },
            {
                "name": f"{name}.attn",
                "dims": [_dim("b", batch), _dim("s", seq), _dim("h", hidden)],
                "dtype_bytes": dtype_bytes,
                "kind": "activation",
            },
            {
                "name": f"{name}.wup",
                "dims": [_dim("f", ffn), _dim("h", hidden)],
                "dtype_bytes": dtype_bytes,
                "kind": "parameter",
            },
            {
                "name": f"{name}.up",
                "dims": [_dim("b", batch), _dim("s", seq), _dim("f", ffn)],
                "dtype_bytes": dtype_bytes,
                "kind": "activation",
            },
            {
                "name": f"{name}.gelu",
                "dims": [_dim("b", batch), _dim("s", seq), _dim("f", ffn)],
                "dtype_bytes": dtype_bytes,
                "kind": "activation",
            },
            {
                "name": f"{name}.wdown",
                "dims": [_dim("h", hidden), _dim("f", ffn)],
                "dtype_bytes": dtype_bytes,
                "kind": "parameter",
            },
            {
                "name": f"{name}.out",
                "dims": [_dim("b", batch), _dim("s", seq), _dim("h", hidden)],
                "dtype_bytes": dtype_bytes,
                "kind": "activation",
            },
        ]
        ops = [
            {
                "name": "qkv",
                "type": "matmul",
                "inputs": [prev, f"{name}.wqkv"],
                "outputs": [f"{name}.qkv"],
                "cost_key": f"{name}.qkv",
            },
            {
                "name": "proj",
                "type": "matmul",
                "inputs": [f"{name}.qkv", f"{name}.wproj"],
                "outputs": [f"{name}.attn"],
                "cost_key": f"{name}.proj",
            },
            {
                "name": "up",
                "type": "matmul",
                "inputs": [f"{name}.attn", f"{name}.wup"],
                "outputs": [f"{name}.up"],
                "cost_key": f"{name}.up",
            },
            {
                "name": "gelu",
                "type": "elementwise",
                "inputs": [f"{name}.up"],
                "outputs": [f"{name}.gelu"],
                "cost_key": f"{name}.gelu",
            },
            {
                "name": "down",
                "type": "matmul",
                "inputs": [f"{name}.gelu", f"{name}.wdown"],
                "outputs": [f"{name}.out"],
                "cost_key": f"{name}.down",
            },
        ]
        layers.append(
            {"name": name, "module_path": [], "ops": ops, "tensors": t}
        )
        prev = f"{name}.out"
    return {"batch_size": batch, "layers": layers}


def vgg19_like(batch=64, dtype_bytes=4):
    """VGG19-shaped chain: 16 conv layers (im2col dims) + 3 fc matmuls.
    Channel labels alternate h/o so every layer contracts its input dim."""
    conv_plan = [
        (64, 1024), (64, 1024),
        (128, 256), (128, 256),
        (256, 64), (256, 64), (256, 64), (256, 64),
        (512, 16), (512, 16), (512, 16), (512, 16),
        (512, 4), (512, 4), (512, 4), (512, 4),
    ]
    fc_plan = [2048, 512, 128]
    layers = []
    prev = "x"
    in_label, in_width = "h", 16  # stand-in for 3*k*k im2col channels
    in_spatial = 1024
    spatial_label = "s0"
    n_spatial = 0
    for i, (out_ch, spatial) in enumerate(conv_plan):
        out_label = "o" if in_label == "h" else "h"
        name = f"conv{i}"
        tensors = []
        if i == 0:
            tensors.append(
                {
                    "name": "x",
                    "dims": [_dim("b", batch), _dim(spatial_label, in_spatial), _dim(in_label, in_width)],
                    "dtype_bytes": dtype_bytes,
                    "kind": "activation",
                }
            )
        generates = []
        out_spatial_label = spatial_label
        if spatial != in_spatial:
            # pooled conv: new spatial resolution gets its own dim label
            n_spatial += 1
            out_spatial_label = f"s{n_spatial}"
            generates.append(out_spatial_label)
        tensors += [
            {
                "name": f"{name}.w",
                "dims": [_dim(out_label, out_ch), _dim(in_label, in_width)],
                "dtype_bytes": dtype_bytes,
                "kind": "parameter",
            },
            {
                "name": f"{name}.y",
                "dims": [_dim("b", batch), _dim(out_spatial_label, spatial), _dim(out_label, out_ch)],
                "dtype_bytes": dtype_bytes,
                "kind": "activation",
            },
        ]
        op = {
            "name": "conv",
            "type": "conv",
            "inputs": [prev, f"{name}.w"],
            "outputs": [f"{name}.y"],
            "cost_key": name,
        }
        if generates:
            op["generates_dims"] = generates
        layers.append(
            {"name": name, "module_path": [], "ops": [op], "tensors": tensors}
        )
        prev = f"{name}.y"
        in_label, in_width = out_label, out_ch
        in_spatial = spatial
        spatial_label = out_spatial_label
    # fold the final 4-cell spatial into the fc width via the first fc
    in_width = in_width * 4
    for j, out_width in enumerate(fc_plan):
        out_label = "o" if in_label == "h" else "h"
        name = f"fc{j}"
        # fc0 contracts both the remaining spatial cells and the channels
        w_in = _dim(in_label, in_width // 4 if j == 0 else in_width)
        layers.append(
            {
                "name": name,
                "module_path": [],
                "ops": [
                    {
                        "name": "mm",
                        "type": "matmul",
                        "inputs": [prev, f"{name}.w"],
                        "outputs": [f"{name}.y"],
                        "cost_key": name,
                    }
                ],
                "tensors": [
                    {
                        "name": f"{name}.w",
                        "dims": [_dim(out_label, out_width), w_in],
                        "dtype_bytes": dtype_bytes,
                        "kind": "parameter",
                    },
                    {
                        "name": f"{name}.y",
                        "dims": [_dim("b", batch), _dim(out_label, out_width)],
                        "dtype_bytes": dtype_bytes,
                        "kind": "activation",
                    },
                ],
            }
        )
        prev = f"{name}.y"
        in_label, in_width = out_label, out_width
    return {"batch_size": batch, "layers": layers}


# -- strategies -------------------------------------------------------------


def dp_strategy(ndev, n_micro=1, max_ongoing=None, recompute=False, devices=None):
    """Plain data parallelism: batch split over ``ndev``, params replicated."""
    devices = devices if devices is not None else list(range(ndev))
    singles = [[d] for d in devices]
    return {
        "nodes": [
            {
                "path": "root",
                "schedule": {
                    "n_micro_batch": n_micro,
                    "max_ongoing_micro_batch": max_ongoing or n_micro,
                    "recomputation": recompute,
                },
                "ops": {"*": {"partition": {"b": ndev}, "map": singles}},
                "tensors": {"*": {"partition": {"b": ndev}, "map": singles}},
            }
        ]
    }


def zero_strategy(model, ndev, n_micro=1, max_ongoing=None, recompute=False):
    """Data parallelism plus ZeRO-style first-dim sharding of parameters,
    gradients and optimizer states across the replica group."""
    strat = dp_strategy(ndev, n_micro, max_ongoing, recompute)
    singles = [[d] for d in range(ndev)]
    tensors = {}
    for layer in model["layers"]:
        for t in layer.get("tensors", []):
            if t["kind"] != "parameter":
                continue
            first = t["dims"][0]["label"]
            cfg = {"partition": {first: ndev}, "map": singles}
            tensors[t["name"]] = cfg
            tensors[t["name"] + ".grad"] = cfg
            tensors[t["name"] + ".optstate"] = cfg
    nodes = strat["nodes"]
    for name, cfg in tensors.items():
        nodes.append({"path": "root", "tensors": {name: cfg}})
    # merge per-tensor entries into one node entry per path
    merged = {"path": "root", "tensors": {}}
    out = []
    for nd in nodes:
        if nd.get("tensors") and "schedule" not in nd and "ops" not in nd:
            merged["tensors"].update(nd["tensors"])
        else:
            out.append(nd)
    if merged["tensors"]:
        out.append(merged)
    return {"nodes": out}


def megatron_strategy(model, mp, dp=1, n_micro=1, max_ongoing=None):
    """Tensor model parallelism for gpt2_like blocks: qkv/up partition the
    output channel, proj/down partition the reduction dim (partial outputs
    all-reduced), optionally combined with data parallelism."""
    ndev = mp * dp
    groups_dp_mp = [[r * mp + c] for r in range(dp) for c in range(mp)]
    ops = {}
    for layer in model["layers"]:
        name = layer["name"]
        for op in layer["ops"]:
            oid = f"{name}.{op['name']}"
            if op["name"] in ("qkv", "up", "proj", "down"):
                label = {"qkv": "a", "proj": "a", "up": "f", "down": "f"}[
                    op["name"]
                ]
            else:  # gelu stays sharded on the ffn dim, Megatron style
                label = "f"
            part = {"b": dp, label: mp} if dp > 1 else {label: mp}
            ops[oid] = {"partition": part, "map": groups_dp_mp}
    return {
        "nodes": [
            {
                "path": "root",
                "schedule": {
                    "n_micro_batch": n_micro,
                    "max_ongoing_micro_batch": max_ongoing or n_micro,
                },
            },
            *[
                {"path": "root", "ops": {oid: cfg}}
                for oid, cfg in sorted(ops.items())
            ],
        ]
    }


def pipeline_strategy(model, n_stages, devs_per_stage, n_micro, max_ongoing=None, dp=1, recompute=False):
    """Stage the model (contiguous chunks must already be module-staged via
    ``with_stages``) and run each stage data-parallel on its device block."""
    nodes = [
        {
            "path": "root",
            "schedule": {
                "n_micro_batch": n_micro,
                "max_ongoing_micro_batch": max_ongoing or n_micro,
                "recomputation": recompute,
            },
        }
    ]
    for s in range(n_stages):
        base = s * devs_per_stage
        devs = list(range(base, base + devs_per_stage))
        if dp > 1:
            singles = [[d] for d in devs]
            cfg = {"partition": {"b": dp}, "map": singles}
        else:
            cfg = {"partition": {}, "map": [devs] if len(devs) > 1 else [[devs[0]]]}
            if len(devs) == 1:
                cfg = {"partition": {}, "map": [[devs[0]]]}
        nodes.append(
            {
                "path": f"root/st{s}",
                "ops": {"*": cfg},
                "tensors": {"*": cfg},
            }
        )
    return {"nodes": nodes}


# -- clusters and cost tables ------------------------------------------------


def single_node_cluster(ndev=8, device_type="V100", mem_gb=16, link="nvlink", bw=300e9, alpha=1e-6, sockets=1, inter_bw=None):
    spec = {
        "n_nodes": 1,
        "devices_per_node": ndev,
        "device_type": device_type,
        "device_memory": int(mem_gb * 1e9),
        "intra_node_link": {"class": link, "bandwidth": bw, "alpha": alpha},
    }
    if sockets > 1:
        spec["sockets_per_node"] = sockets
        spec["inter_socket_link"] = {"bandwidth": inter_bw or bw / 2, "alpha": 2e-6}
    return spec


def multi_node_cluster(n_nodes=4, per_node=8, device_type="V100", mem_gb=16, nic_gbps=100, link="nvlink", bw=300e9):
    return {
        "n_nodes": n_nodes,
        "devices_per_node": per_node,
        "device_type": device_type,
        "device_memory": int(mem_gb * 1e9),
        "intra_node_link": {"class": link, "bandwidth": bw, "alpha": 1e-6},
        "nic": {"bandwidth": nic_gbps * 1e9 / 8, "alpha": 5e-6},
    }


def hc1_like():
    """Single node, 8 devices on PCIe, two CPU sockets."""
    return single_node_cluster(
        ndev=8,
        device_type="TitanXp",
        mem_gb=12,
        link="pcie",
        bw=16e9,
        sockets=2,
        inter_bw=10e9,
    )


def hc2_like():
    """Four nodes of 8 NVLink devices with 100 Gbps interconnect."""
    return multi_node_cluster(n_nodes=4, per_node=8, nic_gbps=100)


def throughput_table(device_type="V100", peak_tflops=10.0):
    return [{"device_type": device_type, "peak_tflops": peak_tflops}]
