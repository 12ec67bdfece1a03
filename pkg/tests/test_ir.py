import pytest

from dtsim import zoo
from dtsim.errors import SchemaError
from dtsim.ir import derive_backward, model_from_dict, validate_graph


def linear_layer_model():
    return {
        "batch_size": 8,
        "layers": [
            {
                "name": "lin",
                "module_path": [],
                "tensors": [
                    {"name": "x", "dims": [{"label": "b", "extent": 8}, {"label": "s", "extent": 4}, {"label": "h", "extent": 16}], "dtype_bytes": 4, "kind": "activation"},
                    {"name": "w", "dims": [{"label": "o", "extent": 32}, {"label": "h", "extent": 16}], "dtype_bytes": 4, "kind": "parameter"},
                    {"name": "y", "dims": [{"label": "b", "extent": 8}, {"label": "s", "extent": 4}, {"label": "o", "extent": 32}], "dtype_bytes": 4, "kind": "activation"},
                ],
                "ops": [{"name": "mm", "type": "matmul", "inputs": ["x", "w"], "outputs": ["y"], "cost_key": "lin.mm"}],
            }
        ],
    }


def test_six_layer_chain_loads():
    g = model_from_dict(zoo.fig3_model())
    assert len(g.layers) == 6
    order = g.topo_ops(phases=("forward",))
    assert order == [f"{n}.mm" for n in ("a", "b", "c", "d", "e", "f")]


def test_empty_model_rejected():
    with pytest.raises(SchemaError, match="empty model"):
        model_from_dict({"batch_size": 4, "layers": []})


def test_linear_parallelizable_and_reduction_dims():
    g = model_from_dict(linear_layer_model())
    op = g.operators["lin.mm"]
    assert set(op.parallelizable_dims) == {"b", "s", "h", "o"}
    assert op.reduction_dims(g) == ("h",)


def test_unknown_op_type_and_dangling_reference():
    m = linear_layer_model()
    m["layers"][0]["ops"][0]["type"] = "fft"
    with pytest.raises(SchemaError, match="unknown operator type"):
        model_from_dict(m)
    m = linear_layer_model()
    m["layers"][0]["ops"][0]["inputs"] = ["nope", "w"]
    with pytest.raises(SchemaError, match="dangling tensor reference 'nope'"):
        model_from_dict(m)


def test_derive_backward_single_linear():
    g = derive_backward(model_from_dict(linear_layer_model()))
    kinds = {o.id: o.phase for o in g.operators.values()}
    assert kinds == {
        "lin.mm": "forward",
        "lin.mm.gi": "backward",
        "lin.mm.gw": "backward",
        "optim.w": "optimizer",
    }
    assert "w.grad" in g.tensors and "w.optstate" in g.tensors
    # default optimizer state multiplier is 2x parameter bytes
    assert g.tensors["w.optstate"].nbytes == 2 * g.tensors["w"].nbytes


def test_backward_no_params_means_no_optimizer_step():
    m = {
        "batch_size": 4,
        "layers": [
            {
                "name": "act",
                "module_path": [],
                "tensors": [
                    {"name": "x", "dims": [{"label": "b", "extent": 4}], "dtype_bytes": 4, "kind": "activation"},
                    {"name": "y", "dims": [{"label": "b", "extent": 4}], "dtype_bytes": 4, "kind": "activation"},
                ],
                "ops": [{"name": "relu", "type": "elementwise", "inputs": ["x"], "outputs": ["y"], "cost_key": "relu"}],
            }
        ],
    }
    g = derive_backward(model_from_dict(m))
    assert "act.relu.gi" in g.operators
    assert "act.relu.gw" not in g.operators
    assert not [o for o in g.operators.values() if o.phase == "optimizer"]


def test_two_layer_backward_reverses_forward_edges():
    g = derive_backward(model_from_dict(zoo.chain_mlp(n_layers=2)))
    # forward l0 -> l1 via y0; backward l1.gi writes y0.grad read by l0 ops
    gi = g.operators["l1.mm.gi"]
    assert "y0.grad" in gi.outputs
    assert "y0.grad" in g.operators["l0.mm.gi"].inputs
    assert "y0.grad" in g.operators["l0.mm.gw"].inputs


def test_derive_backward_idempotent(two_layer_model):
    again = derive_backward(two_layer_model)
    assert again.signature() == two_layer_model.signature()


def test_parallelizable_dims_equal_label_union(two_layer_model):
    g = two_layer_model
    for op in g.operators.values():
        labels = set()
        for tid in op.inputs + op.outputs:
            labels.update(g.tensors[tid].labels)
        assert set(op.dims) == labels


def test_total_bytes_counts_each_tensor_once(two_layer_model):
    total = two_layer_model.total_bytes()
    assert total == sum(t.nbytes for t in two_layer_model.tensors.values())
    by_hand = 0
    for layer in two_layer_model.layers.values():
        for tid in layer.tensors:
            by_hand += two_layer_model.tensors[tid].nbytes
    assert total == by_hand


def test_validate_graph_clean_and_dangling(two_layer_model):
    assert validate_graph(two_layer_model) == []
    two_layer_model.tensors["y0"].consumers.append("ghost.op")
    diags = validate_graph(two_layer_model)
    assert any("dangling consumer" in d for d in diags)


def test_validate_output_dim_not_in_inputs():
    m = linear_layer_model()
    # output gains a dim 'z' that appears nowhere in the inputs
    m["layers"][0]["tensors"][2]["dims"].append({"label": "z", "extent": 2})
    g = model_from_dict(m)
    diags = validate_graph(g)
    assert any("output dim 'z'" in d for d in diags)
    # declaring it silences the diagnostic
    m["layers"][0]["ops"][0]["generates_dims"] = ["z"]
    assert validate_graph(model_from_dict(m)) == []


def test_exclude_dims_shrinks_parallelizable_set():
    m = linear_layer_model()
    m["layers"][0]["ops"][0]["exclude_dims"] = ["s"]
    g = model_from_dict(m)
    assert "s" not in g.operators["lin.mm"].parallelizable_dims


def test_batch_dim_extent_must_match_batch_size():
    m = linear_layer_model()
    m["layers"][0]["tensors"][0]["dims"][0]["extent"] = 6
    with pytest.raises(SchemaError, match="batch"):
        model_from_dict(m)
