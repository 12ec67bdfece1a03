import pytest

from conftest import build
from dtsim import zoo
from dtsim.cluster import cluster_from_dict
from dtsim.errors import StrategyError
from dtsim.ir import derive_backward, model_from_dict
from dtsim.strategy import (
    ParallelConfig,
    construct_tree,
    dev_group,
    dump_strategy,
    propagate,
    strategy_from_dict,
    validate_strategy,
)


def fig3_tree():
    g = derive_backward(model_from_dict(zoo.fig3_model()))
    return g, construct_tree(g)


def test_construct_tree_fig3_shape():
    _, tree = fig3_tree()
    root = tree.root
    assert [c.name for c in root.children] == ["a", "b", "c", "S1"]
    s1 = tree.resolve("root/S1")
    assert [c.name for c in s1.children] == ["d", "e", "f"]
    assert all(c.is_leaf for c in s1.children)


def test_construct_tree_flat_and_single():
    g = derive_backward(model_from_dict(zoo.chain_mlp(n_layers=3)))
    tree = construct_tree(g)
    assert len(tree.root.children) == 3
    assert all(c.is_leaf for c in tree.root.children)
    g1 = derive_backward(model_from_dict(zoo.chain_mlp(n_layers=1)))
    tree1 = construct_tree(g1)
    assert len(tree1.root.children) == 1 and tree1.root.children[0].is_leaf


def test_path_conflict_rejected():
    m = zoo.chain_mlp(n_layers=2)
    m["layers"][0]["name"] = "S1"
    m["layers"][1]["module_path"] = ["S1"]
    g = derive_backward(model_from_dict(m))
    with pytest.raises(StrategyError, match="both a layer and a module"):
        construct_tree(g)


def test_load_schedule_only_root():
    g, tree = fig3_tree()
    strategy_from_dict(
        tree,
        {"nodes": [{"path": "root", "schedule": {"n_micro_batch": 1}}]},
    )
    assert tree.root.schedule.explicit
    assert tree.resolve("root/S1").schedule is None


def test_load_partition_with_map_of_eight():
    g, tree = fig3_tree()
    strategy_from_dict(
        tree,
        {
            "nodes": [
                {"path": "root", "schedule": {"n_micro_batch": 1}},
                {
                    "path": "root/a",
                    "ops": {
                        "mm": {
                            "partition": {"b": 2, "h": 4},
                            "map": [[i] for i in range(8)],
                        }
                    },
                },
            ]
        },
    )
    cfg = tree.op_configs["a.mm"]
    assert cfg.nparts == 8 and len(cfg.map) == 8


def test_load_unknown_dim_rejected():
    g, tree = fig3_tree()
    with pytest.raises(StrategyError, match="dim 'q'.*operator 'a.mm'"):
        strategy_from_dict(
            tree,
            {
                "nodes": [
                    {
                        "path": "root/a",
                        "ops": {"mm": {"partition": {"q": 2}, "map": [[0], [1]]}},
                    }
                ]
            },
        )


def test_load_map_size_mismatch_rejected():
    g, tree = fig3_tree()
    with pytest.raises(StrategyError, match="map has 1 entries"):
        strategy_from_dict(
            tree,
            {
                "nodes": [
                    {"path": "root/a", "ops": {"mm": {"partition": {"b": 2}, "map": [[0]]}}}
                ]
            },
        )


def test_propagate_root_dp_wildcard():
    g, tree = build(zoo.chain_mlp(n_layers=2), zoo.dp_strategy(4))
    for oid, cfg in tree.op_configs.items():
        op = g.operators[oid]
        if "b" in op.dims:
            assert cfg.partition == {"b": 4}, oid
        else:
            assert cfg.partition == {} and cfg.map == ((0, 1, 2, 3),), oid
    for tid in ("w0", "w1"):
        assert tree.tensor_configs[tid].map == ((0, 1, 2, 3),)


def test_propagate_explicit_child_schedule_survives():
    g, tree = fig3_tree()
    strategy_from_dict(
        tree,
        {
            "nodes": [
                {"path": "root", "schedule": {"n_micro_batch": 4, "max_ongoing_micro_batch": 4}},
                {"path": "root/S1", "schedule": {"n_micro_batch": 2, "max_ongoing_micro_batch": 1}},
                {"path": "root", "ops": {"*": {"partition": {"b": 2}, "map": [[0], [1]]}},
                 "tensors": {"*": {"partition": {"b": 2}, "map": [[0], [1]]}}},
            ]
        },
    )
    propagate(tree)
    assert tree.resolve("root/S1").schedule.n_micro_batch == 2
    assert tree.resolve("root/a").schedule.n_micro_batch == 4


def test_propagate_idempotent_and_complete():
    g, tree = build(zoo.chain_mlp(n_layers=3), zoo.dp_strategy(2))
    before = {k: v.key() for k, v in tree.op_configs.items()}
    propagate(tree)
    assert before == {k: v.key() for k, v in tree.op_configs.items()}
    assert set(tree.op_configs) == set(g.operators)
    assert set(tree.tensor_configs) == set(g.tensors)


def test_propagate_underdetermined_reported():
    g = derive_backward(model_from_dict(zoo.chain_mlp(n_layers=2)))
    tree = construct_tree(g)
    strategy_from_dict(tree, {"nodes": [{"path": "root", "schedule": {"n_micro_batch": 1}}]})
    with pytest.raises(StrategyError, match="underdetermined"):
        propagate(tree)


def test_propagation_from_single_tensor_seed():
    # configuring only the input tensor x drives the whole forward chain
    g = derive_backward(model_from_dict(zoo.chain_mlp(n_layers=2)))
    tree = construct_tree(g)
    strategy_from_dict(
        tree,
        {
            "nodes": [
                {"path": "root", "schedule": {"n_micro_batch": 1}},
                {"path": "root/l0", "tensors": {"x": {"partition": {"b": 4}, "map": [[0], [1], [2], [3]]}}},
            ]
        },
    )
    propagate(tree)
    assert tree.op_configs["l0.mm"].partition == {"b": 4}
    assert tree.op_configs["l1.mm"].partition == {"b": 4}
    assert tree.tensor_configs["w1"].map == ((0, 1, 2, 3),)


def test_dev_group_union_and_monotonicity():
    g, tree = build(zoo.fig3_model(), zoo.dp_strategy(4))
    root_devs = dev_group(tree.root, tree)
    assert root_devs == (0, 1, 2, 3)
    s1 = dev_group(tree.resolve("root/S1"), tree)
    leaf = dev_group(tree.resolve("root/S1/d"), tree)
    assert set(leaf) <= set(s1) <= set(root_devs)


def test_dev_group_unconfigured_descendant():
    g = derive_backward(model_from_dict(zoo.chain_mlp(n_layers=1)))
    tree = construct_tree(g)
    with pytest.raises(StrategyError, match="unconfigured descendant"):
        dev_group(tree.root, tree)


def test_validate_strategy_clean_megatron():
    m = zoo.gpt2_like(n_blocks=1, batch=8, seq=16, hidden=32)
    g, tree = build(m, zoo.megatron_strategy(m, mp=4))
    cl = cluster_from_dict(zoo.single_node_cluster(ndev=4))
    assert validate_strategy(tree, cl) == []


def test_validate_strategy_diagnostics():
    g, tree = build(zoo.chain_mlp(n_layers=1, width=64), zoo.dp_strategy(2))
    # force a map/partition size mismatch post-load
    tree.op_configs["l0.mm"].map = (tree.op_configs["l0.mm"].map[0],)
    diags = validate_strategy(tree)
    assert any("map has 1 entries" in d for d in diags)


def test_validate_strategy_nondividing_degree():
    g = derive_backward(model_from_dict(zoo.chain_mlp(n_layers=1, width=8)))
    tree = construct_tree(g)
    strategy_from_dict(
        tree,
        {
            "nodes": [
                {"path": "root", "schedule": {"n_micro_batch": 1}},
                {"path": "root/l0", "ops": {"mm": {"partition": {"h": 3}, "map": [[0], [1], [2]]}},
                 "tensors": {"*": {"partition": {}, "map": [[0, 1, 2]]}}},
            ]
        },
    )
    propagate(tree)
    diags = validate_strategy(tree)
    assert any("degree 3 does not divide extent 8" in d for d in diags)


def test_dump_load_round_trip():
    g, tree = build(zoo.fig3_model(), zoo.dp_strategy(4, n_micro=2, max_ongoing=1))
    dumped = dump_strategy(tree)
    g2 = derive_backward(model_from_dict(zoo.fig3_model()))
    tree2 = construct_tree(g2)
    strategy_from_dict(tree2, dumped)
    propagate(tree2)
    assert {k: v.key() for k, v in tree.op_configs.items()} == {
        k: v.key() for k, v in tree2.op_configs.items()
    }
    assert {k: v.key() for k, v in tree.tensor_configs.items()} == {
        k: v.key() for k, v in tree2.tensor_configs.items()
    }
    assert dump_strategy(tree2) == dumped


def test_restrict_merges_devices():
    cfg = ParallelConfig({"b": 2, "h": 2}, ((0,), (1,), (2,), (3,)))
    r = cfg.restrict(["b"])
    assert r.partition == {"b": 2}
    assert r.map == ((0, 1), (2, 3))
    r2 = cfg.restrict([])
    assert r2.partition == {} and r2.map == ((0, 1, 2, 3),)
