import pytest

from dtsim import zoo
from dtsim.cluster import cluster_from_dict
from dtsim.ir import derive_backward, model_from_dict
from dtsim.strategy import construct_tree, propagate, strategy_from_dict


@pytest.fixture
def two_layer_model():
    return derive_backward(model_from_dict(zoo.chain_mlp(n_layers=2, batch=8, width=64)))


@pytest.fixture
def small_cluster():
    return cluster_from_dict(zoo.single_node_cluster(ndev=4))


def build(model_dict, strategy_dict):
    """model dict + strategy dict -> (model, propagated tree)."""
    g = derive_backward(model_from_dict(model_dict))
    tree = construct_tree(g)
    strategy_from_dict(tree, strategy_dict)
    propagate(tree)
    return g, tree
