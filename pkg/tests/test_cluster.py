import pytest

from dtsim import zoo
from dtsim.cluster import (
    bottleneck_alpha,
    channels,
    cluster_from_dict,
    lowest_common_level,
    shared_links,
)
from dtsim.errors import SchemaError


@pytest.fixture
def hc1():
    return cluster_from_dict(zoo.hc1_like())


@pytest.fixture
def hc2():
    return cluster_from_dict(zoo.hc2_like())


def test_load_hc1_hc2(hc1, hc2):
    assert hc1.n_devices == 8 and hc1.sockets_per_node == 2
    assert hc2.n_devices == 32
    assert hc2.bandwidth["nic"] == 12.5e9


def test_zero_nic_with_multiple_nodes_rejected():
    spec = zoo.multi_node_cluster(n_nodes=2)
    spec["nic"]["bandwidth"] = 0
    with pytest.raises(SchemaError, match="nic"):
        cluster_from_dict(spec)


def test_lowest_common_level(hc1, hc2):
    assert lowest_common_level(hc2, 0, 8) == "nic"
    assert lowest_common_level(hc2, 0, 1) == "intra_node"
    assert lowest_common_level(hc1, 0, 4) == "inter_socket"  # sockets 0-3 / 4-7
    assert lowest_common_level(hc1, 0, 3) == "intra_node"
    # symmetry
    assert lowest_common_level(hc2, 8, 0) == lowest_common_level(hc2, 0, 8)


def test_channels_same_node_pair(hc2):
    cs = channels(hc2, (0, 1))
    assert cs.aggregate == 300e9
    assert cs.bottleneck_level == "intra_node"


def test_channels_two_nodes_nic_bottleneck(hc2):
    cs = channels(hc2, (0, 8))
    assert cs.aggregate == 12.5e9
    assert cs.bottleneck_level == "nic"


def test_channels_pcie_node():
    single_socket = cluster_from_dict(
        zoo.single_node_cluster(ndev=8, link="pcie", bw=16e9)
    )
    cs = channels(single_socket, (0, 2, 4, 6))
    assert cs.aggregate == 16e9
    assert cs.bottleneck_level == "intra_node"


def test_channels_singleton_rejected(hc2):
    with pytest.raises(ValueError):
        channels(hc2, (3,))


def test_channels_monotone_under_extension(hc2):
    inner = channels(hc2, (0, 1)).aggregate
    wider = channels(hc2, (0, 1, 8)).aggregate
    assert wider <= inner


def test_shared_links_four_groups_one_socket_link(hc1):
    groups = [(0, 4), (1, 5), (2, 6), (3, 7)]
    counts = shared_links(hc1, groups)
    assert [c["inter_socket"] for c in counts] == [4, 4, 4, 4]


def test_shared_links_single_group_all_ones(hc2):
    (counts,) = shared_links(hc2, [(0, 9)])
    assert all(v == 1 for v in counts.values())


def test_shared_links_disjoint_nodes(hc2):
    counts = shared_links(hc2, [(0, 1), (8, 9)])
    assert [c["intra_node"] for c in counts] == [1, 1]


def test_bottleneck_alpha_is_highest_crossed_level(hc2):
    assert bottleneck_alpha(hc2, (0, 8)) == hc2.alpha["nic"]
    assert bottleneck_alpha(hc2, (0, 1)) == hc2.alpha["intra_node"]


def test_links_per_level_multiplicity():
    spec = zoo.multi_node_cluster(n_nodes=2)
    spec["links_per_level"] = {"nic": 2}
    cl = cluster_from_dict(spec)
    cs = channels(cl, (0, 8))
    assert len(cs.channels) == 2
    assert cs.aggregate == 25e9
