import json

import pytest

from mpq.errors import (
    CycleDetected,
    DanglingEdge,
    EmptyGraph,
    GraphError,
    GroupTooLarge,
    IndexOutOfRange,
    MultipleSinks,
    SchemaError,
)
from mpq.fixtures import chain_graph, llama_graph
from mpq.graphir import (
    START,
    Bgemm,
    Linear,
    Opaque,
    build_graph,
    config_digits,
    config_format,
    config_index,
    graph_to_dict,
    groups_from_dict,
    groups_to_dict,
    longest_path_lengths,
    partition_regions,
    partition_sequential,
    to_dot,
)


def lin(i, name=None):
    return {"id": i, "name": name or f"l{i}", "kind": "linear", "in_features": 2, "out_features": 2}


def opq(i, tag="relu"):
    return {"id": i, "name": f"o{i}", "kind": "opaque", "tag": tag}


def names(g, groups):
    return [[g.name(v).split(".")[-1] for v in grp.layers] for grp in groups]


def test_vertex_kinds_validate():
    with pytest.raises(GraphError):
        Linear(0, 4)
    with pytest.raises(GraphError):
        Bgemm(0)
    assert Opaque("softmax").tag == "softmax"


def test_topo_and_longest_paths():
    g = build_graph({"vertices": [lin(0), lin(1), lin(2), lin(3)], "edges": [[0, 1], [0, 2], [1, 3], [2, 3], [0, 3]]})
    assert g.topo_order == (0, 1, 2, 3)
    assert longest_path_lengths(g) == {0: 1, 1: 2, 2: 2, 3: 3}
    assert g.successors(START) == (0,)
    assert g.sink == 3


@pytest.mark.parametrize(
    "spec, err",
    [
        ({"vertices": [], "edges": []}, EmptyGraph),
        ({"vertices": [lin(0), lin(1)], "edges": [[0, 1], [1, 0]]}, CycleDetected),
        ({"vertices": [lin(0), lin(1), lin(2)], "edges": [[0, 1], [0, 2]]}, MultipleSinks),
        ({"vertices": [lin(0), lin(1)], "edges": [[0, 5]]}, DanglingEdge),
    ],
)
def test_invalid_graphs(spec, err):
    with pytest.raises(err):
        build_graph(spec)


def test_cycle_is_graph_error():
    assert issubclass(CycleDetected, GraphError)


def test_declared_sink_must_match():
    with pytest.raises(GraphError):
        build_graph({"vertices": [lin(0), lin(1)], "edges": [[0, 1]], "sink": 0})


def test_schema_version_mismatch():
    with pytest.raises(SchemaError):
        build_graph({"schema_version": 99, "vertices": [lin(0)], "edges": []})


def test_graph_round_trip():
    gd, _ = llama_graph(1, residual=True, bias=True)
    g = build_graph(gd)
    g2 = build_graph(json.loads(json.dumps(graph_to_dict(g))))
    assert g2.edges == g.edges and g2.topo_order == g.topo_order
    assert [g2.kind(v) for v in g2.vertex_ids] == [g.kind(v) for v in g.vertex_ids]


def test_chain_one_group_per_layer():
    g = chain_graph(["linear", "relu", "linear", "linear", "gelu", "linear"])
    groups = partition_sequential(g)
    assert [grp.layers for grp in groups] == [(0,), (2,), (3,), (5,)]


def test_diamond_single_group():
    vs = [lin(0), lin(1), lin(2), opq(3, "add"), lin(4)]
    g = build_graph({"vertices": vs, "edges": [[0, 1], [0, 2], [1, 3], [2, 3], [3, 4]]})
    assert [grp.layers for grp in partition_sequential(g)] == [(0,), (1, 2), (4,)]


def test_skip_edge_spans_region():
    # 0 -> 1 -> 2 -> 3 plus skip 0 -> 3: the chain 1, 2 cannot split off
    g = build_graph({"vertices": [lin(i) for i in range(4)], "edges": [[0, 1], [1, 2], [2, 3], [0, 3]]})
    assert [grp.layers for grp in partition_sequential(g)] == [(0,), (1, 2, 3)]


def test_multiple_sources():
    g = build_graph({"vertices": [lin(0), lin(1), opq(2, "add"), lin(3)], "edges": [[0, 2], [1, 2], [2, 3]]})
    assert [grp.layers for grp in partition_sequential(g)] == [(0, 1), (3,)]


def test_llama_block_groups(llama2):
    g, groups = llama2
    block = [["q_proj", "k_proj", "v_proj", "qk_matmul", "av_matmul"], ["o_proj"], ["gate_proj", "up_proj"], ["down_proj"]]
    assert names(g, groups) == block * 2 + [["lm_head"]]
    assert [grp.j for grp in groups] == list(range(9))


def test_llama_residual_merges():
    g = build_graph(llama_graph(1, residual=True)[0])
    got = names(g, partition_sequential(g))
    assert got == [
        ["q_proj", "k_proj", "v_proj", "qk_matmul", "av_matmul", "o_proj"],
        ["gate_proj", "up_proj", "down_proj"],
        ["lm_head"],
    ]


def test_regions_cover_every_vertex(llama2):
    g, _ = llama2
    regions = partition_regions(g)
    seen = [v for r in regions for v in r.members]
    assert sorted(seen) == g.vertex_ids
    assert regions[-1].exit == g.sink


def test_group_too_large():
    vs = [opq(0, "identity")] + [lin(i) for i in range(1, 5)] + [opq(5, "add"), lin(6)]
    edges = [[0, i] for i in range(1, 5)] + [[i, 5] for i in range(1, 5)] + [[5, 6]]
    g = build_graph({"vertices": vs, "edges": edges})
    with pytest.raises(GroupTooLarge):
        partition_sequential(g, max_group_size=3)
    assert len(partition_sequential(g, max_group_size=4)[0]) == 4


def test_config_encoding():
    # group of 3 layers, F = 2: p = 5 = 0b101 -> layers 0 and 2 quantized
    assert [config_format(3, 5, l, 2) for l in range(3)] == [1, 0, 1]
    assert config_digits(5, 3, 2) == (1, 0, 1)
    assert config_index((1, 0, 1), 2) == 5
    assert config_digits(0, 4, 3) == (0, 0, 0, 0)
    for p in range(27):
        assert config_index(config_digits(p, 3, 3), 3) == p
    with pytest.raises(IndexOutOfRange):
        config_format(3, 8, 0, 2)
    with pytest.raises(IndexOutOfRange):
        config_format(3, 1, 3, 2)


def test_groups_round_trip(llama2):
    g, groups = llama2
    d = json.loads(json.dumps(groups_to_dict(groups, g)))
    assert groups_from_dict(d) == groups
    d["schema_version"] = 0
    with pytest.raises(SchemaError):
        groups_from_dict(d)


def test_dot_mentions_every_vertex(llama2):
    g, groups = llama2
    dot = to_dot(g, groups)
    assert dot.startswith("digraph") and all(g.name(v) in dot for v in g.vertex_ids)
