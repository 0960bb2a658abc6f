import numpy as np
import pytest

from fundmatch import numerics as nx
from fundmatch.errors import SchemaError
from fundmatch.fundgraph import (
    RELATIONS,
    EntityId,
    Relation,
    build_graph,
    conv_layer,
    encode_funds,
    init_graph_params,
    read_triples,
    write_triples,
)
from fundmatch.numerics import Tensor

F = lambda i: EntityId("fund", i)  # noqa: E731


def brute_force_layer(h, graph, w_self, w_rel):
    """Per-entity loop over the message-passing formula, no sparse operators."""
    entities = [EntityId(k, i) for k in graph.offsets for i in range(graph.counts[k])]
    out = np.zeros_like(h)
    for ent in entities:
        v = graph.global_index(ent)
        acc = h[v] @ w_self
        for rel in RELATIONS:
            nbrs = [graph.global_index(u) for u in graph.neighbors(ent, rel)]
            if nbrs:
                acc = acc + np.mean([h[u] for u in nbrs], axis=0) @ w_rel[rel]
        out[v] = np.maximum(acc, 0.0)
    return out


def toy_graph():
    # two funds sharing one manager
    return build_graph([(F(0), "manage", "manager:0"), (F(1), "manage", "manager:0")],
                       counts={"fund": 2, "manager": 1, "organization": 0, "stock": 0,
                               "stock_index": 0, "type": 0})


def toy_weights():
    w_self = np.array([[1.0, 0.5], [-0.5, 1.0]])
    w_rel = {r: np.zeros((2, 2)) for r in RELATIONS}
    w_rel[Relation.MANAGE] = np.array([[0.2, -1.0], [0.3, 0.7]])
    return w_self, w_rel


class TestBuildGraph:
    def test_empty(self):
        g = build_graph([], counts={"fund": 3})
        assert g.counts["fund"] == 3 and g.edges == [] and g.num_entities == 3

    def test_symmetry(self):
        g = build_graph([(F(0), Relation.MANAGE, EntityId("manager", 0))])
        assert g.neighbors(F(0), Relation.MANAGE) == [EntityId("manager", 0)]
        assert g.neighbors(EntityId("manager", 0), Relation.MANAGE) == [F(0)]

    def test_shared_type_two_hops(self):
        g = build_graph([(F(i), "belong_to_type", "type:0") for i in range(3)])
        t = EntityId("type", 0)
        for i in range(3):
            reach = {u for m in g.neighbors(F(i), Relation.BELONG_TO_TYPE)
                     for u in g.neighbors(m, Relation.BELONG_TO_TYPE)}
            assert reach == {F(0), F(1), F(2)}
        assert g.neighbors(t, Relation.BELONG_TO_TYPE) == [F(0), F(1), F(2)]

    def test_schema_violation(self):
        with pytest.raises(SchemaError, match="manager:0"):
            build_graph([("manager:0", "heavyweight", "stock:1")])

    def test_unknown_relation(self):
        with pytest.raises(SchemaError, match="unknown relation"):
            build_graph([("fund:0", "likes", "stock:1")])

    def test_dedup_and_reverse_orientation(self):
        g = build_graph([("fund:0", "track", "stock_index:2"), ("stock_index:2", "track", "fund:0")])
        assert len(g.edges) == 1
        assert g.counts["stock_index"] == 3

    def test_declared_count_exceeded(self):
        with pytest.raises(SchemaError):
            build_graph([("fund:5", "manage", "manager:0")], counts={"fund": 2})

    def test_file_round_trip(self, tmp_path):
        triples = [(F(0), Relation.HEAVYWEIGHT, EntityId("stock", 3)),
                   (F(2), Relation.BELONG_TO_ORG, EntityId("organization", 1))]
        path = tmp_path / "graph.tsv"
        write_triples(path, triples)
        assert read_triples(path) == triples
        path.write_text("# comment\nfund:0\tfoo\tstock:1\n", encoding="utf-8")
        with pytest.raises(SchemaError, match="unknown relation"):
            read_triples(path)


class TestConv:
    def test_isolated_identity(self):
        g = build_graph([], counts={"fund": 1})
        w_rel = {r: Tensor(np.ones((3, 3))) for r in RELATIONS}
        h = Tensor([[0.5, 0.0, 2.0]])
        out = conv_layer(h, g, Tensor(np.eye(3)), w_rel)
        np.testing.assert_array_equal(out.data, h.data)

    def test_mean_invariance(self):
        x = np.array([0.3, -0.7])
        w_self, w_rel = toy_weights()
        w_rel = {r: Tensor(w) for r, w in w_rel.items()}
        two = build_graph([(F(0), "manage", "manager:0"), (F(0), "manage", "manager:1")])
        one = build_graph([(F(0), "manage", "manager:0")])
        h_two = Tensor([[1.0, 1.0], x, x])
        h_one = Tensor([[1.0, 1.0], x])
        a = conv_layer(h_two, two, Tensor(w_self), w_rel).data[0]
        b = conv_layer(h_one, one, Tensor(w_self), w_rel).data[0]
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)

    def test_toy_matches_brute_force(self):
        g = toy_graph()
        w_self, w_rel = toy_weights()
        h = np.array([[1.0, 2.0], [-1.0, 0.5], [0.25, -0.75]])
        out = conv_layer(Tensor(h), g, Tensor(w_self), {r: Tensor(w) for r, w in w_rel.items()})
        np.testing.assert_allclose(out.data, brute_force_layer(h, g, w_self, w_rel), atol=1e-14)
        # fund 0 by hand: [1,2]W_self + [0.25,-0.75]W_manage
        by_hand = np.maximum(np.array([1 - 1, 0.5 + 2]) + np.array([0.05 - 0.225, -0.25 - 0.525]), 0)
        np.testing.assert_allclose(out.data[0], by_hand, atol=1e-14)

    def test_two_layers_compose(self):
        g = toy_graph()
        params = init_graph_params(g.num_entities, 2, 2, np.random.default_rng(3))
        out = encode_funds(g, params).data
        h = params.base.data
        for ws, wr in zip(params.self_weights, params.relation_weights):
            h = brute_force_layer(h, g, ws.data, {r: w.data for r, w in wr.items()})
        np.testing.assert_allclose(out, h, atol=1e-13)

    def test_single_layer_is_one_conv(self):
        g = toy_graph()
        params = init_graph_params(g.num_entities, 4, 1, np.random.default_rng(0))
        direct = conv_layer(params.base, g, params.self_weights[0], params.relation_weights[0])
        np.testing.assert_array_equal(encode_funds(g, params).data, direct.data)

    def test_no_edges_depends_only_on_own_row(self):
        g = build_graph([], counts={"fund": 3, "type": 2})
        params = init_graph_params(g.num_entities, 4, 2, np.random.default_rng(1))
        before = encode_funds(g, params).data[:3].copy()
        params.base.data[1] += 5.0
        after = encode_funds(g, params).data[:3]
        np.testing.assert_array_equal(before[[0, 2]], after[[0, 2]])

    def test_order_independence(self):
        rng = np.random.default_rng(7)
        triples = [(F(i), "belong_to_type", f"type:{i % 2}") for i in range(6)]
        triples += [(F(i), "manage", f"manager:{i % 3}") for i in range(6)]
        g1 = build_graph(triples)
        shuffled = [triples[i] for i in rng.permutation(len(triples))]
        g2 = build_graph(shuffled)
        params = init_graph_params(g1.num_entities, 4, 2, np.random.default_rng(0))
        np.testing.assert_array_equal(encode_funds(g1, params).data, encode_funds(g2, params).data)

    def test_gradients(self):
        g = toy_graph()
        params = init_graph_params(g.num_entities, 3, 2, np.random.default_rng(11))
        proj = np.random.default_rng(2).normal(size=(g.num_entities, 3))
        for name, t in params.tensors().items():
            err = nx.grad_check(lambda _: (encode_funds(g, params) * proj).sum(), t)
            assert err < 1e-4, name

    def test_pure_function(self):
        g = toy_graph()
        params = init_graph_params(g.num_entities, 4, 2, np.random.default_rng(5))
        assert encode_funds(g, params).data.tobytes() == encode_funds(g, params).data.tobytes()
