import numpy as np
import pytest

from xlingcap import numerics as nm
from xlingcap.embedspace import CrossLingualSpace, EmbeddingTable
from xlingcap.errors import ContractError
from xlingcap.graphmap import (GraphMapParams, map_fullgraph, map_graph,
                               map_node, map_nodes_batch, map_subgraph,
                               map_word, self_gate, source_embeddings)
from xlingcap.numerics import Tensor
from xlingcap.scenegraph import ObjectNode, SceneGraph

D_PRE, D_EMB = 6, 10


@pytest.fixture
def space():
    rng = np.random.default_rng(2)
    words = ["bank", "river", "money", "mill", "boat", "coin", "near", "by",
             "old"]
    src = {w: rng.normal(size=D_PRE) for w in words}
    tgt = {}
    for w, v in src.items():
        jit = v + 0.02 * rng.normal(size=D_PRE)
        tgt[w.upper()] = jit / np.linalg.norm(jit)
    return CrossLingualSpace(EmbeddingTable(src), EmbeddingTable(tgt))


@pytest.fixture
def params():
    return GraphMapParams(np.random.default_rng(7), D_PRE, D_EMB,
                          d_att=D_PRE, gate_hidden=8)


def graph_of(tokens, relations=()):
    objects = [ObjectNode(token=t, id=i) for i, t in enumerate(tokens)]
    return SceneGraph(objects=objects, relations=list(relations))


class TestSubgraph:
    def test_isolated_node_uses_learned_null(self, space, params):
        g = graph_of(["bank"])
        emb = source_embeddings(g, space)
        out = map_subgraph(0, g, emb, params)
        own = Tensor(emb["bank"])
        expected = params.sub_proj(
            nm.relu(params.sub_conv(nm.concat([own, params.null_neighbor]))))
        np.testing.assert_allclose(out.data, expected.data, rtol=1e-6)

    def test_single_neighbor_is_single_term(self, space, params):
        g = graph_of(["bank", "river"], [(0, "near", 1)])
        emb = source_embeddings(g, space)
        out = map_subgraph(0, g, emb, params)
        pair = nm.concat([Tensor(emb["bank"]), Tensor(emb["river"])])
        expected = params.sub_proj(nm.relu(params.sub_conv(pair)))
        np.testing.assert_allclose(out.data, expected.data, rtol=1e-6)

    def test_three_neighbors_match_explicit_loop(self, space, params):
        g = graph_of(["bank", "river", "boat", "mill"],
                     [(0, "near", 1), (0, "near", 2), (3, "by", 0)])
        emb = source_embeddings(g, space)
        out = map_subgraph(0, g, emb, params)
        acc = np.zeros(D_PRE, dtype=np.float32)
        w, b = params.sub_conv.w.data, params.sub_conv.b.data
        for nb in ("river", "boat", "mill"):
            pre = np.concatenate([emb["bank"], emb[nb]]).astype(np.float32) @ w + b
            acc += np.maximum(pre, 0)
        expected = (acc / 3) @ params.sub_proj.w.data + params.sub_proj.b.data
        np.testing.assert_allclose(out.data, expected, rtol=1e-4, atol=1e-6)

    def test_neighbor_order_invariance(self, space, params):
        g1 = graph_of(["bank", "river", "boat"], [(0, "near", 1), (0, "by", 2)])
        g2 = graph_of(["bank", "river", "boat"], [(0, "by", 2), (0, "near", 1)])
        emb = source_embeddings(g1, space)
        a = map_subgraph(0, g1, emb, params)
        b = map_subgraph(0, g2, emb, params)
        np.testing.assert_allclose(a.data, b.data, rtol=1e-6)


class TestFullgraph:
    def test_single_object_context_is_own_embedding(self, space, params):
        g = graph_of(["bank"])
        emb = source_embeddings(g, space)
        out = map_fullgraph(0, g, emb, params)
        expected = params.full_proj(Tensor(emb["bank"]))
        np.testing.assert_allclose(out.data, expected.data, rtol=1e-6)

    def test_zero_query_weights_give_uniform_attention(self, space, params):
        params.full_query.data[:] = 0.0
        g = graph_of(["bank", "river", "boat"], [(0, "near", 1)])
        emb = source_embeddings(g, space)
        out = map_fullgraph(0, g, emb, params)
        mean = np.mean([emb[t] for t in ("bank", "river", "boat")], axis=0)
        expected = params.full_proj(Tensor(mean))
        np.testing.assert_allclose(out.data, expected.data, rtol=1e-5, atol=1e-6)

    def test_four_objects_match_softmax_sum_oracle(self, space, params):
        tokens = ["bank", "river", "boat", "mill"]
        g = graph_of(tokens, [(0, "near", 1)])
        emb = source_embeddings(g, space)
        out = map_fullgraph(2, g, emb, params)
        e = np.stack([emb[t] for t in tokens])
        q = emb["boat"] @ params.full_query.data
        scores = (e @ params.full_key.data) @ q / np.sqrt(D_PRE)
        alpha = np.exp(scores - scores.max())
        alpha /= alpha.sum()
        expected = (alpha @ e) @ params.full_proj.w.data + params.full_proj.b.data
        np.testing.assert_allclose(out.data, expected, rtol=1e-4, atol=1e-6)

    def test_object_permutation_invariance(self, space):
        with nm.precision(64):
            params = GraphMapParams(np.random.default_rng(7), D_PRE, D_EMB,
                                    d_att=D_PRE, gate_hidden=8)
            g1 = graph_of(["bank", "river", "boat"], [(0, "near", 1)])
            g2 = graph_of(["boat", "bank", "river"], [(1, "near", 2)])
            emb = source_embeddings(g1, space)
            a = map_fullgraph(0, g1, emb, params)   # "bank" in g1
            b = map_fullgraph(1, g2, emb, params)   # "bank" in g2
            np.testing.assert_allclose(a.data, b.data, rtol=1e-10)

    def test_empty_graph_rejected(self, space, params):
        g = graph_of([])
        with pytest.raises(ContractError):
            map_fullgraph(0, g, {}, params)


class TestSelfGate:
    def test_uniform_logits_give_uniform_gate(self, params):
        for layer in params.gate_mlp.layers:
            layer.w.data[:] = 0.0
            layer.b.data[:] = 0.0
        out = self_gate(Tensor(np.ones(D_EMB)), params)
        np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-7)

    def test_fresh_params_favor_word_level(self, params):
        # init: softmax(2, 0, 0)
        out = self_gate(Tensor(np.ones(D_EMB)), params)
        e2 = np.exp(2.0)
        np.testing.assert_allclose(out.data, [e2 / (e2 + 2), 1 / (e2 + 2),
                                              1 / (e2 + 2)], atol=1e-6)

    def test_peaked_logits(self, params):
        for layer in params.gate_mlp.layers:
            layer.w.data[:] = 0.0
            layer.b.data[:] = 0.0
        params.gate_mlp.layers[-1].b.data[:] = np.array([10.0, 0.0, 0.0])
        out = self_gate(Tensor(np.zeros(D_EMB)), params)
        assert out.data[0] == pytest.approx(0.99991, abs=1e-5)

    def test_weights_sum_to_one(self, params):
        rng = np.random.default_rng(1)
        for layer in params.gate_mlp.layers:   # make the gate non-trivial
            layer.w.data[:] = rng.normal(size=layer.w.shape).astype(
                layer.w.data.dtype)
        for _ in range(1000):
            out = self_gate(Tensor(rng.normal(size=D_EMB)), params)
            assert abs(float(out.data.sum()) - 1.0) < 1e-6
            assert np.all(out.data > 0)


class TestMapNode:
    def test_gate_pinned_to_word_level(self, space, params):
        g = graph_of(["bank", "river"], [(0, "near", 1)])
        emb = source_embeddings(g, space)
        out = map_node(0, g, emb, params, space, gate_override=(1.0, 0.0, 0.0))
        expected = map_word("bank", space, params)
        np.testing.assert_allclose(out.data, expected.data, rtol=1e-6)

    def test_gate_pinned_to_subgraph_level(self, space, params):
        g = graph_of(["bank", "river"], [(0, "near", 1)])
        emb = source_embeddings(g, space)
        out = map_node(0, g, emb, params, space, gate_override=(0.0, 1.0, 0.0))
        expected = map_subgraph(0, g, emb, params)
        np.testing.assert_allclose(out.data, expected.data, rtol=1e-6)

    def test_random_gate_matches_component_combination(self, space, params):
        g = graph_of(["bank", "river", "boat"], [(0, "near", 1), (2, "by", 0)])
        emb = source_embeddings(g, space)
        gate = (0.2, 0.5, 0.3)
        out = map_node(0, g, emb, params, space, gate_override=gate)
        w = map_word("bank", space, params).data
        s = map_subgraph(0, g, emb, params).data
        f = map_fullgraph(0, g, emb, params).data
        np.testing.assert_allclose(out.data, 0.2 * w + 0.5 * s + 0.3 * f,
                                   rtol=1e-5, atol=1e-6)


class TestMapGraph:
    def test_single_object_graph(self, space, params):
        g = graph_of(["bank"])
        mapped = map_graph(g, space, params)
        assert len(mapped.objects) == 1
        assert mapped.relations == [] and mapped.attributes == []

    def test_triplet_structure(self, space, params):
        g = graph_of(["bank", "river"], [(0, "near", 1)])
        mapped = map_graph(g, space, params)
        assert len(mapped.objects) == 2 and len(mapped.relations) == 1
        emb = source_embeddings(g, space)
        np.testing.assert_allclose(
            mapped.objects[0].data,
            map_node(0, g, emb, params, space).data, rtol=1e-6)
        np.testing.assert_allclose(
            mapped.relations[0].data, map_word("near", space, params).data,
            rtol=1e-6)

    def test_homonym_neighbors_give_distinct_context_outputs(self, space, params):
        g_river = graph_of(["bank", "river"], [(0, "near", 1)])
        g_money = graph_of(["bank", "money"], [(0, "near", 1)])
        context_a = map_node(0, g_river, source_embeddings(g_river, space),
                             params, space, variant="gated")
        context_b = map_node(0, g_money, source_embeddings(g_money, space),
                             params, space, variant="gated")
        word_a = map_node(0, g_river, source_embeddings(g_river, space),
                          params, space, variant="word")
        word_b = map_node(0, g_money, source_embeddings(g_money, space),
                          params, space, variant="word")
        assert np.linalg.norm(context_a.data - context_b.data) > 0
        np.testing.assert_array_equal(word_a.data, word_b.data)


class TestBatchedEquivalence:
    @pytest.mark.parametrize("variant", ["word", "word_sub", "concat", "gated"])
    def test_batched_matches_per_node(self, space, params, variant):
        rng = np.random.default_rng(4)
        for layer in params.gate_mlp.layers:
            layer.w.data[:] = 0.3 * rng.normal(size=layer.w.shape).astype(
                layer.w.data.dtype)
        graphs = [
            graph_of(["bank"]),
            graph_of(["bank", "river"], [(0, "near", 1)]),
            graph_of(["boat", "mill", "coin"], [(0, "by", 1), (2, "near", 0)]),
        ]
        graphs[1].attributes.append((0, "old"))
        batched = map_nodes_batch(graphs, space, params, variant)
        row = 0
        rel_row = 0
        attr_row = 0
        for g in graphs:
            per = map_graph(g, space, params, variant)
            for i in range(g.n_objects):
                np.testing.assert_allclose(batched.obj.data[row],
                                           per.objects[i].data,
                                           rtol=1e-4, atol=1e-5)
                row += 1
            for j in range(len(g.relations)):
                np.testing.assert_allclose(batched.rel.data[rel_row],
                                           per.relations[j].data,
                                           rtol=1e-4, atol=1e-5)
                rel_row += 1
            for k in range(len(g.attributes)):
                np.testing.assert_allclose(batched.attr.data[attr_row],
                                           per.attributes[k].data,
                                           rtol=1e-4, atol=1e-5)
                attr_row += 1


class TestGradientFlow:
    def test_all_params_receive_gradients(self, space, params):
        # generic parameter point: exact zero-inits can coincidentally kill
        # individual gradients without any sub-module being structurally dead
        rng = np.random.default_rng(3)
        for _, tensor in params.named_tensors():
            tensor.data = tensor.data + 0.3 * rng.normal(
                size=tensor.shape).astype(tensor.data.dtype)
        graphs = [
            graph_of(["bank"]),                                  # isolated
            graph_of(["bank", "river"], [(0, "near", 1)]),
        ]
        batched = map_nodes_batch(graphs, space, params, "gated")
        loss = nm.reduce_sum(nm.tanh(batched.obj))
        loss.backward()
        for name, tensor in params.named_tensors():
            if name.startswith(("fuse2", "fuse3")):
                continue        # unused by the gated variant
            assert tensor.grad is not None, name
            assert np.any(tensor.grad != 0), name
