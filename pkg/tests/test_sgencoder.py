import numpy as np
import pytest

from xlingcap import numerics as nm
from xlingcap.errors import ContractError
from xlingcap.gradcheck import check_gradients
from xlingcap.graphmap import GraphNodeEmbeddings, MappedNodes, build_layout
from xlingcap.numerics import Tensor
from xlingcap.scenegraph import ObjectNode, SceneGraph
from xlingcap.sgencoder import EncoderParams, encode, encode_batch

D_IN, D_EMB = 5, 7


def graph_of(tokens, relations=(), attributes=()):
    objects = [ObjectNode(token=t, id=i) for i, t in enumerate(tokens)]
    return SceneGraph(objects=objects, relations=list(relations),
                      attributes=list(attributes))


def embeddings_for(graph, rng):
    return GraphNodeEmbeddings(
        objects=[Tensor(rng.normal(size=D_IN)) for _ in graph.objects],
        relations=[Tensor(rng.normal(size=D_IN)) for _ in graph.relations],
        attributes=[Tensor(rng.normal(size=D_IN)) for _ in graph.attributes])


@pytest.fixture
def params():
    return EncoderParams(np.random.default_rng(0), D_IN, D_EMB)


def _relu_affine(aff, x):
    return np.maximum(x @ aff.w.data + aff.b.data, 0)


class TestEncode:
    def test_isolated_object_uses_null_triplet(self, params):
        rng = np.random.default_rng(1)
        g = graph_of(["cat"])
        emb = embeddings_for(g, rng)
        enc = encode(g, emb, params)
        assert len(enc.f_o) == 1 and enc.f_r == [] and enc.f_a == []
        iso = np.concatenate([emb.objects[0].data, params.null_rel.data,
                              params.null_obj.data])
        np.testing.assert_allclose(enc.f_o[0].data,
                                   _relu_affine(params.g_s, iso),
                                   rtol=1e-5, atol=1e-6)

    def test_single_triplet_roles(self, params):
        rng = np.random.default_rng(2)
        g = graph_of(["cat", "dog"], [(0, "chases", 1)])
        emb = embeddings_for(g, rng)
        enc = encode(g, emb, params)
        assert len(enc.f_r) == 1
        trip = np.concatenate([emb.objects[0].data, emb.relations[0].data,
                               emb.objects[1].data])
        np.testing.assert_allclose(enc.f_r[0].data,
                                   _relu_affine(params.g_r, trip),
                                   rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(enc.f_o[0].data,
                                   _relu_affine(params.g_s, trip),
                                   rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(enc.f_o[1].data,
                                   _relu_affine(params.g_o, trip),
                                   rtol=1e-5, atol=1e-6)

    def test_object_in_three_triplets_mean_oracle(self, params):
        rng = np.random.default_rng(3)
        g = graph_of(["cat", "dog", "fish"],
                     [(0, "chases", 1), (0, "eats", 2), (1, "chases", 0)])
        emb = embeddings_for(g, rng)
        enc = encode(g, emb, params)
        trips = [np.concatenate([emb.objects[s].data, emb.relations[j].data,
                                 emb.objects[o].data])
                 for j, (s, _, o) in enumerate(g.relations)]
        expected = (_relu_affine(params.g_s, trips[0])
                    + _relu_affine(params.g_s, trips[1])
                    + _relu_affine(params.g_o, trips[2])) / 3
        np.testing.assert_allclose(enc.f_o[0].data, expected,
                                   rtol=1e-4, atol=1e-5)

    def test_attribute_features_per_attributed_object(self, params):
        rng = np.random.default_rng(4)
        g = graph_of(["cat", "dog"], [(0, "chases", 1)],
                     [(0, "red"), (0, "big")])
        emb = embeddings_for(g, rng)
        enc = encode(g, emb, params)
        assert len(enc.f_a) == 1 and enc.attr_owners == [0]
        pairs = [np.concatenate([emb.objects[0].data, emb.attributes[k].data])
                 for k in range(2)]
        expected = (_relu_affine(params.g_a, pairs[0])
                    + _relu_affine(params.g_a, pairs[1])) / 2
        np.testing.assert_allclose(enc.f_a[0].data, expected,
                                   rtol=1e-5, atol=1e-6)

    def test_counts_exact(self, params):
        rng = np.random.default_rng(5)
        g = graph_of(["a1", "b1", "c1"], [(0, "r", 1), (1, "r", 2)],
                     [(0, "x"), (2, "y"), (2, "z")])
        enc = encode(g, embeddings_for(g, rng), params)
        assert len(enc.f_o) == 3
        assert len(enc.f_r) == 2
        assert len(enc.f_a) == 2        # objects 0 and 2 carry attributes

    def test_relation_order_invariance(self, params):
        rng = np.random.default_rng(6)
        g1 = graph_of(["a1", "b1", "c1"], [(0, "r", 1), (2, "q", 0)])
        emb1 = embeddings_for(g1, rng)
        g2 = graph_of(["a1", "b1", "c1"], [(2, "q", 0), (0, "r", 1)])
        emb2 = GraphNodeEmbeddings(objects=emb1.objects,
                                   relations=emb1.relations[::-1],
                                   attributes=[])
        with nm.precision(64):
            params64 = EncoderParams(np.random.default_rng(0), D_IN, D_EMB)
            emb1_64 = GraphNodeEmbeddings(
                objects=[Tensor(t.data) for t in emb1.objects],
                relations=[Tensor(t.data) for t in emb1.relations],
                attributes=[])
            emb2_64 = GraphNodeEmbeddings(
                objects=emb1_64.objects,
                relations=emb1_64.relations[::-1],
                attributes=[])
            a = encode(g1, emb1_64, params64)
            b = encode(g2, emb2_64, params64)
            for fa, fb in zip(a.f_o, b.f_o):
                np.testing.assert_allclose(fa.data, fb.data, rtol=1e-10)

    def test_dangling_embeddings_rejected(self, params):
        rng = np.random.default_rng(7)
        g = graph_of(["a1", "b1"], [(0, "r", 1)])
        emb = embeddings_for(g, rng)
        emb.relations.clear()
        with pytest.raises(ContractError):
            encode(g, emb, params)


class TestGradient:
    def test_finite_difference_through_encode(self):
        rng = np.random.default_rng(8)
        with nm.precision(64):
            params = EncoderParams(rng, 3, 4)
            g = graph_of(["a1", "b1", "c1"], [(0, "r", 1)], [(2, "x")])
            emb = GraphNodeEmbeddings(
                objects=[Tensor(rng.normal(size=3), requires_grad=True)
                         for _ in range(3)],
                relations=[Tensor(rng.normal(size=3), requires_grad=True)],
                attributes=[Tensor(rng.normal(size=3), requires_grad=True)])
            readout = Tensor(rng.normal(size=4))

            def fn():
                enc = encode(g, emb, params)
                total = None
                for f in enc.f_o + enc.f_r + enc.f_a:
                    term = nm.reduce_sum(nm.tanh(f) * readout)
                    total = term if total is None else total + term
                return total

            checked = dict(params.named_tensors())
            checked.update({f"emb{i}": t for i, t in enumerate(emb.objects)})
            res = check_gradients(fn, checked)
            assert res.passed, res.max_rel_err


class TestBatchedEquivalence:
    def test_batch_matches_per_graph(self, params):
        rng = np.random.default_rng(9)
        graphs = [
            graph_of(["a1"]),
            graph_of(["a1", "b1"], [(0, "r", 1)], [(1, "x")]),
            graph_of(["a1", "b1", "c1"],
                     [(0, "r", 1), (2, "q", 0), (2, "q", 1)],
                     [(0, "x"), (0, "y"), (2, "z")]),
        ]
        embs = [embeddings_for(g, rng) for g in graphs]
        layout = build_layout(graphs)
        mapped = MappedNodes(
            layout=layout,
            obj=nm.concat([nm.reshape(t, (1, D_IN))
                           for e in embs for t in e.objects], axis=0),
            rel=nm.concat([nm.reshape(t, (1, D_IN))
                           for e in embs for t in e.relations], axis=0),
            attr=nm.concat([nm.reshape(t, (1, D_IN))
                            for e in embs for t in e.attributes], axis=0))
        batch = encode_batch(mapped, params)
        row = rel_row = fa_row = 0
        for g, emb in zip(graphs, embs):
            single = encode(g, emb, params)
            for f in single.f_o:
                np.testing.assert_allclose(batch.f_o.data[row], f.data,
                                           rtol=1e-4, atol=1e-5)
                row += 1
            for f in single.f_r:
                np.testing.assert_allclose(batch.f_r.data[rel_row], f.data,
                                           rtol=1e-4, atol=1e-5)
                rel_row += 1
            for f in single.f_a:
                np.testing.assert_allclose(batch.f_a.data[fa_row], f.data,
                                           rtol=1e-4, atol=1e-5)
                fa_row += 1
        assert row == batch.f_o.shape[0]
        assert rel_row == batch.f_r.shape[0]
        assert fa_row == batch.f_a.shape[0]
