"""Cross-lingual mapping of scene-graph node embeddings.

Object nodes are mapped by fusing three levels of context:

  word level   -- nearest-neighbor retrieval in the shared embedding space
                  followed by an affine lift to model width;
  neighbor     -- mean of relu(W [e_i; e_k]) over directly connected object
                  nodes (a learned null neighbor for isolated nodes),
                  projected to the target space;
  whole graph  -- scaled-dot attention of the node over every object in the
                  graph, projected to the target space.

A three-layer gate MLP on the word-level embedding produces softmax weights
over the three levels.  Relation and attribute nodes are mapped at the word
level only.

Variants (ablations): "word" uses the word level alone, "word_sub"
concatenates word+neighbor levels through a linear fuse, "concat" fuses all
three levels through a linear layer, "gated" is the full weighted fusion.

Two call paths produce identical values: per-node functions (reference
surface, used by decoding and oracles) and a batched path that flattens all
nodes of a batch of graphs into matrix ops (used by training).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .embedspace import CrossLingualSpace, WordMapParams
from .errors import ContractError, VocabularyError
from .numerics import Tensor
from .params import Affine, Mlp, ParamGroup, param, vector_param
from .scenegraph import SceneGraph

VARIANTS = ("word", "word_sub", "concat", "gated")


class GraphMapParams(ParamGroup):
    def __init__(self, rng: np.random.Generator, d_pre: int, d_emb: int,
                 d_att: int, gate_hidden: int, gate_bias: float = 2.0,
                 context_scale: float = 0.1):
        self.word_affine = WordMapParams(rng, d_pre, d_emb)
        self.sub_conv = Affine(rng, 2 * d_pre, d_pre)
        self.sub_proj = Affine(rng, d_pre, d_emb)
        self.full_query = param(rng, d_pre, d_att)
        self.full_key = param(rng, d_pre, d_att)
        self.full_proj = Affine(rng, d_pre, d_emb)
        self.null_neighbor = vector_param(rng, d_pre)
        self.gate_mlp = Mlp(rng, [d_emb, gate_hidden, gate_hidden, 3])
        # word-dominant start: the context projections begin small and the
        # gate favors the word level, so the graph-level paths grow only
        # where their signal pays off
        self.sub_proj.w.data *= context_scale
        self.full_proj.w.data *= context_scale
        self.gate_mlp.layers[-1].w.data[:] = 0.0
        self.gate_mlp.layers[-1].b.data[:] = np.array([gate_bias, 0.0, 0.0])
        self.fuse2 = Affine(rng, 2 * d_emb, d_emb)
        self.fuse3 = Affine(rng, 3 * d_emb, d_emb)
        self.d_att = d_att


def source_embeddings(graph: SceneGraph, space: CrossLingualSpace
                      ) -> dict[str, np.ndarray]:
    """Raw source-space vectors for every node token of the graph."""
    out: dict[str, np.ndarray] = {}
    for node in graph.objects:
        out[node.token] = space.source.vector(node.token)
    for _, pred, _ in graph.relations:
        out[pred] = space.source.vector(pred)
    for _, attr in graph.attributes:
        out[attr] = space.source.vector(attr)
    return out


def _sconv(a: Tensor, b: Tensor, params: GraphMapParams) -> Tensor:
    return nm.relu(params.sub_conv(nm.concat([a, b], axis=-1)))


def map_word(token_or_vec, space: CrossLingualSpace, params: GraphMapParams
             ) -> Tensor:
    """Word-level mapping: hard retrieval plus the trainable affine lift."""
    if isinstance(token_or_vec, str):
        try:
            _, vec, _ = space.retrieve_cached(token_or_vec)
        except VocabularyError:
            raise
    else:
        from .embedspace import retrieve_nearest
        _, vec, _ = retrieve_nearest(token_or_vec, space.target)
    return params.word_affine(Tensor(vec))


def map_subgraph(node_idx: int, graph: SceneGraph,
                 embeddings: dict[str, np.ndarray],
                 params: GraphMapParams) -> Tensor:
    """Neighbor-context mapping of one object node."""
    if not 0 <= node_idx < graph.n_objects:
        raise ContractError(f"node index {node_idx} out of range")
    own = Tensor(embeddings[graph.objects[node_idx].token])
    neighbors = graph.neighbors(node_idx)
    if not neighbors:
        ctx = _sconv(own, params.null_neighbor, params)
    else:
        total = None
        for nb in neighbors:
            term = _sconv(own, Tensor(embeddings[graph.objects[nb].token]), params)
            total = term if total is None else total + term
        ctx = total * (1.0 / len(neighbors))
    return params.sub_proj(ctx)


def map_fullgraph(node_idx: int, graph: SceneGraph,
                  embeddings: dict[str, np.ndarray],
                  params: GraphMapParams) -> Tensor:
    """Whole-graph attention mapping of one object node."""
    if graph.n_objects == 0:
        raise ContractError("map_fullgraph: graph has no objects")
    if not 0 <= node_idx < graph.n_objects:
        raise ContractError(f"node index {node_idx} out of range")
    all_vecs = Tensor(np.stack([embeddings[n.token] for n in graph.objects]))
    own = Tensor(embeddings[graph.objects[node_idx].token])
    q = nm.matmul(own, params.full_query)
    keys = nm.matmul(all_vecs, params.full_key)
    scores = nm.matmul(keys, q) * (1.0 / np.sqrt(params.d_att))
    alpha = nm.softmax(scores)
    ctx = nm.matmul(alpha, all_vecs)
    return params.full_proj(ctx)


def self_gate(word_vec: Tensor, params: GraphMapParams) -> Tensor:
    """Softmax level-importance weights (word, neighbor, whole-graph)."""
    return nm.softmax(params.gate_mlp(word_vec))


def _pick(vec: Tensor, i: int) -> Tensor:
    onehot = np.zeros(3)
    onehot[i] = 1.0
    return nm.matmul(vec, Tensor(onehot))


def map_node(node_idx: int, graph: SceneGraph, embeddings: dict[str, np.ndarray],
             params: GraphMapParams, space: CrossLingualSpace,
             variant: str = "gated",
             gate_override: tuple[float, float, float] | None = None) -> Tensor:
    """Map one object node into the target embedding space."""
    if variant not in VARIANTS:
        raise ContractError(f"unknown variant {variant!r}")
    token = graph.objects[node_idx].token
    word = map_word(token, space, params)
    if variant == "word":
        return word
    sub = map_subgraph(node_idx, graph, embeddings, params)
    if variant == "word_sub":
        return params.fuse2(nm.concat([word, sub], axis=-1))
    full = map_fullgraph(node_idx, graph, embeddings, params)
    if variant == "concat":
        return params.fuse3(nm.concat([word, sub, full], axis=-1))
    if gate_override is not None:
        gate = Tensor(np.asarray(gate_override, dtype=float))
    else:
        gate = self_gate(word, params)
    return (word * _pick(gate, 0) + sub * _pick(gate, 1) + full * _pick(gate, 2))


@dataclass
class GraphNodeEmbeddings:
    """Per-graph mapped node embeddings, aligned with the graph's lists."""
    objects: list[Tensor]
    relations: list[Tensor]
    attributes: list[Tensor]


def map_graph(graph: SceneGraph, space: CrossLingualSpace,
              params: GraphMapParams, variant: str = "gated",
              gate_override: tuple[float, float, float] | None = None
              ) -> GraphNodeEmbeddings:
    """Map every node of a source-language graph; no symbolic target graph
    is built, the result stays at the embedding level."""
    embeddings = source_embeddings(graph, space)
    objects = [map_node(i, graph, embeddings, params, space, variant, gate_override)
               for i in range(graph.n_objects)]
    relations = [map_word(pred, space, params) for _, pred, _ in graph.relations]
    attributes = [map_word(attr, space, params) for _, attr in graph.attributes]
    return GraphNodeEmbeddings(objects=objects, relations=relations,
                               attributes=attributes)


# -- batched path --------------------------------------------------------------

@dataclass
class BatchLayout:
    """Flat index bookkeeping for a batch of graphs.

    Object/relation/attribute rows of all graphs are concatenated; segments
    give each graph's [start, end) slice in the flat arrays.
    """
    graphs: list[SceneGraph]
    obj_tokens: list[str]
    rel_tokens: list[str]
    attr_tokens: list[str]
    obj_segments: list[tuple[int, int]]
    rel_segments: list[tuple[int, int]]
    attr_segments: list[tuple[int, int]]
    graph_of_obj: np.ndarray
    rel_sub: np.ndarray          # global object row of each relation's subject
    rel_obj: np.ndarray
    attr_obj: np.ndarray         # global object row of each attribute's owner

    @property
    def n_obj(self) -> int:
        return len(self.obj_tokens)


def build_layout(graphs: list[SceneGraph]) -> BatchLayout:
    obj_tokens, rel_tokens, attr_tokens = [], [], []
    obj_segments, rel_segments, attr_segments = [], [], []
    graph_of_obj, rel_sub, rel_obj, attr_obj = [], [], [], []
    for gi, g in enumerate(graphs):
        base = len(obj_tokens)
        obj_segments.append((base, base + g.n_objects))
        for node in g.objects:
            obj_tokens.append(node.token)
            graph_of_obj.append(gi)
        rel_segments.append((len(rel_tokens), len(rel_tokens) + len(g.relations)))
        for sub, pred, obj in g.relations:
            rel_tokens.append(pred)
            rel_sub.append(base + sub)
            rel_obj.append(base + obj)
        attr_segments.append((len(attr_tokens), len(attr_tokens) + len(g.attributes)))
        for idx, attr in g.attributes:
            attr_tokens.append(attr)
            attr_obj.append(base + idx)
    return BatchLayout(
        graphs=graphs, obj_tokens=obj_tokens, rel_tokens=rel_tokens,
        attr_tokens=attr_tokens, obj_segments=obj_segments,
        rel_segments=rel_segments, attr_segments=attr_segments,
        graph_of_obj=np.array(graph_of_obj, dtype=np.int64),
        rel_sub=np.array(rel_sub, dtype=np.int64),
        rel_obj=np.array(rel_obj, dtype=np.int64),
        attr_obj=np.array(attr_obj, dtype=np.int64))


@dataclass
class MappedNodes:
    """Flat node embeddings for a batch (either raw source or mapped)."""
    layout: BatchLayout
    obj: Tensor      # (N, d)
    rel: Tensor      # (R, d)
    attr: Tensor     # (A, d)


def constant_nodes(graphs: list[SceneGraph], space: CrossLingualSpace
                   ) -> MappedNodes:
    """Raw (frozen) source embeddings arranged in batch layout."""
    layout = build_layout(graphs)
    d = space.dim

    def stack(tokens):
        if not tokens:
            return Tensor(np.zeros((0, d)))
        return Tensor(np.stack([space.source.vector(t) for t in tokens]))

    return MappedNodes(layout=layout, obj=stack(layout.obj_tokens),
                       rel=stack(layout.rel_tokens),
                       attr=stack(layout.attr_tokens))


def _retrieved_matrix(tokens: list[str], space: CrossLingualSpace) -> np.ndarray:
    if not tokens:
        return np.zeros((0, space.dim))
    return np.stack([space.retrieve_cached(t)[1] for t in tokens])


def map_nodes_batch(graphs: list[SceneGraph], space: CrossLingualSpace,
                    params: GraphMapParams, variant: str = "gated",
                    gate_override: tuple[float, float, float] | None = None
                    ) -> MappedNodes:
    """Batched equivalent of ``map_graph`` over a list of graphs."""
    if variant not in VARIANTS:
        raise ContractError(f"unknown variant {variant!r}")
    layout = build_layout(graphs)
    d_pre = space.dim
    n = layout.n_obj

    word = params.word_affine(Tensor(_retrieved_matrix(layout.obj_tokens, space)))
    rel = params.word_affine(Tensor(_retrieved_matrix(layout.rel_tokens, space)))
    attr = params.word_affine(Tensor(_retrieved_matrix(layout.attr_tokens, space)))

    if variant == "word":
        return MappedNodes(layout=layout, obj=word, rel=rel, attr=attr)

    obj_src = (np.stack([space.source.vector(t) for t in layout.obj_tokens])
               if n else np.zeros((0, d_pre)))

    # neighbor level: one (own, neighbor) pair row per edge-neighbor, plus a
    # learned-null pair for isolated nodes; segment means via a constant matrix
    left_rows, right_rows, null_rows = [], [], []
    owners, weights = [], []
    for gi, g in enumerate(graphs):
        base = layout.obj_segments[gi][0]
        for i in range(g.n_objects):
            nbrs = g.neighbors(i)
            if nbrs:
                for nb in nbrs:
                    left_rows.append(obj_src[base + i])
                    right_rows.append(obj_src[base + nb])
                    null_rows.append(0.0)
                    owners.append(base + i)
                    weights.append(1.0 / len(nbrs))
            else:
                left_rows.append(obj_src[base + i])
                right_rows.append(np.zeros(d_pre))
                null_rows.append(1.0)
                owners.append(base + i)
                weights.append(1.0)
    n_pairs = len(left_rows)
    if n_pairs:
        left = Tensor(np.stack(left_rows))
        right_const = Tensor(np.stack(right_rows))
        null_sel = Tensor(np.array(null_rows).reshape(-1, 1))
        right = right_const + nm.matmul(null_sel,
                                        nm.reshape(params.null_neighbor, (1, d_pre)))
        pair_out = nm.relu(params.sub_conv(nm.concat([left, right], axis=-1)))
        pool = np.zeros((n, n_pairs))
        for row, (owner, w) in enumerate(zip(owners, weights)):
            pool[owner, row] = w
        sub = params.sub_proj(nm.matmul(Tensor(pool), pair_out))
    else:
        sub = params.sub_proj(Tensor(np.zeros((0, d_pre))))

    if variant == "word_sub":
        obj = params.fuse2(nm.concat([word, sub], axis=-1))
        return MappedNodes(layout=layout, obj=obj, rel=rel, attr=attr)

    # whole-graph level: per-node attention over the node's own graph
    k_max = max((g.n_objects for g in graphs), default=0)
    if n and k_max:
        queries = nm.matmul(Tensor(obj_src), params.full_query)       # (N, a)
        keys = nm.matmul(Tensor(obj_src), params.full_key)            # (N, a)
        pad_idx = np.full((len(graphs), k_max), n, dtype=np.int64)
        mask = np.zeros((len(graphs), k_max))
        for gi, (s, e) in enumerate(layout.obj_segments):
            count = e - s
            pad_idx[gi, :count] = np.arange(s, e)
            mask[gi, :count] = 1.0
        keys_ext = nm.concat([keys, Tensor(np.zeros((1, params.d_att)))], axis=0)
        keys_pad = nm.gather_rows(keys_ext, pad_idx)                  # (G, K, a)
        keys_node = nm.gather_rows(keys_pad, layout.graph_of_obj)     # (N, K, a)
        q3 = nm.reshape(queries, (n, params.d_att, 1))
        scores = nm.reshape(nm.matmul(keys_node, q3), (n, k_max))
        scores = scores * (1.0 / np.sqrt(params.d_att))
        neg = (mask[layout.graph_of_obj] - 1.0) * 1e9
        alpha = nm.softmax(scores + Tensor(neg))                      # (N, K)
        vals_pad = np.concatenate([obj_src, np.zeros((1, d_pre))])[pad_idx]
        vals_node = Tensor(vals_pad[layout.graph_of_obj])             # (N, K, d)
        ctx = nm.reshape(nm.matmul(nm.reshape(alpha, (n, 1, k_max)), vals_node),
                         (n, d_pre))
        full = params.full_proj(ctx)
    else:
        full = params.full_proj(Tensor(np.zeros((0, d_pre))))

    if variant == "concat":
        obj = params.fuse3(nm.concat([word, sub, full], axis=-1))
        return MappedNodes(layout=layout, obj=obj, rel=rel, attr=attr)

    if gate_override is not None:
        g0, g1, g2 = (float(x) for x in gate_override)
        obj = word * g0 + sub * g1 + full * g2
    else:
        gates = nm.softmax(params.gate_mlp(word))                     # (N, 3)
        parts = []
        for i, level in enumerate((word, sub, full)):
            sel = np.zeros(3)
            sel[i] = 1.0
            coef = nm.reshape(nm.matmul(gates, Tensor(sel)), (n, 1))
            parts.append(level * coef)
        obj = parts[0] + parts[1] + parts[2]
    return MappedNodes(layout=layout, obj=obj, rel=rel, attr=attr)
