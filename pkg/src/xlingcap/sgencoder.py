"""Scene-graph encoder: per-relation, per-object and per-attribute features.

Relation features pass the concatenated triplet through a role MLP.  Object
features average role-specific MLP outputs over every triplet the object
participates in (subject vs object roles use separate MLPs); relation-free
objects fall back to a triplet built from learned null embeddings.
Attribute features average an object/attribute MLP over the object's
attribute edges, one feature row per attributed object.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ContractError
from .graphmap import BatchLayout, GraphNodeEmbeddings, MappedNodes
from .numerics import Tensor
from .params import Affine, ParamGroup, vector_param
from .scenegraph import SceneGraph


class EncoderParams(ParamGroup):
    def __init__(self, rng: np.random.Generator, d_in: int, d_emb: int):
        self.g_r = Affine(rng, 3 * d_in, d_emb)
        self.g_s = Affine(rng, 3 * d_in, d_emb)
        self.g_o = Affine(rng, 3 * d_in, d_emb)
        self.g_a = Affine(rng, 2 * d_in, d_emb)
        self.null_rel = vector_param(rng, d_in)
        self.null_obj = vector_param(rng, d_in)


@dataclass
class EncodedGraph:
    """Feature sets for one graph: |f_o| = objects, |f_r| = relations,
    |f_a| = attributed objects (owners aligned with ``attr_owners``)."""
    f_o: list[Tensor]
    f_r: list[Tensor]
    f_a: list[Tensor]
    attr_owners: list[int]


def encode(graph: SceneGraph, node_embeddings: GraphNodeEmbeddings,
           params: EncoderParams) -> EncodedGraph:
    objs = node_embeddings.objects
    rels = node_embeddings.relations
    attrs = node_embeddings.attributes
    if len(objs) != graph.n_objects or len(rels) != len(graph.relations) \
            or len(attrs) != len(graph.attributes):
        raise ContractError("encode: embeddings do not cover all nodes")

    def role(mlp: Affine, triplet: Tensor) -> Tensor:
        return nm.relu(mlp(triplet))

    f_r = []
    triplets = []
    for j, (sub, _, obj) in enumerate(graph.relations):
        trip = nm.concat([objs[sub], rels[j], objs[obj]], axis=-1)
        triplets.append(trip)
        f_r.append(role(params.g_r, trip))

    f_o = []
    for i in range(graph.n_objects):
        terms = []
        for j, (sub, _, obj) in enumerate(graph.relations):
            if sub == i:
                terms.append(role(params.g_s, triplets[j]))
            if obj == i:
                terms.append(role(params.g_o, triplets[j]))
        if terms:
            total = terms[0]
            for t in terms[1:]:
                total = total + t
            f_o.append(total * (1.0 / len(terms)))
        else:
            iso = nm.concat([objs[i], params.null_rel, params.null_obj], axis=-1)
            f_o.append(role(params.g_s, iso))

    f_a = []
    attr_owners = []
    by_owner: dict[int, list[int]] = {}
    for k, (idx, _) in enumerate(graph.attributes):
        by_owner.setdefault(idx, []).append(k)
    for idx in sorted(by_owner):
        rows = by_owner[idx]
        total = None
        for k in rows:
            pair = nm.concat([objs[idx], attrs[k]], axis=-1)
            term = role(params.g_a, pair)
            total = term if total is None else total + term
        f_a.append(total * (1.0 / len(rows)))
        attr_owners.append(idx)
    return EncodedGraph(f_o=f_o, f_r=f_r, f_a=f_a, attr_owners=attr_owners)


@dataclass
class EncodedBatch:
    """Flat feature rows for a batch plus per-graph segments.

    ``fa_segments`` indexes rows of ``f_a`` (one per attributed object).
    """
    layout: BatchLayout
    f_o: Tensor
    f_r: Tensor
    f_a: Tensor
    fa_segments: list[tuple[int, int]]
    fa_owners: np.ndarray


def encode_batch(mapped: MappedNodes, params: EncoderParams) -> EncodedBatch:
    """Batched ``encode`` over flat node embeddings."""
    layout = mapped.layout
    n = layout.n_obj
    n_rel = len(layout.rel_tokens)
    d_in = mapped.obj.shape[1] if n else params.null_rel.shape[0]
    d_emb = params.g_r.b.shape[0]

    if n_rel:
        trip = nm.concat([nm.gather_rows(mapped.obj, layout.rel_sub),
                          mapped.rel,
                          nm.gather_rows(mapped.obj, layout.rel_obj)], axis=-1)
        f_r = nm.relu(params.g_r(trip))
        gs = nm.relu(params.g_s(trip))
        go = nm.relu(params.g_o(trip))
    else:
        f_r = Tensor(np.zeros((0, d_emb)))
        gs = go = None

    degree = np.zeros(n)
    for j in range(n_rel):
        degree[layout.rel_sub[j]] += 1
        degree[layout.rel_obj[j]] += 1

    parts = []
    if n_rel:
        pool_s = np.zeros((n, n_rel))
        pool_o = np.zeros((n, n_rel))
        for j in range(n_rel):
            pool_s[layout.rel_sub[j], j] += 1.0 / degree[layout.rel_sub[j]]
            pool_o[layout.rel_obj[j], j] += 1.0 / degree[layout.rel_obj[j]]
        parts.append(nm.matmul(Tensor(pool_s), gs))
        parts.append(nm.matmul(Tensor(pool_o), go))

    iso = np.flatnonzero(degree == 0) if n else np.array([], dtype=np.int64)
    if iso.size:
        ones = Tensor(np.ones((iso.size, 1)))
        nulls = nm.concat(
            [nm.matmul(ones, nm.reshape(params.null_rel, (1, d_in))),
             nm.matmul(ones, nm.reshape(params.null_obj, (1, d_in)))], axis=-1)
        iso_in = nm.concat([nm.gather_rows(mapped.obj, iso), nulls], axis=-1)
        iso_out = nm.relu(params.g_s(iso_in))
        scatter = np.zeros((n, iso.size))
        for row, owner in enumerate(iso):
            scatter[owner, row] = 1.0
        parts.append(nm.matmul(Tensor(scatter), iso_out))

    if parts:
        f_o = parts[0]
        for p in parts[1:]:
            f_o = f_o + p
    else:
        f_o = Tensor(np.zeros((n, d_emb)))

    # attributes: group edges by owner object, one pooled row per owner
    fa_owners: list[int] = []
    fa_segments: list[tuple[int, int]] = []
    n_attr = len(layout.attr_tokens)
    if n_attr:
        pair = nm.concat([nm.gather_rows(mapped.obj, layout.attr_obj),
                          mapped.attr], axis=-1)
        ga = nm.relu(params.g_a(pair))
        owner_rows: dict[int, list[int]] = {}
        for k in range(n_attr):
            owner_rows.setdefault(int(layout.attr_obj[k]), []).append(k)
        for gi, (s, e) in enumerate(layout.obj_segments):
            start = len(fa_owners)
            for owner in range(s, e):
                if owner in owner_rows:
                    fa_owners.append(owner)
            fa_segments.append((start, len(fa_owners)))
        pool_a = np.zeros((len(fa_owners), n_attr))
        for row, owner in enumerate(fa_owners):
            for k in owner_rows[owner]:
                pool_a[row, k] = 1.0 / len(owner_rows[owner])
        f_a = nm.matmul(Tensor(pool_a), ga)
    else:
        f_a = Tensor(np.zeros((0, d_emb)))
        fa_segments = [(0, 0) for _ in layout.graphs]

    return EncodedBatch(layout=layout, f_o=f_o, f_r=f_r, f_a=f_a,
                        fa_segments=fa_segments,
                        fa_owners=np.array(fa_owners, dtype=np.int64))
