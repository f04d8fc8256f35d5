"""Deterministic generator for the toy bilingual world.

A world consists of
  - source/target vocabularies and a toy grammar,
  - aligned embedding tables where every true translation pair is the
    cosine nearest neighbor of its source word,
  - translation rules, including context rules for homonym nouns whose
    correct target word depends on a co-occurring object in the graph,
  - a hidden affine distortion spec for image-modality features.

Corpus items are sampled from latent "scenes" (a handful of relation
clauses plus per-object attributes).  The primary sentence describes a
subset of the scene; paraphrases describe other subsets, so merging their
graphs recovers a richer graph than any single sentence provides.

Homonym scenes come in two patterns: the disambiguating context word is
either directly related to the homonym (visible to neighbor-level mapping)
or appears only in another clause (visible only to whole-graph mapping).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .config import DistortionSpec, WorldConfig
from .embedspace import CrossLingualSpace, EmbeddingTable
from .errors import ContractError, FormatError
from .scenegraph import ObjectNode, SceneGraph, ToyGrammar, deserialize, serialize

_POOL_SIZE = 3
_ATTR_RATE = 0.35
_SECOND_ATTR_RATE = 0.08
_LONE_NOUN_RATE = 0.08
_EMBED_JITTER = 0.03


@dataclass
class TranslationRules:
    """Word-for-word map plus per-homonym context rules.

    ``contexts[h][u] = t`` fires when context word ``u`` appears in the same
    graph as homonym ``h``; directly related objects take precedence, then
    the remaining objects in id order.  Without any context word the
    default (``word[h]``) applies.
    """
    word: dict[str, str]
    contexts: dict[str, dict[str, str]]
    pools: dict[str, tuple[list[str], list[str]]]

    def validate(self) -> None:
        for h, ctx in self.contexts.items():
            if h not in self.word:
                raise ContractError(f"context rule for unknown word {h!r}")
            if len(set(ctx.values())) < 2:
                raise ContractError(
                    f"homonym {h!r} needs >=2 context rules with distinct outputs")

    def translate_object(self, token: str, graph: SceneGraph, obj_idx: int) -> str:
        ctx = self.contexts.get(token)
        if ctx:
            for nb in graph.neighbors(obj_idx):
                nb_tok = graph.objects[nb].token
                if nb_tok in ctx:
                    return ctx[nb_tok]
            for node in graph.objects:
                if node.id != obj_idx and node.token in ctx:
                    return ctx[node.token]
        return self.word[token]

    def translate_tokens(self, tokens: list[str], graph: SceneGraph) -> list[str]:
        index = {node.token: node.id for node in graph.objects}
        out = []
        for tok in tokens:
            if tok in index:
                out.append(self.translate_object(tok, graph, index[tok]))
            else:
                out.append(self.word[tok])
        return out


@dataclass
class World:
    config: WorldConfig
    grammar: ToyGrammar
    nouns: list[str]
    verbs: list[str]
    attrs: list[str]
    homonyms: list[str]
    space: CrossLingualSpace
    rules: TranslationRules

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def source_vocab(self) -> list[str]:
        return sorted(self.nouns + self.verbs + self.attrs + ["and"])

    @property
    def target_vocab(self) -> list[str]:
        return sorted(set(self.rules.word.values())
                      | {t for ctx in self.rules.contexts.values() for t in ctx.values()})


# -- corpus containers -------------------------------------------------------

@dataclass
class CorpusItem:
    id: int
    source: list[str]
    target: list[str]
    graph: SceneGraph
    paraphrases: list[tuple[list[str], SceneGraph]] = field(default_factory=list)


@dataclass
class ParallelCorpus:
    items: list[CorpusItem]

    def __len__(self) -> int:
        return len(self.items)

    def graphs(self) -> list[SceneGraph]:
        return [item.graph for item in self.items]


@dataclass
class ImageBank:
    graphs: list[SceneGraph]                  # noisy, what training sees
    references: list[list[list[str]]]         # hidden target captions, eval only
    clean_graphs: list[SceneGraph]             # pre-noise, eval/test bookkeeping


# -- world construction ------------------------------------------------------

def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def generate_world(config: WorldConfig) -> World:
    """Build vocabularies, embeddings and rules; deterministic per seed."""
    config.validate()
    if config.homonym_count >= config.n_objects:
        raise ContractError("homonym_count must be < n_objects")
    rng = np.random.default_rng([config.seed, 11])

    nouns = [f"n{i:02d}" for i in range(config.n_objects)]
    verbs = [f"v{i:02d}" for i in range(config.n_relations)]
    attrs = [f"a{i:02d}" for i in range(config.n_attributes)]
    homonyms = nouns[:config.homonym_count]
    plain = nouns[config.homonym_count:]
    if homonyms and len(plain) < 2 * _POOL_SIZE:
        raise ContractError("not enough non-homonym nouns for context pools")

    word = {n: n.upper() for n in nouns}
    word.update({v: v.upper() for v in verbs})
    word.update({a: a.upper() for a in attrs})
    word["and"] = "and"

    contexts: dict[str, dict[str, str]] = {}
    pools: dict[str, tuple[list[str], list[str]]] = {}
    for h in homonyms:
        picked = list(rng.choice(plain, size=2 * _POOL_SIZE, replace=False))
        pool1, pool2 = picked[:_POOL_SIZE], picked[_POOL_SIZE:]
        primary, secondary = word[h], word[h] + "x"
        contexts[h] = {u: primary for u in pool1}
        contexts[h].update({u: secondary for u in pool2})
        pools[h] = (pool1, pool2)
    rules = TranslationRules(word=word, contexts=contexts, pools=pools)
    rules.validate()

    dim = config.embed_dim
    source_vecs = {tok: _unit(rng, dim) for tok in nouns + verbs + attrs + ["and"]}
    target_vecs: dict[str, np.ndarray] = {}
    for tok, vec in source_vecs.items():
        jittered = vec + _EMBED_JITTER * rng.standard_normal(dim)
        target_vecs[word[tok]] = jittered / np.linalg.norm(jittered)
    for h in homonyms:
        target_vecs[word[h] + "x"] = _unit(rng, dim)

    space = CrossLingualSpace(EmbeddingTable(source_vecs), EmbeddingTable(target_vecs))
    for tok in source_vecs:
        got, _, _ = space.retrieve_cached(tok)
        if got != word[tok]:
            raise ContractError(
                f"embedding construction failed: {tok!r} retrieves {got!r}")

    grammar = ToyGrammar(nouns=frozenset(nouns), verbs=frozenset(verbs),
                         attrs=frozenset(attrs))
    return World(config=config, grammar=grammar, nouns=nouns, verbs=verbs,
                 attrs=attrs, homonyms=homonyms, space=space, rules=rules)


# -- scene sampling ----------------------------------------------------------

@dataclass
class _Scene:
    clauses: list[tuple[str, str, str]]
    attrs: dict[str, list[str]]
    required: list[int]        # clause indices a sentence must include
    lone_nouns: list[str]      # candidates for degenerate one-noun sentences


def _fresh_noun(rng, candidates, used: set[str]) -> str:
    free = [n for n in candidates if n not in used]
    if not free:
        free = list(candidates)
    return str(rng.choice(free))


def _sample_scene(rng: np.random.Generator, world: World) -> _Scene:
    cfg = world.config
    plain = [n for n in world.nouns if n not in world.rules.contexts]
    clauses: list[tuple[str, str, str]] = []
    required: list[int] = []
    banned: set[str] = set()

    use_homonym = bool(world.homonyms) and rng.random() < cfg.homonym_scene_rate
    if use_homonym:
        h = str(rng.choice(world.homonyms))
        pool1, pool2 = world.rules.pools[h]
        sense_pool = pool1 if rng.random() < 0.5 else pool2
        u = str(rng.choice(sense_pool))
        banned = (set(pool1) | set(pool2)) - {u}
        allowed = [n for n in plain if n not in banned]
        if rng.random() >= cfg.homonym_cross_rate:
            verb = str(rng.choice(world.verbs))
            pair = (h, verb, u) if rng.random() < 0.5 else (u, verb, h)
            clauses.append(pair)
            required = [0]
        else:
            x = _fresh_noun(rng, allowed, {h, u})
            y = _fresh_noun(rng, allowed, {h, u, x})
            clauses.append((h, str(rng.choice(world.verbs)), x))
            clauses.append((y, str(rng.choice(world.verbs)), u))
            required = [0, 1]
        filler_nouns = [n for n in allowed if n != h]
    else:
        filler_nouns = plain

    n_clauses = int(rng.choice([2, 3, 4], p=[0.45, 0.35, 0.2]))
    n_clauses = max(n_clauses, len(clauses))
    seen = {(s, v, o) for s, v, o in clauses}
    attempts = 0
    while len(clauses) < n_clauses and attempts < 50:
        attempts += 1
        current = sorted({t for s, _, o in clauses for t in (s, o)})
        if current and rng.random() < 0.5:
            sub = str(rng.choice(current))
        else:
            sub = _fresh_noun(rng, filler_nouns, set(current))
        obj = _fresh_noun(rng, filler_nouns, {sub})
        if sub == obj:
            continue
        clause = (sub, str(rng.choice(world.verbs)), obj)
        if clause in seen:
            continue
        seen.add(clause)
        clauses.append(clause)

    # canonical clause order: sentences become a deterministic function of
    # the clause set, so order-invariant graph features can predict them
    order = sorted(range(len(clauses)), key=lambda i: clauses[i])
    clauses = [clauses[i] for i in order]
    required = sorted(order.index(i) for i in required)

    scene_nouns = sorted({t for s, _, o in clauses for t in (s, o)})
    attr_map: dict[str, list[str]] = {}
    for noun in scene_nouns:
        if rng.random() < _ATTR_RATE:
            chosen = [str(rng.choice(world.attrs))]
            if rng.random() < _SECOND_ATTR_RATE:
                extra = str(rng.choice(world.attrs))
                if extra != chosen[0]:
                    chosen.append(extra)
            attr_map[noun] = chosen
    return _Scene(clauses=clauses, attrs=attr_map, required=required,
                  lone_nouns=scene_nouns)


def render_description(clauses: list[tuple[str, str | None, str | None]],
                       attr_map: dict[str, list[str]],
                       language: str = "source",
                       modality: str = "sentence") -> tuple[list[str], SceneGraph]:
    """Emit tokens and the ground-truth graph for a list of clauses.

    Bookkeeping mirrors the parser: objects interned at first mention (with
    their attribute tokens rendered just before the noun), one relation per
    full clause.
    """
    tokens: list[str] = []
    objects: dict[str, int] = {}
    relations: list[tuple[int, str, int]] = []
    attributes: list[tuple[int, str]] = []

    def emit_noun(noun: str) -> int:
        if noun in objects:
            tokens.append(noun)
            return objects[noun]
        idx = len(objects)
        objects[noun] = idx
        for attr in attr_map.get(noun, []):
            tokens.append(attr)
        tokens.append(noun)
        for attr in attr_map.get(noun, []):
            attributes.append((idx, attr))
        return idx

    for i, (sub, verb, obj) in enumerate(clauses):
        if i > 0:
            tokens.append("and")
        sub_idx = emit_noun(sub)
        if verb is not None:
            tokens.append(verb)
            obj_idx = emit_noun(obj)
            relations.append((sub_idx, verb, obj_idx))

    nodes = [ObjectNode(token=tok, id=i) for tok, i in objects.items()]
    graph = SceneGraph(objects=nodes, relations=relations, attributes=attributes,
                       language=language, modality=modality)
    return tokens, graph


def _describe(rng: np.random.Generator, scene: _Scene, allow_lone: bool
              ) -> list[tuple[str, str | None, str | None]]:
    n = len(scene.clauses)
    if scene.required:
        chosen = set(scene.required)
        if rng.random() < 0.3 and n > len(chosen):
            rest = [i for i in range(n) if i not in chosen]
            chosen.add(int(rng.choice(rest)))
    elif allow_lone and rng.random() < _LONE_NOUN_RATE:
        return [(str(rng.choice(scene.lone_nouns)), None, None)]
    else:
        size = 1 if rng.random() < 0.6 else 2
        size = min(size, n)
        chosen = set(int(i) for i in rng.choice(n, size=size, replace=False))
    return [scene.clauses[i] for i in sorted(chosen)]


def _paraphrase(rng: np.random.Generator, scene: _Scene
                ) -> list[tuple[str, str, str]]:
    n = len(scene.clauses)
    size = int(rng.integers(1, min(3, n) + 1))
    chosen = sorted(int(i) for i in rng.choice(n, size=size, replace=False))
    return [scene.clauses[i] for i in chosen]


def generate_parallel_corpus(world: World, n: int, salt: int = 1) -> ParallelCorpus:
    """Sample ``n`` items: source sentence, rule-translated target sentence,
    source scene graph, and paraphrases sharing the underlying scene."""
    if n < 1:
        raise ContractError("corpus size must be >= 1")
    rng = np.random.default_rng([world.config.seed, 1000 + salt])
    items = []
    for i in range(n):
        scene = _sample_scene(rng, world)
        description = _describe(rng, scene, allow_lone=True)
        source, graph = render_description(description, scene.attrs)
        target = world.rules.translate_tokens(source, graph)
        paraphrases = []
        for _ in range(world.config.paraphrases_per_sentence):
            p_tokens, p_graph = render_description(_paraphrase(rng, scene), scene.attrs)
            paraphrases.append((p_tokens, p_graph))
        items.append(CorpusItem(id=i, source=source, target=target, graph=graph,
                                paraphrases=paraphrases))
    return ParallelCorpus(items=items)


def generate_image_graphs(world: World, n: int, salt: int = 2,
                          noise: tuple[float, float, float] | None = None
                          ) -> ImageBank:
    """Sample image scene graphs, corrupt them, keep hidden target captions.

    Corruption: each relation duplicated with prob ``duplicate_triplet_rate``,
    one spurious unconnected object per graph with prob
    ``spurious_object_rate``, each attribute dropped with prob
    ``attribute_drop_rate``.
    """
    if n < 1:
        raise ContractError("image bank size must be >= 1")
    cfg = world.config
    dup_rate, spur_rate, drop_rate = noise if noise is not None else (
        cfg.duplicate_triplet_rate, cfg.spurious_object_rate, cfg.attribute_drop_rate)
    for rate in (dup_rate, spur_rate, drop_rate):
        if not 0.0 <= rate <= 1.0:
            raise ContractError("noise rates must be in [0, 1]")
    pool_words = {w for p1, p2 in world.rules.pools.values() for w in p1 + p2}
    spurious_candidates = [w for w in world.nouns
                           if w not in world.rules.contexts and w not in pool_words]

    rng = np.random.default_rng([cfg.seed, 2000 + salt])
    graphs, references, clean_graphs = [], [], []
    for _ in range(n):
        scene = _sample_scene(rng, world)
        description = _describe(rng, scene, allow_lone=True)
        tokens, clean = render_description(description, scene.attrs,
                                           modality="image")
        refs = [world.rules.translate_tokens(tokens, clean)]
        for _ in range(cfg.paraphrases_per_sentence):
            p_tokens, p_graph = render_description(_paraphrase(rng, scene), scene.attrs)
            refs.append(world.rules.translate_tokens(p_tokens, p_graph))

        relations = []
        for rel in clean.relations:
            relations.append(rel)
            if rng.random() < dup_rate:
                relations.append(rel)
        objects = list(clean.objects)
        if rng.random() < spur_rate:
            present = {node.token for node in objects}
            free = [w for w in spurious_candidates if w not in present]
            if free:
                objects.append(ObjectNode(token=str(rng.choice(free)), id=len(objects)))
        attributes = [a for a in clean.attributes if rng.random() >= drop_rate]
        noisy = SceneGraph(objects=objects, relations=relations,
                           attributes=attributes, language="source",
                           modality="image")
        graphs.append(noisy)
        references.append(refs)
        clean_graphs.append(clean)
    return ImageBank(graphs=graphs, references=references, clean_graphs=clean_graphs)


# -- hidden modality distortion ----------------------------------------------

def materialize_distortion(spec: DistortionSpec, width: int, seed: int
                           ) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic affine warp (A, b) for a given feature width."""
    rng = np.random.default_rng([seed, 777])
    g = rng.standard_normal((width, width)) / np.sqrt(width)
    a = spec.scale * (np.eye(width) + spec.rotate * g)
    b = spec.shift * rng.standard_normal(width)
    return a, b


def apply_distortion(a: np.ndarray, b: np.ndarray, feats: np.ndarray) -> np.ndarray:
    """Row-wise x -> A x + b."""
    return feats @ a.T + b


# -- persistence ---------------------------------------------------------------

def save_world(directory, world: World) -> None:
    os.makedirs(directory, exist_ok=True)
    from .embedspace import save_text_embeddings
    save_text_embeddings(os.path.join(directory, "source_embeddings.txt"),
                         world.space.source)
    save_text_embeddings(os.path.join(directory, "target_embeddings.txt"),
                         world.space.target)
    import dataclasses as dc
    doc = {
        "config": dc.asdict(world.config),
        "nouns": world.nouns,
        "verbs": world.verbs,
        "attrs": world.attrs,
        "homonyms": world.homonyms,
        "rules": {
            "word": world.rules.word,
            "contexts": world.rules.contexts,
            "pools": {h: [p1, p2] for h, (p1, p2) in world.rules.pools.items()},
        },
        "embeddings": {"source": "source_embeddings.txt",
                       "target": "target_embeddings.txt"},
    }
    with open(os.path.join(directory, "world.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_world(directory) -> World:
    from .config import config_from_dict
    from .embedspace import load_text_embeddings
    path = os.path.join(directory, "world.json")
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    for key in ("config", "nouns", "verbs", "attrs", "homonyms", "rules",
                "embeddings"):
        if key not in doc:
            raise FormatError(f"{path}: missing key /{key}")
    cfg_data = {"world": doc["config"]}
    config = config_from_dict(cfg_data).world
    rules = TranslationRules(
        word=doc["rules"]["word"],
        contexts=doc["rules"]["contexts"],
        pools={h: (p[0], p[1]) for h, p in doc["rules"]["pools"].items()},
    )
    rules.validate()
    source = load_text_embeddings(
        os.path.join(directory, doc["embeddings"]["source"]), "source")
    target = load_text_embeddings(
        os.path.join(directory, doc["embeddings"]["target"]), "target")
    grammar = ToyGrammar(nouns=frozenset(doc["nouns"]),
                         verbs=frozenset(doc["verbs"]),
                         attrs=frozenset(doc["attrs"]))
    return World(config=config, grammar=grammar, nouns=doc["nouns"],
                 verbs=doc["verbs"], attrs=doc["attrs"],
                 homonyms=doc["homonyms"],
                 space=CrossLingualSpace(source, target), rules=rules)


def write_corpus(path, corpus: ParallelCorpus) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in corpus.items:
            doc = {
                "id": item.id,
                "source": item.source,
                "target": item.target,
                "graph": json.loads(serialize(item.graph)),
                "paraphrases": [
                    {"tokens": tokens, "graph": json.loads(serialize(graph))}
                    for tokens, graph in item.paraphrases
                ],
            }
            fh.write(json.dumps(doc, separators=(",", ":")) + "\n")


def read_corpus(path) -> ParallelCorpus:
    items = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                item = CorpusItem(
                    id=doc["id"],
                    source=doc["source"],
                    target=doc["target"],
                    graph=deserialize(json.dumps(doc["graph"])),
                    paraphrases=[(p["tokens"], deserialize(json.dumps(p["graph"])))
                                 for p in doc.get("paraphrases", [])],
                )
            except (KeyError, TypeError, json.JSONDecodeError) as err:
                raise FormatError(f"{path}: line {lineno}: {err}") from err
            items.append(item)
    return ParallelCorpus(items=items)


def write_image_bank(directory, bank: ImageBank) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "images.jsonl"), "w", encoding="utf-8") as fh:
        for g in bank.graphs:
            fh.write(serialize(g) + "\n")
    with open(os.path.join(directory, "references.jsonl"), "w",
              encoding="utf-8") as fh:
        for i, refs in enumerate(bank.references):
            fh.write(json.dumps({"id": i, "refs": refs},
                                separators=(",", ":")) + "\n")


def read_image_graphs(path) -> list[SceneGraph]:
    from .scenegraph import read_jsonl
    return read_jsonl(path)


def read_references(path) -> list[list[list[str]]]:
    refs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                refs.append(json.loads(line)["refs"])
    return refs
