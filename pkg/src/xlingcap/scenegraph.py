"""Scene-graph data model, toy-grammar parser, merging, stats, serialization.

A scene graph has three node kinds: objects, relations between object pairs,
and per-object attributes.  Graphs carry a language tag (source/target) and
a modality tag (sentence/image).

The on-disk schema, one JSON document per line in corpus files:

    {"language": ..., "modality": ...,
     "objects": [{"id": 0, "token": "cat"}, ...],
     "relations": [{"sub": 0, "pred": "chases", "obj": 1}, ...],
     "attributes": [{"obj": 0, "attr": "red"}, ...]}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import ContractError, FormatError, ParseError

LANGUAGES = ("source", "target")
MODALITIES = ("sentence", "image")


@dataclass(frozen=True)
class ObjectNode:
    token: str
    id: int


@dataclass
class SceneGraph:
    objects: list[ObjectNode] = field(default_factory=list)
    relations: list[tuple[int, str, int]] = field(default_factory=list)
    attributes: list[tuple[int, str]] = field(default_factory=list)
    language: str = "source"
    modality: str = "sentence"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.language not in LANGUAGES:
            raise ContractError(f"unknown language {self.language!r}")
        if self.modality not in MODALITIES:
            raise ContractError(f"unknown modality {self.modality!r}")
        n = len(self.objects)
        for i, node in enumerate(self.objects):
            if node.id != i:
                raise ContractError(f"object ids must be 0..{n - 1} in order")
        for sub, _, obj in self.relations:
            if not (0 <= sub < n and 0 <= obj < n):
                raise ContractError("relation endpoint index out of range")
            if sub == obj:
                raise ContractError("self-loop relation")
        for obj, _ in self.attributes:
            if not (0 <= obj < n):
                raise ContractError("attribute object index out of range")

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    def object_tokens(self) -> list[str]:
        return [node.token for node in self.objects]

    def triplets(self) -> list[tuple[str, str, str]]:
        """Recover the token triplet for every relation."""
        toks = self.object_tokens()
        return [(toks[s], pred, toks[o]) for s, pred, o in self.relations]

    def attribute_pairs(self) -> list[tuple[str, str]]:
        toks = self.object_tokens()
        return [(toks[i], attr) for i, attr in self.attributes]

    def neighbors(self, idx: int) -> list[int]:
        """Object indices directly connected to ``idx`` (either role)."""
        seen: list[int] = []
        for sub, _, obj in self.relations:
            other = None
            if sub == idx:
                other = obj
            elif obj == idx:
                other = sub
            if other is not None and other not in seen:
                seen.append(other)
        return seen

    def content_key(self):
        """Order-free identity: token sets of objects/relations/attributes."""
        return (frozenset(self.object_tokens()),
                frozenset(self.triplets()),
                frozenset(self.attribute_pairs()))


@dataclass(frozen=True)
class ToyGrammar:
    """Token classes of the toy language: nouns, verbs, attribute words."""
    nouns: frozenset[str]
    verbs: frozenset[str]
    attrs: frozenset[str]

    @property
    def vocabulary(self) -> frozenset[str]:
        return self.nouns | self.verbs | self.attrs | {"and"}


def parse_sentence(sentence: list[str] | str, grammar: ToyGrammar,
                   language: str = "source") -> SceneGraph:
    """Parse ``[attr]* noun [verb [attr]* noun]?`` clauses joined by "and".

    One object node per distinct noun token; one relation per verb clause;
    one attribute edge per modifier.  Deterministic.
    """
    tokens = sentence.split() if isinstance(sentence, str) else list(sentence)
    if not tokens:
        raise ParseError("empty sentence")
    for pos, tok in enumerate(tokens):
        if tok not in grammar.vocabulary:
            raise ParseError(f"token {tok!r} not in vocabulary", pos)

    objects: dict[str, int] = {}
    relations: list[tuple[int, str, int]] = []
    attributes: list[tuple[int, str]] = []

    def intern(noun: str) -> int:
        if noun not in objects:
            objects[noun] = len(objects)
        return objects[noun]

    pos = 0

    def read_noun_phrase() -> int:
        nonlocal pos
        pending: list[str] = []
        while pos < len(tokens) and tokens[pos] in grammar.attrs:
            pending.append(tokens[pos])
            pos += 1
        if pos >= len(tokens) or tokens[pos] not in grammar.nouns:
            raise ParseError("expected a noun", pos if pos < len(tokens) else len(tokens) - 1)
        idx = intern(tokens[pos])
        pos += 1
        for attr in pending:
            attributes.append((idx, attr))
        return idx

    while True:
        subject = read_noun_phrase()
        if pos < len(tokens) and tokens[pos] in grammar.verbs:
            verb_pos = pos
            verb = tokens[pos]
            pos += 1
            obj = read_noun_phrase()
            if obj == subject:
                raise ParseError(f"relation {verb!r} relates a noun to itself", verb_pos)
            relations.append((subject, verb, obj))
        if pos >= len(tokens):
            break
        if tokens[pos] != "and":
            raise ParseError(f"expected 'and' or end of sentence, got {tokens[pos]!r}", pos)
        pos += 1
        if pos >= len(tokens):
            raise ParseError("dangling 'and'", pos - 1)

    nodes = [ObjectNode(token=tok, id=i) for tok, i in objects.items()]
    return SceneGraph(objects=nodes, relations=relations, attributes=attributes,
                      language=language, modality="sentence")


def merge_graphs(graphs: list[SceneGraph]) -> SceneGraph:
    """Union of object tokens and of relation/attribute token triples.

    Deduplicates by exact token triple; object order follows first
    appearance across the inputs.
    """
    if not graphs:
        raise ContractError("merge_graphs: empty input")
    language = graphs[0].language
    if any(g.language != language for g in graphs):
        raise ContractError("merge_graphs: mixed languages")

    objects: dict[str, int] = {}
    relations: list[tuple[int, str, int]] = []
    attributes: list[tuple[int, str]] = []
    seen_rel: set[tuple[str, str, str]] = set()
    seen_attr: set[tuple[str, str]] = set()

    for g in graphs:
        toks = g.object_tokens()
        for tok in toks:
            if tok not in objects:
                objects[tok] = len(objects)
        for sub, pred, obj in g.relations:
            key = (toks[sub], pred, toks[obj])
            if key not in seen_rel:
                seen_rel.add(key)
                relations.append((objects[key[0]], pred, objects[key[2]]))
        for idx, attr in g.attributes:
            key = (toks[idx], attr)
            if key not in seen_attr:
                seen_attr.add(key)
                attributes.append((objects[key[0]], attr))

    nodes = [ObjectNode(token=tok, id=i) for tok, i in objects.items()]
    return SceneGraph(objects=nodes, relations=relations, attributes=attributes,
                      language=language, modality=graphs[0].modality)


def graph_stats(corpus: list[SceneGraph]) -> tuple[float, float, float, float]:
    """Fractions of graphs with 0, 1, 2 and >=3 objects; sums to 1."""
    if not corpus:
        raise ContractError("graph_stats: empty corpus")
    buckets = [0, 0, 0, 0]
    for g in corpus:
        buckets[min(g.n_objects, 3)] += 1
    total = len(corpus)
    return tuple(b / total for b in buckets)


def serialize(graph: SceneGraph) -> str:
    """One-line JSON document with stable field ordering."""
    doc = {
        "language": graph.language,
        "modality": graph.modality,
        "objects": [{"id": node.id, "token": node.token} for node in graph.objects],
        "relations": [{"sub": s, "pred": p, "obj": o} for s, p, o in graph.relations],
        "attributes": [{"obj": i, "attr": a} for i, a in graph.attributes],
    }
    return json.dumps(doc, separators=(",", ": "))


def _expect(doc, key, types, path):
    if key not in doc:
        raise FormatError(f"missing key at {path}/{key}")
    value = doc[key]
    if not isinstance(value, types):
        raise FormatError(f"wrong type at {path}/{key}")
    return value


def deserialize(text: str) -> SceneGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        raise FormatError(f"invalid JSON: {err}") from err
    if not isinstance(doc, dict):
        raise FormatError("wrong type at /")
    language = _expect(doc, "language", str, "")
    modality = _expect(doc, "modality", str, "")
    if language not in LANGUAGES:
        raise FormatError("invalid value at /language")
    if modality not in MODALITIES:
        raise FormatError("invalid value at /modality")

    objects = []
    for i, entry in enumerate(_expect(doc, "objects", list, "")):
        if not isinstance(entry, dict):
            raise FormatError(f"wrong type at /objects/{i}")
        oid = _expect(entry, "id", int, f"/objects/{i}")
        token = _expect(entry, "token", str, f"/objects/{i}")
        if oid != i:
            raise FormatError(f"non-sequential id at /objects/{i}/id")
        objects.append(ObjectNode(token=token, id=oid))

    n = len(objects)
    relations = []
    for i, entry in enumerate(_expect(doc, "relations", list, "")):
        if not isinstance(entry, dict):
            raise FormatError(f"wrong type at /relations/{i}")
        sub = _expect(entry, "sub", int, f"/relations/{i}")
        pred = _expect(entry, "pred", str, f"/relations/{i}")
        obj = _expect(entry, "obj", int, f"/relations/{i}")
        if not (0 <= sub < n) or not (0 <= obj < n):
            raise FormatError(f"index out of range at /relations/{i}")
        if sub == obj:
            raise FormatError(f"self-loop at /relations/{i}")
        relations.append((sub, pred, obj))

    attributes = []
    for i, entry in enumerate(_expect(doc, "attributes", list, "")):
        if not isinstance(entry, dict):
            raise FormatError(f"wrong type at /attributes/{i}")
        obj = _expect(entry, "obj", int, f"/attributes/{i}")
        attr = _expect(entry, "attr", str, f"/attributes/{i}")
        if not (0 <= obj < n):
            raise FormatError(f"index out of range at /attributes/{i}")
        attributes.append((obj, attr))

    return SceneGraph(objects=objects, relations=relations, attributes=attributes,
                      language=language, modality=modality)


def write_jsonl(path, graphs: list[SceneGraph]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for g in graphs:
            fh.write(serialize(g) + "\n")


def read_jsonl(path) -> list[SceneGraph]:
    graphs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                graphs.append(deserialize(line))
            except FormatError as err:
                raise FormatError(f"line {lineno}: {err}") from err
    return graphs
