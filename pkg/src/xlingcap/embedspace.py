"""Cross-lingual word-embedding store with cosine nearest-neighbor retrieval.

Tables are loaded from (or saved to) plain-text files:

    <count> <dim>
    <token> v1 v2 ... v_dim
    ...

Retrieval scans the full table (vocabularies are desk-scale) and breaks
exact similarity ties by lexicographic token order.  Word-level mapping
(`word_map`) composes the hard retrieval with a trainable affine layer;
gradients flow through the affine layer only.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, FormatError, VocabularyError
from .numerics import Tensor
from .params import Affine


class EmbeddingTable:
    """Immutable token -> vector map with a unit-normalized cached copy."""

    def __init__(self, vectors: dict[str, np.ndarray]):
        if not vectors:
            raise ContractError("embedding table must be non-empty")
        dims = {len(v) for v in vectors.values()}
        if len(dims) != 1:
            raise ContractError("embedding vectors have inconsistent widths")
        self.dim = dims.pop()
        # lexicographic row order makes argmax tie-breaking deterministic
        self.tokens = sorted(vectors)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        self.matrix = np.stack([np.asarray(vectors[t], dtype=np.float64)
                                for t in self.tokens])
        norms = np.linalg.norm(self.matrix, axis=1, keepdims=True)
        safe = np.where(norms == 0, 1.0, norms)
        self.normalized = self.matrix / safe

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def __len__(self) -> int:
        return len(self.tokens)

    def vector(self, token: str) -> np.ndarray:
        if token not in self.index:
            raise VocabularyError(f"token {token!r} not in embedding table")
        return self.matrix[self.index[token]]


class CrossLingualSpace:
    """Aligned source and target embedding tables sharing one width."""

    def __init__(self, source: EmbeddingTable, target: EmbeddingTable):
        if source.dim != target.dim:
            raise ContractError(
                f"source dim {source.dim} != target dim {target.dim}")
        self.dim = source.dim
        self.source = source
        self.target = target
        self._retrieval_cache: dict[str, tuple[str, np.ndarray, float]] = {}

    def table(self, which: str) -> EmbeddingTable:
        if which == "source":
            return self.source
        if which == "target":
            return self.target
        raise ContractError(f"unknown table {which!r}")

    def retrieve_cached(self, source_token: str) -> tuple[str, np.ndarray, float]:
        """Nearest target entry for a source token (memoized)."""
        hit = self._retrieval_cache.get(source_token)
        if hit is None:
            hit = retrieve_nearest(self.source.vector(source_token), self.target)
            self._retrieval_cache[source_token] = hit
        return hit


def retrieve_nearest(query: np.ndarray, table: EmbeddingTable
                     ) -> tuple[str, np.ndarray, float]:
    """Token, raw vector and cosine similarity of the best match.

    Ties are broken by lexicographic token order; a zero query is rejected.
    """
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (table.dim,):
        raise ContractError(
            f"query width {query.shape} does not match table dim {table.dim}")
    norm = np.linalg.norm(query)
    if norm == 0:
        raise ContractError("retrieve_nearest: zero query vector")
    sims = table.normalized @ (query / norm)
    best = int(np.argmax(sims))  # first (lexicographically least) max
    token = table.tokens[best]
    return token, table.matrix[best].copy(), float(sims[best])


class WordMapParams(Affine):
    """Affine layer lifting a retrieved target vector to model width."""

    def identity_init(self) -> None:
        """Test hook: w[:d,:d] = I, rest zero, bias zero."""
        w = np.zeros_like(self.w.data)
        d = min(w.shape)
        w[:d, :d] = np.eye(d)
        self.w.data = w
        self.b.data = np.zeros_like(self.b.data)


def word_map(embedding: np.ndarray, space: CrossLingualSpace,
             params: WordMapParams) -> Tensor:
    """Hard nearest-neighbor retrieval followed by the affine layer.

    The retrieval itself is a non-differentiated lookup; only the affine
    layer receives gradients.
    """
    _, vec, _ = retrieve_nearest(embedding, space.target)
    return params(Tensor(vec))


def word_map_token(token: str, space: CrossLingualSpace,
                   params: WordMapParams) -> Tensor:
    _, vec, _ = space.retrieve_cached(token)
    return params(Tensor(vec))


def load_text_embeddings(path, which: str = "source") -> EmbeddingTable:
    """Read a text embedding file; errors carry the offending line number."""
    if which not in ("source", "target"):
        raise ContractError(f"unknown table {which!r}")
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].strip():
        raise FormatError(f"{path}: empty file")
    header = lines[0].split()
    if len(header) != 2:
        raise FormatError(f"{path}: line 1: header must be 'count dim'")
    try:
        count, dim = int(header[0]), int(header[1])
    except ValueError:
        raise FormatError(f"{path}: line 1: header must be 'count dim'")
    if count <= 0 or dim <= 0:
        raise FormatError(f"{path}: line 1: count and dim must be positive")

    rows = [line for line in lines[1:] if line.strip()]
    if len(rows) != count:
        raise FormatError(
            f"{path}: header declares {count} rows, found {len(rows)}")
    vectors: dict[str, np.ndarray] = {}
    for offset, line in enumerate(rows, start=2):
        parts = line.split()
        if len(parts) != dim + 1:
            raise FormatError(
                f"{path}: line {offset}: expected {dim + 1} fields, got {len(parts)}")
        token = parts[0]
        if token in vectors:
            raise FormatError(f"{path}: line {offset}: duplicate token {token!r}")
        try:
            vectors[token] = np.array([float(x) for x in parts[1:]])
        except ValueError:
            raise FormatError(f"{path}: line {offset}: malformed float")
    return EmbeddingTable(vectors)


def save_text_embeddings(path, table: EmbeddingTable) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(table)} {table.dim}\n")
        for token in table.tokens:
            values = " ".join(repr(float(x)) for x in table.matrix[table.index[token]])
            fh.write(f"{token} {values}\n")
