"""Embedding vocabulary: loading, token documents, and nearest-neighbour lookup."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


class EmbeddingError(ValueError):
    """Unusable embedding data: bad file, degenerate vector, empty search space."""


class EmbeddingStore:
    """Immutable vocabulary of tokens with fixed-dimension float vectors.

    Rows are addressed by integer token id (position in the input file).
    Unit-normalised rows are precomputed once so nearest-neighbour queries
    reduce to a single matrix-vector product. Zero-norm rows are kept (they
    are legal vectors) but are never eligible as nearest neighbours, since
    cosine similarity is undefined for them.
    """

    def __init__(self, tokens, vectors, duplicates_skipped: int = 0,
                 lines_rejected: int = 0):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or 0 in vectors.shape:
            raise EmbeddingError("vectors must be a non-empty 2-d array")
        if len(tokens) != vectors.shape[0]:
            raise EmbeddingError(
                f"{len(tokens)} tokens for {vectors.shape[0]} vector rows")
        if not np.isfinite(vectors).all():
            raise EmbeddingError("vectors contain NaN or Inf")
        self.tokens: list[str] = [str(t) for t in tokens]
        self.token_index: dict[str, int] = {t: i for i, t in enumerate(self.tokens)}
        if len(self.token_index) != len(self.tokens):
            raise EmbeddingError("duplicate tokens in vocabulary")
        self.vectors = vectors
        self.vectors.setflags(write=False)
        self.dim: int = int(vectors.shape[1])
        self.duplicates_skipped = duplicates_skipped
        self.lines_rejected = lines_rejected

        norms = np.linalg.norm(vectors, axis=1)
        self._norms = norms
        self._searchable = norms > 0.0
        unit = np.zeros_like(vectors)
        np.divide(vectors, norms[:, None], out=unit, where=norms[:, None] > 0.0)
        unit.setflags(write=False)
        self._unit = unit

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.token_index

    def vector(self, token_id: int) -> np.ndarray:
        return self.vectors[token_id]

    def id_of(self, token: str) -> int:
        try:
            return self.token_index[token]
        except KeyError:
            raise EmbeddingError(f"token not in vocabulary: {token!r}") from None

    def words(self, token_ids) -> list[str]:
        return [self.tokens[i] for i in token_ids]

    def mean_norm(self) -> float:
        return float(self._norms.mean())


def _check_token_ids(kind: str, ident: str, token_ids: tuple[int, ...]) -> None:
    if len(token_ids) == 0:
        raise ValueError(f"{kind} {ident!r} has no tokens")
    for t in token_ids:
        if not isinstance(t, (int, np.integer)) or t < 0:
            raise ValueError(f"{kind} {ident!r} has invalid token id {t!r}")


@dataclass(frozen=True)
class TokenDoc:
    """A document as a sequence of token ids into an EmbeddingStore."""

    doc_id: str
    token_ids: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "token_ids", tuple(int(t) for t in self.token_ids))
        _check_token_ids("document", self.doc_id, self.token_ids)

    def __len__(self) -> int:
        return len(self.token_ids)


@dataclass(frozen=True)
class Query:
    """A query as a sequence of token ids into an EmbeddingStore."""

    query_id: str
    token_ids: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "token_ids", tuple(int(t) for t in self.token_ids))
        _check_token_ids("query", self.query_id, self.token_ids)

    def __len__(self) -> int:
        return len(self.token_ids)


def load_embeddings(path, expected_dim: int | None = None) -> EmbeddingStore:
    """Load a text embedding file: one ``token v1 ... vD`` line per row.

    The first valid line fixes D (unless ``expected_dim`` pins it).  Lines
    with non-numeric or non-finite coordinates are rejected and counted;
    a line whose coordinate count disagrees with D invalidates the whole
    file.  Duplicate tokens keep their first occurrence.  Blank lines are
    ignored.
    """
    tokens: list[str] = []
    rows: list[np.ndarray] = []
    seen: dict[str, int] = {}
    dim = expected_dim
    duplicates = 0
    rejected = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            token, raw = parts[0], parts[1:]
            if dim is not None and len(raw) != dim:
                raise EmbeddingError(
                    f"{path}:{lineno}: expected {dim} coordinates, got {len(raw)}")
            if dim is None:
                if not raw:
                    raise EmbeddingError(f"{path}:{lineno}: no coordinates")
                dim = len(raw)
            try:
                coords = np.array([float(x) for x in raw], dtype=np.float64)
            except ValueError:
                rejected += 1
                log.warning("%s:%d: non-numeric coordinate, line rejected", path, lineno)
                continue
            if not np.isfinite(coords).all():
                rejected += 1
                log.warning("%s:%d: non-finite coordinate, line rejected", path, lineno)
                continue
            if token in seen:
                duplicates += 1
                continue
            seen[token] = len(tokens)
            tokens.append(token)
            rows.append(coords)
    if not tokens:
        raise EmbeddingError(f"{path}: no usable embedding rows")
    store = EmbeddingStore(tokens, np.vstack(rows),
                           duplicates_skipped=duplicates, lines_rejected=rejected)
    if duplicates or rejected:
        log.info("loaded %d vectors from %s (%d duplicates skipped, %d lines rejected)",
                 len(store), path, duplicates, rejected)
    return store


def cosine_distance(u: np.ndarray, v: np.ndarray) -> float:
    """1 - cosine similarity, clamped to [0, 2]. Zero-norm input is an error."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = math.sqrt(float(u @ u))
    nv = math.sqrt(float(v @ v))
    if nu == 0.0 or nv == 0.0:
        raise EmbeddingError("cosine distance undefined for zero-norm vector")
    d = 1.0 - float(u @ v) / (nu * nv)
    # rounding can push the value a hair outside the valid range
    return min(max(d, 0.0), 2.0)


def nearest_token(store: EmbeddingStore, point: np.ndarray,
                  exclude=None) -> int:
    """Token id closest to ``point`` by cosine distance.

    ``exclude`` ids are skipped. Ties resolve to the smallest id. Raises
    when the point has zero norm or no candidate remains.
    """
    point = np.asarray(point, dtype=np.float64)
    if point.shape != (store.dim,):
        raise EmbeddingError(f"point has shape {point.shape}, expected ({store.dim},)")
    norm = math.sqrt(float(point @ point))
    if norm == 0.0:
        raise EmbeddingError("nearest_token undefined for zero-norm point")
    sims = store._unit @ (point / norm)
    sims[~store._searchable] = -np.inf
    if exclude is not None:
        idx = np.fromiter(exclude, dtype=np.intp)
        if idx.size:
            sims[idx] = -np.inf
    best = int(np.argmax(sims))  # first max, so ties pick the smallest id
    if sims[best] == -np.inf:
        raise EmbeddingError("no candidate token left after exclusions")
    return best


def doc_vector(store: EmbeddingStore, doc: TokenDoc | Query) -> np.ndarray:
    """Mean-pooled vector of a token sequence."""
    ids = np.asarray(doc.token_ids, dtype=np.intp)
    if ids.size and int(ids.max()) >= len(store):
        raise EmbeddingError(
            f"token id {int(ids.max())} out of range for vocabulary of {len(store)}")
    return store.vectors[ids].mean(axis=0)
