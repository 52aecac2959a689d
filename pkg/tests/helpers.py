"""Shared test scaffolding: in-memory stores and tiny corpus files."""

from __future__ import annotations

import numpy as np

from rank_perturb.embedding import EmbeddingStore, Query, TokenDoc


def make_store(vectors, tokens=None) -> EmbeddingStore:
    vectors = np.asarray(vectors, dtype=np.float64)
    if tokens is None:
        tokens = [f"t{i}" for i in range(len(vectors))]
    return EmbeddingStore(tokens, vectors)


def random_store(rng: np.random.Generator, vocab: int, dim: int) -> EmbeddingStore:
    # gaussian rows are almost surely distinct and nonzero
    return make_store(rng.normal(size=(vocab, dim)))


def write_embeddings(path, tokens, vectors) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for token, vec in zip(tokens, vectors):
            fh.write(token + " " + " ".join(repr(float(x)) for x in vec) + "\n")


def random_doc(rng: np.random.Generator, store: EmbeddingStore, length: int,
               doc_id: str = "d0") -> TokenDoc:
    ids = rng.integers(0, len(store), size=length)
    return TokenDoc(doc_id, tuple(int(t) for t in ids))


def random_query(rng: np.random.Generator, store: EmbeddingStore, length: int,
                 query_id: str = "q0") -> Query:
    ids = rng.integers(0, len(store), size=length)
    return Query(query_id, tuple(int(t) for t in ids))
