"""Document scorers treated as black boxes, plus ranked-list operations."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .embedding import EmbeddingStore, Query, TokenDoc, doc_vector

log = logging.getLogger(__name__)

KERNEL_MUS = tuple(round(-1.0 + 0.2 * k, 1) for k in range(11))
KERNEL_SIGMAS = tuple(0.001 if mu == 1.0 else 0.1 for mu in KERNEL_MUS)
KERNEL_WEIGHTS = (1.0,) * 11


class RankerError(RuntimeError):
    """A scorer failed or produced an unusable value."""


class Ranker(Protocol):
    kind: str

    def score(self, query: Query, doc: TokenDoc) -> float: ...


@dataclass(frozen=True)
class RankedList:
    """Documents sorted by score, highest first; ties broken by ascending doc id.

    Ranks are 1-based. Instances are immutable; rescoring produces a new list.
    """

    query_id: str
    entries: tuple[tuple[str, float], ...]
    _pos: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_pos", {d: i for i, (d, _) in enumerate(self.entries)})
        if len(self._pos) != len(self.entries):
            raise RankerError(f"duplicate doc id in ranking for {self.query_id!r}")

    def __len__(self) -> int:
        return len(self.entries)

    def rank_of(self, doc_id: str) -> int:
        try:
            return self._pos[doc_id] + 1
        except KeyError:
            raise RankerError(f"doc {doc_id!r} not in ranking for {self.query_id!r}") from None

    def score_of(self, doc_id: str) -> float:
        return self.entries[self.rank_of(doc_id) - 1][1]

    def doc_ids(self) -> tuple[str, ...]:
        return tuple(d for d, _ in self.entries)


def _checked(value: float, ranker: Ranker, doc_id: str) -> float:
    if not math.isfinite(value):
        raise RankerError(f"{ranker.kind} produced non-finite score for doc {doc_id!r}")
    return float(value)


def rank(ranker: Ranker, query: Query, docs: list[TokenDoc]) -> RankedList:
    """Score every document and sort descending, doc id ascending on ties."""
    if not docs:
        raise RankerError("cannot rank an empty document list")
    scored = []
    for doc in docs:
        try:
            s = _checked(ranker.score(query, doc), ranker, doc.doc_id)
        except RankerError:
            raise
        except Exception as exc:
            raise RankerError(f"scoring doc {doc.doc_id!r} failed: {exc}") from exc
        scored.append((doc.doc_id, s))
    scored.sort(key=lambda e: (-e[1], e[0]))
    return RankedList(query.query_id, tuple(scored))


def rescore_one(ranked: RankedList, doc_id: str, new_score: float) -> RankedList:
    """Return a new list with one document's score replaced and order restored."""
    ranked.rank_of(doc_id)  # raises for unknown ids
    if not math.isfinite(new_score):
        raise RankerError(f"replacement score for {doc_id!r} is not finite")
    entries = [(d, float(new_score) if d == doc_id else s) for d, s in ranked.entries]
    entries.sort(key=lambda e: (-e[1], e[0]))
    return RankedList(ranked.query_id, tuple(entries))


class CosineCentroidRanker:
    """Cosine similarity between mean-pooled query and document vectors."""

    kind = "cosine_centroid"

    def __init__(self, store: EmbeddingStore):
        self.store = store
        self.degenerate_inputs = 0
        self._qcache: tuple[tuple, np.ndarray] | None = None

    def _query_centroid(self, query: Query) -> np.ndarray:
        key = (query.query_id, query.token_ids)
        if self._qcache is None or self._qcache[0] != key:
            self._qcache = (key, doc_vector(self.store, query))
        return self._qcache[1]

    def score(self, query: Query, doc: TokenDoc) -> float:
        q = self._query_centroid(query)
        d = doc_vector(self.store, doc)
        nq = math.sqrt(float(q @ q))
        nd = math.sqrt(float(d @ d))
        if nq == 0.0 or nd == 0.0:
            self.degenerate_inputs += 1
            log.warning("zero-norm centroid for query %r / doc %r, scoring 0",
                        query.query_id, doc.doc_id)
            return 0.0
        return float(q @ d) / (nq * nd)


class KernelPoolingRanker:
    """Gaussian-kernel pooling over the query/document cosine similarity matrix.

    Each query token contributes sum_k w_k * log(1 + K_k) where K_k pools
    exp(-(cos - mu_k)^2 / (2 sigma_k^2)) over document tokens. Per query,
    kernel activations against the whole vocabulary are tabulated once, so
    scoring a document is a gather and a reduction.
    """

    kind = "kernel_pooling"

    def __init__(self, store: EmbeddingStore, mus=KERNEL_MUS,
                 sigmas=KERNEL_SIGMAS, weights=KERNEL_WEIGHTS):
        mus = np.asarray(mus, dtype=np.float64)
        sigmas = np.asarray(sigmas, dtype=np.float64)
        weights = np.asarray(weights, dtype=np.float64)
        if not (mus.shape == sigmas.shape == weights.shape) or mus.ndim != 1 or not mus.size:
            raise RankerError("kernel mus/sigmas/weights must be equal-length 1-d")
        if (np.abs(mus) > 1.0).any():
            raise RankerError("kernel centres must lie in [-1, 1]")
        if (sigmas <= 0.0).any():
            raise RankerError("kernel widths must be positive")
        self.store = store
        self.mus = mus
        self.sigmas = sigmas
        self.weights = weights
        self._qcache: tuple[tuple, np.ndarray] | None = None

    def _query_table(self, query: Query) -> np.ndarray:
        """(q_len, vocab, n_kernels) kernel activations for one query."""
        key = (query.query_id, query.token_ids)
        if self._qcache is None or self._qcache[0] != key:
            unit = self.store._unit
            sims = unit[np.asarray(query.token_ids, dtype=np.intp)] @ unit.T
            z = sims[:, :, None] - self.mus[None, None, :]
            table = np.exp(-(z * z) / (2.0 * self.sigmas * self.sigmas)[None, None, :])
            self._qcache = (key, table)
        return self._qcache[1]

    def score(self, query: Query, doc: TokenDoc) -> float:
        table = self._query_table(query)
        pooled = table[:, np.asarray(doc.token_ids, dtype=np.intp), :].sum(axis=1)
        return float((self.weights * np.log1p(pooled)).sum())


@dataclass(frozen=True)
class Bm25Stats:
    """Corpus statistics frozen at construction time."""

    doc_count: int
    avg_doc_len: float
    doc_freq: dict[int, int]


def build_bm25_stats(docs: list[TokenDoc]) -> Bm25Stats:
    if not docs:
        raise RankerError("BM25 statistics need at least one document")
    df: Counter[int] = Counter()
    total_len = 0
    for doc in docs:
        total_len += len(doc.token_ids)
        df.update(set(doc.token_ids))
    return Bm25Stats(len(docs), total_len / len(docs), dict(df))


class Bm25Ranker:
    """Okapi BM25 over token ids; the idf floor keeps scores non-negative."""

    kind = "lexical_overlap"

    def __init__(self, stats: Bm25Stats, k1: float = 1.2, b: float = 0.75):
        if k1 < 0.0:
            raise RankerError("k1 must be non-negative")
        if not 0.0 <= b <= 1.0:
            raise RankerError("b must lie in [0, 1]")
        self.stats = stats
        self.k1 = k1
        self.b = b

    def _idf(self, token_id: int) -> float:
        df = self.stats.doc_freq.get(token_id, 0)
        n = self.stats.doc_count
        return math.log(1.0 + (n - df + 0.5) / (df + 0.5))

    def score(self, query: Query, doc: TokenDoc) -> float:
        tf = Counter(doc.token_ids)
        length_norm = 1.0 - self.b + self.b * len(doc.token_ids) / self.stats.avg_doc_len
        total = 0.0
        for t in query.token_ids:
            f = tf.get(t, 0)
            if not f:
                continue
            total += self._idf(t) * f * (self.k1 + 1.0) / (f + self.k1 * length_norm)
        return total


@dataclass(frozen=True)
class RankerSpec:
    """Declarative ranker choice: a kind plus keyword parameters."""

    kind: str
    parameters: dict = field(default_factory=dict)

    KINDS = ("cosine_centroid", "kernel_pooling", "lexical_overlap", "external")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise RankerError(f"unknown ranker kind {self.kind!r}")


def build_ranker(spec: RankerSpec, store: EmbeddingStore,
                 corpus_docs: list[TokenDoc] | None = None) -> Ranker:
    """Instantiate the scorer a spec describes.

    ``lexical_overlap`` needs ``corpus_docs`` to freeze its statistics unless
    ready-made stats are passed in the parameters. ``external`` specs launch
    a child process; see :mod:`rank_perturb.external`.
    """
    params = dict(spec.parameters)
    if spec.kind == "cosine_centroid":
        return CosineCentroidRanker(store)
    if spec.kind == "kernel_pooling":
        return KernelPoolingRanker(
            store,
            mus=params.get("mus", KERNEL_MUS),
            sigmas=params.get("sigmas", KERNEL_SIGMAS),
            weights=params.get("weights", KERNEL_WEIGHTS),
        )
    if spec.kind == "lexical_overlap":
        stats = params.get("stats")
        if stats is None:
            if corpus_docs is None:
                raise RankerError("lexical_overlap needs corpus documents for statistics")
            stats = build_bm25_stats(corpus_docs)
        return Bm25Ranker(stats, k1=params.get("k1", 1.2), b=params.get("b", 0.75))
    from .external import ExternalRanker
    command = params.get("command")
    if not command or not isinstance(command, (list, tuple)):
        raise RankerError("external ranker needs a non-empty command list")
    return ExternalRanker(store, list(command), timeout=params.get("timeout", 10.0))
