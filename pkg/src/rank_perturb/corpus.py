"""Corpus ingestion: TSV texts, TREC-style relevance judgments, candidate pools."""

from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .embedding import EmbeddingStore, Query, TokenDoc

log = logging.getLogger(__name__)

_WORD = re.compile(r"\w+")


class CorpusError(ValueError):
    """Malformed corpus input or an unusable sampling request."""


def tokenize(text: str) -> list[str]:
    """Lowercase and split on anything that is not a word character."""
    return _WORD.findall(text.lower())


@dataclass(frozen=True)
class QrelSet:
    """Relevance grades keyed by (query_id, doc_id); unjudged pairs read as 0."""

    grades: dict[tuple[str, str], int]

    def grade(self, query_id: str, doc_id: str) -> int:
        return self.grades.get((query_id, doc_id), 0)

    def is_relevant(self, query_id: str, doc_id: str) -> bool:
        return self.grade(query_id, doc_id) > 0

    def judged_docs(self, query_id: str) -> list[tuple[str, int]]:
        return [(d, g) for (q, d), g in self.grades.items() if q == query_id]


@dataclass(frozen=True)
class CandidatePool:
    """Sampled per-query document pool: positives first, then negatives."""

    query_id: str
    doc_ids: tuple[str, ...]
    positives: int
    negatives: int
    positive_shortfall: int = 0
    negative_shortfall: int = 0

    def __post_init__(self):
        if len(set(self.doc_ids)) != len(self.doc_ids):
            raise CorpusError(f"pool for {self.query_id!r} repeats a document")
        if self.positives + self.negatives != len(self.doc_ids):
            raise CorpusError(f"pool for {self.query_id!r} has inconsistent counts")


@dataclass
class OovReport:
    """Per-document token accounting plus ingest exclusions."""

    doc_counts: dict[str, tuple[int, int]] = field(default_factory=dict)  # id -> (total, dropped)
    excluded_docs: list[str] = field(default_factory=list)
    excluded_queries: list[str] = field(default_factory=list)
    unknown_qrel_lines: int = 0

    def dropped_total(self) -> int:
        return sum(d for _, d in self.doc_counts.values())

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["doc_id", "total_tokens", "dropped_tokens"])
            for doc_id in sorted(self.doc_counts):
                total, dropped = self.doc_counts[doc_id]
                writer.writerow([doc_id, total, dropped])


class IngestResult(NamedTuple):
    queries: list[Query]
    docs: list[TokenDoc]
    qrels: QrelSet
    oov: OovReport


def _read_tsv(path, what: str) -> list[tuple[str, str]]:
    rows: list[tuple[str, str]] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise CorpusError(
                    f"{path}:{lineno}: expected 'id<TAB>text', got {len(parts)} fields")
            ident, text = parts
            if not ident:
                raise CorpusError(f"{path}:{lineno}: empty {what} id")
            if ident in seen:
                raise CorpusError(f"{path}:{lineno}: duplicate {what} id {ident!r}")
            seen.add(ident)
            rows.append((ident, text))
    return rows


def _read_qrels(path, query_ids: set[str], doc_ids: set[str]) -> tuple[QrelSet, int]:
    grades: dict[tuple[str, str], int] = {}
    unknown = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise CorpusError(
                    f"{path}:{lineno}: expected 'qid 0 docid grade', got {len(parts)} fields")
            qid, _, docid, raw_grade = parts
            try:
                grade = int(raw_grade)
            except ValueError:
                raise CorpusError(f"{path}:{lineno}: grade {raw_grade!r} is not an integer") from None
            if grade < 0:
                raise CorpusError(f"{path}:{lineno}: negative grade {grade}")
            if qid not in query_ids or docid not in doc_ids:
                unknown += 1
                log.warning("%s:%d: qrel references unknown pair (%s, %s)",
                            path, lineno, qid, docid)
                continue
            grades[(qid, docid)] = grade
    return QrelSet(grades), unknown


def ingest(queries_path, docs_path, qrels_path, store: EmbeddingStore) -> IngestResult:
    """Read queries/docs TSV and qrels, mapping texts to in-vocabulary token ids.

    Tokens missing from the store are dropped and counted per document.
    Documents or queries left empty after filtering are excluded and listed
    in the report. Qrel lines naming unknown ids are skipped with a warning.
    """
    oov = OovReport()
    index = store.token_index

    docs: list[TokenDoc] = []
    for doc_id, text in _read_tsv(docs_path, "document"):
        words = tokenize(text)
        ids = [index[w] for w in words if w in index]
        oov.doc_counts[doc_id] = (len(words), len(words) - len(ids))
        if not ids:
            oov.excluded_docs.append(doc_id)
            log.warning("document %r has no in-vocabulary tokens, excluded", doc_id)
            continue
        docs.append(TokenDoc(doc_id, tuple(ids)))

    queries: list[Query] = []
    for query_id, text in _read_tsv(queries_path, "query"):
        words = tokenize(text)
        ids = [index[w] for w in words if w in index]
        if not ids:
            oov.excluded_queries.append(query_id)
            log.warning("query %r has no in-vocabulary tokens, excluded", query_id)
            continue
        queries.append(Query(query_id, tuple(ids)))

    qrels, unknown = _read_qrels(
        qrels_path,
        {q.query_id for q in queries},
        {d.doc_id for d in docs},
    )
    oov.unknown_qrel_lines = unknown
    return IngestResult(queries, docs, qrels, oov)


def sample_pool(query_id: str, qrels: QrelSet, docs: list[TokenDoc],
                positives: int = 5, negatives: int = 45,
                seed: int = 0) -> CandidatePool:
    """Sample up to ``positives`` relevant and ``negatives`` non-relevant docs.

    Sampling is uniform without replacement under the given seed. Negatives
    are drawn from explicitly judged grade-0 documents first and topped up
    from unjudged ones (which count as grade 0) only on shortfall, so a
    curated judgment pool stays intact. A query with no relevant documents
    is an error; any other shortfall is recorded on the pool.
    """
    pos_ids = [d.doc_id for d in docs if qrels.grade(query_id, d.doc_id) > 0]
    judged_neg = [d.doc_id for d in docs
                  if qrels.grades.get((query_id, d.doc_id)) == 0]
    unjudged = [d.doc_id for d in docs
                if (query_id, d.doc_id) not in qrels.grades]
    if not pos_ids:
        raise CorpusError(f"query {query_id!r} has no relevant documents")

    rng = np.random.default_rng(seed)

    def draw(pool: list[str], k: int) -> list[str]:
        if k <= 0 or not pool:
            return []
        if k >= len(pool):
            return list(pool)
        picks = rng.choice(len(pool), size=k, replace=False)
        return [pool[i] for i in picks]

    chosen_pos = draw(pos_ids, positives)
    chosen_neg = draw(judged_neg, negatives)
    if len(chosen_neg) < negatives:
        chosen_neg += draw(unjudged, negatives - len(chosen_neg))

    return CandidatePool(
        query_id=query_id,
        doc_ids=tuple(chosen_pos + chosen_neg),
        positives=len(chosen_pos),
        negatives=len(chosen_neg),
        positive_shortfall=max(0, positives - len(chosen_pos)),
        negative_shortfall=max(0, negatives - len(chosen_neg)),
    )
