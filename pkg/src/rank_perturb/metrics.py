"""Evaluation metrics for demotion attacks and result table emission."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from .attack import AttackOutcome
from .corpus import QrelSet
from .embedding import EmbeddingStore, TokenDoc, doc_vector
from .rankers import RankedList, rescore_one

log = logging.getLogger(__name__)


class MetricsError(ValueError):
    pass


def success_at_k(outcomes: list[AttackOutcome], qrels: QrelSet, k: int) -> float:
    """Fraction of attacked documents demoted by at least k positions."""
    if not outcomes:
        raise MetricsError("success_at_k needs at least one outcome")
    if k < 1:
        raise MetricsError("k must be positive")
    for o in outcomes:
        if not qrels.is_relevant(o.query_id, o.doc_id):
            raise MetricsError(
                f"outcome for non-relevant doc {o.doc_id!r} (only relevant docs are attacked)")
    hits = sum(1 for o in outcomes if o.rank_after - o.rank_before >= k)
    return hits / len(outcomes)


def nrc(outcome: AttackOutcome, before: RankedList, after: RankedList,
        qrels: QrelSet) -> int:
    """Non-relevant documents crossed: grade-0 docs sitting at after-list
    positions strictly between the attacked doc's old and new rank."""
    rb = before.rank_of(outcome.doc_id)
    ra = after.rank_of(outcome.doc_id)
    lo, hi = min(rb, ra), max(rb, ra)
    count = 0
    for pos in range(lo + 1, hi):
        doc_id = after.entries[pos - 1][0]
        if not qrels.is_relevant(outcome.query_id, doc_id):
            count += 1
    return count


def precision_at_k(ranked: RankedList, qrels: QrelSet, k: int = 5) -> float:
    """Fraction of relevant docs in the top k (over the whole list if shorter)."""
    if k < 1:
        raise MetricsError("k must be positive")
    depth = min(k, len(ranked))
    if depth < k:
        log.warning("ranked list for %r has only %d docs, P@%d computed over %d",
                    ranked.query_id, len(ranked), k, depth)
    relevant = sum(1 for doc_id, _ in ranked.entries[:depth]
                   if qrels.is_relevant(ranked.query_id, doc_id))
    return relevant / depth


def precision_drop(before: RankedList, outcomes: list[AttackOutcome],
                   qrels: QrelSet, k: int = 5) -> float | None:
    """Relative P@k drop after replaying each attack against the original list.

    Every outcome is applied on its own via rescore_one and the resulting
    P@k values are averaged, so attacks are judged independently rather
    than stacked. Returns None when P@k before is zero (drop undefined).
    """
    if not outcomes:
        raise MetricsError("precision_drop needs at least one outcome")
    p_before = precision_at_k(before, qrels, k)
    if p_before == 0.0:
        return None
    p_after = [precision_at_k(rescore_one(before, o.doc_id, o.score_after), qrels, k)
               for o in outcomes]
    return (p_before - sum(p_after) / len(p_after)) / p_before


def doc_similarity(original: TokenDoc, perturbed: TokenDoc,
                   store: EmbeddingStore) -> float:
    """Cosine similarity of the mean-pooled embeddings of two documents."""
    u = doc_vector(store, original)
    v = doc_vector(store, perturbed)
    nu = math.sqrt(float(u @ u))
    nv = math.sqrt(float(v @ v))
    if nu == 0.0 or nv == 0.0:
        raise MetricsError("zero-norm pooled vector, similarity undefined")
    return float(u @ v) / (nu * nv)


@dataclass(frozen=True)
class MetricReport:
    """One table row: metrics for a (dataset, ranker, variant, sparsity) cell."""

    dataset: str
    ranker: str
    variant: str
    c: int
    s_at_1: float
    s_at_5: float
    nrc_mean: float
    nrc_std: float
    p5_before: float
    p5_after: float
    p5_drop: float | None
    mean_cos_sim: float | None

    def __post_init__(self):
        if not 0.0 <= self.s_at_1 <= 1.0 or not 0.0 <= self.s_at_5 <= 1.0:
            raise MetricsError("S@k must lie in [0, 1]")
        if self.nrc_mean < 0.0 or self.nrc_std < 0.0:
            raise MetricsError("NRC statistics must be non-negative")
        if self.mean_cos_sim is not None and not -1.0 <= self.mean_cos_sim <= 1.0 + 1e-12:
            raise MetricsError("similarity must lie in [-1, 1]")


REPORT_COLUMNS = ("dataset", "ranker", "variant", "c", "s_at_1", "s_at_5",
                  "nrc_mean", "nrc_std", "p5_before", "p5_after", "p5_drop",
                  "mean_cos_sim")


def summarize_nrc(values: list[int]) -> tuple[float, float]:
    """Mean and population standard deviation of per-outcome NRC counts."""
    if not values:
        raise MetricsError("no NRC values to summarize")
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def _row_values(report: MetricReport) -> list:
    values = []
    for col in REPORT_COLUMNS:
        v = getattr(report, col)
        values.append("" if v is None else v)
    return values


def emit_report(reports: list[MetricReport], fmt: str, path) -> None:
    """Write rows sorted by (dataset, ranker, variant, c) as CSV or markdown."""
    if not reports:
        raise MetricsError("nothing to report")
    rows = sorted(reports, key=lambda r: (r.dataset, r.ranker, r.variant, r.c))
    if fmt == "csv":
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(REPORT_COLUMNS)
            for row in rows:
                writer.writerow(_row_values(row))
        return
    if fmt != "markdown":
        raise MetricsError(f"unknown report format {fmt!r}")

    def cell(v) -> str:
        if v == "":
            return "n/a"
        if isinstance(v, float):
            return format(v, ".4f")
        return str(v)

    with open(path, "w", encoding="utf-8") as fh:
        fh.write("| " + " | ".join(REPORT_COLUMNS) + " |\n")
        fh.write("|" + "|".join([" --- "] * len(REPORT_COLUMNS)) + "|\n")
        for row in rows:
            fh.write("| " + " | ".join(cell(v) for v in _row_values(row)) + " |\n")
