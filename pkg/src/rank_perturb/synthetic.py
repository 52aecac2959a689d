"""Deterministic synthetic corpora for desk-scale attack experiments.

Every topic owns a great circle on the unit sphere, spanned by two
directions orthogonal to every other topic's. Vocabulary tokens sit at
spaced angles along the circle, so replacements exist at every similarity
level and a perturbation can walk a token downhill in small steps instead
of having to leap between isolated clusters. Each circle serves two
queries, one per end; the far end of a query's own circle supplies its
strongly anti-topical tokens. Off-topic tokens stay almost exactly
orthogonal to a query, which keeps document scores on a tight ladder
where single-token demotions are measurable.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

# tokens clustered at each end of a circle; queries draw from these.
# The angular gap between the zone and the rest of the band means the
# nearest neighbour of a query token is a sibling query token, so a
# naive nearest-vector substitution cannot silently shed query terms.
_QZONE = 3
_QZONE_THETA = np.array([0.20, 0.24, 0.28])
_BAND_GAP = 0.55
# query tokens carry extra norm: removing one moves a mean-pooled
# document vector further than removing on-topic filler
_QZONE_NORM = 1.3


@dataclass(frozen=True)
class FixturePaths:
    embeddings: Path
    queries: Path
    docs: Path
    qrels: Path


def _circle_vectors(rng: np.random.Generator, circles: int, band: int,
                    dim: int, wobble: float = 0.2) -> np.ndarray:
    """Tokens for ``circles`` great circles, ``band`` per circle.

    Each circle is spanned by two rows of a shared orthonormal basis, so
    tokens of different circles are orthogonal up to the small off-plane
    ``wobble``. Within a circle, angles run from one query zone through
    an evenly spaced mid band to the mirrored query zone at the far end.
    """
    if 2 * circles > dim:
        raise ValueError("need two dimensions per topic circle")
    if band <= 2 * _QZONE:
        raise ValueError("band must extend past the two query zones")
    mid = np.linspace(_BAND_GAP, np.pi - _BAND_GAP, band - 2 * _QZONE)
    theta = np.concatenate([_QZONE_THETA, mid, np.pi - _QZONE_THETA[::-1]])
    norm_factor = np.ones(band)
    norm_factor[:_QZONE] = _QZONE_NORM
    norm_factor[-_QZONE:] = _QZONE_NORM

    gauss = rng.normal(size=(dim, dim))
    basis, _ = np.linalg.qr(gauss)
    rows = []
    for t in range(circles):
        c, e = basis.T[2 * t], basis.T[2 * t + 1]
        flat = np.cos(theta)[:, None] * c + np.sin(theta)[:, None] * e
        off = rng.normal(size=(band, dim))
        off -= np.outer(off @ c, c) + np.outer(off @ e, e)
        off *= wobble / np.linalg.norm(off, axis=1, keepdims=True)
        vecs = flat + off
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
        vecs *= (norm_factor * (1.0 + rng.normal(scale=0.04, size=band)))[:, None]
        rows.append(vecs)
    return np.vstack(rows)


def build_fixture(out_dir, n_queries: int = 50, dim: int = 50,
                  circles: int = 25, band: int = 80,
                  positives: int = 5, negatives: int = 45,
                  query_len: int = 3, exact_tokens: int = 1,
                  near_span: int = 6,
                  len_range: tuple[int, int] = (28, 40),
                  topic_fraction: float = 0.17, ladder_top: float = 0.17,
                  seed: int = 0) -> FixturePaths:
    """Write an embedding file plus queries/docs/qrels under ``out_dir``.

    Queries 2t and 2t+1 take the two ends of circle t. Query tokens come
    from the end's query zone and the adjacent ``near_span`` band tokens
    act as on-topic filler. ``positives`` graded-1 docs carry
    ``exact_tokens`` query-token occurrences, and ``negatives`` graded-0
    docs form a ladder whose topic content falls linearly from
    ``ladder_top`` of the document down to zero. All randomness is
    governed by ``seed``.
    """
    if n_queries > 2 * circles:
        raise ValueError("need one circle end per query")
    if query_len > _QZONE:
        raise ValueError(f"query zone holds only {_QZONE} tokens")
    if 2 * near_span > band - 2 * _QZONE:
        raise ValueError("band too small for the near pools")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    vectors = _circle_vectors(rng, circles, band, dim)
    vocab = len(vectors)
    tokens = [f"w{i:04d}" for i in range(vocab)]
    emb_path = out_dir / "embeddings.txt"
    with open(emb_path, "w", encoding="utf-8") as fh:
        for token, vec in zip(tokens, vectors):
            fh.write(token + " " + " ".join(repr(float(x)) for x in vec) + "\n")

    all_ids = np.arange(vocab)
    lo, hi = len_range
    query_rows: list[str] = []
    doc_rows: list[str] = []
    qrel_rows: list[str] = []

    for q in range(n_queries):
        qid = f"q{q:02d}"
        start = (q // 2) * band
        if q % 2 == 0:
            query_ids = np.arange(start, start + query_len)
            near_pool = np.arange(start + _QZONE, start + _QZONE + near_span)
        else:
            query_ids = np.arange(start + band - query_len, start + band)
            near_pool = np.arange(start + band - _QZONE - near_span,
                                  start + band - _QZONE)
        background_pool = all_ids[all_ids // band != q // 2]
        query_rows.append(qid + "\t" + " ".join(tokens[t] for t in query_ids))

        def compose(length: int, topic_count: int, exact: int) -> list[int]:
            exact = min(exact, topic_count, length)
            near = min(topic_count, length) - exact
            body = []
            if exact:
                body.extend(rng.choice(query_ids, size=exact, replace=True))
            if near:
                body.extend(rng.choice(near_pool, size=near, replace=True))
            rest = length - len(body)
            body.extend(rng.choice(background_pool, size=rest, replace=True))
            order = rng.permutation(length)
            return [int(body[i]) for i in order]

        # one length per pool: kernel-style scores grow with raw token count,
        # so mixed lengths inside a pool would swamp the topical signal
        length = int(rng.integers(lo, hi + 1))
        for j in range(positives + negatives):
            doc_id = f"d{q:02d}{j:02d}"
            if j < positives:
                topic_count = int(round(topic_fraction * length))
                ids = compose(length, topic_count, exact_tokens)
                grade = 1
            else:
                step = (j - positives) / max(negatives - 1, 1)
                topic_count = int(round(ladder_top * (1.0 - step) * length))
                ids = compose(length, topic_count, 0)
                grade = 0
            doc_rows.append(doc_id + "\t" + " ".join(tokens[t] for t in ids))
            qrel_rows.append(f"{qid} 0 {doc_id} {grade}")

    queries_path = out_dir / "queries.tsv"
    docs_path = out_dir / "docs.tsv"
    qrels_path = out_dir / "qrels.txt"
    queries_path.write_text("\n".join(query_rows) + "\n", encoding="utf-8")
    docs_path.write_text("\n".join(doc_rows) + "\n", encoding="utf-8")
    qrels_path.write_text("\n".join(qrel_rows) + "\n", encoding="utf-8")
    return FixturePaths(emb_path, queries_path, docs_path, qrels_path)
