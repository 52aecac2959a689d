"""Command line front end: reproducible ingest, attack, report, and rank runs."""

from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import __version__
from .attack import (AttackConfig, AttackError, AttackOutcome, DEConfig,
                     attack, baseline_a0)
from .corpus import CorpusError, IngestResult, QrelSet, ingest, sample_pool
from .embedding import EmbeddingError, EmbeddingStore, Query, TokenDoc, load_embeddings
from .external import ExternalRankerError
from .metrics import (MetricReport, MetricsError, doc_similarity, emit_report,
                      nrc, precision_at_k, summarize_nrc, success_at_k)
from .rankers import RankedList, RankerError, RankerSpec, build_ranker, rank, rescore_one

log = logging.getLogger(__name__)

DESK_POPULATION = 50
DESK_ITERATIONS = 30
PAPER_POPULATION = 500
PAPER_ITERATIONS = 100
CACHE_NAME = "corpus_cache.json"


class ConfigError(ValueError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def derive_seed(seed: int, *parts: str) -> int:
    """Stable per-task sub-seed from the run seed and string labels."""
    text = "|".join([str(seed), *parts])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass
class RunConfig:
    """Everything one run needs, resolved from TOML config plus flag overrides."""

    dataset: str = "default"
    embeddings: str = ""
    queries: str = ""
    docs: str = ""
    qrels: str = ""
    cache_dir: str | None = None
    positives: int = 5
    negatives: int = 45
    top_k: int = 5
    ranker: RankerSpec = field(default_factory=lambda: RankerSpec("cosine_centroid"))
    attack: AttackConfig = field(default_factory=AttackConfig)
    population_size: int = DESK_POPULATION
    iterations: int = DESK_ITERATIONS
    mutation_factor: float = 0.5
    fitness_floor: float | None = None
    seed: int = 0
    workers: int = 1

    def de_config(self, rng_seed: int) -> DEConfig:
        return DEConfig(population_size=self.population_size,
                        iterations=self.iterations,
                        mutation_factor=self.mutation_factor,
                        rng_seed=rng_seed,
                        fitness_floor=self.fitness_floor)

    def corpus_paths(self) -> dict[str, str]:
        return {"embeddings": self.embeddings, "queries": self.queries,
                "docs": self.docs, "qrels": self.qrels}

    def validate_paths(self) -> None:
        for name, value in self.corpus_paths().items():
            if not value:
                raise ConfigError(f"missing {name} path in configuration")
            if not Path(value).is_file():
                raise ConfigError(f"{name} file not found: {value}")

    def resolved(self) -> dict:
        return {
            "dataset": self.dataset,
            "paths": {**self.corpus_paths(), "cache_dir": self.cache_dir},
            "pool": {"positives": self.positives, "negatives": self.negatives,
                     "top_k": self.top_k},
            "ranker": {"kind": self.ranker.kind, **self.ranker.parameters},
            "attack": {"variant": self.attack.variant,
                       "sparsity": self.attack.sparsity,
                       "penalty_weight": self.attack.penalty_weight,
                       "delta_bound": self.attack.delta_bound,
                       "hard_query_lock": self.attack.hard_query_lock},
            "de": {"population_size": self.population_size,
                   "iterations": self.iterations,
                   "mutation_factor": self.mutation_factor,
                   "fitness_floor": self.fitness_floor},
            "run": {"seed": self.seed, "workers": self.workers},
        }

    def manifest(self, command: str) -> dict:
        inputs = {}
        for name, value in self.corpus_paths().items():
            if value and Path(value).is_file():
                inputs[name] = {"path": value, "sha256": sha256_file(value)}
        return {"command": command, "config": self.resolved(),
                "inputs": inputs, "seed": self.seed, "version": __version__}


def load_config(args: argparse.Namespace) -> RunConfig:
    raw: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)

    paths = raw.get("paths", {})
    pool = raw.get("pool", {})
    ranker_cfg = dict(raw.get("ranker", {}))
    attack_cfg = raw.get("attack", {})
    de_cfg = raw.get("de", {})
    run_cfg = raw.get("run", {})

    kind = ranker_cfg.pop("kind", "cosine_centroid")
    if getattr(args, "ranker", None):
        kind = args.ranker

    variant = attack_cfg.get("variant", "A1")
    if getattr(args, "variant", None):
        variant = args.variant
    sparsity = attack_cfg.get("sparsity", 1)
    if getattr(args, "sparsity", None) is not None:
        sparsity = args.sparsity

    population = de_cfg.get("population_size", DESK_POPULATION)
    iterations = de_cfg.get("iterations", DESK_ITERATIONS)
    if getattr(args, "paper_scale", False):
        population, iterations = PAPER_POPULATION, PAPER_ITERATIONS

    seed = run_cfg.get("seed", 0)
    if getattr(args, "seed", None) is not None:
        seed = args.seed

    try:
        attack_obj = AttackConfig(
            variant=variant,
            sparsity=int(sparsity),
            penalty_weight=float(attack_cfg.get("penalty_weight", 1.0)),
            delta_bound=attack_cfg.get("delta_bound"),
            hard_query_lock=bool(attack_cfg.get("hard_query_lock", False)),
        )
        spec = RankerSpec(kind, ranker_cfg)
    except (AttackError, RankerError) as exc:
        raise ConfigError(str(exc)) from exc

    return RunConfig(
        dataset=str(raw.get("dataset", "default")),
        embeddings=str(paths.get("embeddings", "")),
        queries=str(paths.get("queries", "")),
        docs=str(paths.get("docs", "")),
        qrels=str(paths.get("qrels", "")),
        cache_dir=paths.get("cache_dir"),
        positives=int(pool.get("positives", 5)),
        negatives=int(pool.get("negatives", 45)),
        top_k=int(pool.get("top_k", 5)),
        ranker=spec,
        attack=attack_obj,
        population_size=int(population),
        iterations=int(iterations),
        mutation_factor=float(de_cfg.get("mutation_factor", 0.5)),
        fitness_floor=de_cfg.get("fitness_floor"),
        seed=int(seed),
        workers=max(1, int(run_cfg.get("workers", 1))),
    )


def _dump_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _dump_jsonl(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def _load_jsonl(path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def write_corpus_cache(cfg: RunConfig, result: IngestResult, out_dir: Path) -> Path:
    payload = {
        "embeddings_sha256": sha256_file(cfg.embeddings),
        "queries": [[q.query_id, list(q.token_ids)] for q in result.queries],
        "docs": [[d.doc_id, list(d.token_ids)] for d in result.docs],
        "qrels": sorted([qid, did, grade] for (qid, did), grade in result.qrels.grades.items()),
        "excluded_docs": result.oov.excluded_docs,
        "excluded_queries": result.oov.excluded_queries,
        "unknown_qrel_lines": result.oov.unknown_qrel_lines,
    }
    path = out_dir / CACHE_NAME
    _dump_json(payload, path)
    return path


def load_corpus_cache(path: Path, cfg: RunConfig) -> tuple[list[Query], list[TokenDoc], QrelSet]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("embeddings_sha256") != sha256_file(cfg.embeddings):
        raise ConfigError(f"cache {path} was built against a different embedding file")
    queries = [Query(qid, tuple(ids)) for qid, ids in payload["queries"]]
    docs = [TokenDoc(did, tuple(ids)) for did, ids in payload["docs"]]
    qrels = QrelSet({(qid, did): grade for qid, did, grade in payload["qrels"]})
    return queries, docs, qrels


def _load_corpus(cfg: RunConfig, store: EmbeddingStore):
    if cfg.cache_dir:
        cache = Path(cfg.cache_dir) / CACHE_NAME
        if cache.is_file():
            log.info("loading corpus cache %s", cache)
            return load_corpus_cache(cache, cfg)
        log.warning("cache_dir %s has no %s, ingesting directly", cfg.cache_dir, CACHE_NAME)
    result = ingest(cfg.queries, cfg.docs, cfg.qrels, store)
    return result.queries, result.docs, result.qrels


def cmd_ingest(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    cfg.validate_paths()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    store = load_embeddings(cfg.embeddings)
    result = ingest(cfg.queries, cfg.docs, cfg.qrels, store)
    if not result.queries:
        raise ConfigError("no usable queries after ingestion")
    if not result.docs:
        raise ConfigError("no usable documents after ingestion")
    write_corpus_cache(cfg, result, out_dir)
    result.oov.write_csv(out_dir / "oov_report.csv")
    _dump_json(cfg.manifest("ingest"), out_dir / "manifest.json")
    print(f"ingested {len(result.queries)} queries, {len(result.docs)} docs "
          f"(vocab {len(store)}, dim {store.dim}); "
          f"dropped tokens: {result.oov.dropped_total()}; "
          f"excluded: {len(result.oov.excluded_docs)} docs, "
          f"{len(result.oov.excluded_queries)} queries")
    return 0


def _attack_one_query(cfg: RunConfig, store: EmbeddingStore, ranker_factory,
                      query: Query, docs_by_id: dict[str, TokenDoc],
                      all_docs: list[TokenDoc], qrels: QrelSet):
    """Rank one query's pool and attack its top relevant docs.

    Returns (outcome records, ranking record). Raises ranker errors upward
    so the caller can record the query as skipped.
    """
    ranker = ranker_factory()
    pool = sample_pool(query.query_id, qrels, all_docs,
                       positives=cfg.positives, negatives=cfg.negatives,
                       seed=derive_seed(cfg.seed, "pool", query.query_id))
    pool_docs = [docs_by_id[d] for d in pool.doc_ids]
    before = rank(ranker, query, pool_docs)
    ranking_record = {
        "query_id": query.query_id,
        "ranker": cfg.ranker.kind,
        "entries": [[d, s] for d, s in before.entries],
        "grades": {d: qrels.grade(query.query_id, d) for d in before.doc_ids()},
    }
    targets = [d for d, _ in before.entries[:min(cfg.top_k, len(before))]
               if qrels.is_relevant(query.query_id, d)]
    records = []
    for doc_id in targets:
        doc = docs_by_id[doc_id]
        sub_seed = derive_seed(cfg.seed, "attack", query.query_id, doc_id)
        if cfg.attack.variant == "A0":
            outcome = baseline_a0(query, doc, pool_docs, ranker, store,
                                  seed=sub_seed, ranked_before=before)
        else:
            outcome = attack(query, doc, pool_docs, ranker, store, cfg.attack,
                             cfg.de_config(sub_seed), ranked_before=before)
        after = rescore_one(before, doc_id, outcome.score_after)
        try:
            similarity = doc_similarity(
                doc, TokenDoc(doc_id, tuple(store.id_of(t) for t in outcome.perturbed_tokens)),
                store)
        except MetricsError:
            similarity = None
        records.append({
            "dataset": cfg.dataset,
            "ranker": cfg.ranker.kind,
            "variant": cfg.attack.variant,
            "c": cfg.attack.sparsity,
            "seed": cfg.seed,
            "query_id": outcome.query_id,
            "doc_id": outcome.doc_id,
            "rank_before": outcome.rank_before,
            "rank_after": outcome.rank_after,
            "score_before": outcome.score_before,
            "score_after": outcome.score_after,
            "replaced": [[p, a, b] for p, a, b in outcome.replaced],
            "original_tokens": list(outcome.original_tokens),
            "perturbed_tokens": list(outcome.perturbed_tokens),
            "fitness_trace": list(outcome.fitness_trace),
            "evaluations": outcome.evaluations,
            "nrc": nrc(outcome, before, after, qrels),
            "doc_similarity": similarity,
        })
    return records, ranking_record


def cmd_attack(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    cfg.validate_paths()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    store = load_embeddings(cfg.embeddings)
    queries, docs, qrels = _load_corpus(cfg, store)
    docs_by_id = {d.doc_id: d for d in docs}

    shared_external = None
    if cfg.ranker.kind == "external":
        shared_external = build_ranker(cfg.ranker, store)

        def ranker_factory():
            return shared_external
    else:
        def ranker_factory():
            return build_ranker(cfg.ranker, store, corpus_docs=docs)

    queries = sorted(queries, key=lambda q: q.query_id)
    outcome_records: list[dict] = []
    ranking_records: list[dict] = []
    skipped: list[str] = []
    no_targets: list[str] = []

    def work(query: Query):
        return _attack_one_query(cfg, store, ranker_factory, query,
                                 docs_by_id, docs, qrels)

    try:
        if cfg.workers > 1:
            with concurrent.futures.ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                results = list(pool.map(lambda q: _guarded(work, q), queries))
        else:
            results = [_guarded(work, q) for q in queries]
    finally:
        if shared_external is not None:
            shared_external.close()

    for query, result in zip(queries, results):
        if result is None:
            skipped.append(query.query_id)
            continue
        records, ranking_record = result
        ranking_records.append(ranking_record)
        if not records:
            no_targets.append(query.query_id)
            log.info("query %s: no relevant docs in top %d, nothing to attack",
                     query.query_id, cfg.top_k)
        outcome_records.extend(records)

    _dump_jsonl(outcome_records, out_dir / "outcomes.jsonl")
    _dump_jsonl(ranking_records, out_dir / "rankings.jsonl")
    _dump_json(cfg.manifest("attack"), out_dir / "manifest.json")
    _dump_json({
        "queries": len(queries),
        "attacked_docs": len(outcome_records),
        "skipped_queries": skipped,
        "queries_without_targets": no_targets,
    }, out_dir / "run_log.json")
    print(f"attacked {len(outcome_records)} docs over {len(queries) - len(skipped)} "
          f"queries ({cfg.ranker.kind}, {cfg.attack.variant}, c={cfg.attack.sparsity}); "
          f"skipped {len(skipped)}")
    if queries and len(skipped) == len(queries):
        print("every query failed", file=sys.stderr)
        return 1
    return 0


def _guarded(fn, query: Query):
    try:
        return fn(query)
    except (RankerError, ExternalRankerError, AttackError, CorpusError,
            EmbeddingError) as exc:
        log.warning("query %s skipped: %s", query.query_id, exc)
        return None


def _replayed_precision(before: RankedList, records: list[dict], qrels: QrelSet,
                        k: int = 5) -> tuple[float, float, float | None]:
    p_before = precision_at_k(before, qrels, k)
    replayed = [precision_at_k(rescore_one(before, r["doc_id"], r["score_after"]),
                               qrels, k) for r in records]
    p_after = sum(replayed) / len(replayed)
    drop = None if p_before == 0.0 else (p_before - p_after) / p_before
    return p_before, p_after, drop


def _aggregate_cell(records: list[dict], rankings: dict[tuple[str, str], dict],
                    qrels: QrelSet) -> MetricReport:
    dataset, ranker_kind, variant, c = (records[0]["dataset"], records[0]["ranker"],
                                        records[0]["variant"], records[0]["c"])
    outcomes = [AttackOutcome(
        query_id=r["query_id"], doc_id=r["doc_id"],
        original_tokens=tuple(r["original_tokens"]),
        perturbed_tokens=tuple(r["perturbed_tokens"]),
        replaced=tuple((p, a, b) for p, a, b in r["replaced"]),
        rank_before=r["rank_before"], rank_after=r["rank_after"],
        score_before=r["score_before"], score_after=r["score_after"],
        fitness_trace=tuple(r["fitness_trace"]), evaluations=r["evaluations"],
    ) for r in records]

    by_query: dict[str, list[dict]] = {}
    for r in records:
        by_query.setdefault(r["query_id"], []).append(r)
    p_befores, p_afters, drops = [], [], []
    for qid in sorted(by_query):
        ranking = rankings.get((ranker_kind, qid))
        if ranking is None:
            raise ConfigError(f"no ranking record for query {qid!r} ({ranker_kind})")
        before = RankedList(qid, tuple((d, s) for d, s in ranking["entries"]))
        pb, pa, drop = _replayed_precision(before, by_query[qid], qrels)
        p_befores.append(pb)
        p_afters.append(pa)
        if drop is not None:
            drops.append(drop)

    sims = [r["doc_similarity"] for r in records if r["doc_similarity"] is not None]
    nrc_mean, nrc_std = summarize_nrc([r["nrc"] for r in records])
    return MetricReport(
        dataset=dataset, ranker=ranker_kind, variant=variant, c=c,
        s_at_1=success_at_k(outcomes, qrels, 1),
        s_at_5=success_at_k(outcomes, qrels, 5),
        nrc_mean=nrc_mean, nrc_std=nrc_std,
        p5_before=sum(p_befores) / len(p_befores),
        p5_after=sum(p_afters) / len(p_afters),
        p5_drop=sum(drops) / len(drops) if drops else None,
        mean_cos_sim=sum(sims) / len(sims) if sims else None,
    )


def cmd_report(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells: dict[tuple, list[dict]] = {}
    rankings: dict[tuple[str, str], dict] = {}
    grades: dict[tuple[str, str], int] = {}
    manifests = []
    for run_dir in args.runs:
        run_dir = Path(run_dir)
        outcomes_path = run_dir / "outcomes.jsonl"
        if not outcomes_path.is_file():
            raise ConfigError(f"no outcomes.jsonl under {run_dir}")
        for record in _load_jsonl(outcomes_path):
            key = (record["dataset"], record["ranker"], record["variant"], record["c"])
            cells.setdefault(key, []).append(record)
        for ranking in _load_jsonl(run_dir / "rankings.jsonl"):
            rankings[(ranking["ranker"], ranking["query_id"])] = ranking
            for doc_id, grade in ranking["grades"].items():
                grades[(ranking["query_id"], doc_id)] = grade
        manifest_path = run_dir / "manifest.json"
        if manifest_path.is_file():
            with open(manifest_path, encoding="utf-8") as fh:
                manifests.append(json.load(fh))
    if not cells:
        raise ConfigError("no outcomes found in the given run directories")

    qrels = QrelSet(grades)
    reports = [_aggregate_cell(cells[key], rankings, qrels) for key in sorted(cells)]
    emit_report(reports, "csv", out_dir / "report.csv")
    emit_report(reports, "markdown", out_dir / "report.md")
    _dump_json({"command": "report", "runs": len(manifests),
                "seeds": sorted({m.get("seed", 0) for m in manifests}),
                "version": __version__}, out_dir / "manifest.json")
    print(f"wrote {len(reports)} report rows to {out_dir / 'report.csv'}")
    return 0


def cmd_rank(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    cfg.validate_paths()
    store = load_embeddings(cfg.embeddings)
    queries, docs, qrels = _load_corpus(cfg, store)
    docs_by_id = {d.doc_id: d for d in docs}
    wanted = sorted(queries, key=lambda q: q.query_id)
    if args.query:
        wanted = [q for q in wanted if q.query_id == args.query]
        if not wanted:
            raise ConfigError(f"unknown query id {args.query!r}")
    ranker = build_ranker(cfg.ranker, store, corpus_docs=docs)
    try:
        for query in wanted:
            pool = sample_pool(query.query_id, qrels, docs,
                               positives=cfg.positives, negatives=cfg.negatives,
                               seed=derive_seed(cfg.seed, "pool", query.query_id))
            ranked = rank(ranker, query, [docs_by_id[d] for d in pool.doc_ids])
            for position, (doc_id, score) in enumerate(ranked.entries, start=1):
                grade = qrels.grade(query.query_id, doc_id)
                print(f"{query.query_id}\t{position}\t{doc_id}\t{score:.6f}\t{grade}")
    finally:
        if cfg.ranker.kind == "external":
            ranker.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rank-perturb",
        description="Perturb documents so a black-box ranker demotes them")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="TOML configuration file")
        p.add_argument("--variant", choices=["a0", "a1", "a2", "a3",
                                             "A0", "A1", "A2", "A3"],
                       help="attack objective")
        p.add_argument("--sparsity", type=int, help="token budget c")
        p.add_argument("--seed", type=int, help="run seed")
        p.add_argument("--ranker", choices=list(RankerSpec.KINDS), help="ranker kind")
        p.add_argument("--paper-scale", action="store_true",
                       help="population 500 / 100 iterations instead of the desk profile")
        if out_required:
            p.add_argument("--out", required=True, help="output directory")

    p_ingest = sub.add_parser("ingest", help="validate and cache a corpus")
    common(p_ingest)
    p_ingest.set_defaults(func=cmd_ingest)

    p_attack = sub.add_parser("attack", help="attack relevant docs in the top ranks")
    common(p_attack)
    p_attack.set_defaults(func=cmd_attack)

    p_report = sub.add_parser("report", help="aggregate outcome files into tables")
    p_report.add_argument("runs", nargs="+", help="attack output directories")
    p_report.add_argument("--out", required=True, help="output directory")
    p_report.set_defaults(func=cmd_report)

    p_rank = sub.add_parser("rank", help="print ranked pools (debug)")
    common(p_rank, out_required=False)
    p_rank.add_argument("--query", help="restrict to one query id")
    p_rank.set_defaults(func=cmd_rank)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("RANK_PERTURB_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CorpusError, EmbeddingError, RankerError,
            AttackError, MetricsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ExternalRankerError as exc:
        print(f"external ranker error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
