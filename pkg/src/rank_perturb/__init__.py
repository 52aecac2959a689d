"""Minimal token perturbations that demote documents under black-box rankers."""

__version__ = "0.1.0"

from .attack import (AttackConfig, AttackError, AttackOutcome, DEConfig,
                     DEResult, GenomeSpace, PerturbationGenome, attack,
                     baseline_a0, de_minimize, default_delta_bound, fitness,
                     project, query_positions, repair_genome)
from .corpus import (CandidatePool, CorpusError, IngestResult, OovReport,
                     QrelSet, ingest, sample_pool, tokenize)
from .embedding import (EmbeddingError, EmbeddingStore, Query, TokenDoc,
                        cosine_distance, doc_vector, load_embeddings,
                        nearest_token)
from .external import ExternalRanker, ExternalRankerError
from .metrics import (MetricReport, MetricsError, doc_similarity, emit_report,
                      nrc, precision_at_k, precision_drop, success_at_k)
from .rankers import (Bm25Ranker, Bm25Stats, CosineCentroidRanker,
                      KernelPoolingRanker, RankedList, RankerError,
                      RankerSpec, build_bm25_stats, build_ranker, rank,
                      rescore_one)
from .synthetic import FixturePaths, build_fixture

__all__ = [name for name in dir() if not name.startswith("_")]
