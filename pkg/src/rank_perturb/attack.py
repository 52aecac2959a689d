"""Rank demotion attacks: genome encoding, objectives, and the DE optimizer.

A perturbation is a fixed-length sequence of genes (position, delta vector).
Candidates evolve as flat real vectors under mutation-only differential
evolution; a genome is realized as text by projecting each perturbed
embedding back to its nearest vocabulary token. Fitness is always measured
on the projected token document, so the ranker stays a black box over text.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .embedding import (EmbeddingStore, Query, TokenDoc, cosine_distance,
                        nearest_token)
from .rankers import RankedList, Ranker, rank, rescore_one

log = logging.getLogger(__name__)

VARIANTS = ("A0", "A1", "A2", "A3")


class AttackError(ValueError):
    """Invalid attack configuration or an unattackable document."""


@dataclass(frozen=True)
class DEConfig:
    """Differential evolution settings (paper-scale defaults)."""

    population_size: int = 500
    iterations: int = 100
    mutation_factor: float = 0.5
    rng_seed: int = 0
    fitness_floor: float | None = None

    def __post_init__(self):
        if self.population_size < 4:
            raise AttackError("population size must be at least 4")
        if self.iterations < 0:
            raise AttackError("iterations must be non-negative")
        if not 0.0 <= self.mutation_factor <= 2.0:
            raise AttackError("mutation factor must lie in [0, 2]")


@dataclass(frozen=True)
class AttackConfig:
    """What to optimize: objective variant, sparsity budget, penalty settings."""

    variant: str = "A1"
    sparsity: int = 1
    penalty_weight: float = 1.0
    delta_bound: float | None = None
    hard_query_lock: bool = False

    def __post_init__(self):
        object.__setattr__(self, "variant", str(self.variant).upper())
        if self.variant not in VARIANTS:
            raise AttackError(f"unknown variant {self.variant!r}")
        if self.sparsity < 1:
            raise AttackError("sparsity must be at least 1")
        if self.penalty_weight < 0.0:
            raise AttackError("penalty weight must be non-negative")
        if self.delta_bound is not None and not self.delta_bound > 0.0:
            raise AttackError("delta bound must be positive")


@dataclass(frozen=True)
class PerturbationGenome:
    """c genes of (token position, embedding delta); duplicates resolve last-wins."""

    genes: tuple[tuple[int, np.ndarray], ...]

    def __post_init__(self):
        frozen = []
        for pos, delta in self.genes:
            delta = np.asarray(delta, dtype=np.float64)
            delta.setflags(write=False)
            frozen.append((int(pos), delta))
        object.__setattr__(self, "genes", tuple(frozen))

    def __len__(self) -> int:
        return len(self.genes)


def default_delta_bound(store: EmbeddingStore) -> float:
    """Per-coordinate clip radius spanning the occupied embedding region."""
    return 2.0 * store.mean_norm() / math.sqrt(store.dim)


@dataclass(frozen=True)
class GenomeSpace:
    """Search space for one document: flat vectors of c genes of 1+D reals."""

    doc_len: int
    genes: int
    dim: int
    delta_bound: float

    def __post_init__(self):
        if self.doc_len < 1 or self.genes < 1 or self.dim < 1:
            raise AttackError("genome space dimensions must be positive")
        if self.genes > self.doc_len:
            raise AttackError(
                f"sparsity {self.genes} exceeds document length {self.doc_len}")
        if not self.delta_bound > 0.0:
            raise AttackError("delta bound must be positive")

    @property
    def width(self) -> int:
        return self.genes * (1 + self.dim)

    def index_columns(self) -> np.ndarray:
        return np.arange(self.genes) * (1 + self.dim)

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """Initial population: integer positions, deltas uniform in [-r, r]."""
        pop = rng.uniform(-self.delta_bound, self.delta_bound,
                          size=(count, self.genes, 1 + self.dim))
        pop[:, :, 0] = rng.integers(0, self.doc_len, size=(count, self.genes))
        return pop.reshape(count, self.width)

    def decode(self, vector: np.ndarray) -> PerturbationGenome:
        """Round and clamp index coordinates; deltas pass through."""
        genes = []
        for g in range(self.genes):
            off = g * (1 + self.dim)
            pos = int(np.rint(vector[off]))
            pos = min(max(pos, 0), self.doc_len - 1)
            genes.append((pos, vector[off + 1:off + 1 + self.dim].copy()))
        return PerturbationGenome(tuple(genes))


def query_positions(query: Query, doc: TokenDoc) -> frozenset[int]:
    """Document positions holding a token that also occurs in the query."""
    wanted = set(query.token_ids)
    return frozenset(i for i, t in enumerate(doc.token_ids) if t in wanted)


def repair_genome(genome: PerturbationGenome, locked: frozenset[int],
                  doc_len: int) -> PerturbationGenome:
    """Move genes off locked positions to the nearest unlocked one.

    Distance ties prefer the smaller index. Raises when every position is
    locked, since no gene can land anywhere.
    """
    if not locked:
        return genome
    unlocked = [i for i in range(doc_len) if i not in locked]
    if not unlocked:
        raise AttackError("every position is locked, nothing to perturb")
    genes = []
    for pos, delta in genome.genes:
        if pos in locked:
            pos = min(unlocked, key=lambda j: (abs(j - pos), j))
        genes.append((pos, delta))
    return PerturbationGenome(tuple(genes))


def _project_diff(genome: PerturbationGenome, doc: TokenDoc,
                  store: EmbeddingStore, proj_cache: dict | None = None):
    """Apply a genome; return the new doc and the changed positions in order."""
    ids = list(doc.token_ids)
    targets: dict[int, np.ndarray] = {}
    for pos, delta in genome.genes:
        if not 0 <= pos < len(ids):
            raise AttackError(f"gene position {pos} outside document of {len(ids)} tokens")
        targets[pos] = delta  # duplicate positions: last gene wins
    changed: list[tuple[int, int, int]] = []
    for pos in sorted(targets):
        old = doc.token_ids[pos]
        delta = targets[pos]
        key = None
        if proj_cache is not None:
            key = (old, delta.tobytes())
            hit = proj_cache.get(key)
            if hit is not None:
                new = hit
                if new != old:
                    ids[pos] = new
                    changed.append((pos, old, new))
                continue
        point = store.vectors[old] + delta
        if not np.any(point):
            log.debug("zero projection target at position %d of doc %r, token kept",
                      pos, doc.doc_id)
            new = old
        else:
            new = nearest_token(store, point, exclude=(old,))
        if proj_cache is not None:
            proj_cache[key] = new
        if new != old:
            ids[pos] = new
            changed.append((pos, old, new))
    return TokenDoc(doc.doc_id, tuple(ids)), changed


def project(genome: PerturbationGenome, doc: TokenDoc,
            store: EmbeddingStore) -> TokenDoc:
    """Realize a genome as a token document.

    Each gene replaces the token at its position with the vocabulary token
    nearest to (original embedding + delta), the original itself excluded,
    so even a zero delta substitutes. A zero-vector target keeps the
    original token.
    """
    projected, _ = _project_diff(genome, doc, store)
    return projected


def fitness(variant: str, query: Query, doc: TokenDoc,
            genome: PerturbationGenome, ranker: Ranker, store: EmbeddingStore,
            penalty_weight: float = 1.0, hard_query_lock: bool = False,
            _dist_cache: dict | None = None,
            _proj_cache: dict | None = None) -> float:
    """Objective value of a genome; lower is a better attack.

    A1 is the raw ranker score of the projected document. A2 adds the
    penalty_weight-scaled sum of cosine distances between original and
    replacement embeddings over changed positions; A3 restricts that sum to
    positions whose original token also occurs in the query. Penalty terms
    accumulate in ascending position order, which keeps A1 <= A3 <= A2 an
    exact floating-point invariant for any shared genome.
    """
    variant = variant.upper()
    if variant not in ("A1", "A2", "A3"):
        raise AttackError(f"variant {variant!r} has no genome objective")
    if hard_query_lock:
        genome = repair_genome(genome, query_positions(query, doc), len(doc))
    projected, changed = _project_diff(genome, doc, store, proj_cache=_proj_cache)
    base = float(ranker.score(query, projected))
    if not math.isfinite(base):
        raise AttackError(f"ranker produced non-finite score for doc {doc.doc_id!r}")
    if variant == "A1":
        return base
    in_query = set(query.token_ids)
    penalty = 0.0
    for _, old, new in changed:
        if variant == "A3" and old not in in_query:
            continue
        if _dist_cache is not None:
            d = _dist_cache.get((old, new))
            if d is None:
                d = cosine_distance(store.vectors[old], store.vectors[new])
                _dist_cache[(old, new)] = d
        else:
            d = cosine_distance(store.vectors[old], store.vectors[new])
        penalty += d
    return base + penalty_weight * penalty


@dataclass(frozen=True)
class DEResult:
    """Best genome found, its fitness, the best-per-generation trace, and cost."""

    genome: PerturbationGenome
    fitness: float
    trace: tuple[float, ...]
    evaluations: int


def de_minimize(config: DEConfig, space: GenomeSpace, fitness_fn) -> DEResult:
    """Mutation-only DE/rand/1 with strict-improvement selection.

    Every generation builds one trial per population slot from three other
    randomly chosen members; all random draws happen on this coordinator,
    and selection is a generation-level barrier. The trace holds the best
    fitness after initialization and after each generation, so it is
    non-increasing by construction.
    """
    rng = np.random.default_rng(config.rng_seed)
    m = config.population_size
    pop = space.sample(rng, m)
    fits = np.array([fitness_fn(space.decode(row)) for row in pop])
    evaluations = m

    idx_cols = space.index_columns()
    delta_mask = np.ones(space.width, dtype=bool)
    delta_mask[idx_cols] = False
    r = space.delta_bound

    trace = [float(fits.min())]
    for _ in range(config.iterations):
        if config.fitness_floor is not None and trace[-1] <= config.fitness_floor:
            break
        partners = rng.integers(0, m, size=(m, 3))
        slots = np.arange(m)
        while True:
            bad = ((partners[:, 0] == partners[:, 1])
                   | (partners[:, 0] == partners[:, 2])
                   | (partners[:, 1] == partners[:, 2])
                   | (partners == slots[:, None]).any(axis=1))
            if not bad.any():
                break
            partners[bad] = rng.integers(0, m, size=(int(bad.sum()), 3))
        b, c, d = partners[:, 0], partners[:, 1], partners[:, 2]
        trials = pop[b] + config.mutation_factor * (pop[c] - pop[d])
        trials[:, delta_mask] = np.clip(trials[:, delta_mask], -r, r)
        for a in range(m):
            trial_fit = fitness_fn(space.decode(trials[a]))
            evaluations += 1
            if trial_fit < fits[a]:
                pop[a] = trials[a]
                fits[a] = trial_fit
        trace.append(float(fits.min()))

    best = int(np.argmin(fits))
    return DEResult(space.decode(pop[best]), float(fits[best]),
                    tuple(trace), evaluations)


@dataclass(frozen=True)
class AttackOutcome:
    """One attacked document: texts, rank movement, and optimizer cost."""

    query_id: str
    doc_id: str
    original_tokens: tuple[str, ...]
    perturbed_tokens: tuple[str, ...]
    replaced: tuple[tuple[int, str, str], ...]
    rank_before: int
    rank_after: int
    score_before: float
    score_after: float
    fitness_trace: tuple[float, ...]
    evaluations: int

    def __post_init__(self):
        object.__setattr__(self, "original_tokens", tuple(self.original_tokens))
        object.__setattr__(self, "perturbed_tokens", tuple(self.perturbed_tokens))
        object.__setattr__(self, "replaced",
                           tuple((int(p), str(a), str(b)) for p, a, b in self.replaced))
        object.__setattr__(self, "fitness_trace",
                           tuple(float(f) for f in self.fitness_trace))
        if len(self.original_tokens) != len(self.perturbed_tokens):
            raise AttackError("perturbation changed the document length")
        if any(later > earlier for earlier, later
               in zip(self.fitness_trace, self.fitness_trace[1:])):
            raise AttackError("fitness trace must be non-increasing")

    @property
    def rank_shift(self) -> int:
        return self.rank_after - self.rank_before


def _outcome(query: Query, doc: TokenDoc, perturbed: TokenDoc,
             changed: list[tuple[int, int, int]], ranked_before: RankedList,
             ranker: Ranker, store: EmbeddingStore,
             trace: tuple[float, ...], evaluations: int) -> AttackOutcome:
    score_after = float(ranker.score(query, perturbed))
    ranked_after = rescore_one(ranked_before, doc.doc_id, score_after)
    return AttackOutcome(
        query_id=query.query_id,
        doc_id=doc.doc_id,
        original_tokens=tuple(store.words(doc.token_ids)),
        perturbed_tokens=tuple(store.words(perturbed.token_ids)),
        replaced=tuple((pos, store.tokens[old], store.tokens[new])
                       for pos, old, new in changed),
        rank_before=ranked_before.rank_of(doc.doc_id),
        rank_after=ranked_after.rank_of(doc.doc_id),
        score_before=ranked_before.score_of(doc.doc_id),
        score_after=score_after,
        fitness_trace=trace,
        evaluations=evaluations + 1,
    )


def attack(query: Query, doc: TokenDoc, context: list[TokenDoc], ranker: Ranker,
           store: EmbeddingStore, attack_cfg: AttackConfig, de_cfg: DEConfig,
           ranked_before: RankedList | None = None) -> AttackOutcome:
    """Demote one document from its ranking context via DE search.

    ``ranked_before`` can be passed in when the caller already ranked the
    context (it does not depend on the attacked doc); otherwise it is
    computed here. The outcome's evaluation count covers the optimizer's
    ranker calls plus the one rescoring call, not the context ranking.
    """
    if attack_cfg.variant == "A0":
        raise AttackError("A0 is the random baseline, use baseline_a0")
    if ranked_before is None:
        ranked_before = rank(ranker, query, context)
    ranked_before.rank_of(doc.doc_id)  # doc must be part of its context
    space = GenomeSpace(
        doc_len=len(doc),
        genes=attack_cfg.sparsity,
        dim=store.dim,
        delta_bound=attack_cfg.delta_bound or default_delta_bound(store),
    )
    locked = query_positions(query, doc) if attack_cfg.hard_query_lock else frozenset()
    if locked and len(locked) == len(doc):
        raise AttackError(
            f"doc {doc.doc_id!r} consists entirely of query tokens under hard lock")
    dist_cache: dict = {}
    proj_cache: dict = {}

    def objective(genome: PerturbationGenome) -> float:
        return fitness(attack_cfg.variant, query, doc, genome, ranker, store,
                       penalty_weight=attack_cfg.penalty_weight,
                       hard_query_lock=attack_cfg.hard_query_lock,
                       _dist_cache=dist_cache, _proj_cache=proj_cache)

    result = de_minimize(de_cfg, space, objective)
    best = result.genome
    if attack_cfg.hard_query_lock:
        best = repair_genome(best, locked, len(doc))
    perturbed, changed = _project_diff(best, doc, store, proj_cache=proj_cache)
    return _outcome(query, doc, perturbed, changed, ranked_before, ranker,
                    store, result.trace, result.evaluations)


def baseline_a0(query: Query, doc: TokenDoc, context: list[TokenDoc],
                ranker: Ranker, store: EmbeddingStore, seed: int = 0,
                ranked_before: RankedList | None = None) -> AttackOutcome:
    """Random single-token baseline: swap one position for its nearest token."""
    if ranked_before is None:
        ranked_before = rank(ranker, query, context)
    ranked_before.rank_of(doc.doc_id)
    rng = np.random.default_rng(seed)
    pos = int(rng.integers(0, len(doc)))
    old = doc.token_ids[pos]
    new = nearest_token(store, store.vectors[old], exclude=(old,))
    ids = list(doc.token_ids)
    ids[pos] = new
    perturbed = TokenDoc(doc.doc_id, tuple(ids))
    changed = [(pos, old, new)] if new != old else []
    return _outcome(query, doc, perturbed, changed, ranked_before, ranker,
                    store, (), 0)
