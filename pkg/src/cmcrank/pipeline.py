"""Three-stage retrieve / narrow / final-score orchestration.

Stage 1 retrieves K candidates by exact inner product, stage 2 reranks them
down to K' in one joint forward pass, and in ``intermediate`` mode stage 3
hands the K' survivors to a pluggable final scorer whose argmax becomes the
answer.  In ``final`` mode the reranker's own top-1 is the answer.

The final scorer is an interface only: two built-ins are shipped, a gold
oracle (for pipeline logic tests, where end-to-end accuracy collapses to
stage-2 recall@K') and a seeded noisy oracle emulating an imperfect scorer.
Queries are independent; a batch may fan out over worker threads and must
produce results identical to the serial run.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .encoders import Encoder, EmbeddingTable, encode
from .errors import EncodeError, InvalidConfig
from .index import CandidateIndex, RankedList, search_topk
from .reranker import CmcParams, rerank

MODE_FINAL = "final"
MODE_INTERMEDIATE = "intermediate"


@dataclass(frozen=True)
class QueryRecord:
    query_id: int
    embedding: np.ndarray


@dataclass(frozen=True)
class CandidateRecord:
    candidate_id: int
    embedding: np.ndarray


ScorerHandle = Callable[[QueryRecord, CandidateRecord], float]


def gold_oracle_scorer(gold_by_query: Mapping[int, int]) -> ScorerHandle:
    """Scores 1.0 for the query's gold candidate, 0.0 otherwise."""

    def scorer(query: QueryRecord, candidate: CandidateRecord) -> float:
        return 1.0 if gold_by_query.get(query.query_id) == candidate.candidate_id else 0.0

    return scorer


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return x ^ (x >> 31)


def noisy_oracle_scorer(gold_by_query: Mapping[int, int], seed: int = 0) -> ScorerHandle:
    """Gold scores 1.0; every other pair gets a stable uniform draw in [0, 1)."""

    def scorer(query: QueryRecord, candidate: CandidateRecord) -> float:
        if gold_by_query.get(query.query_id) == candidate.candidate_id:
            return 1.0
        mixed = _splitmix64(seed ^ _splitmix64(query.query_id)
                            ^ _splitmix64(candidate.candidate_id * 0x9E3779B97F4A7C15))
        return mixed / 2.0 ** 64

    return scorer


@dataclass(frozen=True)
class PipelineConfig:
    k_retrieve: int = 512
    k_prime: int = 64
    mode: str = MODE_FINAL
    final_scorer: ScorerHandle | None = None

    def __post_init__(self):
        if self.k_retrieve < 1:
            raise InvalidConfig("k_retrieve must be positive")
        if not 1 <= self.k_prime <= self.k_retrieve:
            raise InvalidConfig(
                f"k_prime {self.k_prime} must lie in [1, k_retrieve={self.k_retrieve}]")
        if self.mode not in (MODE_FINAL, MODE_INTERMEDIATE):
            raise InvalidConfig(f"unknown pipeline mode {self.mode!r}")
        if self.mode == MODE_INTERMEDIATE and self.final_scorer is None:
            raise InvalidConfig("intermediate mode requires a final_scorer")


@dataclass
class PipelineResult:
    query_id: int
    retrieved: RankedList
    reranked: RankedList
    top1_id: int
    timings_us: dict[str, float] = field(default_factory=dict)


class Pipeline:
    """Bound pipeline: an index, reranker params, and candidate embeddings."""

    def __init__(self, index: CandidateIndex, params: CmcParams,
                 candidates: EmbeddingTable,
                 query_encoder_retrieve: Encoder | None = None,
                 query_encoder_rerank: Encoder | None = None):
        self.index = index
        self.params = params
        self.candidates = candidates
        self.query_encoder_retrieve = (
            query_encoder_retrieve or Encoder.precomputed(index.dim))
        self.query_encoder_rerank = (
            query_encoder_rerank or Encoder.precomputed(params.model_dim))

    def _encode_query(self, encoder: Encoder, query) -> np.ndarray:
        try:
            return encode(encoder, query)
        except Exception as exc:
            raise EncodeError(f"query could not be encoded: {exc}") from exc

    def run_query(self, cfg: PipelineConfig, query_id: int, query) -> PipelineResult:
        """Run all stages for one query; per-stage wall time in microseconds."""
        # The two stage encoders are independent of each other; any overlap
        # in their execution must leave the results bit-identical.
        q_retrieve = self._encode_query(self.query_encoder_retrieve, query)
        q_rerank = self._encode_query(self.query_encoder_rerank, query)

        t0 = time.perf_counter()
        retrieved = search_topk(self.index, q_retrieve, cfg.k_retrieve)
        t1 = time.perf_counter()

        k_prime = min(cfg.k_prime, len(retrieved))
        reranked = rerank(self.params, q_rerank, retrieved, self.candidates, k_prime)
        t2 = time.perf_counter()

        final_us = 0.0
        if cfg.mode == MODE_INTERMEDIATE and len(reranked):
            qrec = QueryRecord(query_id=query_id, embedding=q_rerank)
            best_id, best_key = -1, None
            for cid in reranked.ids:
                cid = int(cid)
                crec = CandidateRecord(candidate_id=cid,
                                       embedding=self.candidates.get(cid))
                score = float(cfg.final_scorer(qrec, crec))
                key = (-score, cid)
                if best_key is None or key < best_key:
                    best_id, best_key = cid, key
            top1 = best_id
            final_us = (time.perf_counter() - t2) * 1e6
        else:
            top1 = int(reranked.ids[0]) if len(reranked) else -1

        return PipelineResult(
            query_id=query_id,
            retrieved=retrieved,
            reranked=reranked,
            top1_id=top1,
            timings_us={
                "retrieve": (t1 - t0) * 1e6,
                "rerank": (t2 - t1) * 1e6,
                "final": final_us,
            },
        )

    def run_batch(self, cfg: PipelineConfig,
                  queries: Sequence[tuple[int, np.ndarray]],
                  gold_by_query: Mapping[int, int] | None = None,
                  threads: int | None = None):
        """Map run_query over the batch; optionally in a worker pool.

        Returns (results, aggregate metrics, per-query errors).  Metrics are
        empty unless golds are supplied; a failing query is collected in the
        error map rather than aborting the batch.
        """
        from .evaluation import EvalRecord, compute_metrics

        results: list[PipelineResult | None] = [None] * len(queries)
        errors: dict[int, Exception] = {}

        def one(i: int) -> None:
            query_id, query = queries[i]
            try:
                results[i] = self.run_query(cfg, query_id, query)
            except Exception as exc:  # collected, not fatal to the batch
                errors[query_id] = exc

        if threads and threads > 1 and len(queries) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                list(pool.map(one, range(len(queries))))
        else:
            for i in range(len(queries)):
                one(i)

        ok = [r for r in results if r is not None]
        metrics: dict[str, float] = {}
        if gold_by_query is not None and ok:
            records = [EvalRecord(
                query_id=r.query_id,
                gold_id=gold_by_query[r.query_id],
                ranked_ids=tuple(int(c) for c in r.reranked.ids),
                gold_in_pool=bool(np.any(
                    r.retrieved.ids == np.uint64(gold_by_query[r.query_id]))),
            ) for r in ok]
            metrics = compute_metrics(records, sorted({1, cfg.k_prime}),
                                      require_normalized=False)
            metrics["accuracy_end_to_end"] = float(np.mean(
                [r.top1_id == gold_by_query[r.query_id] for r in ok]))
        return ok, metrics, errors
