"""Nearest-neighbour search in the joint embedding space and the ranking metrics built on it.

Embeddings are stored as float32 and compared in float64. Distance is
1 - cosine similarity; ties are broken by candidate index (stable sort).
"""
import logging
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence

import numpy as np

from a2s.errors import ArgumentError

logger = logging.getLogger(__name__)

NORM_TOLERANCE = 1e-3
DIRECTIONS = ("audio-to-sheet", "sheet-to-audio")
_QUERY_CHUNK = 512


@dataclass(frozen=True)
class EmbeddingMeta:
    piece_id: str
    offset: int
    modality: str


def cosine_distances(queries: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Q x N matrix of 1 - <q, c> in float64 for unit-norm rows."""
    return 1.0 - np.asarray(queries, dtype=np.float64) @ np.asarray(candidates, dtype=np.float64).T


def _unit_rows(vectors: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
    if np.any(norms == 0):
        raise ArgumentError(f"{what} contains a zero vector")
    drift = np.abs(norms - 1.0)
    if np.any(drift > NORM_TOLERANCE):
        logger.warning(f"{what}: {int((drift > NORM_TOLERANCE).sum())} vectors off unit norm "
                       f"(max drift {drift.max():.2e}); renormalising")
        vectors = (vectors / norms[:, None]).astype(np.float32)
    return vectors


class EmbeddingIndex:
    """Immutable store of candidate embeddings with per-entry metadata."""

    def __init__(self, vectors: np.ndarray, metadata: Sequence[EmbeddingMeta], modality: str):
        self._vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        self._vectors.setflags(write=False)
        self._compute = self._vectors.astype(np.float64)
        self.metadata = list(metadata)
        self.modality = modality

    @property
    def vectors(self) -> np.ndarray:
        return self._vectors

    @property
    def size(self) -> int:
        return self._vectors.shape[0]

    @property
    def dim(self) -> int:
        return self._vectors.shape[1]

    def __len__(self):
        return self.size

    def get(self, idx: int):
        return self._vectors[idx], self.metadata[idx]

    def distances(self, queries: np.ndarray) -> np.ndarray:
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        if q.shape[1] != self.dim:
            raise ArgumentError(f"query dimension {q.shape[1]} does not match index dimension {self.dim}")
        return cosine_distances(q, self._compute)


def build_index(embeddings: np.ndarray, metadata: Optional[Sequence[EmbeddingMeta]] = None,
                modality: str = "sheet") -> EmbeddingIndex:
    vectors = np.asarray(embeddings, dtype=np.float32)
    if vectors.ndim != 2 or vectors.shape[0] == 0:
        raise ArgumentError(f"cannot index embeddings of shape {vectors.shape}")
    vectors = _unit_rows(vectors, "index")
    if metadata is None:
        metadata = [EmbeddingMeta("", i, modality) for i in range(len(vectors))]
    if len(metadata) != len(vectors):
        raise ArgumentError(f"{len(metadata)} metadata records for {len(vectors)} embeddings")
    logger.debug(f"Built {modality} index over {len(vectors)} embeddings of dim {vectors.shape[1]}")
    return EmbeddingIndex(vectors, metadata, modality)


@dataclass
class RankedResult:
    query_id: Optional[str]
    candidates: List[int]
    distances: List[float]
    rank_of_target: Optional[int] = None

    def to_dict(self):
        return asdict(self)


def query(index: EmbeddingIndex, q: np.ndarray, k: int, query_id: Optional[str] = None,
          target: Optional[int] = None) -> RankedResult:
    """The k nearest candidates in ascending distance, ties by lower index."""
    if k < 1:
        raise ArgumentError(f"k must be positive, got {k}")
    if k > index.size:
        logger.warning(f"k={k} exceeds the index size {index.size}; returning all candidates")
        k = index.size
    q = np.asarray(q, dtype=np.float32)
    if q.ndim != 1:
        raise ArgumentError(f"query must be a single vector, got shape {q.shape}")
    dist = index.distances(_unit_rows(q[None], "query"))[0]
    order = np.argsort(dist, kind="stable")
    rank = None
    if target is not None:
        rank = int(np.flatnonzero(order == target)[0]) + 1
    return RankedResult(query_id, order[:k].tolist(), dist[order[:k]].tolist(), rank)


def _ranks_from_distances(dist: np.ndarray, targets: np.ndarray) -> np.ndarray:
    # position of the target in a stable ascending sort of each row
    rows = np.arange(dist.shape[0])
    target_dist = dist[rows, targets][:, None]
    before = (dist < target_dist).sum(axis=1)
    cols = np.arange(dist.shape[1])[None, :]
    tied_earlier = ((dist == target_dist) & (cols < targets[:, None])).sum(axis=1)
    return before + tied_earlier + 1


def rank_targets(queries: np.ndarray, candidates, targets: Optional[Sequence[int]] = None) -> np.ndarray:
    """1-based rank of each query's target among the candidates (target i defaults to candidate i)."""
    index = candidates if isinstance(candidates, EmbeddingIndex) else build_index(candidates)
    queries = _unit_rows(np.atleast_2d(np.asarray(queries, dtype=np.float32)), "queries")
    targets = np.arange(len(queries)) if targets is None else np.asarray(targets, dtype=np.int64)
    if len(targets) != len(queries):
        raise ArgumentError(f"{len(targets)} targets for {len(queries)} queries")
    if np.any((targets < 0) | (targets >= index.size)):
        raise ArgumentError("a target index is outside the candidate set")
    ranks = [_ranks_from_distances(index.distances(queries[s:s + _QUERY_CHUNK]), targets[s:s + _QUERY_CHUNK])
             for s in range(0, len(queries), _QUERY_CHUNK)]
    return np.concatenate(ranks).astype(np.int64)


@dataclass(frozen=True)
class RetrievalMetrics:
    r1: float
    r5: float
    r25: float
    mrr: float
    mr: int
    n: int

    def format_row(self, style: str = "percent", sep: str = " / ") -> str:
        if style == "percent":
            cells = [f"{100 * self.r1:.2f}", f"{100 * self.r5:.2f}", f"{100 * self.r25:.2f}",
                     f"{self.mrr:.2f}", str(self.mr)]
        elif style == "fraction":
            cells = [f"{self.r1:.2f}", f"{self.r25:.2f}", f"{self.mrr:.3f}", str(self.mr)]
        else:
            raise ArgumentError(f"unknown row style {style!r}")
        return sep.join(cells)

    def to_dict(self):
        return asdict(self)


def evaluate(ranks: Sequence[int]) -> RetrievalMetrics:
    """Recall@{1,5,25}, mean reciprocal rank and (lower) median rank."""
    ranks = np.asarray(ranks, dtype=np.int64)
    if ranks.size == 0:
        raise ArgumentError("cannot evaluate an empty set of ranks")
    if np.any(ranks < 1):
        raise ArgumentError("ranks are 1-based")
    ordered = np.sort(ranks)
    return RetrievalMetrics(
        r1=float(np.mean(ranks <= 1)),
        r5=float(np.mean(ranks <= 5)),
        r25=float(np.mean(ranks <= 25)),
        mrr=float(np.mean(1.0 / ranks)),
        mr=int(ordered[(len(ordered) - 1) // 2]),
        n=int(ranks.size),
    )


def direction_ranks(sheet_emb: np.ndarray, audio_emb: np.ndarray, direction: str) -> np.ndarray:
    """Row i of each modality is the matching pair; queries run against the whole other modality."""
    if direction not in DIRECTIONS:
        raise ArgumentError(f"unknown direction {direction!r}")
    if len(sheet_emb) != len(audio_emb):
        raise ArgumentError(f"{len(sheet_emb)} sheet vs {len(audio_emb)} audio embeddings")
    if direction == "audio-to-sheet":
        return rank_targets(audio_emb, build_index(sheet_emb, modality="sheet"))
    return rank_targets(sheet_emb, build_index(audio_emb, modality="audio"))


def retrieval_metrics_between(sheet_emb: np.ndarray, audio_emb: np.ndarray,
                              directions: Sequence[str] = DIRECTIONS) -> dict:
    return {direction: evaluate(direction_ranks(sheet_emb, audio_emb, direction)) for direction in directions}
