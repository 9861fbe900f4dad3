"""Whole-piece identification from sequences of snippet embeddings."""
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from a2s.errors import ArgumentError
from a2s.retrieval import EmbeddingMeta, build_index
from a2s.schemas.report import IdentificationReport, RankingEntry

logger = logging.getLogger(__name__)

_DIAG, _UP, _LEFT = 0, 1, 2
# nearest distances closer than float32 resolution count as ties
VOTE_TIE_TOLERANCE = 1e-6


@dataclass
class EmbeddingSequence:
    """Embeddings of consecutive snippets of one document, in document order."""
    piece_id: str
    embeddings: np.ndarray
    offsets: Optional[np.ndarray] = None
    modality: str = "sheet"

    def __post_init__(self):
        self.embeddings = np.atleast_2d(np.asarray(self.embeddings, dtype=np.float32))
        if self.embeddings.shape[0] == 0:
            raise ArgumentError(f"sequence {self.piece_id!r} is empty")
        if self.offsets is None:
            self.offsets = np.arange(len(self.embeddings))
        self.offsets = np.asarray(self.offsets, dtype=np.int64)
        if len(self.offsets) != len(self.embeddings):
            raise ArgumentError(f"sequence {self.piece_id!r}: {len(self.offsets)} offsets "
                                f"for {len(self.embeddings)} embeddings")
        if np.any(np.diff(self.offsets) <= 0):
            raise ArgumentError(f"sequence {self.piece_id!r}: offsets must be strictly increasing")

    def __len__(self):
        return len(self.embeddings)


@dataclass
class PieceCollection:
    sequences: List[EmbeddingSequence] = field(default_factory=list)

    def __post_init__(self):
        ids = self.piece_ids
        if len(set(ids)) != len(ids):
            raise ArgumentError("piece ids in a collection must be unique")

    @property
    def piece_ids(self) -> List[str]:
        return [seq.piece_id for seq in self.sequences]

    def __len__(self):
        return len(self.sequences)


@dataclass
class IdentificationResult:
    method: str
    ranking: List[Tuple[str, float]]
    rank_of_true_piece: Optional[int] = None

    def to_report(self, query_id: str) -> IdentificationReport:
        return IdentificationReport(query_id=query_id, method=self.method,
                                    ranking=[RankingEntry(piece_id=p, score=s) for p, s in self.ranking],
                                    rank_of_truth=self.rank_of_true_piece)


def _rank_of(ranking: List[Tuple[str, float]], true_piece: Optional[str]) -> Optional[int]:
    if true_piece is None:
        return None
    for position, (piece_id, _) in enumerate(ranking, start=1):
        if piece_id == true_piece:
            return position
    logger.warning(f"True piece {true_piece!r} is not in the collection")
    return None


def _check_inputs(query: EmbeddingSequence, collection: PieceCollection) -> None:
    if len(collection) == 0:
        raise ArgumentError("the piece collection is empty")
    if len(query) == 0:
        raise ArgumentError("the query sequence is empty")


def identify_vote(query: EmbeddingSequence, collection: PieceCollection,
                  true_piece: Optional[str] = None) -> IdentificationResult:
    """Each query snippet votes for the piece owning its nearest collection snippet.

    A snippet whose nearest distance is shared by several pieces splits its vote evenly among them.
    """
    _check_inputs(query, collection)
    owners = np.concatenate([np.full(len(seq), i) for i, seq in enumerate(collection.sequences)])
    metadata = [EmbeddingMeta(seq.piece_id, int(offset), seq.modality)
                for seq in collection.sequences for offset in seq.offsets]
    index = build_index(np.concatenate([seq.embeddings for seq in collection.sequences]), metadata,
                        modality=collection.sequences[0].modality)
    dist = index.distances(query.embeddings)
    tied = dist <= dist.min(axis=1, keepdims=True) + VOTE_TIE_TOLERANCE
    hits = np.zeros((len(query), len(collection)), dtype=bool)
    rows, cols = np.nonzero(tied)
    hits[rows, owners[cols]] = True
    votes = (hits / hits.sum(axis=1, keepdims=True)).sum(axis=0)
    order = np.argsort(-votes, kind="stable")
    ranking = [(collection.sequences[i].piece_id, float(votes[i])) for i in order]
    return IdentificationResult("vote", ranking, _rank_of(ranking, true_piece))


def _as_matrix(seq) -> np.ndarray:
    matrix = seq.embeddings if isinstance(seq, EmbeddingSequence) else np.atleast_2d(np.asarray(seq))
    if matrix.shape[0] == 0:
        raise ArgumentError("cannot align an empty sequence")
    return matrix


def alignment_costs(a, b) -> np.ndarray:
    """Local cosine distances for DTW, in float64 and clipped to [0, 2].

    Rows are renormalised first; identical rows cost exactly 0.
    """
    a, b = _as_matrix(a).astype(np.float64), _as_matrix(b).astype(np.float64)
    if a.shape[1] != b.shape[1]:
        raise ArgumentError(f"embedding sizes differ: {a.shape[1]} vs {b.shape[1]}")
    unit = []
    for rows in (a, b):
        norms = np.linalg.norm(rows, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ArgumentError("cannot align a zero embedding")
        unit.append(rows / norms)
    local = np.clip(1.0 - unit[0] @ unit[1].T, 0.0, 2.0)
    _, ids = np.unique(np.vstack([a, b]), axis=0, return_inverse=True)
    ids = ids.reshape(-1)
    local[ids[:len(a)][:, None] == ids[len(a):][None, :]] = 0.0
    return local


def _better(cost: float, length: int, best_cost: float, best_length: int) -> bool:
    return cost < best_cost or (cost == best_cost and length < best_length)


def _dtw_full(local: np.ndarray):
    n, m = local.shape
    cost = np.full((n + 1, m + 1), np.inf)
    length = np.zeros((n + 1, m + 1), dtype=np.int64)
    step = np.zeros((n + 1, m + 1), dtype=np.int8)
    cost[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            best_c, best_l, best_s = cost[i - 1, j - 1], length[i - 1, j - 1], _DIAG
            if _better(cost[i - 1, j], length[i - 1, j], best_c, best_l):
                best_c, best_l, best_s = cost[i - 1, j], length[i - 1, j], _UP
            if _better(cost[i, j - 1], length[i, j - 1], best_c, best_l):
                best_c, best_l, best_s = cost[i, j - 1], length[i, j - 1], _LEFT
            cost[i, j] = best_c + local[i - 1, j - 1]
            length[i, j] = best_l + 1
            step[i, j] = best_s
    return cost[n, m], int(length[n, m]), step


def _dtw_rolling(local: np.ndarray) -> Tuple[float, int]:
    n, m = local.shape
    prev_cost = np.full(m + 1, np.inf)
    prev_cost[0] = 0.0
    prev_len = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        cur_cost = np.full(m + 1, np.inf)
        cur_len = np.zeros(m + 1, dtype=np.int64)
        for j in range(1, m + 1):
            best_c, best_l = prev_cost[j - 1], prev_len[j - 1]
            if _better(prev_cost[j], prev_len[j], best_c, best_l):
                best_c, best_l = prev_cost[j], prev_len[j]
            if _better(cur_cost[j - 1], cur_len[j - 1], best_c, best_l):
                best_c, best_l = cur_cost[j - 1], cur_len[j - 1]
            cur_cost[j] = best_c + local[i - 1, j - 1]
            cur_len[j] = best_l + 1
        prev_cost, prev_len = cur_cost, cur_len
    return float(prev_cost[m]), int(prev_len[m])


def dtw_cost(a, b, normalize: bool = False, memory: str = "rolling") -> float:
    """Minimum summed cosine distance over monotone paths from (0, 0) to (n-1, m-1).

    Steps are (1,0), (0,1) and (1,1). With `normalize` the cost is divided by
    the length of the optimal path (shortest among equal-cost paths).
    """
    local = alignment_costs(a, b)
    if memory == "rolling":
        total, length = _dtw_rolling(local)
    elif memory == "full":
        total, length, _ = _dtw_full(local)
        total = float(total)
    else:
        raise ArgumentError(f"unknown DTW memory mode {memory!r}")
    return total / length if normalize else total


def dtw_align(a, b) -> Tuple[float, List[Tuple[int, int]]]:
    """Raw DTW cost together with the optimal warping path."""
    local = alignment_costs(a, b)
    total, _, step = _dtw_full(local)
    i, j = local.shape
    path = []
    while i > 0 and j > 0:
        path.append((i - 1, j - 1))
        move = step[i, j]
        if move == _DIAG:
            i, j = i - 1, j - 1
        elif move == _UP:
            i -= 1
        else:
            j -= 1
    path.reverse()
    return float(total), path


def _dtw_task(args) -> float:
    query, reference, normalize = args
    return dtw_cost(query, reference, normalize=normalize)


def identify_dtw(query: EmbeddingSequence, collection: PieceCollection, normalize: bool = True,
                 true_piece: Optional[str] = None, jobs: int = 1) -> IdentificationResult:
    """Rank pieces by ascending DTW cost against the query; ties keep collection order."""
    _check_inputs(query, collection)
    tasks = [(query.embeddings, seq.embeddings, normalize) for seq in collection.sequences]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            costs = list(pool.map(_dtw_task, tasks))
    else:
        costs = [_dtw_task(task) for task in tasks]
    order = np.argsort(np.asarray(costs), kind="stable")
    ranking = [(collection.sequences[i].piece_id, float(costs[i])) for i in order]
    method = "dtw" if normalize else "dtw-raw"
    return IdentificationResult(method, ranking, _rank_of(ranking, true_piece))


def identify(query: EmbeddingSequence, collection: PieceCollection, method: str = "dtw",
             normalize: bool = True, true_piece: Optional[str] = None, jobs: int = 1) -> IdentificationResult:
    if method == "vote":
        return identify_vote(query, collection, true_piece)
    if method == "dtw":
        return identify_dtw(query, collection, normalize, true_piece, jobs)
    raise ArgumentError(f"unknown identification method {method!r}")


def sequences_from_store(vectors: np.ndarray, metadata: Sequence[EmbeddingMeta]) -> List[EmbeddingSequence]:
    """Group stored document embeddings by piece, ordered by offset."""
    groups = {}
    for row, meta in enumerate(metadata):
        groups.setdefault(meta.piece_id, []).append((meta.offset, row))
    sequences = []
    for piece_id, entries in groups.items():
        entries.sort()
        rows = [row for _, row in entries]
        sequences.append(EmbeddingSequence(piece_id, vectors[rows], [offset for offset, _ in entries],
                                           modality=metadata[rows[0]].modality))
    return sequences
