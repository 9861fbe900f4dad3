"""Training objectives over batches of embeddings.

Both objectives work on cosine similarity; for unit-norm embeddings that is
the plain dot product.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from a2s.errors import ArgumentError

logger = logging.getLogger(__name__)

Vector = Union[np.ndarray, torch.Tensor, Sequence[float]]


@dataclass
class LossValue:
    value: torch.Tensor
    terms: Dict[str, float] = field(default_factory=dict)

    def item(self) -> float:
        return float(self.value.detach())


def cosine_sim(a: Vector, b: Vector) -> float:
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    na, nb = torch.linalg.vector_norm(a), torch.linalg.vector_norm(b)
    if na == 0 or nb == 0:
        raise ArgumentError("cosine similarity is undefined for a zero vector")
    return float(torch.clamp(torch.dot(a, b) / (na * nb), -1.0, 1.0))


def similarity_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """N x M cosine similarities between the rows of `a` and `b`."""
    return F.normalize(a, dim=1) @ F.normalize(b, dim=1).T


def pairwise_ranking_loss(anchors: torch.Tensor, positives: torch.Tensor, margin: float = 0.7) -> LossValue:
    """Hinge over in-batch negatives: sum_{j != i} max(0, margin - s(a_i, p_i) + s(a_i, p_j)), averaged over i."""
    n = anchors.shape[0]
    if n < 2:
        raise ArgumentError("the ranking loss needs at least 2 pairs (in-batch negatives)")
    if positives.shape != anchors.shape:
        raise ArgumentError(f"anchor/positive shapes differ: {tuple(anchors.shape)} vs {tuple(positives.shape)}")

    sims = similarity_matrix(anchors, positives)
    positive = sims.diagonal()
    hinge = torch.clamp(margin - positive[:, None] + sims, min=0.0)
    off_diagonal = ~torch.eye(n, dtype=torch.bool, device=sims.device)
    hinge = hinge * off_diagonal
    value = hinge.sum() / n
    return LossValue(value, {
        "positive_sim": float(positive.detach().mean()),
        "negative_sim": float(sims.detach()[off_diagonal].mean()),
        "active_hinges": float((hinge.detach() > 0).sum()),
    })


def default_pairing(count: int) -> torch.Tensor:
    """View i is paired with view i + N (and back)."""
    half = count // 2
    return torch.cat([torch.arange(half, count), torch.arange(0, half)])


def _check_pairing(pairing: torch.Tensor, count: int) -> None:
    if pairing.shape != (count,):
        raise ArgumentError(f"pairing map must have {count} entries")
    idx = torch.arange(count)
    if ((pairing < 0) | (pairing >= count)).any():
        raise ArgumentError("pairing map refers to missing views")
    if (pairing == idx).any():
        raise ArgumentError("pairing map has a fixed point (a view paired with itself)")
    if not torch.equal(pairing[pairing], idx):
        raise ArgumentError("pairing map is not an involution")


def nt_xent_loss(views: torch.Tensor, tau: float = 0.5, pairing: Optional[torch.Tensor] = None,
                 reduction: str = "mean") -> LossValue:
    """Normalized-temperature cross entropy over 2N views.

    Each ordered positive pair (i, p(i)) contributes
    -log( exp(s_ip / tau) / sum_{v != i} exp(s_iv / tau) ); `sum` adds all 2N
    terms, `mean` divides by 2N.
    """
    count = views.shape[0]
    if tau <= 0:
        raise ArgumentError(f"temperature must be positive, got {tau}")
    if count < 2 or count % 2:
        raise ArgumentError(f"NT-Xent needs an even number of views >= 2, got {count}")
    if reduction not in ("sum", "mean"):
        raise ArgumentError(f"unknown reduction {reduction!r}")
    pairing = default_pairing(count) if pairing is None else torch.as_tensor(pairing, dtype=torch.long)
    _check_pairing(pairing, count)

    logits = similarity_matrix(views, views) / tau
    self_mask = torch.eye(count, dtype=torch.bool, device=views.device)
    logits = logits.masked_fill(self_mask, float("-inf"))
    rows = torch.arange(count, device=views.device)
    terms = torch.logsumexp(logits, dim=1) - logits[rows, pairing.to(views.device)]
    value = terms.sum() if reduction == "sum" else terms.mean()
    with torch.no_grad():
        positive = (logits[rows, pairing.to(views.device)] * tau).mean()
    return LossValue(value, {"positive_sim": float(positive), "max_term": float(terms.detach().max())})
