import math

import numpy as np
import pytest
import torch

from a2s.errors import ArgumentError
from a2s.losses import cosine_sim, default_pairing, nt_xent_loss, pairwise_ranking_loss


def brute_force_nt_xent(views: np.ndarray, pairing, tau: float) -> float:
    unit = views / np.linalg.norm(views, axis=1, keepdims=True)
    total = 0.0
    for i in range(len(unit)):
        denominator = sum(math.exp(unit[i] @ unit[v] / tau) for v in range(len(unit)) if v != i)
        total += -math.log(math.exp(unit[i] @ unit[pairing[i]] / tau) / denominator)
    return total


class TestCosineSimilarity:
    """Cosine similarity of two vectors"""

    def test_self_similarity(self, rng):
        """A vector is perfectly similar to itself"""
        v = rng.standard_normal(32)
        assert cosine_sim(v, v) == pytest.approx(1.0)

    def test_orthogonal(self):
        """Orthogonal vectors have similarity 0"""
        assert cosine_sim([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]) == 0.0

    def test_closed_form(self):
        """45 degrees gives sqrt(2)/2"""
        assert cosine_sim([1.0, 0.0], [math.sqrt(2) / 2, math.sqrt(2) / 2]) == pytest.approx(0.70711, abs=1e-5)

    def test_zero_vector(self):
        """Similarity with a zero vector is undefined"""
        with pytest.raises(ArgumentError):
            cosine_sim([0.0, 0.0], [1.0, 0.0])


class TestPairwiseRankingLoss:
    """Hinge ranking loss over in-batch negatives"""

    def test_inactive_hinge(self):
        """Positives at 1 and negatives at 0 leave every hinge at zero"""
        z = torch.eye(4, dtype=torch.float64)
        assert pairwise_ranking_loss(z, z, margin=0.7).item() == 0.0

    def test_hand_evaluated_batch(self):
        """pos=(0.5, 1.0), negatives (0.6, 0.0) with margin 0.7 give 0.8 / 2"""
        # s(a0, p0) = 0.5, s(a0, p1) = 0.6, s(a1, p0) = 0.0, s(a1, p1) = 1.0
        anchors = torch.tensor([[0.6, 0.8, 0.0], [1.0, 0.0, 0.0]], dtype=torch.float64)
        positives = torch.tensor([[0.0, 0.625, math.sqrt(1 - 0.625 ** 2)], [1.0, 0.0, 0.0]], dtype=torch.float64)
        assert pairwise_ranking_loss(anchors, positives, 0.7).item() == pytest.approx(0.4, abs=1e-9)

    def test_permutation_invariance(self, rng):
        """Permuting anchors and positives together does not change the loss"""
        anchors = torch.from_numpy(rng.standard_normal((6, 32)))
        positives = torch.from_numpy(rng.standard_normal((6, 32)))
        order = torch.from_numpy(rng.permutation(6))
        base = pairwise_ranking_loss(anchors, positives).item()
        assert pairwise_ranking_loss(anchors[order], positives[order]).item() == pytest.approx(base, rel=1e-12)

    def test_needs_negatives(self):
        """A single pair has no negatives"""
        with pytest.raises(ArgumentError):
            pairwise_ranking_loss(torch.ones(1, 4), torch.ones(1, 4))

    def test_gradient_flows(self, rng):
        """The loss is differentiable in both inputs"""
        anchors = torch.from_numpy(rng.standard_normal((4, 8))).requires_grad_()
        positives = torch.from_numpy(rng.standard_normal((4, 8))).requires_grad_()
        pairwise_ranking_loss(anchors, positives, margin=2.0).value.backward()
        assert anchors.grad is not None and torch.any(anchors.grad != 0)

    def test_gradcheck(self, rng):
        """Analytic gradients agree with finite differences in both inputs"""
        anchors = torch.from_numpy(rng.standard_normal((5, 8))).requires_grad_()
        positives = torch.from_numpy(rng.standard_normal((5, 8))).requires_grad_()
        assert torch.autograd.gradcheck(lambda a, p: pairwise_ranking_loss(a, p, margin=2.5).value,
                                        (anchors, positives), eps=1e-6, atol=1e-8, rtol=1e-4)


class TestNTXent:
    """Normalized-temperature cross entropy"""

    def test_single_pair_has_zero_loss(self, rng):
        """With two views the only candidate is the positive"""
        views = torch.from_numpy(rng.standard_normal((2, 32)))
        assert nt_xent_loss(views, tau=0.5).item() == pytest.approx(0.0, abs=1e-12)

    def test_hand_evaluated_batch(self):
        """Identical positives and orthogonal negatives at tau=1 sum to 4 * -log(e / (e + 2))"""
        views = torch.tensor([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]], dtype=torch.float64)
        loss = nt_xent_loss(views, tau=1.0, pairing=[1, 0, 3, 2], reduction="sum")
        assert -math.log(math.e / (math.e + 2)) == pytest.approx(0.55144, abs=1e-5)
        assert loss.item() == pytest.approx(2.20574, abs=1e-4)
        mean = nt_xent_loss(views, tau=1.0, pairing=[1, 0, 3, 2], reduction="mean")
        assert mean.item() == pytest.approx(2.20574 / 4, abs=1e-4)

    def test_high_temperature_limit(self, rng):
        """As tau grows every term tends to log(2N - 1)"""
        views = torch.from_numpy(rng.standard_normal((8, 32)))
        loss = nt_xent_loss(views, tau=1e6, reduction="mean")
        assert loss.item() == pytest.approx(math.log(7), abs=1e-3)

    @pytest.mark.parametrize("tau", [0.1, 0.5, 1.0])
    def test_matches_brute_force(self, rng, tau):
        """Vectorised loss equals the explicit double loop on 100 random batches"""
        for _ in range(100):
            count = 2 * int(rng.integers(1, 7))
            views = rng.standard_normal((count, 16))
            pairing = default_pairing(count).tolist()
            expected = brute_force_nt_xent(views, pairing, tau)
            loss = nt_xent_loss(torch.from_numpy(views), tau=tau, reduction="sum")
            assert loss.item() == pytest.approx(expected, rel=1e-9, abs=1e-12)

    def test_gradcheck(self, rng):
        """Analytic gradients agree with finite differences for several temperatures"""
        for tau in (0.1, 0.5, 1.0):
            views = torch.from_numpy(rng.standard_normal((6, 8))).requires_grad_()
            assert torch.autograd.gradcheck(lambda v: nt_xent_loss(v, tau=tau).value, (views,),
                                            eps=1e-6, atol=1e-8, rtol=1e-4)

    def test_default_pairing(self):
        """View i pairs with view i + N"""
        assert default_pairing(6).tolist() == [3, 4, 5, 0, 1, 2]

    def test_invalid_inputs(self):
        """Odd view counts, bad pairings and non-positive temperatures are rejected"""
        with pytest.raises(ArgumentError):
            nt_xent_loss(torch.ones(3, 4))
        with pytest.raises(ArgumentError):
            nt_xent_loss(torch.ones(4, 4), pairing=[0, 1, 2, 3])
        with pytest.raises(ArgumentError):
            nt_xent_loss(torch.ones(4, 4), pairing=[1, 2, 3, 0])
        with pytest.raises(ArgumentError):
            nt_xent_loss(torch.ones(4, 4), tau=0.0)
