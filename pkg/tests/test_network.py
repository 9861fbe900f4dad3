import numpy as np
import pytest
import torch

from a2s.errors import ArgumentError, ConfigError
from a2s.network import (
    attention_mask, embed_many, encode_audio, encode_sheet, encoder_state, init_params, load_encoder,
)
from a2s.schemas.config import ArchConfig


@pytest.fixture
def long_attention():
    return ArchConfig(audio_context="long", attention=True)


@pytest.fixture
def sheet_input(rng):
    return rng.uniform(0.0, 1.0, size=(160, 180)).astype(np.float32)


def excerpt_for(arch, rng):
    return rng.uniform(0.0, 2.0, size=(64, arch.audio_frames)).astype(np.float32)


def projected(z, dim=32):
    weights = torch.from_numpy(np.random.default_rng(5).standard_normal(dim))
    return torch.dot(z.reshape(-1)[:dim], weights)


def assert_finite_difference_gradients(objective, params, checks=10, eps=1e-6):
    """Compare autograd with central differences on randomly picked scalar weights."""
    for param in params:
        param.grad = None
    objective().backward()
    rng = np.random.default_rng(9)
    for _ in range(checks):
        param = params[rng.integers(len(params))]
        flat = int(rng.integers(param.numel()))
        analytic = float(param.grad.view(-1)[flat])
        with torch.no_grad():
            original = float(param.view(-1)[flat])
            param.view(-1)[flat] = original + eps
            plus = float(objective())
            param.view(-1)[flat] = original - eps
            minus = float(objective())
            param.view(-1)[flat] = original
        numeric = (plus - minus) / (2 * eps)
        assert analytic == pytest.approx(numeric, rel=1e-4, abs=1e-8)


class TestInitParams:
    """Seeded construction of the two-pathway network"""

    def test_same_seed_identical(self, arch):
        """Same architecture and seed give identical weights"""
        a, b = init_params(arch, 3).state_dict(), init_params(arch, 3).state_dict()
        assert all(torch.equal(a[k], b[k]) for k in a)

    def test_different_seeds_differ(self, arch):
        """Different seeds give different weights"""
        a, b = init_params(arch, 3).state_dict(), init_params(arch, 4).state_dict()
        assert any(not torch.equal(a[k], b[k]) for k in a)

    def test_global_rng_untouched(self, arch):
        """Initialisation leaves the global torch RNG stream alone"""
        torch.manual_seed(0)
        expected = torch.rand(3)
        torch.manual_seed(0)
        init_params(arch, 11)
        assert torch.equal(torch.rand(3), expected)

    def test_shapes_follow_architecture(self, arch):
        """Four stride-2 blocks take 160 x 180 down to 10 x 12 and 64 x 42 down to 4 x 3"""
        net = init_params(arch, 0)
        assert net.sheet.feature_shape == (128, 10, 12)
        assert net.audio.feature_shape == (128, 4, 3)
        assert net.sheet.head[1].in_features == 128 * 10 * 12
        assert net.sheet.projection.out_features == 32
        assert net.audio.projection.out_features == 32
        assert net.attention is None

    def test_pooled_head(self):
        """BL1 pools the last feature map before projecting"""
        net = init_params(ArchConfig(head="pooled"), 0)
        assert net.sheet.head_dim == 128
        assert net.sheet.projection.in_features == 128


class TestEncoders:
    """Embedding contracts of both pathways"""

    def test_sheet_embedding_is_unit_norm(self, arch, sheet_input):
        """Sheet embeddings have unit length"""
        z = encode_sheet(sheet_input, init_params(arch, 1))
        assert z.shape == (32,)
        assert float(torch.linalg.vector_norm(z)) == pytest.approx(1.0, abs=1e-5)

    def test_identical_inputs_identical_embeddings(self, arch, sheet_input):
        """The encoder is a pure function of its input"""
        net = init_params(arch, 1)
        batch = np.stack([sheet_input, sheet_input])
        z = encode_sheet(batch, net)
        assert torch.equal(z[0], z[1])

    def test_audio_embedding_is_unit_norm(self, arch, rng):
        """Audio embeddings have unit length"""
        z = encode_audio(excerpt_for(arch, rng), init_params(arch, 1))
        assert float(torch.linalg.vector_norm(z)) == pytest.approx(1.0, abs=1e-5)

    def test_wrong_shape_rejected(self, arch):
        """Inputs must match the pathway's input shape"""
        with pytest.raises(ArgumentError):
            encode_sheet(np.ones((100, 100), dtype=np.float32), init_params(arch, 1))

    def test_sheet_gradient_matches_finite_differences(self, arch, sheet_input):
        """Autograd agrees with central differences on 10 random sheet weights"""
        net = init_params(arch, 2).double()
        x = torch.from_numpy(sheet_input.astype(np.float64))
        assert_finite_difference_gradients(lambda: projected(encode_sheet(x, net)), list(net.sheet.parameters()))

    def test_audio_gradient_matches_finite_differences(self, arch, rng):
        """Autograd agrees with central differences on 10 random audio weights"""
        net = init_params(arch, 2).double()
        x = torch.from_numpy(excerpt_for(arch, rng).astype(np.float64))
        assert_finite_difference_gradients(lambda: projected(encode_audio(x, net)), list(net.audio.parameters()))

    def test_embed_many_batches(self, arch, short_pairs):
        """Batched inference returns one float32 unit row per snippet"""
        net = init_params(arch, 1)
        grids = [p.sheet for p in short_pairs[:10]]
        rows = embed_many(net, grids, "sheet", batch_size=4)
        assert rows.shape == (10, 32) and rows.dtype == np.float32
        np.testing.assert_allclose(np.linalg.norm(rows, axis=1), 1.0, atol=1e-5)
        single = encode_sheet(grids[7], net).detach().numpy()
        np.testing.assert_allclose(rows[7], single, atol=1e-5)


class TestAttention:
    """Soft attention over spectrogram frames"""

    def test_mask_is_a_distribution(self, long_attention, rng):
        """Mask entries are non-negative and sum to one"""
        mask = attention_mask(excerpt_for(long_attention, rng), init_params(long_attention, 0))
        assert mask.shape == (168,)
        assert float(mask.min()) >= 0.0
        assert float(mask.sum()) == pytest.approx(1.0, abs=1e-5)

    def test_zeroed_score_layer_gives_uniform_mask(self, long_attention, rng):
        """Constant scores give exactly 1/C per frame"""
        net = init_params(long_attention, 0)
        with torch.no_grad():
            net.attention.score.weight.zero_()
            net.attention.score.bias.zero_()
        mask = attention_mask(excerpt_for(long_attention, rng), net)
        np.testing.assert_allclose(mask.detach().numpy(), np.full(168, 1 / 168), rtol=1e-6)

    def test_attention_gradient_matches_finite_differences(self, long_attention, rng):
        """Autograd agrees with central differences through the mask and the masked pathway"""
        net = init_params(long_attention, 2).double()
        x = torch.from_numpy(excerpt_for(long_attention, rng).astype(np.float64))
        params = list(net.attention.parameters())
        assert_finite_difference_gradients(lambda: projected(encode_audio(x, net, use_attention=True)), params)
        assert_finite_difference_gradients(lambda: projected(attention_mask(x, net), dim=168), params)

    def test_frequency_permutation_leaves_mask_unchanged(self, long_attention, rng):
        """Time-only kernels summed over frequency ignore the order of the bins"""
        net = init_params(long_attention, 0)
        x = excerpt_for(long_attention, rng)
        permuted = x[rng.permutation(64)]
        np.testing.assert_allclose(attention_mask(x, net).detach().numpy(),
                                   attention_mask(permuted, net).detach().numpy(), atol=1e-6)

    def test_bypass_equals_plain_pathway(self, long_attention, rng):
        """With attention disabled the excerpt goes through the plain audio pathway"""
        net = init_params(long_attention, 0)
        x = excerpt_for(long_attention, rng)
        plain = net.audio(torch.from_numpy(x)[None, None])[0]
        assert torch.allclose(encode_audio(x, net, use_attention=False), plain)

    def test_one_hot_mask_keeps_single_frame(self, long_attention, rng):
        """A one-hot mask equals zeroing every other frame"""
        net = init_params(long_attention, 0)
        x = excerpt_for(long_attention, rng)
        mask = np.zeros(168, dtype=np.float32)
        mask[70] = 1.0
        zeroed = np.zeros_like(x)
        zeroed[:, 70] = x[:, 70]
        with_mask = encode_audio(x, net, mask=mask)
        manual = encode_audio(zeroed, net, use_attention=False)
        assert torch.allclose(with_mask, manual, atol=1e-6)

    def test_attention_on_short_context_rejected(self, arch, rng):
        """A short-context network without the opt-in cannot use attention"""
        with pytest.raises(ConfigError):
            encode_audio(excerpt_for(arch, rng), init_params(arch, 0), use_attention=True)
        with pytest.raises(ValueError):
            ArchConfig(audio_context="short", attention=True)

    def test_short_context_opt_in(self, rng):
        """attention_on_short builds a short-context attention branch"""
        arch = ArchConfig(audio_context="short", attention=True, attention_on_short=True)
        mask = attention_mask(excerpt_for(arch, rng), init_params(arch, 0))
        assert mask.shape == (42,)


class TestEncoderTransfer:
    """Moving pretrained pathway weights into a network"""

    def test_round_trip(self, arch):
        """An encoder state loads into a fresh network of the same architecture"""
        source, target = init_params(arch, 1), init_params(arch, 2)
        load_encoder(target, "audio", encoder_state(source, "audio"))
        for key, value in encoder_state(source, "audio").items():
            assert torch.equal(target.audio.state_dict()[key], value)
        assert not torch.equal(target.audio.projection.weight, source.audio.projection.weight)

    def test_mismatched_architecture(self, arch):
        """A dense-head encoder does not fit a pooled-head network"""
        state = encoder_state(init_params(arch, 1), "sheet")
        with pytest.raises(ConfigError):
            load_encoder(init_params(ArchConfig(head="pooled"), 1), "sheet", state)
