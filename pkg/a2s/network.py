import logging
import math
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from a2s.errors import ArgumentError, ConfigError
from a2s.schemas.config import ArchConfig

logger = logging.getLogger(__name__)

Grid = Union[np.ndarray, torch.Tensor]

_ACTIVATIONS = {"elu": nn.ELU, "tanh": nn.Tanh, "softplus": nn.Softplus}
_EPS = 1e-6


def _conv_out(size: int, kernel: int, stride: int) -> int:
    return (size + 2 * (kernel // 2) - kernel) // stride + 1


class ConvPathway(nn.Module):
    """Conv blocks, a pooled (BL1) or dense (BL2) head, and the linear projection into the joint space."""

    def __init__(self, input_shape: Tuple[int, int], arch: ArchConfig, invert: bool = False,
                 peak_normalize: bool = False):
        super().__init__()
        self.input_shape = tuple(input_shape)
        self.invert = invert
        self.peak_normalize = peak_normalize
        activation = _ACTIVATIONS[arch.nonlinearity]

        layers = []
        channels = 1
        h, w = input_shape
        for block in range(arch.n_blocks):
            out_channels = arch.base_channels * 2 ** block
            layers += [nn.Conv2d(channels, out_channels, arch.kernel_size, stride=arch.stride,
                                 padding=arch.kernel_size // 2), activation()]
            channels = out_channels
            h, w = _conv_out(h, arch.kernel_size, arch.stride), _conv_out(w, arch.kernel_size, arch.stride)
        self.features = nn.Sequential(*layers)
        self.feature_shape = (channels, h, w)

        if arch.head == "pooled":
            self.head = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten())
            head_dim = channels
        else:
            self.head = nn.Sequential(nn.Flatten(), nn.Linear(channels * h * w, arch.dense_units), activation())
            head_dim = arch.dense_units
        self.head_dim = head_dim
        # one linear map per pathway into the shared space, L2 normalised in forward()
        self.projection = nn.Linear(head_dim, arch.embedding_dim)

    def prepare(self, x: torch.Tensor) -> torch.Tensor:
        if self.invert:
            x = 1.0 - x
        if self.peak_normalize:
            x = x / (x.abs().amax(dim=(2, 3), keepdim=True) + _EPS)
        return x

    def represent(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(self.prepare(x)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.projection(self.represent(x)), dim=1)


class AttentionBranch(nn.Module):
    """Per-frame softmax weights from time-only convolutions summed over frequency.

    Kernels span a single frequency bin, so permuting bins leaves the mask unchanged.
    """

    def __init__(self, arch: ArchConfig):
        super().__init__()
        activation = _ACTIVATIONS[arch.nonlinearity]
        k = arch.attention_kernel
        layers = []
        channels = 1
        for _ in range(arch.attention_layers):
            layers += [nn.Conv2d(channels, arch.attention_channels, (1, k), padding=(0, k // 2)), activation()]
            channels = arch.attention_channels
        self.time_convs = nn.Sequential(*layers)
        self.score = nn.Conv1d(channels, 1, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x / (x.abs().amax(dim=(2, 3), keepdim=True) + _EPS)
        pooled = self.time_convs(x).sum(dim=2)
        return torch.softmax(self.score(pooled).squeeze(1), dim=1)


class EmbeddingNetwork(nn.Module):
    def __init__(self, arch: ArchConfig, seed: Optional[int] = None):
        super().__init__()
        self.arch = arch
        self.init_seed = seed
        self.sheet = ConvPathway(arch.sheet_shape, arch, invert=True)
        self.audio = ConvPathway((arch.n_bins, arch.audio_frames), arch, peak_normalize=True)
        self.attention = AttentionBranch(arch) if arch.attention else None

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def pathway(self, modality: str) -> ConvPathway:
        if modality == "sheet":
            return self.sheet
        if modality == "audio":
            return self.audio
        raise ArgumentError(f"unknown modality {modality!r}")

    def embed_sheet(self, x: torch.Tensor) -> torch.Tensor:
        return self.sheet(x)

    def attention_mask(self, x: torch.Tensor) -> torch.Tensor:
        if self.attention is None:
            raise ConfigError(f"network {self.arch.tag} has no attention branch")
        return self.attention(x)

    def embed_audio(self, x: torch.Tensor, use_attention: Optional[bool] = None,
                    mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        if use_attention is None:
            use_attention = self.attention is not None and mask is None
        if use_attention:
            if self.attention is None:
                raise ConfigError(f"attention requested but network {self.arch.tag} was built without it "
                                  f"(context={self.arch.audio_context})")
            mask = self.attention(x)
        if mask is not None:
            x = x * mask[:, None, None, :]
        return self.audio(x)


def init_params(arch: ArchConfig, seed: int) -> EmbeddingNetwork:
    """Build both pathways and draw every weight and bias from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    try:
        with torch.random.fork_rng(devices=[]):
            net = EmbeddingNetwork(arch, seed)
    except (RuntimeError, ValueError) as e:
        raise ConfigError(f"Architecture {arch.tag} is inconsistent: {e}") from e
    for name, (c, h, w) in (("sheet", net.sheet.feature_shape), ("audio", net.audio.feature_shape)):
        if h < 1 or w < 1:
            raise ConfigError(f"{name} pathway downsamples its input to nothing")

    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in net.modules():
            if isinstance(module, (nn.Conv1d, nn.Conv2d, nn.Linear)):
                bound = 1.0 / math.sqrt(module.weight[0].numel())
                module.weight.uniform_(-bound, bound, generator=generator)
                module.bias.uniform_(-bound, bound, generator=generator)
    logger.debug(f"Initialised {arch.tag} with seed {seed}: {parameter_count(net)} parameters")
    return net


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def _as_batch(x: Grid, shape: Sequence[int], dtype: torch.dtype) -> Tuple[torch.Tensor, bool]:
    t = torch.as_tensor(x).to(dtype)
    single = t.dim() == 2
    if single:
        t = t.unsqueeze(0)
    if t.dim() == 4 and t.shape[1] == 1:
        t = t[:, 0]
    if t.dim() != 3 or tuple(t.shape[-2:]) != tuple(shape):
        raise ArgumentError(f"expected input of shape {tuple(shape)} (or a batch of them), got {tuple(t.shape)}")
    return t.unsqueeze(1), single


def encode_sheet(snippet: Grid, params: EmbeddingNetwork) -> torch.Tensor:
    x, single = _as_batch(snippet, params.sheet.input_shape, params.dtype)
    z = params.embed_sheet(x)
    return z[0] if single else z


def encode_audio(excerpt: Grid, params: EmbeddingNetwork, use_attention: Optional[bool] = None,
                 mask: Optional[Grid] = None) -> torch.Tensor:
    if use_attention and params.arch.audio_context == "short" and not params.arch.attention_on_short:
        raise ConfigError("attention requested with the short audio context")
    x, single = _as_batch(excerpt, params.audio.input_shape, params.dtype)
    if mask is not None:
        mask = torch.as_tensor(mask).to(params.dtype)
        mask = mask.unsqueeze(0) if mask.dim() == 1 else mask
    z = params.embed_audio(x, use_attention=use_attention, mask=mask)
    return z[0] if single else z


def attention_mask(excerpt: Grid, params: EmbeddingNetwork) -> torch.Tensor:
    x, single = _as_batch(excerpt, params.audio.input_shape, params.dtype)
    mask = params.attention_mask(x)
    return mask[0] if single else mask


@torch.no_grad()
def embed_many(net: EmbeddingNetwork, grids: Sequence[np.ndarray], modality: str,
               batch_size: int = 128) -> np.ndarray:
    """Inference over a list of snippets; returns float32 rows of unit norm."""
    was_training = net.training
    net.eval()
    if modality not in ("sheet", "audio"):
        raise ArgumentError(f"unknown modality {modality!r}")
    encode = encode_sheet if modality == "sheet" else encode_audio
    chunks = []
    for start in range(0, len(grids), batch_size):
        batch = np.stack(grids[start:start + batch_size])
        chunks.append(encode(batch, net).cpu().numpy().astype(np.float32))
    net.train(was_training)
    if not chunks:
        return np.zeros((0, net.arch.embedding_dim), dtype=np.float32)
    return np.concatenate(chunks)


def encoder_state(net: EmbeddingNetwork, modality: str) -> Dict[str, torch.Tensor]:
    """Conv stack and head of one pathway; the projection stays with paired training."""
    state = net.pathway(modality).state_dict()
    return {k: v.detach().clone() for k, v in state.items() if not k.startswith("projection.")}


def load_encoder(net: EmbeddingNetwork, modality: str, state: Dict[str, torch.Tensor]) -> None:
    pathway = net.pathway(modality)
    try:
        missing, unexpected = pathway.load_state_dict(state, strict=False)
    except RuntimeError as e:
        raise ConfigError(f"Pretrained {modality} encoder does not fit {net.arch.tag}: {e}") from e
    if unexpected or any(not key.startswith("projection.") for key in missing):
        raise ConfigError(f"Pretrained {modality} encoder keys do not match: missing={missing}, "
                          f"unexpected={unexpected}")
