"""Stochastic transforms for sheet snippets and spectrogram excerpts.

Every transform draws from a numpy Generator seeded by the caller, so the
tuple (input, config, seed) fully determines the output. A config with every
transform disabled passes the input through unchanged.
"""
import logging
import math
from dataclasses import replace
from typing import List, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from a2s.errors import ArgumentError
from a2s.schemas.config import AudioAugConfig, AugmentConfig, SheetAugConfig
from a2s.synthdata import BACKGROUND, SnippetPair

logger = logging.getLogger(__name__)

AugConfig = Union[SheetAugConfig, AudioAugConfig]


def sub_seeds(seed: int, count: int) -> List[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


def sample_seed(seed: int, epoch: int, index: int) -> int:
    """Augmentation seed bound to (epoch, sample index) so worker scheduling cannot change draws."""
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


# -- sheet transforms --------------------------------------------------------

def shift_sheet(grid: np.ndarray, dx: int, dy: int, fill: float = BACKGROUND) -> np.ndarray:
    out = np.full_like(grid, fill)
    h, w = grid.shape
    src_r = slice(max(-dy, 0), min(h - dy, h))
    dst_r = slice(max(dy, 0), min(h + dy, h))
    src_c = slice(max(-dx, 0), min(w - dx, w))
    dst_c = slice(max(dx, 0), min(w + dx, w))
    if abs(dx) < w and abs(dy) < h:
        out[dst_r, dst_c] = grid[src_r, src_c]
    return out


def _fit_to_shape(grid: np.ndarray, shape: Tuple[int, int], fill: float) -> np.ndarray:
    """Center-crop or center-pad to `shape`."""
    out = np.full(shape, fill, dtype=grid.dtype)
    h, w = grid.shape
    th, tw = shape
    sr, dr = max((h - th) // 2, 0), max((th - h) // 2, 0)
    sc, dc = max((w - tw) // 2, 0), max((tw - w) // 2, 0)
    rh, rw = min(h, th), min(w, tw)
    out[dr:dr + rh, dc:dc + rw] = grid[sr:sr + rh, sc:sc + rw]
    return out


def resize_sheet(grid: np.ndarray, scale: float) -> np.ndarray:
    zoomed = ndimage.zoom(grid, scale, order=1, mode="constant", cval=BACKGROUND)
    return _fit_to_shape(zoomed, grid.shape, BACKGROUND)


def rotate_sheet(grid: np.ndarray, degrees: float) -> np.ndarray:
    return ndimage.rotate(grid, degrees, reshape=False, order=1, mode="constant", cval=BACKGROUND)


def elastic_deform(grid: np.ndarray, rng: np.random.Generator, sigma: float, smooth: float) -> np.ndarray:
    """Warp by a Gaussian-smoothed random displacement field rescaled to `sigma` pixels std."""
    fields = []
    for _ in range(2):
        raw = ndimage.gaussian_filter(rng.standard_normal(grid.shape), smooth, mode="reflect")
        std = raw.std()
        fields.append(raw / std * sigma if std > 0 else raw)
    rows, cols = np.meshgrid(np.arange(grid.shape[0]), np.arange(grid.shape[1]), indexing="ij")
    coords = np.array([rows + fields[0], cols + fields[1]])
    return ndimage.map_coordinates(grid, coords, order=1, mode="constant", cval=BACKGROUND).astype(grid.dtype)


def _fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6 - 15) + 10)


def _perlin_octave(shape: Tuple[int, int], cells: Tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    gy, gx = cells
    angles = rng.uniform(0.0, 2 * math.pi, size=(gy + 1, gx + 1))
    grad_y, grad_x = np.sin(angles), np.cos(angles)
    ys = np.linspace(0, gy, shape[0], endpoint=False)
    xs = np.linspace(0, gx, shape[1], endpoint=False)
    y0, x0 = ys.astype(int)[:, None], xs.astype(int)[None, :]
    fy, fx = (ys % 1.0)[:, None], (xs % 1.0)[None, :]

    def corner(oy, ox):
        return grad_y[y0 + oy, x0 + ox] * (fy - oy) + grad_x[y0 + oy, x0 + ox] * (fx - ox)

    u, v = _fade(fx), _fade(fy)
    top = corner(0, 0) * (1 - u) + corner(0, 1) * u
    bottom = corner(1, 0) * (1 - u) + corner(1, 1) * u
    return top * (1 - v) + bottom * v


def perlin_noise(shape: Tuple[int, int], rng: np.random.Generator, octaves: int = 3,
                 persistence: float = 0.5, base_cells: int = 2) -> np.ndarray:
    """Fractal gradient-lattice noise scaled to roughly [-1, 1]."""
    noise = np.zeros(shape)
    amplitude, norm = 1.0, 0.0
    for octave in range(octaves):
        cells = base_cells * 2 ** octave
        noise += amplitude * _perlin_octave(shape, (cells, cells), rng)
        norm += amplitude
        amplitude *= persistence
    return noise / norm


def augment_sheet(snippet: np.ndarray, cfg: SheetAugConfig, seed: int) -> np.ndarray:
    if snippet.ndim != 2:
        raise ArgumentError(f"sheet snippet must be 2-D, got shape {snippet.shape}")
    if cfg.is_identity:
        return snippet.copy()

    rng = np.random.default_rng(seed)
    out = snippet.astype(np.float32, copy=True)

    def fires(enabled: bool) -> bool:
        return enabled and rng.random() < cfg.probability

    if fires(cfg.shift):
        dx = int(rng.integers(cfg.shift_x[0], cfg.shift_x[1] + 1))
        dy = int(rng.integers(cfg.shift_y[0], cfg.shift_y[1] + 1))
        out = shift_sheet(out, dx, dy)
    if fires(cfg.resize):
        out = resize_sheet(out, float(rng.uniform(*cfg.scale)))
    if fires(cfg.rotate):
        out = rotate_sheet(out, float(rng.uniform(*cfg.rotation_deg)))
    if fires(cfg.elastic_small):
        out = elastic_deform(out, rng, cfg.small_sigma, cfg.small_smooth)
    if fires(cfg.elastic_large):
        out = elastic_deform(out, rng, cfg.large_sigma, cfg.large_smooth)
    if fires(cfg.gaussian_noise):
        out = out + rng.normal(0.0, float(rng.uniform(*cfg.noise_sigma)), size=out.shape)
    if fires(cfg.perlin_noise):
        octaves = int(rng.integers(cfg.perlin_octaves[0], cfg.perlin_octaves[1] + 1))
        out = out + float(rng.uniform(*cfg.perlin_amplitude)) * perlin_noise(out.shape, rng, octaves)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# -- audio transforms --------------------------------------------------------

def shift_time(grid: np.ndarray, frames: int) -> np.ndarray:
    out = np.zeros_like(grid)
    w = grid.shape[1]
    if 0 <= frames < w:
        out[:, frames:] = grid[:, :w - frames]
    elif -w < frames < 0:
        out[:, :w + frames] = grid[:, -frames:]
    return out


def invert_polarity(grid: np.ndarray) -> np.ndarray:
    """Sign flip of the mean-removed signal followed by rectification.

    Magnitudes do not change under a polarity flip, so the result equals the
    input up to rounding; the transform is kept for completeness of the menu.
    """
    mean = grid.mean()
    inverted = -(grid - mean)
    return np.abs(mean - inverted).astype(grid.dtype)


def apply_gain(grid: np.ndarray, gain_db: float) -> np.ndarray:
    return (grid * 10.0 ** (gain_db / 20.0)).astype(grid.dtype)


def apply_time_mask(grid: np.ndarray, offset: int, width: int) -> np.ndarray:
    out = grid.copy()
    out[:, offset:offset + width] = 0.0
    return out


def apply_freq_mask(grid: np.ndarray, offset: int, width: int) -> np.ndarray:
    out = grid.copy()
    out[offset:offset + width, :] = 0.0
    return out


def stretch_time(grid: np.ndarray, rate: float) -> np.ndarray:
    """Resample the time axis by 1/rate with linear interpolation, then center-crop/pad to the input width."""
    if rate <= 0:
        raise ArgumentError("stretch rate must be > 0")
    n_bins, width = grid.shape
    new_width = max(int(round(width / rate)), 1)
    source = np.linspace(0.0, width - 1, new_width)
    frames = np.arange(width)
    stretched = np.stack([np.interp(source, frames, row) for row in grid]).astype(grid.dtype)
    return _fit_to_shape(stretched, (n_bins, width), 0.0)


def equalize(grid: np.ndarray, gains_db: Sequence[float]) -> np.ndarray:
    """Per-band gain over contiguous bin groups; bins are log-spaced, so groups are equal log-frequency bands."""
    out = grid.copy()
    bands = np.array_split(np.arange(grid.shape[0]), len(gains_db))
    for band, gain in zip(bands, gains_db):
        out[band, :] *= 10.0 ** (gain / 20.0)
    return out


def augment_audio(excerpt: np.ndarray, cfg: AudioAugConfig, seed: int) -> np.ndarray:
    if excerpt.ndim != 2:
        raise ArgumentError(f"audio excerpt must be 2-D, got shape {excerpt.shape}")
    if cfg.is_identity:
        return excerpt.copy()

    rng = np.random.default_rng(seed)
    out = excerpt.astype(np.float32, copy=True)
    n_bins, width = out.shape

    def fires(enabled: bool) -> bool:
        return enabled and rng.random() < cfg.probability

    if fires(cfg.time_shift):
        out = shift_time(out, int(rng.integers(cfg.shift_frames[0], cfg.shift_frames[1] + 1)))
    if fires(cfg.polarity):
        out = invert_polarity(out)
    if fires(cfg.gaussian_noise):
        out = out + rng.normal(0.0, float(rng.uniform(*cfg.noise_sigma)), size=out.shape).astype(np.float32)
    if fires(cfg.gain):
        out = apply_gain(out, float(rng.uniform(*cfg.gain_db)))
    if fires(cfg.time_mask):
        w = min(int(rng.integers(cfg.time_mask_width[0], cfg.time_mask_width[1] + 1)), width - 1)
        out = apply_time_mask(out, int(rng.integers(0, width - w + 1)), w)
    if fires(cfg.freq_mask):
        w = min(int(rng.integers(cfg.freq_mask_width[0], cfg.freq_mask_width[1] + 1)), n_bins - 1)
        out = apply_freq_mask(out, int(rng.integers(0, n_bins - w + 1)), w)
    if fires(cfg.time_stretch):
        out = stretch_time(out, float(rng.uniform(*cfg.stretch_rate)))
    if fires(cfg.equalizer):
        out = equalize(out, rng.uniform(cfg.eq_gain_db[0], cfg.eq_gain_db[1], size=cfg.eq_bands))
    return np.maximum(out, 0.0).astype(np.float32)


def augment(sample: np.ndarray, cfg: AugConfig, seed: int) -> np.ndarray:
    if isinstance(cfg, SheetAugConfig):
        return augment_sheet(sample, cfg, seed)
    if isinstance(cfg, AudioAugConfig):
        return augment_audio(sample, cfg, seed)
    raise ArgumentError(f"unsupported augmentation config {type(cfg).__name__}")


def make_positive_pair(sample: np.ndarray, cfg: AugConfig, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Two independently augmented views of one single-modality sample."""
    seed_i, seed_j = sub_seeds(seed, 2)
    return augment(sample, cfg, seed_i), augment(sample, cfg, seed_j)


def corrupt_pairs(pairs: Sequence[SnippetPair], tier: str, cfg: AugmentConfig, seed: int) -> List[SnippetPair]:
    """Evaluation tiers: clean; partial = corrupted sheets + clean audio; noisy = both corrupted.

    Each returned pair carries `tier` as provenance so training code can refuse it.
    """
    if tier not in ("clean", "partial", "noisy"):
        raise ArgumentError(f"unknown tier {tier!r}")
    out = []
    for i, pair in enumerate(pairs):
        seed_sheet, seed_audio = sub_seeds(sample_seed(seed, 0, i), 2)
        sheet, audio = pair.sheet, pair.audio
        if tier in ("partial", "noisy"):
            sheet = augment_sheet(sheet, cfg.corrupt_sheet, seed_sheet)
        if tier == "noisy":
            audio = augment_audio(audio, cfg.corrupt_audio, seed_audio)
        out.append(replace(pair, sheet=sheet, audio=audio, tier=tier))
    logger.info(f"Prepared {len(out)} pairs for tier '{tier}'")
    return out
