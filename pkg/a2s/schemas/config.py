import json
import os
from typing import Any, Dict, List, Literal, Optional, Tuple

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from a2s.errors import ConfigError

# Geometry shared by the renderer and the encoders
PAGE_HEIGHT = 1181
PAGE_WIDTH = 835
SNIPPET_HEIGHT = 160
SNIPPET_WIDTH = 180
N_BINS = 64
FRAME_RATE = 20.0
SHORT_CONTEXT = 42
LONG_CONTEXT = 4 * SHORT_CONTEXT
CONTEXT_FRAMES = {"short": SHORT_CONTEXT, "long": LONG_CONTEXT}

Context = Literal["short", "long"]
Tier = Literal["clean", "partial", "noisy"]
Range = Tuple[float, float]
IntRange = Tuple[int, int]


def _non_empty(value):
    if value[0] > value[1]:
        raise ValueError(f"range {tuple(value)} is empty (low > high)")
    return value


class _Config(BaseModel):
    model_config = ConfigDict(extra="forbid")


class RenderConfig(_Config):
    """Toy engraving and spectrogram synthesis parameters."""
    n_bins: int = Field(N_BINS, ge=8)
    frame_rate: float = Field(FRAME_RATE, gt=0)
    fmin: float = Field(30.0, gt=0)
    fmax: float = Field(8000.0, gt=0)
    bin_spread: float = Field(0.6, gt=0)
    decay_seconds: float = Field(0.5, gt=0)
    release_frames: int = Field(4, ge=0)
    tail_frames: int = Field(10, ge=1)
    px_per_beat: int = Field(40, ge=4)
    margin_x: int = Field(40, ge=0)
    first_staff_y: int = Field(130, ge=SNIPPET_HEIGHT // 2)
    staff_spacing: int = Field(200, ge=SNIPPET_HEIGHT // 2)
    line_gap: int = Field(8, ge=2)
    px_per_semitone: float = Field(2.0, gt=0)
    reference_pitch: int = 66
    notehead_rx: float = Field(5.0, gt=0)
    notehead_ry: float = Field(4.0, gt=0)
    beats_per_bar: int = Field(4, ge=1)
    max_pages: int = Field(4, ge=1)

    @model_validator(mode="after")
    def check_layout(self):
        if self.fmin >= self.fmax:
            raise ValueError("fmin must be below fmax")
        if self.px_per_beat > PAGE_WIDTH - 2 * self.margin_x:
            raise ValueError("px_per_beat leaves no room for a single beat per staff line")
        if self.first_staff_y + SNIPPET_HEIGHT // 2 > PAGE_HEIGHT:
            raise ValueError("first staff does not fit on the page")
        return self


class ArchConfig(_Config):
    """Two-pathway encoder layout; `head` switches between BL1 (pooled) and BL2 (dense)."""
    embedding_dim: int = 32
    n_blocks: int = Field(4, ge=1)
    base_channels: int = Field(16, ge=1)
    kernel_size: int = Field(3, ge=1)
    stride: int = Field(2, ge=1)
    nonlinearity: Literal["elu", "tanh", "softplus"] = "elu"
    head: Literal["pooled", "dense"] = "dense"
    dense_units: int = Field(128, ge=1)
    audio_context: Context = "short"
    attention: bool = False
    attention_on_short: bool = False
    attention_channels: int = Field(16, ge=1)
    attention_kernel: int = Field(5, ge=1)
    attention_layers: int = Field(2, ge=1)
    n_bins: int = N_BINS
    sheet_shape: IntRange = (SNIPPET_HEIGHT, SNIPPET_WIDTH)

    @field_validator("embedding_dim")
    @classmethod
    def check_dim_is_32(cls, value):
        if value != 32:
            raise ValueError("embedding_dim is fixed at 32")
        return value

    @field_validator("sheet_shape")
    @classmethod
    def check_sheet_matches_snippets(cls, value):
        if tuple(value) != (SNIPPET_HEIGHT, SNIPPET_WIDTH):
            raise ValueError(f"sheet_shape must be {(SNIPPET_HEIGHT, SNIPPET_WIDTH)}")
        return value

    @field_validator("kernel_size", "attention_kernel")
    @classmethod
    def check_odd_kernel(cls, value):
        if value % 2 == 0:
            raise ValueError("kernel sizes must be odd")
        return value

    @model_validator(mode="after")
    def check_attention_context(self):
        if self.attention and self.audio_context == "short" and not self.attention_on_short:
            raise ValueError("attention requires the long audio context (set attention_on_short to override)")
        return self

    @property
    def audio_frames(self) -> int:
        return CONTEXT_FRAMES[self.audio_context]

    @property
    def tag(self) -> str:
        base = "BL1" if self.head == "pooled" else "BL2"
        return f"{base}-{self.audio_context}" + ("-at" if self.attention else "")


class NTXentConfig(_Config):
    tau: float = Field(0.5, gt=0)
    reduction: Literal["sum", "mean"] = "mean"


class LossConfig(_Config):
    margin: float = Field(0.7, ge=0)
    ntxent: NTXentConfig = Field(default_factory=NTXentConfig)


class TrainConfig(_Config):
    regime: Literal["paired", "pretrain_sheet", "pretrain_audio", "finetune"] = "paired"
    batch_size: int = Field(32, ge=2)
    epochs: int = Field(30, ge=0)
    learning_rate: float = Field(1e-3, ge=0)
    optimizer: Literal["adam", "sgd"] = "adam"
    betas: Range = (0.9, 0.999)
    momentum: float = Field(0.9, ge=0, lt=1)
    lr_factor: float = Field(0.5, gt=0, lt=1)
    lr_patience: int = Field(5, ge=0)
    early_stop_patience: int = Field(10, ge=1)
    val_fraction: float = Field(0.2, gt=0, lt=1)
    checkpoint: Literal["best", "last"] = "best"
    seed: int = 0
    num_workers: int = Field(0, ge=0)
    progress: bool = False


class SheetAugConfig(_Config):
    """Sheet-snippet transforms; each enabled transform fires with `probability`."""
    probability: float = Field(0.5, ge=0, le=1)
    shift: bool = True
    shift_x: IntRange = (-8, 8)
    shift_y: IntRange = (-8, 8)
    resize: bool = True
    scale: Range = (0.9, 1.1)
    rotate: bool = True
    rotation_deg: Range = (-3.0, 3.0)
    gaussian_noise: bool = True
    noise_sigma: Range = (0.0, 0.08)
    perlin_noise: bool = True
    perlin_octaves: IntRange = (2, 4)
    perlin_amplitude: Range = (0.0, 0.3)
    elastic_small: bool = True
    small_sigma: float = Field(2.0, ge=0)
    small_smooth: float = Field(8.0, gt=0)
    elastic_large: bool = True
    large_sigma: float = Field(8.0, ge=0)
    large_smooth: float = Field(24.0, gt=0)

    @field_validator("shift_x", "shift_y", "scale", "rotation_deg", "noise_sigma",
                     "perlin_octaves", "perlin_amplitude")
    @classmethod
    def check_ranges(cls, value):
        return _non_empty(value)

    @field_validator("scale")
    @classmethod
    def check_positive_scale(cls, value):
        if value[0] <= 0:
            raise ValueError("scale factors must be positive")
        return value

    @field_validator("perlin_octaves")
    @classmethod
    def check_octaves(cls, value):
        if value[0] < 1:
            raise ValueError("perlin noise needs at least one octave")
        return value

    @classmethod
    def disabled(cls) -> "SheetAugConfig":
        return cls(shift=False, resize=False, rotate=False, gaussian_noise=False,
                   perlin_noise=False, elastic_small=False, elastic_large=False)

    @property
    def is_identity(self) -> bool:
        return not (self.shift or self.resize or self.rotate or self.gaussian_noise
                    or self.perlin_noise or self.elastic_small or self.elastic_large)


class AudioAugConfig(_Config):
    """Spectrogram-excerpt transforms; each enabled transform fires with `probability`."""
    probability: float = Field(0.5, ge=0, le=1)
    time_shift: bool = True
    shift_frames: IntRange = (-4, 4)
    polarity: bool = True
    gaussian_noise: bool = True
    noise_sigma: Range = (0.0, 0.05)
    gain: bool = True
    gain_db: Range = (-6.0, 6.0)
    time_mask: bool = True
    time_mask_width: IntRange = (0, 8)
    freq_mask: bool = True
    freq_mask_width: IntRange = (0, 8)
    time_stretch: bool = True
    stretch_rate: Range = (0.8, 1.25)
    equalizer: bool = True
    eq_bands: int = Field(7, ge=1)
    eq_gain_db: Range = (-6.0, 6.0)

    @field_validator("shift_frames", "noise_sigma", "gain_db", "time_mask_width",
                     "freq_mask_width", "stretch_rate", "eq_gain_db")
    @classmethod
    def check_ranges(cls, value):
        return _non_empty(value)

    @field_validator("stretch_rate")
    @classmethod
    def check_positive_rate(cls, value):
        if value[0] <= 0:
            raise ValueError("stretch rate must be > 0")
        return value

    @field_validator("time_mask_width")
    @classmethod
    def check_time_mask_fits(cls, value):
        if value[0] < 0 or value[1] >= SHORT_CONTEXT:
            raise ValueError(f"time mask width must lie in [0, {SHORT_CONTEXT})")
        return value

    @field_validator("freq_mask_width")
    @classmethod
    def check_freq_mask_fits(cls, value):
        if value[0] < 0 or value[1] >= N_BINS:
            raise ValueError(f"frequency mask width must lie in [0, {N_BINS})")
        return value

    @classmethod
    def disabled(cls) -> "AudioAugConfig":
        return cls(time_shift=False, polarity=False, gaussian_noise=False, gain=False,
                   time_mask=False, freq_mask=False, time_stretch=False, equalizer=False)

    @property
    def is_identity(self) -> bool:
        return not (self.time_shift or self.polarity or self.gaussian_noise or self.gain
                    or self.time_mask or self.freq_mask or self.time_stretch or self.equalizer)


def heavy_sheet_preset() -> SheetAugConfig:
    """Scan-like corruption used for the partially and fully corrupted tiers."""
    return SheetAugConfig(probability=0.9, shift_x=(-12, 12), shift_y=(-10, 10), scale=(0.85, 1.15),
                          rotation_deg=(-5.0, 5.0), noise_sigma=(0.05, 0.15),
                          perlin_amplitude=(0.15, 0.4))


def heavy_audio_preset() -> AudioAugConfig:
    """Recording-like corruption used for the fully corrupted tier."""
    return AudioAugConfig(probability=0.9, polarity=False, noise_sigma=(0.05, 0.15),
                          gain_db=(-9.0, 9.0), time_mask_width=(0, 6), freq_mask_width=(0, 6),
                          stretch_rate=(0.75, 1.33), eq_gain_db=(-9.0, 9.0))


class AugmentConfig(_Config):
    sheet: SheetAugConfig = Field(default_factory=SheetAugConfig)
    audio: AudioAugConfig = Field(default_factory=AudioAugConfig)
    corrupt_sheet: SheetAugConfig = Field(default_factory=heavy_sheet_preset)
    corrupt_audio: AudioAugConfig = Field(default_factory=heavy_audio_preset)


class DataConfig(_Config):
    n_train_pieces: int = Field(100, ge=2)
    n_test_pieces: int = Field(50, ge=1)
    notes_per_piece: int = Field(40, ge=1)
    pitch_low: int = Field(48, ge=0)
    pitch_high: int = Field(84, le=128)
    base_tempo_bpm: float = Field(120.0, gt=0)
    tempo_points: int = Field(4, ge=1)
    train_tempo_range: Range = (0.8, 1.25)
    test_tempo_range: Range = (0.5, 2.0)
    pretrain_pool: int = Field(512, ge=4)
    tier: Tier = "clean"
    use_cache: bool = True

    @field_validator("train_tempo_range", "test_tempo_range")
    @classmethod
    def check_ranges(cls, value):
        return _non_empty(value)

    @field_validator("train_tempo_range", "test_tempo_range")
    @classmethod
    def check_tempo_bounds(cls, value):
        if value[0] < 0.5 or value[1] > 2.0:
            raise ValueError("tempo multipliers must stay within [0.5, 2.0]")
        return value

    @model_validator(mode="after")
    def check_pitch_range(self):
        if self.pitch_low >= self.pitch_high:
            raise ValueError("pitch_low must be below pitch_high")
        return self


class EvalConfig(_Config):
    pool_size: int = Field(2000, ge=1)
    directions: List[Literal["audio-to-sheet", "sheet-to-audio"]] = ["audio-to-sheet", "sheet-to-audio"]


class PieceIdConfig(_Config):
    n_pieces: int = Field(20, ge=1)
    notes_per_piece: int = Field(48, ge=1)
    sheet_window: int = Field(SNIPPET_WIDTH, ge=1)
    sheet_hop: int = Field(90, ge=1)
    audio_hop: int = Field(21, ge=1)
    normalize: bool = True
    models: List[Literal["BL", "BL+A+S"]] = ["BL", "BL+A+S"]
    self_queries: bool = True

    @field_validator("sheet_window")
    @classmethod
    def check_window_matches_encoder(cls, value):
        if value != SNIPPET_WIDTH:
            raise ValueError(f"sheet_window must equal the encoder input width {SNIPPET_WIDTH}")
        return value

    @field_validator("models")
    @classmethod
    def check_models(cls, value):
        if not value or len(set(value)) != len(value):
            raise ValueError("pieceid.models must list each model once")
        return value


def _pretrain_defaults() -> TrainConfig:
    return TrainConfig(regime="pretrain_sheet", batch_size=64, epochs=10)


class ExperimentConfig(_Config):
    data: DataConfig = Field(default_factory=DataConfig)
    render: RenderConfig = Field(default_factory=RenderConfig)
    arch: ArchConfig = Field(default_factory=ArchConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    pretrain: TrainConfig = Field(default_factory=_pretrain_defaults)
    loss: LossConfig = Field(default_factory=LossConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    pieceid: PieceIdConfig = Field(default_factory=PieceIdConfig)
    seeds: List[int] = [1, 2, 3]
    jobs: int = Field(1, ge=1)
    out_dir: str = "runs"

    @model_validator(mode="after")
    def check_consistency(self):
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.arch.n_bins != self.render.n_bins:
            raise ValueError("arch.n_bins must equal render.n_bins")
        total = self.data.n_test_pieces * self.data.notes_per_piece
        if self.eval.pool_size > total:
            raise ValueError(f"eval.pool_size {self.eval.pool_size} exceeds the {total} test snippets")
        return self


def _decode(raw: Optional[str]) -> Any:
    if raw is None:
        raise ConfigError("config lines need a value (key = value)")
    try:
        return json.loads(raw)
    except ValueError:
        return raw


def parse_config_text(values: Dict[str, Optional[str]]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for key, raw in values.items():
        parts = key.split(".")
        node = nested
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"config key {key} conflicts with a scalar at {part}")
            node = child
        node[parts[-1]] = _decode(raw)
    return nested


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """Read a flat dotted-key config file and validate it into an ExperimentConfig."""
    if path and not os.path.isfile(path):
        raise ConfigError(f"Config file not found: {path}")
    nested = parse_config_text(dotenv_values(path, interpolate=False)) if path else {}
    for key, value in (overrides or {}).items():
        parse_target = parse_config_text({key: json.dumps(value)})
        _merge(nested, parse_target)
    try:
        return ExperimentConfig.model_validate(nested)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


def _merge(base: Dict[str, Any], update: Dict[str, Any]) -> None:
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = value


def flatten(values: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for key, value in values.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten(value, f"{dotted}."))
        else:
            flat[dotted] = value
    return flat


def dump_config(cfg: ExperimentConfig) -> str:
    """Every field as `dotted.key = json-value`; the output is itself a valid config file."""
    flat = flatten(cfg.model_dump(mode="json"))
    return "".join(f"{key} = {json.dumps(value)}\n" for key, value in flat.items())
