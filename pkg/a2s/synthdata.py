"""Synthetic aligned score/performance generation.

Both modalities are rendered from the same symbolic note list, so every note
has an exact (sheet coordinate, onset frame) correspondence. Snippet pairs are
cut around those anchors; whole documents are cut with a sliding window.
"""
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from a2s.errors import ArgumentError, CapacityError
from a2s.schemas.config import (
    CONTEXT_FRAMES, PAGE_HEIGHT, PAGE_WIDTH, SNIPPET_HEIGHT, SNIPPET_WIDTH, RenderConfig,
)
from a2s.schemas.report import AlignmentRecord

logger = logging.getLogger(__name__)

BACKGROUND = 1.0
INK = 0.0
ONSET_STEPS = (0.5, 1.0, 2.0)
N_PARTIALS = 4
STAFF_LINES = 5


@dataclass(frozen=True)
class NoteEvent:
    pitch: int
    onset_beats: float
    duration_beats: float

    def __post_init__(self):
        if self.duration_beats <= 0:
            raise ArgumentError(f"duration_beats must be positive, got {self.duration_beats}")
        if self.onset_beats < 0:
            raise ArgumentError(f"onset_beats must be non-negative, got {self.onset_beats}")


@dataclass(frozen=True)
class SymbolicPiece:
    piece_id: str
    notes: Tuple[NoteEvent, ...]
    base_tempo_bpm: float = 120.0

    def __post_init__(self):
        if not self.notes:
            raise ArgumentError("a piece needs at least one note")
        if self.base_tempo_bpm <= 0:
            raise ArgumentError("base_tempo_bpm must be positive")
        onsets = [note.onset_beats for note in self.notes]
        if any(b < a for a, b in zip(onsets, onsets[1:])):
            raise ArgumentError("note onsets must be non-decreasing")

    @property
    def onsets(self) -> np.ndarray:
        return np.array([note.onset_beats for note in self.notes], dtype=np.float64)

    @property
    def offsets(self) -> np.ndarray:
        return np.array([note.onset_beats + note.duration_beats for note in self.notes], dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "piece_id": self.piece_id,
            "base_tempo_bpm": self.base_tempo_bpm,
            "notes": [[n.pitch, n.onset_beats, n.duration_beats] for n in self.notes],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SymbolicPiece":
        notes = tuple(NoteEvent(int(p), float(o), float(d)) for p, o, d in data["notes"])
        return cls(piece_id=data["piece_id"], notes=notes, base_tempo_bpm=float(data["base_tempo_bpm"]))


@dataclass(frozen=True)
class TempoCurve:
    """Piecewise-linear tempo multiplier over beat position; constant past the last point."""
    points: Tuple[Tuple[float, float], ...] = ((0.0, 1.0),)

    def __post_init__(self):
        if not self.points or self.points[0][0] != 0.0:
            raise ArgumentError("the first tempo control point must sit at beat 0")
        beats = [b for b, _ in self.points]
        if any(b1 <= b0 for b0, b1 in zip(beats, beats[1:])):
            raise ArgumentError("tempo control points must be strictly increasing in beat")
        for _, multiplier in self.points:
            if not 0.5 <= multiplier <= 2.0:
                raise ArgumentError(f"tempo multiplier {multiplier} outside [0.5, 2.0]")

    @classmethod
    def constant(cls, multiplier: float = 1.0) -> "TempoCurve":
        return cls(((0.0, float(multiplier)),))

    def multiplier(self, beat: float) -> float:
        beats, mults = zip(*self.points)
        return float(np.interp(beat, beats, mults))

    def seconds_at(self, beats: Union[float, np.ndarray], base_bpm: float) -> np.ndarray:
        """Integrate 60 / (base_bpm * m(b)) db from 0; exact for piecewise-linear m."""
        beats = np.asarray(beats, dtype=np.float64)
        total = np.zeros_like(beats)
        for i, (b0, m0) in enumerate(self.points):
            if i + 1 < len(self.points):
                b1, m1 = self.points[i + 1]
            else:
                b1, m1 = math.inf, m0
            span = np.clip(beats, b0, b1) - b0
            if m1 == m0:
                total += span / m0
            else:
                slope = (m1 - m0) / (b1 - b0)
                total += np.log1p(slope * span / m0) / slope
        return total * 60.0 / base_bpm

    def to_list(self) -> List[List[float]]:
        return [[b, m] for b, m in self.points]


def random_tempo_curve(rng: np.random.Generator, span_beats: float, n_points: int,
                       multiplier_range: Tuple[float, float]) -> TempoCurve:
    low, high = multiplier_range
    if n_points <= 1 or span_beats <= 0:
        return TempoCurve.constant(float(rng.uniform(low, high)))
    beats = np.linspace(0.0, span_beats, n_points)
    mults = rng.uniform(low, high, size=n_points)
    return TempoCurve(tuple((float(b), float(m)) for b, m in zip(beats, mults)))


@dataclass(frozen=True)
class ScoreLayout:
    beats_per_system: int
    system_width: int
    x_start: int
    system_y: Tuple[int, ...]
    n_pages: int


@dataclass
class RenderedScore:
    """Pages stacked vertically into one (n_pages * 1181) x 835 grid."""
    image: np.ndarray
    note_x: np.ndarray
    note_y: np.ndarray
    note_staff_y: np.ndarray
    layout: ScoreLayout

    @property
    def pages(self) -> List[np.ndarray]:
        return [self.image[p * PAGE_HEIGHT:(p + 1) * PAGE_HEIGHT] for p in range(self.layout.n_pages)]


@dataclass
class Performance:
    spectrogram: np.ndarray
    frame_rate: float
    note_onset_frame: np.ndarray

    @property
    def n_frames(self) -> int:
        return int(self.spectrogram.shape[1])


@dataclass
class AlignedPiece:
    piece: SymbolicPiece
    score: RenderedScore
    performance: Performance
    tempo: TempoCurve = field(default_factory=TempoCurve)
    render: RenderConfig = field(default_factory=RenderConfig)

    @property
    def piece_id(self) -> str:
        return self.piece.piece_id

    @property
    def alignment(self) -> List[Tuple[int, int]]:
        return [(int(x), int(f)) for x, f in zip(self.score.note_x, self.performance.note_onset_frame)]

    def alignment_records(self) -> List[AlignmentRecord]:
        return [
            AlignmentRecord(note_index=i, x=float(self.score.note_x[i]), y=float(self.score.note_y[i]),
                            onset_frame=int(self.performance.note_onset_frame[i]))
            for i in range(len(self.piece.notes))
        ]


@dataclass
class SnippetPair:
    sheet: np.ndarray
    audio: np.ndarray
    piece_id: str
    anchor_note_index: int
    tier: str = "clean"


def piece_seed(global_seed: int, piece_index: int, stream: int = 0) -> int:
    """Independent per-piece seed so pieces can be generated in any order or in parallel."""
    return int(np.random.SeedSequence([global_seed, piece_index, stream]).generate_state(1)[0])


def generate_piece(seed: int, n_notes: int, pitch_range: Tuple[int, int],
                   base_tempo_bpm: float = 120.0, piece_id: Optional[str] = None) -> SymbolicPiece:
    """Monophonic random walk: inter-onset steps drawn from {0.5, 1, 2} beats, pitch steps of up to 5 semitones."""
    if n_notes < 1:
        raise ArgumentError(f"n_notes must be >= 1, got {n_notes}")
    low, high = pitch_range
    if low >= high or low < 0 or high > 128:
        raise ArgumentError(f"invalid pitch range {pitch_range}")

    rng = np.random.default_rng(seed)
    steps = rng.choice(ONSET_STEPS, size=n_notes)
    onsets = np.concatenate([[0.0], np.cumsum(steps[:-1])])
    pitch = int(rng.integers(low, high))
    notes = []
    for onset, step in zip(onsets, steps):
        notes.append(NoteEvent(pitch=pitch, onset_beats=float(onset), duration_beats=float(step)))
        pitch += int(rng.integers(-5, 6))
        # reflect back into [low, high)
        if pitch < low:
            pitch = min(2 * low - pitch, high - 1)
        elif pitch >= high:
            pitch = max(2 * (high - 1) - pitch, low)
    return SymbolicPiece(piece_id=piece_id or f"piece-{seed}", notes=tuple(notes), base_tempo_bpm=base_tempo_bpm)


def _systems_per_page(cfg: RenderConfig) -> int:
    return 1 + (PAGE_HEIGHT - SNIPPET_HEIGHT // 2 - cfg.first_staff_y) // cfg.staff_spacing


def _fill_ellipse(image: np.ndarray, cx: float, cy: float, rx: float, ry: float) -> None:
    y0, y1 = max(int(cy - ry) - 1, 0), min(int(cy + ry) + 2, image.shape[0])
    x0, x1 = max(int(cx - rx) - 1, 0), min(int(cx + rx) + 2, image.shape[1])
    yy, xx = np.mgrid[y0:y1, x0:x1]
    inside = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    image[y0:y1, x0:x1][inside] = INK


def render_score(piece: SymbolicPiece, cfg: RenderConfig) -> RenderedScore:
    beats_per_system = (PAGE_WIDTH - 2 * cfg.margin_x) // cfg.px_per_beat
    system_width = beats_per_system * cfg.px_per_beat
    spp = _systems_per_page(cfg)

    onsets = piece.onsets
    systems = np.floor(onsets / beats_per_system).astype(int)
    n_systems = int(systems.max()) + 1
    n_pages = -(-n_systems // spp)
    if n_pages > cfg.max_pages:
        raise CapacityError(f"Piece {piece.piece_id} needs {n_pages} pages, only {cfg.max_pages} configured")

    system_y = tuple(
        (s // spp) * PAGE_HEIGHT + cfg.first_staff_y + (s % spp) * cfg.staff_spacing for s in range(n_systems)
    )
    image = np.full((n_pages * PAGE_HEIGHT, PAGE_WIDTH), BACKGROUND, dtype=np.float32)
    half_staff = (STAFF_LINES // 2) * cfg.line_gap
    for cy in system_y:
        for k in range(STAFF_LINES):
            image[cy - half_staff + k * cfg.line_gap, cfg.margin_x:cfg.margin_x + system_width + 1] = INK
        for beat in range(0, beats_per_system + 1, cfg.beats_per_bar):
            x = cfg.margin_x + beat * cfg.px_per_beat
            image[cy - half_staff:cy + half_staff + 1, x] = INK

    reach = SNIPPET_HEIGHT // 2 - cfg.notehead_ry - 1
    staff_y = np.array([system_y[s] for s in systems], dtype=np.int64)
    offsets = onsets - systems * beats_per_system
    note_x = np.rint(cfg.margin_x + (offsets + 0.5) * cfg.px_per_beat).astype(np.int64)
    pitches = np.array([note.pitch for note in piece.notes], dtype=np.float64)
    dy = np.clip((pitches - cfg.reference_pitch) * cfg.px_per_semitone, -reach, reach)
    note_y = np.rint(staff_y - dy).astype(np.int64)
    for x, y in zip(note_x, note_y):
        _fill_ellipse(image, float(x), float(y), cfg.notehead_rx, cfg.notehead_ry)

    layout = ScoreLayout(beats_per_system=beats_per_system, system_width=system_width,
                         x_start=cfg.margin_x, system_y=system_y, n_pages=n_pages)
    return RenderedScore(image=image, note_x=note_x, note_y=note_y, note_staff_y=staff_y, layout=layout)


def bin_frequencies(cfg: RenderConfig) -> np.ndarray:
    return cfg.fmin * (cfg.fmax / cfg.fmin) ** (np.arange(cfg.n_bins) / (cfg.n_bins - 1))


def _spectral_profile(pitch: int, cfg: RenderConfig) -> np.ndarray:
    bins = np.arange(cfg.n_bins, dtype=np.float64)
    f0 = 440.0 * 2.0 ** ((pitch - 69) / 12.0)
    profile = np.zeros(cfg.n_bins)
    for h in range(1, N_PARTIALS + 1):
        freq = h * f0
        if freq < cfg.fmin or freq > cfg.fmax:
            continue
        position = (cfg.n_bins - 1) * math.log(freq / cfg.fmin) / math.log(cfg.fmax / cfg.fmin)
        profile += np.exp(-0.5 * ((bins - position) / cfg.bin_spread) ** 2) / h
    return profile


def render_performance(piece: SymbolicPiece, tempo: TempoCurve, cfg: RenderConfig) -> Performance:
    onset_seconds = tempo.seconds_at(piece.onsets, piece.base_tempo_bpm)
    offset_seconds = tempo.seconds_at(piece.offsets, piece.base_tempo_bpm)
    onset_frames = np.rint(onset_seconds * cfg.frame_rate).astype(np.int64)
    offset_frames = np.maximum(np.rint(offset_seconds * cfg.frame_rate).astype(np.int64), onset_frames + 1)
    n_frames = int(offset_frames.max()) + cfg.release_frames + cfg.tail_frames

    energy = np.zeros((cfg.n_bins, n_frames), dtype=np.float64)
    decay = cfg.decay_seconds * cfg.frame_rate
    for note, start, stop in zip(piece.notes, onset_frames, offset_frames):
        stop = min(int(stop) + cfg.release_frames, n_frames)
        envelope = np.exp(-np.arange(stop - start) / decay)
        energy[:, start:stop] += _spectral_profile(note.pitch, cfg)[:, None] * envelope[None, :]
    spectrogram = np.log1p(energy).astype(np.float32)
    return Performance(spectrogram=spectrogram, frame_rate=cfg.frame_rate, note_onset_frame=onset_frames)


def render_aligned_piece(piece: SymbolicPiece, tempo: Optional[TempoCurve] = None,
                         render_cfg: Optional[RenderConfig] = None) -> AlignedPiece:
    tempo = tempo or TempoCurve.constant()
    cfg = render_cfg or RenderConfig()
    score = render_score(piece, cfg)
    performance = render_performance(piece, tempo, cfg)
    return AlignedPiece(piece=piece, score=score, performance=performance, tempo=tempo, render=cfg)


def window(grid: np.ndarray, row0: int, col0: int, height: int, width: int, fill: float) -> np.ndarray:
    """grid[row0:row0+height, col0:col0+width] with out-of-range cells set to `fill`."""
    out = np.full((height, width), fill, dtype=grid.dtype)
    r0, r1 = max(row0, 0), min(row0 + height, grid.shape[0])
    c0, c1 = max(col0, 0), min(col0 + width, grid.shape[1])
    if r0 < r1 and c0 < c1:
        out[r0 - row0:r1 - row0, c0 - col0:c1 - col0] = grid[r0:r1, c0:c1]
    return out


def context_frames(context: str) -> int:
    try:
        return CONTEXT_FRAMES[context]
    except KeyError:
        raise ArgumentError(f"unknown audio context {context!r}, expected one of {sorted(CONTEXT_FRAMES)}")


def extract_pair(ap: AlignedPiece, note_index: int, context: str = "short") -> SnippetPair:
    frames = context_frames(context)
    score, spec = ap.score, ap.performance.spectrogram
    sheet = window(score.image, int(score.note_staff_y[note_index]) - SNIPPET_HEIGHT // 2,
                   int(score.note_x[note_index]) - SNIPPET_WIDTH // 2, SNIPPET_HEIGHT, SNIPPET_WIDTH, BACKGROUND)
    onset = int(ap.performance.note_onset_frame[note_index])
    audio = window(spec, 0, onset - frames // 2, spec.shape[0], frames, 0.0)
    return SnippetPair(sheet=sheet, audio=audio, piece_id=ap.piece_id, anchor_note_index=note_index)


def extract_snippet_pairs(ap: AlignedPiece, context: str = "short") -> List[SnippetPair]:
    return [extract_pair(ap, i, context) for i in range(len(ap.piece.notes))]


def unroll_systems(score: RenderedScore) -> np.ndarray:
    """Concatenate every staff system left to right into one strip of snippet height."""
    layout = score.layout
    strips = [
        window(score.image, cy - SNIPPET_HEIGHT // 2, layout.x_start, SNIPPET_HEIGHT, layout.system_width, BACKGROUND)
        for cy in layout.system_y
    ]
    return np.concatenate(strips, axis=1)


def segment_document(doc: Union[Performance, RenderedScore], window_size: int, hop: int) -> List[Tuple[int, np.ndarray]]:
    """Sliding-window snippets with their offsets (frames for audio, strip columns for scores)."""
    if window_size < 1 or hop < 1:
        raise ArgumentError(f"window and hop must be >= 1, got {window_size}, {hop}")
    if isinstance(doc, Performance):
        grid, fill = doc.spectrogram, 0.0
    elif isinstance(doc, RenderedScore):
        grid, fill = unroll_systems(doc), BACKGROUND
    else:
        raise ArgumentError(f"cannot segment a {type(doc).__name__}")

    length = grid.shape[1]
    count = (length - window_size) // hop + 1 if length >= window_size else 1
    return [(k * hop, window(grid, 0, k * hop, grid.shape[0], window_size, fill)) for k in range(count)]


def _corpus_piece(args) -> AlignedPiece:
    global_seed, index, n_notes, pitch_range, base_bpm, tempo_range, tempo_points, render_cfg = args
    piece = generate_piece(piece_seed(global_seed, index), n_notes, pitch_range, base_bpm,
                           piece_id=f"s{global_seed}-{index:04d}")
    tempo_rng = np.random.default_rng(piece_seed(global_seed, index, stream=1))
    span = float(piece.offsets.max())
    tempo = random_tempo_curve(tempo_rng, span, tempo_points, tempo_range)
    return render_aligned_piece(piece, tempo, render_cfg)


def iter_corpus(global_seed: int, n_pieces: int, n_notes: int, pitch_range: Tuple[int, int],
                render_cfg: Optional[RenderConfig] = None, base_tempo_bpm: float = 120.0,
                tempo_range: Tuple[float, float] = (1.0, 1.0), tempo_points: int = 1,
                jobs: int = 1) -> Iterator[AlignedPiece]:
    """Pieces in index order; with jobs > 1 they are rendered in worker processes."""
    render_cfg = render_cfg or RenderConfig()
    tasks = [(global_seed, i, n_notes, tuple(pitch_range), base_tempo_bpm, tuple(tempo_range),
              tempo_points, render_cfg) for i in range(n_pieces)]
    logger.info(f"Generating {n_pieces} pieces: seed={global_seed}, notes={n_notes}, tempo={tempo_range}")
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            yield from pool.map(_corpus_piece, tasks)
    else:
        for task in tasks:
            yield _corpus_piece(task)


def generate_corpus(global_seed: int, n_pieces: int, n_notes: int, pitch_range: Tuple[int, int],
                    **kwargs) -> List[AlignedPiece]:
    return list(iter_corpus(global_seed, n_pieces, n_notes, pitch_range, **kwargs))


def pairs_from_pieces(pieces: Sequence[AlignedPiece], context: str = "short") -> List[SnippetPair]:
    pairs: List[SnippetPair] = []
    for ap in pieces:
        pairs.extend(extract_snippet_pairs(ap, context))
    return pairs
