"""On-disk formats: raw grids, dataset directories, checkpoints and embedding stores.

All binary integers and floats are little-endian.
"""
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from a2s.errors import FormatError
from a2s.network import EmbeddingNetwork, init_params
from a2s.retrieval import EmbeddingIndex, EmbeddingMeta, build_index
from a2s.schemas.config import ArchConfig, RenderConfig
from a2s.synthdata import AlignedPiece, Performance, RenderedScore, ScoreLayout, SymbolicPiece, TempoCurve

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

GRID_MAGIC = b"A2SG"
GRID_VERSION = 1
DTYPE_FLOAT32 = 1

CHECKPOINT_MAGIC = b"A2SC"
CHECKPOINT_VERSION = 1

STORE_MAGIC = b"A2SE"
STORE_VERSION = 1
_STORE_HEADER = struct.Struct("<4sHHI8s")

PIECE_FILE = "piece.json"
SCORE_FILE = "score.grid"
PERFORMANCE_FILE = "perf.grid"
ALIGNMENT_FILE = "alignment.json"


# Raw grids

def encode_grid(array: np.ndarray) -> bytes:
    data = np.ascontiguousarray(array, dtype="<f4")
    header = struct.pack("<4sBBB", GRID_MAGIC, GRID_VERSION, DTYPE_FLOAT32, data.ndim)
    return header + struct.pack(f"<{data.ndim}I", *data.shape) + data.tobytes()


def decode_grid(buffer: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """Decode one grid starting at `offset`; returns the array and the offset just past it."""
    try:
        magic, version, dtype, ndim = struct.unpack_from("<4sBBB", buffer, offset)
        offset += 7
        shape = struct.unpack_from(f"<{ndim}I", buffer, offset)
    except struct.error as e:
        raise FormatError(f"Truncated grid header: {e}") from e
    if magic != GRID_MAGIC:
        raise FormatError(f"Not a grid (magic {magic!r})")
    if version != GRID_VERSION or dtype != DTYPE_FLOAT32:
        raise FormatError(f"Unsupported grid version {version} / dtype {dtype}")
    offset += 4 * ndim
    count = int(np.prod(shape, dtype=np.int64))
    end = offset + 4 * count
    if end > len(buffer):
        raise FormatError(f"Grid data truncated: need {end} bytes, have {len(buffer)}")
    array = np.frombuffer(buffer, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
    return array, end


def write_grid(path: PathLike, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_grid(array))


def read_grid(path: PathLike) -> np.ndarray:
    array, _ = decode_grid(Path(path).read_bytes())
    return array


# Dataset directories

def save_aligned_piece(root: PathLike, ap: AlignedPiece) -> Path:
    directory = Path(root) / ap.piece_id
    directory.mkdir(parents=True, exist_ok=True)
    layout = ap.score.layout
    meta = {
        "piece": ap.piece.to_dict(),
        "tempo": ap.tempo.to_list(),
        "render": ap.render.model_dump(mode="json"),
        "layout": {
            "beats_per_system": layout.beats_per_system,
            "system_width": layout.system_width,
            "x_start": layout.x_start,
            "system_y": list(layout.system_y),
            "n_pages": layout.n_pages,
        },
        "note_staff_y": ap.score.note_staff_y.tolist(),
    }
    (directory / PIECE_FILE).write_text(json.dumps(meta, indent=2))
    write_grid(directory / SCORE_FILE, ap.score.image)
    write_grid(directory / PERFORMANCE_FILE, ap.performance.spectrogram)
    records = [record.model_dump() for record in ap.alignment_records()]
    (directory / ALIGNMENT_FILE).write_text(json.dumps(records))
    return directory


def load_aligned_piece(directory: PathLike) -> AlignedPiece:
    directory = Path(directory)
    try:
        meta = json.loads((directory / PIECE_FILE).read_text())
        records = json.loads((directory / ALIGNMENT_FILE).read_text())
        piece = SymbolicPiece.from_dict(meta["piece"])
        render = RenderConfig(**meta["render"])
        layout_meta = meta["layout"]
        layout = ScoreLayout(beats_per_system=layout_meta["beats_per_system"],
                             system_width=layout_meta["system_width"], x_start=layout_meta["x_start"],
                             system_y=tuple(layout_meta["system_y"]), n_pages=layout_meta["n_pages"])
        tempo = TempoCurve(tuple((float(b), float(m)) for b, m in meta["tempo"]))
    except (OSError, KeyError, ValueError, TypeError) as e:
        raise FormatError(f"Unreadable piece directory {directory}: {e}") from e

    records = sorted(records, key=lambda r: r["note_index"])
    if len(records) != len(piece.notes):
        raise FormatError(f"{directory}: {len(records)} alignment records for {len(piece.notes)} notes")
    score = RenderedScore(
        image=read_grid(directory / SCORE_FILE),
        note_x=np.array([int(round(r["x"])) for r in records], dtype=np.int64),
        note_y=np.array([int(round(r["y"])) for r in records], dtype=np.int64),
        note_staff_y=np.array(meta["note_staff_y"], dtype=np.int64),
        layout=layout,
    )
    performance = Performance(spectrogram=read_grid(directory / PERFORMANCE_FILE), frame_rate=render.frame_rate,
                              note_onset_frame=np.array([r["onset_frame"] for r in records], dtype=np.int64))
    return AlignedPiece(piece=piece, score=score, performance=performance, tempo=tempo, render=render)


def save_dataset(root: PathLike, pieces: Iterator[AlignedPiece]) -> int:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    count = 0
    for ap in pieces:
        save_aligned_piece(root, ap)
        count += 1
    logger.info(f"Wrote {count} pieces to {root}")
    return count


def iter_dataset(root: PathLike) -> Iterator[AlignedPiece]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"Dataset directory not found: {root}")
    for directory in sorted(p for p in root.iterdir() if (p / PIECE_FILE).is_file()):
        yield load_aligned_piece(directory)


def load_dataset(root: PathLike) -> List[AlignedPiece]:
    pieces = list(iter_dataset(root))
    logger.info(f"Loaded {len(pieces)} pieces from {root}")
    return pieces


# Checkpoints

def write_tensor_file(path: PathLike, header: Dict[str, Any], tensors: Dict[str, torch.Tensor]) -> None:
    header = {**header, "format_version": CHECKPOINT_VERSION, "tensors": list(tensors)}
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blobs = [encode_grid(t.detach().cpu().to(torch.float32).numpy()) for t in tensors.values()]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(CHECKPOINT_MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes + b"".join(blobs))


def read_tensor_file(path: PathLike) -> Tuple[Dict[str, Any], Dict[str, torch.Tensor]]:
    buffer = Path(path).read_bytes()
    if buffer[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path} is not a checkpoint")
    try:
        (length,) = struct.unpack_from("<I", buffer, 4)
        header = json.loads(buffer[8:8 + length].decode("utf-8"))
    except (struct.error, ValueError) as e:
        raise FormatError(f"Corrupt checkpoint header in {path}: {e}") from e
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"Unsupported checkpoint version {header.get('format_version')}")
    offset = 8 + length
    tensors = {}
    for name in header["tensors"]:
        array, offset = decode_grid(buffer, offset)
        tensors[name] = torch.from_numpy(array.copy())
    return header, tensors


def save_checkpoint(path: PathLike, net: EmbeddingNetwork, regime: str = "paired",
                    extra: Optional[Dict[str, Any]] = None) -> None:
    header = {"arch": net.arch.model_dump(mode="json"), "seed": net.init_seed, "regime": regime, **(extra or {})}
    write_tensor_file(path, header, net.state_dict())
    logger.info(f"Saved {net.arch.tag} checkpoint ({regime}) to {path}")


def load_checkpoint(path: PathLike) -> Tuple[EmbeddingNetwork, Dict[str, Any]]:
    header, tensors = read_tensor_file(path)
    if "arch" not in header:
        raise FormatError(f"{path} holds an encoder, not a full network")
    arch = ArchConfig(**header["arch"])
    net = init_params(arch, header.get("seed") or 0)
    try:
        net.load_state_dict(tensors)
    except RuntimeError as e:
        raise FormatError(f"Checkpoint {path} does not match its architecture: {e}") from e
    net.eval()
    return net, header


def save_encoder(path: PathLike, state: Dict[str, torch.Tensor], arch: ArchConfig, modality: str,
                 seed: int) -> None:
    header = {"encoder_arch": arch.model_dump(mode="json"), "modality": modality, "seed": seed,
              "regime": f"pretrain_{modality}"}
    write_tensor_file(path, header, state)
    logger.info(f"Saved pretrained {modality} encoder to {path}")


def load_encoder_file(path: PathLike, modality: Optional[str] = None) -> Dict[str, torch.Tensor]:
    header, tensors = read_tensor_file(path)
    if "modality" not in header:
        raise FormatError(f"{path} is not an encoder checkpoint")
    if modality is not None and header["modality"] != modality:
        raise FormatError(f"{path} holds a {header['modality']} encoder, expected {modality}")
    return tensors


# Embedding stores

def save_embeddings(path: PathLike, vectors: np.ndarray, metadata: Sequence[EmbeddingMeta], modality: str) -> None:
    vectors = np.ascontiguousarray(vectors, dtype="<f4")
    if vectors.ndim != 2 or len(metadata) != len(vectors):
        raise FormatError(f"{len(metadata)} metadata records for embeddings of shape {vectors.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _STORE_HEADER.pack(STORE_MAGIC, STORE_VERSION, vectors.shape[1], vectors.shape[0],
                                modality.encode("ascii")[:8].ljust(8, b"\0"))
    path.write_bytes(header + vectors.tobytes())
    sidecar = [{"id": i, "piece_id": m.piece_id, "offset": m.offset, "modality": m.modality}
               for i, m in enumerate(metadata)]
    Path(f"{path}.json").write_text(json.dumps(sidecar))
    logger.info(f"Wrote {len(vectors)} {modality} embeddings to {path}")


def load_embeddings(path: PathLike) -> Tuple[np.ndarray, List[EmbeddingMeta], str]:
    buffer = Path(path).read_bytes()
    try:
        magic, version, dim, count, tag = _STORE_HEADER.unpack_from(buffer, 0)
    except struct.error as e:
        raise FormatError(f"Truncated embedding store {path}: {e}") from e
    if magic != STORE_MAGIC or version != STORE_VERSION:
        raise FormatError(f"{path} is not a version {STORE_VERSION} embedding store")
    expected = _STORE_HEADER.size + 4 * dim * count
    if len(buffer) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(buffer)}")
    vectors = np.frombuffer(buffer, dtype="<f4", offset=_STORE_HEADER.size).reshape(count, dim).astype(np.float32)
    sidecar = Path(f"{path}.json")
    if not sidecar.is_file():
        raise FormatError(f"Missing metadata sidecar {sidecar}")
    records = sorted(json.loads(sidecar.read_text()), key=lambda r: r["id"])
    metadata = [EmbeddingMeta(r["piece_id"], int(r["offset"]), r["modality"]) for r in records]
    if len(metadata) != count:
        raise FormatError(f"{sidecar}: {len(metadata)} records for {count} embeddings")
    return vectors, metadata, tag.rstrip(b"\0").decode("ascii")


def load_index(path: PathLike) -> EmbeddingIndex:
    vectors, metadata, modality = load_embeddings(path)
    return build_index(vectors, metadata, modality=modality)
