import numpy as np
import pytest
import torch

from a2s.errors import FormatError
from a2s.network import encoder_state, init_params
from a2s.retrieval import EmbeddingMeta
from a2s.storage import (
    decode_grid, encode_grid, iter_dataset, load_checkpoint, load_dataset, load_embeddings, load_encoder_file,
    load_index, read_grid, save_checkpoint, save_dataset, save_embeddings, save_encoder, write_grid,
)


def unit_rows(rng, n, dim=32):
    rows = rng.standard_normal((n, dim))
    return (rows / np.linalg.norm(rows, axis=1, keepdims=True)).astype(np.float32)


class TestGrids:
    """Raw float32 grid files"""

    def test_file_round_trip(self, tmp_path, rng):
        """A written grid reads back bit-exact"""
        grid = rng.standard_normal((64, 42)).astype(np.float32)
        write_grid(tmp_path / "g.grid", grid)
        restored = read_grid(tmp_path / "g.grid")
        assert restored.dtype == np.float32
        assert np.array_equal(restored, grid)

    def test_consecutive_grids(self, rng):
        """decode_grid reports where the next grid starts"""
        a, b = rng.standard_normal((3, 4)), rng.standard_normal(5)
        buffer = encode_grid(a) + encode_grid(b)
        first, end = decode_grid(buffer)
        second, final = decode_grid(buffer, end)
        assert first.shape == (3, 4) and second.shape == (5,)
        assert final == len(buffer)

    def test_bad_magic(self, rng):
        """A buffer without the grid magic is refused"""
        buffer = bytearray(encode_grid(rng.standard_normal((2, 2))))
        buffer[:4] = b"NOPE"
        with pytest.raises(FormatError):
            decode_grid(bytes(buffer))

    def test_truncated(self, rng):
        """Missing payload bytes are reported"""
        buffer = encode_grid(rng.standard_normal((8, 8)))
        with pytest.raises(FormatError):
            decode_grid(buffer[:-4])
        with pytest.raises(FormatError):
            decode_grid(buffer[:5])


class TestDatasets:
    """Piece directories"""

    def test_round_trip(self, tmp_path, corpus_pieces):
        """Saved pieces load back with identical content"""
        assert save_dataset(tmp_path / "data", iter(corpus_pieces)) == len(corpus_pieces)
        loaded = load_dataset(tmp_path / "data")
        assert [ap.piece_id for ap in loaded] == sorted(ap.piece_id for ap in corpus_pieces)
        originals = {ap.piece_id: ap for ap in corpus_pieces}
        for ap in loaded:
            original = originals[ap.piece_id]
            assert ap.piece == original.piece
            assert ap.tempo == original.tempo
            assert ap.render == original.render
            assert ap.score.layout == original.score.layout
            assert ap.alignment == original.alignment
            assert np.array_equal(ap.score.image, original.score.image)
            assert np.array_equal(ap.score.note_y, original.score.note_y)
            assert np.array_equal(ap.score.note_staff_y, original.score.note_staff_y)
            assert np.array_equal(ap.performance.spectrogram, original.performance.spectrogram)

    def test_piece_files(self, tmp_path, small_piece):
        """Each piece gets its metadata, two grids and an alignment file"""
        save_dataset(tmp_path, [small_piece])
        names = sorted(p.name for p in (tmp_path / small_piece.piece_id).iterdir())
        assert names == ["alignment.json", "perf.grid", "piece.json", "score.grid"]

    def test_missing_directory(self, tmp_path):
        """Reading a dataset that does not exist fails early"""
        with pytest.raises(FileNotFoundError):
            list(iter_dataset(tmp_path / "absent"))

    def test_corrupt_metadata(self, tmp_path, small_piece):
        """Unparseable piece metadata is a format error"""
        save_dataset(tmp_path, [small_piece])
        (tmp_path / small_piece.piece_id / "piece.json").write_text("{not json")
        with pytest.raises(FormatError):
            load_dataset(tmp_path)


class TestCheckpoints:
    """Network and encoder checkpoints"""

    def test_network_round_trip(self, tmp_path, arch):
        """Loaded weights are bit-identical and the header carries arch, seed and regime"""
        net = init_params(arch, 13)
        save_checkpoint(tmp_path / "net.ckpt", net, regime="finetune", extra={"best_epoch": 4})
        restored, header = load_checkpoint(tmp_path / "net.ckpt")
        original = net.state_dict()
        for key, value in restored.state_dict().items():
            assert torch.equal(value, original[key])
        assert restored.arch == arch
        assert header["seed"] == 13 and header["regime"] == "finetune" and header["best_epoch"] == 4
        assert not restored.training

    def test_encoder_round_trip(self, tmp_path, arch):
        """Encoder files keep their modality and reject the other one"""
        state = encoder_state(init_params(arch, 2), "audio")
        save_encoder(tmp_path / "audio.enc", state, arch, "audio", seed=2)
        restored = load_encoder_file(tmp_path / "audio.enc", modality="audio")
        assert set(restored) == set(state)
        assert all(torch.equal(restored[k], state[k]) for k in state)
        with pytest.raises(FormatError):
            load_encoder_file(tmp_path / "audio.enc", modality="sheet")

    def test_encoder_is_not_a_network(self, tmp_path, arch):
        """An encoder file cannot be loaded as a full network"""
        save_encoder(tmp_path / "sheet.enc", encoder_state(init_params(arch, 2), "sheet"), arch, "sheet", seed=2)
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "sheet.enc")

    def test_not_a_checkpoint(self, tmp_path):
        """Foreign files are refused"""
        (tmp_path / "x.ckpt").write_bytes(b"PK\x03\x04 zip data")
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "x.ckpt")


class TestEmbeddingStores:
    """Embedding store files with metadata sidecars"""

    def test_round_trip(self, tmp_path, rng):
        """Vectors, metadata and modality survive a save and load"""
        vectors = unit_rows(rng, 5)
        meta = [EmbeddingMeta(f"p{i // 2}", 21 * (i % 2), "audio") for i in range(5)]
        save_embeddings(tmp_path / "audio.emb", vectors, meta, "audio")
        loaded, loaded_meta, modality = load_embeddings(tmp_path / "audio.emb")
        assert np.array_equal(loaded, vectors)
        assert loaded_meta == meta
        assert modality == "audio"
        index = load_index(tmp_path / "audio.emb")
        assert index.size == 5 and index.modality == "audio"

    def test_missing_sidecar(self, tmp_path, rng):
        """The metadata sidecar is required"""
        save_embeddings(tmp_path / "s.emb", unit_rows(rng, 2), [EmbeddingMeta("p", i, "sheet") for i in range(2)],
                        "sheet")
        (tmp_path / "s.emb.json").unlink()
        with pytest.raises(FormatError):
            load_embeddings(tmp_path / "s.emb")

    def test_size_mismatch(self, tmp_path, rng):
        """A store whose payload length disagrees with its header is refused"""
        path = tmp_path / "s.emb"
        save_embeddings(path, unit_rows(rng, 3), [EmbeddingMeta("p", i, "sheet") for i in range(3)], "sheet")
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(FormatError):
            load_embeddings(path)

    def test_metadata_count_must_match(self, tmp_path, rng):
        """Saving fewer records than vectors is refused"""
        with pytest.raises(FormatError):
            save_embeddings(tmp_path / "s.emb", unit_rows(rng, 3), [EmbeddingMeta("p", 0, "sheet")], "sheet")
