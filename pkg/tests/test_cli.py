import json

import pytest

from a2s.cli import cli_main
from a2s.storage import load_checkpoint, load_embeddings


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "quick.conf"
    path.write_text("train.epochs = 1\ntrain.batch_size = 8\ndata.notes_per_piece = 6\neval.pool_size = 10\n")
    return str(path)


@pytest.fixture
def dataset(tmp_path, config_file):
    out = tmp_path / "data"
    assert cli_main(["synth", "--pieces", "3", "--seed", "4", "--config", config_file, "--out", str(out),
                     "--tempo-range", "0.8", "1.25"]) == 0
    return out


@pytest.fixture
def checkpoint(tmp_path, dataset, config_file):
    out = tmp_path / "net.ckpt"
    assert cli_main(["train", "--data", str(dataset), "--config", config_file, "--out", str(out)]) == 0
    return out


class TestUsage:
    """Argument handling and exit codes"""

    def test_unknown_flag(self, capsys):
        """Unknown flags are a usage error"""
        assert cli_main(["synth", "--pieces", "2", "--bogus"]) == 1
        assert "unrecognized arguments" in capsys.readouterr().err

    def test_no_command(self):
        """A bare invocation prints usage and fails"""
        assert cli_main([]) == 1

    def test_version(self, capsys):
        """--version exits cleanly"""
        assert cli_main(["--version"]) == 0
        assert "a2s" in capsys.readouterr().out

    def test_dump_config(self, capsys, config_file):
        """--dump-config prints the effective configuration"""
        assert cli_main(["--config", config_file, "--dump-config"]) == 0
        out = capsys.readouterr().out
        assert "train.epochs = 1\n" in out
        assert "loss.margin = 0.7\n" in out

    def test_missing_out(self):
        """Commands that write files need --out"""
        assert cli_main(["synth", "--pieces", "2"]) == 1

    def test_bad_config(self, tmp_path):
        """An invalid config file is a user error"""
        path = tmp_path / "bad.conf"
        path.write_text("train.batch_size = 1\n")
        assert cli_main(["--config", str(path), "--dump-config"]) == 1

    def test_log_level_is_case_insensitive(self, config_file):
        """--log-level accepts lower case names"""
        assert cli_main(["--log-level", "debug", "--config", config_file, "--dump-config"]) == 0


class TestSynth:
    """Dataset generation"""

    def test_writes_piece_directories(self, dataset):
        """One directory per piece, each with its four files"""
        directories = sorted(p for p in dataset.iterdir() if p.is_dir())
        assert len(directories) == 3
        assert all((d / "piece.json").is_file() and (d / "alignment.json").is_file() for d in directories)

    def test_rejects_zero_pieces(self, tmp_path):
        """At least one piece is needed"""
        assert cli_main(["synth", "--pieces", "0", "--out", str(tmp_path / "x")]) == 1


class TestPipeline:
    """Train, embed, retrieve and identify from the command line"""

    def test_train_writes_checkpoint(self, checkpoint):
        """Training writes a loadable checkpoint and its history"""
        net, header = load_checkpoint(checkpoint)
        assert header["regime"] == "paired"
        assert net.arch.tag == "BL2-short"
        assert (checkpoint.parent / "net.ckpt.history.jsonl").read_text().count("\n") == 1

    def test_embed_and_retrieve(self, tmp_path, dataset, checkpoint):
        """Audio queries against a sheet index report a rank for every query"""
        sheet, audio = tmp_path / "sheet.emb", tmp_path / "audio.emb"
        for modality, out in (("sheet", sheet), ("audio", audio)):
            assert cli_main(["embed", "--data", str(dataset), "--checkpoint", str(checkpoint),
                             "--modality", modality, "--out", str(out)]) == 0
        vectors, metadata, modality = load_embeddings(sheet)
        assert vectors.shape == (18, 32) and modality == "sheet"
        results_path = tmp_path / "results.json"
        assert cli_main(["retrieve", "--index", str(sheet), "--queries", str(audio), "--k", "5",
                         "--out", str(results_path)]) == 0
        results = json.loads(results_path.read_text())
        assert len(results) == 18
        assert all(len(r["candidates"]) == 5 and 1 <= r["rank_of_target"] <= 18 for r in results)

    def test_identify_documents(self, tmp_path, dataset, checkpoint, capsys):
        """Every query document gets a vote and a DTW ranking over all pieces"""
        sheet, audio = tmp_path / "sheet-docs.emb", tmp_path / "audio-docs.emb"
        for modality, out in (("sheet", sheet), ("audio", audio)):
            assert cli_main(["embed", "--data", str(dataset), "--checkpoint", str(checkpoint),
                             "--modality", modality, "--mode", "documents", "--out", str(out)]) == 0
        capsys.readouterr()
        assert cli_main(["identify", "--index", str(sheet), "--queries", str(audio)]) == 0
        reports = json.loads(capsys.readouterr().out)
        assert len(reports) == 6
        assert {r["method"] for r in reports} == {"vote", "dtw"}
        assert all(len(r["ranking"]) == 3 and r["rank_of_truth"] is not None for r in reports)

    def test_missing_checkpoint(self, tmp_path, dataset):
        """A checkpoint path that does not exist is a user error"""
        assert cli_main(["embed", "--data", str(dataset), "--checkpoint", str(tmp_path / "none.ckpt"),
                         "--modality", "sheet", "--out", str(tmp_path / "x.emb")]) == 1


class TestRuns:
    """Ledger listing and export"""

    def test_empty_ledger(self, capsys):
        """Listing an empty ledger prints nothing"""
        assert cli_main(["runs"]) == 0
        assert capsys.readouterr().out == ""

    def test_export_unknown_run(self):
        """Exporting a run that does not exist is a user error"""
        assert cli_main(["runs", "--export", "42"]) == 1
