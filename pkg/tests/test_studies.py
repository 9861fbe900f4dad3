import json

import numpy as np
import pytest

from a2s import settings
from a2s.database import get_db
from a2s.errors import ConfigError
from a2s.ledger import list_runs
from a2s.retrieval import RetrievalMetrics
from a2s.schemas.config import ExperimentConfig
from a2s.schemas.report import StudyReport
from a2s.studies import (
    CACHE_MARKER, CONTEXT_ATTENTION_VARIANTS, aggregate, corpus, load_report, median_metrics, pool_indices,
    replay_report, run_context_attention_study, run_study, variant_arch, write_report,
)


def metrics(r1, mrr, mr):
    return RetrievalMetrics(r1=r1, r5=min(1.0, r1 + 0.2), r25=1.0, mrr=mrr, mr=mr, n=16)


class TestVariants:
    """Model variants of the context and attention comparison"""

    def test_tags_match_architectures(self, arch):
        """Each variant's architecture reports its own tag"""
        for tag in CONTEXT_ATTENTION_VARIANTS:
            assert variant_arch(arch, tag).tag == tag

    def test_unknown_variant(self, arch):
        """Unknown tags are refused"""
        with pytest.raises(ConfigError):
            variant_arch(arch, "BL3-short")


class TestAggregation:
    """Per-seed results folded into median rows"""

    def test_median_metrics(self):
        """Each metric takes its own median; MR takes the lower middle"""
        median = median_metrics([metrics(0.2, 0.4, 3), metrics(0.6, 0.7, 1), metrics(0.4, 0.5, 2)])
        assert median.r1 == pytest.approx(0.4)
        assert median.mrr == pytest.approx(0.5)
        assert median.mr == 2
        assert median_metrics([metrics(0.2, 0.4, 3), metrics(0.6, 0.7, 1)]).mr == 1

    def test_rows_follow_task_order(self, tiny_experiment):
        """Median rows keep the order in which tasks reported them; per-seed rows are kept"""
        results = [
            (2, [("B", "clean", "audio-to-sheet", metrics(0.5, 0.6, 1)), ("A", "clean", "audio-to-sheet", metrics(0.1, 0.2, 9))]),
            (1, [("B", "clean", "audio-to-sheet", metrics(0.3, 0.4, 2)), ("A", "clean", "audio-to-sheet", metrics(0.3, 0.4, 3))]),
        ]
        report = aggregate("table1", tiny_experiment, results)
        assert [row.tag for row in report.rows] == ["B", "A"]
        assert report.rows[0].r1 == pytest.approx(40.0)
        assert set(report.per_seed) == {"1", "2"}
        assert report.seeds == [1]

    def test_csv_and_json_agree(self, tiny_experiment, tmp_path):
        """Both report files carry the same rows"""
        results = [(1, [("BL2-short", "clean", "audio-to-sheet", metrics(0.3, 0.4, 2))])]
        report = aggregate("table1", tiny_experiment, results)
        csv_path, json_path = write_report(report, tmp_path)
        text = csv_path.read_text()
        assert text.startswith("# config: ")
        assert StudyReport.rows_from_csv(text) == report.rows
        assert load_report(json_path).rows == report.rows
        assert json.loads(json_path.read_text())["study"] == "table1"


class TestPools:
    """Evaluation pool sampling"""

    def test_pool_is_seeded_and_unique(self, tiny_experiment):
        """The pool is a sorted sample without replacement, fixed by the seed"""
        first = pool_indices(tiny_experiment, 16, seed=1)
        assert np.array_equal(first, np.arange(16))
        cfg = tiny_experiment.model_copy(update={"eval": tiny_experiment.eval.model_copy(update={"pool_size": 5})})
        picked = pool_indices(cfg, 16, seed=3)
        assert len(set(picked.tolist())) == 5
        assert np.array_equal(picked, np.sort(picked))
        assert np.array_equal(picked, pool_indices(cfg, 16, seed=3))

    def test_pool_too_large(self, tiny_experiment):
        """A pool larger than the test snippets is refused"""
        with pytest.raises(ConfigError):
            pool_indices(tiny_experiment, 10, seed=1)


class TestStudyRuns:
    """End-to-end study runs on a tiny configuration"""

    def test_no_train_needs_checkpoints(self, tiny_experiment):
        """Evaluating without training fails when a checkpoint is missing"""
        with pytest.raises(ConfigError):
            run_context_attention_study(tiny_experiment, train=False)

    def test_unknown_study(self, tiny_experiment):
        """Only the registered studies can run"""
        with pytest.raises(ConfigError):
            run_study("table9", tiny_experiment)

    def test_replay_missing_report(self, tmp_path):
        """Replaying needs an existing report"""
        with pytest.raises(ConfigError):
            replay_report(tmp_path / "absent.json")

    @pytest.mark.slow
    def test_context_attention_rows(self, tiny_experiment):
        """The comparison reports one audio-to-sheet row per variant on the configured tier"""
        cfg = tiny_experiment.model_copy(update={"data": tiny_experiment.data.model_copy(update={"tier": "partial"})})
        report = run_study("table1", cfg, record=False)
        assert [row.tag for row in report.rows] == list(CONTEXT_ATTENTION_VARIANTS)
        assert all(row.direction == "audio-to-sheet" and row.tier == "partial" for row in report.rows)

    @pytest.mark.slow
    def test_pretraining_rows(self, tiny_experiment):
        """Two models, three tiers and two directions give twelve rows"""
        report = run_study("table2", tiny_experiment, record=False)
        assert len(report.rows) == 12
        assert {row.tag for row in report.rows} == {"BL", "BL+A+S"}
        assert {row.tier for row in report.rows} == {"clean", "partial", "noisy"}
        assert "partial" in report.note

    @pytest.mark.slow
    def test_pieceid_replay_without_training(self, tiny_experiment):
        """A recorded study replays from its report and checkpoints to the same rows"""
        report = run_study("pieceid", tiny_experiment)
        tags = ["BL/vote", "BL/dtw", "BL+A+S/vote", "BL+A+S/dtw"]
        assert [row.tag for row in report.rows] == tags * 2
        assert [row.direction for row in report.rows] == ["audio-to-sheet"] * 4 + ["sheet-to-sheet"] * 4
        # a stored piece queried against its own collection is always found first
        assert all(row.mrr == 1.0 and row.r1 == 100.0 for row in report.rows if row.direction == "sheet-to-sheet")
        with get_db() as db:
            assert [run.study for run in list_runs(db)] == ["pieceid"]
        json_path = f"{tiny_experiment.out_dir}/pieceid.json"
        replayed = replay_report(json_path, train=False)
        assert replayed.rows == report.rows

    @pytest.mark.slow
    def test_pieceid_single_model_without_self_queries(self, tiny_experiment):
        """One model and performance queries only give the two method rows"""
        pieceid = tiny_experiment.pieceid.model_copy(update={"models": ["BL"], "self_queries": False})
        report = run_study("pieceid", tiny_experiment.model_copy(update={"pieceid": pieceid}), record=False)
        assert [row.tag for row in report.rows] == ["BL/vote", "BL/dtw"]
        assert all(row.direction == "audio-to-sheet" for row in report.rows)


class TestCorpusCache:
    """Rendered splits cached on disk"""

    def cached_dirs(self):
        return sorted((settings.cache_dir() / "datasets").iterdir())

    def test_first_pass_writes_complete_copy(self, tiny_experiment):
        """A finished pass leaves one marked directory and a second pass reads it back"""
        first = list(corpus(tiny_experiment, 1, "test"))
        [directory] = self.cached_dirs()
        assert (directory / CACHE_MARKER).is_file()
        second = list(corpus(tiny_experiment, 1, "test"))
        assert [ap.piece_id for ap in second] == [ap.piece_id for ap in first]
        for a, b in zip(first, second):
            assert np.array_equal(a.performance.spectrogram, b.performance.spectrogram)

    def test_abandoned_pass_leaves_nothing(self, tiny_experiment):
        """Stopping after one piece publishes no cache and removes the staging copy"""
        pieces = corpus(tiny_experiment, 1, "test")
        next(pieces)
        pieces.close()
        assert self.cached_dirs() == []

    def test_concurrent_writers_keep_one_copy(self, tiny_experiment):
        """A writer that finishes second keeps the published copy and still yields every piece"""
        slow = corpus(tiny_experiment, 1, "test")
        first_piece = next(slow)
        fast = list(corpus(tiny_experiment, 1, "test"))
        rest = list(slow)
        assert [first_piece.piece_id] + [ap.piece_id for ap in rest] == [ap.piece_id for ap in fast]
        [directory] = self.cached_dirs()
        assert (directory / CACHE_MARKER).is_file()
        assert len([p for p in directory.iterdir() if p.is_dir()]) == len(fast)

    def test_incomplete_directory_is_rebuilt(self, tiny_experiment):
        """A directory without the marker is replaced by a complete copy"""
        list(corpus(tiny_experiment, 1, "test"))
        [directory] = self.cached_dirs()
        (directory / CACHE_MARKER).unlink()
        pieces = list(corpus(tiny_experiment, 1, "test"))
        assert (directory / CACHE_MARKER).is_file()
        assert len(pieces) == tiny_experiment.data.n_test_pieces


@pytest.fixture
def desk_experiment(tmp_path):
    return ExperimentConfig.model_validate({
        "data": {"n_train_pieces": 30, "n_test_pieces": 25, "notes_per_piece": 40},
        "train": {"epochs": 8},
        "eval": {"pool_size": 1000},
        "pieceid": {"n_pieces": 20, "models": ["BL"]},
        "seeds": [1, 2, 3],
        "out_dir": str(tmp_path / "desk"),
    })


def row_mrr(report, tag, tier="clean", direction="audio-to-sheet"):
    [row] = [r for r in report.rows if (r.tag, r.tier, r.direction) == (tag, tier, direction)]
    return row.mrr


@pytest.mark.slow
class TestDeskScaleTrends:
    """Seed-median orderings at desk scale"""

    def test_context_and_attention_ordering(self, desk_experiment):
        """Long context with attention beats the short baseline, which beats the pooled head"""
        report = run_study("table1", desk_experiment, record=False)
        assert row_mrr(report, "BL2-long-at") >= row_mrr(report, "BL2-short") + 0.03
        assert row_mrr(report, "BL2-short") >= row_mrr(report, "BL1-short")

    def test_pretraining_helps_on_corrupted_tiers(self, desk_experiment):
        """BL+A+S is at least as good as BL on the partial and noisy tiers"""
        report = run_study("table2", desk_experiment, record=False)
        for tier in ("partial", "noisy"):
            assert row_mrr(report, "BL+A+S", tier) >= row_mrr(report, "BL", tier)

    def test_dtw_beats_voting_under_tempo_variation(self, desk_experiment):
        """DTW identifies pieces at least as well as voting; stored pieces are always found"""
        report = run_study("pieceid", desk_experiment, record=False)
        assert row_mrr(report, "BL/dtw") >= row_mrr(report, "BL/vote")
        assert row_mrr(report, "BL/dtw", direction="sheet-to-sheet") == 1.0
        assert row_mrr(report, "BL/vote", direction="sheet-to-sheet") == 1.0
