"""Comparative experiment runners and their report emitters.

Every study trains (or loads) its variants once per seed, evaluates them on a
fixed tempo-varied test pool and reports the per-metric median over seeds.
"""
import hashlib
import json
import logging
import math
import shutil
import statistics
import tempfile
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from functools import lru_cache
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
from sqlalchemy.exc import SQLAlchemyError

from a2s import settings
from a2s.augment import corrupt_pairs
from a2s.database import get_db
from a2s.errors import ConfigError
from a2s.ledger import save_report
from a2s.network import EmbeddingNetwork, embed_many
from a2s.pieceid import EmbeddingSequence, PieceCollection, identify_dtw, identify_vote
from a2s.retrieval import RetrievalMetrics, evaluate, retrieval_metrics_between
from a2s.schemas.config import ArchConfig, ExperimentConfig, TrainConfig
from a2s.schemas.report import ReportRow, StudyReport
from a2s.storage import iter_dataset, load_checkpoint, save_aligned_piece, save_checkpoint
from a2s.synthdata import (
    AlignedPiece, Performance, SnippetPair, extract_pair, iter_corpus, piece_seed,
    segment_document,
)
from a2s.training import finetune, pretrain_selfsup, train_paired

logger = logging.getLogger(__name__)

TIERS = ("clean", "partial", "noisy")
CONTEXTS = ("short", "long")

CONTEXT_ATTENTION_VARIANTS = {
    "BL1-short": {"head": "pooled", "audio_context": "short", "attention": False, "attention_on_short": False},
    "BL2-short": {"head": "dense", "audio_context": "short", "attention": False, "attention_on_short": False},
    "BL2-long": {"head": "dense", "audio_context": "long", "attention": False, "attention_on_short": False},
    "BL2-short-at": {"head": "dense", "audio_context": "short", "attention": True, "attention_on_short": True},
    "BL2-long-at": {"head": "dense", "audio_context": "long", "attention": True, "attention_on_short": False},
}

_SPLIT_STREAMS = {"train": 11, "test": 12, "pretrain": 13, "pieceid": 14}
_POOL_STREAM = 21
_PRETRAIN_CORRUPTION_STREAM = 22
CACHE_MARKER = ".complete"

TaskResult = Tuple[int, List[Tuple[str, str, str, RetrievalMetrics]]]


def variant_arch(base: ArchConfig, tag: str) -> ArchConfig:
    try:
        overrides = CONTEXT_ATTENTION_VARIANTS[tag]
    except KeyError:
        raise ConfigError(f"unknown model variant {tag!r}")
    return ArchConfig(**{**base.model_dump(), **overrides})


# Data

def _split_plan(cfg: ExperimentConfig, split: str) -> dict:
    data = cfg.data
    if split == "train":
        return {"n_pieces": data.n_train_pieces, "n_notes": data.notes_per_piece, "tempo": data.train_tempo_range}
    if split == "test":
        return {"n_pieces": data.n_test_pieces, "n_notes": data.notes_per_piece, "tempo": data.test_tempo_range}
    if split == "pretrain":
        return {"n_pieces": math.ceil(data.pretrain_pool / data.notes_per_piece), "n_notes": data.notes_per_piece,
                "tempo": data.train_tempo_range}
    if split == "pieceid":
        return {"n_pieces": cfg.pieceid.n_pieces, "n_notes": cfg.pieceid.notes_per_piece,
                "tempo": data.test_tempo_range}
    raise ConfigError(f"unknown data split {split!r}")


def corpus(cfg: ExperimentConfig, seed: int, split: str, jobs: int = 1) -> Iterator[AlignedPiece]:
    """Pieces of one split, read from the dataset cache when a complete copy exists."""
    plan = _split_plan(cfg, split)
    global_seed = piece_seed(seed, 0, _SPLIT_STREAMS[split])
    kwargs = dict(render_cfg=cfg.render, base_tempo_bpm=cfg.data.base_tempo_bpm, tempo_range=tuple(plan["tempo"]),
                  tempo_points=cfg.data.tempo_points, jobs=jobs)
    pitch_range = (cfg.data.pitch_low, cfg.data.pitch_high)
    pieces = iter_corpus(global_seed, plan["n_pieces"], plan["n_notes"], pitch_range, **kwargs)
    if not cfg.data.use_cache:
        yield from pieces
        return

    key_source = {"seed": global_seed, "pitch": pitch_range, "render": cfg.render.model_dump(mode="json"),
                  "bpm": cfg.data.base_tempo_bpm, "points": cfg.data.tempo_points, **plan}
    key = hashlib.sha1(json.dumps(key_source, sort_keys=True).encode("utf-8")).hexdigest()[:16]
    directory = settings.cache_dir() / "datasets" / f"{split}-{key}"
    if (directory / CACHE_MARKER).is_file():
        logger.info(f"Using cached {split} split from {directory}")
        yield from iter_dataset(directory)
        return
    if directory.exists() and not (directory / CACHE_MARKER).is_file():
        logger.warning(f"Removing incomplete cache {directory}")
        shutil.rmtree(directory, ignore_errors=True)

    # pieces go to a private staging directory that is renamed into place once complete
    directory.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f".{directory.name}-", dir=directory.parent))
    try:
        for ap in pieces:
            save_aligned_piece(staging, ap)
            yield ap
        (staging / CACHE_MARKER).touch()
        try:
            staging.rename(directory)
            logger.info(f"Cached {split} split in {directory}")
        except OSError:
            logger.info(f"{directory} was cached by another worker; keeping that copy")
    finally:
        if staging.exists():
            shutil.rmtree(staging, ignore_errors=True)


def extract_pairs_multi(pieces: Iterator[AlignedPiece], contexts: Sequence[str]) -> Dict[str, List[SnippetPair]]:
    """Pairs for several audio contexts; the sheet crops are shared between contexts."""
    out: Dict[str, List[SnippetPair]] = {context: [] for context in contexts}
    for ap in pieces:
        for i in range(len(ap.piece.notes)):
            first = extract_pair(ap, i, contexts[0])
            out[contexts[0]].append(first)
            for context in contexts[1:]:
                out[context].append(replace(extract_pair(ap, i, context), sheet=first.sheet))
    return out


@lru_cache(maxsize=4)
def _cached_pairs(cfg_json: str, seed: int, split: str, contexts: Tuple[str, ...]) -> Dict[str, List[SnippetPair]]:
    cfg = ExperimentConfig.model_validate_json(cfg_json)
    return extract_pairs_multi(corpus(cfg, seed, split), contexts)


def pool_indices(cfg: ExperimentConfig, available: int, seed: int) -> np.ndarray:
    if cfg.eval.pool_size > available:
        raise ConfigError(f"pool size {cfg.eval.pool_size} exceeds the {available} test snippets")
    rng = np.random.default_rng(piece_seed(seed, 0, _POOL_STREAM))
    return np.sort(rng.choice(available, size=cfg.eval.pool_size, replace=False))


def _test_pool(cfg_json: str, cfg: ExperimentConfig, seed: int, context: str,
               contexts: Tuple[str, ...]) -> List[SnippetPair]:
    test = _cached_pairs(cfg_json, seed, "test", contexts)[context]
    return [test[i] for i in pool_indices(cfg, len(test), seed)]


# Models

def checkpoint_path(cfg: ExperimentConfig, study: str, tag: str, seed: int) -> Path:
    return Path(cfg.out_dir) / "checkpoints" / f"{study}-{tag}-seed{seed}.ckpt"


def _train_cfg(cfg: TrainConfig, seed: int, regime: str) -> TrainConfig:
    return cfg.model_copy(update={"seed": seed, "regime": regime})


def trained_network(cfg: ExperimentConfig, study: str, tag: str, seed: int, arch: ArchConfig,
                    train_fn: Callable, train: bool = True) -> EmbeddingNetwork:
    """Train and checkpoint a variant, or load its checkpoint when training is disabled."""
    path = checkpoint_path(cfg, study, tag, seed)
    if not train:
        if not path.is_file():
            raise ConfigError(f"--no-train needs checkpoint {path}, which does not exist")
        net, header = load_checkpoint(path)
        if header.get("arch") != arch.model_dump(mode="json"):
            raise ConfigError(f"checkpoint {path} was trained for a different architecture")
        logger.info(f"Loaded {tag} (seed {seed}) from {path}")
        return net

    net, history = train_fn()
    history.checkpoint = str(path)
    save_checkpoint(path, net, regime=history.regime, extra={"study": study, "tag": tag})
    Path(f"{path}.history.jsonl").write_text(history.to_jsonl())
    return net


def pool_metrics(net: EmbeddingNetwork, pool: Sequence[SnippetPair],
                 directions: Sequence[str]) -> Dict[str, RetrievalMetrics]:
    sheets = embed_many(net, [p.sheet for p in pool], "sheet")
    audio = embed_many(net, [p.audio for p in pool], "audio")
    return retrieval_metrics_between(sheets, audio, directions)


def document_sequence(net: EmbeddingNetwork, doc, piece_id: str, window_size: int, hop: int) -> EmbeddingSequence:
    modality = "audio" if isinstance(doc, Performance) else "sheet"
    segments = segment_document(doc, window_size, hop)
    embeddings = embed_many(net, [grid for _, grid in segments], modality)
    return EmbeddingSequence(piece_id, embeddings, [offset for offset, _ in segments], modality=modality)


def _pretrained_then_finetuned(cfg: ExperimentConfig, cfg_json: str, seed: int, arch: ArchConfig,
                               pairs: Sequence[SnippetPair]):
    """BL+A+S: contrastive pretraining of both encoders, then paired fine-tuning."""
    context = (arch.audio_context,)
    # unlabeled pools stand in for scraped data, so they get the noisy-tier corruption
    unlabeled = _cached_pairs(cfg_json, seed, "pretrain", context)[arch.audio_context][:cfg.data.pretrain_pool]
    unlabeled = corrupt_pairs(unlabeled, "noisy", cfg.augment, piece_seed(seed, 0, _PRETRAIN_CORRUPTION_STREAM))
    sheet_state, _ = pretrain_selfsup([p.sheet for p in unlabeled], arch,
                                      _train_cfg(cfg.pretrain, seed, "pretrain_sheet"), cfg.augment.sheet, cfg.loss)
    audio_state, _ = pretrain_selfsup([p.audio for p in unlabeled], arch,
                                      _train_cfg(cfg.pretrain, seed, "pretrain_audio"), cfg.augment.audio, cfg.loss)
    return finetune(sheet_state, audio_state, pairs, arch, _train_cfg(cfg.train, seed, "finetune"), cfg.loss)


def study_networks(cfg: ExperimentConfig, cfg_json: str, study: str, seed: int, models: Sequence[str],
                   train: bool = True) -> Dict[str, EmbeddingNetwork]:
    """The baseline and/or pretrained model of a study, trained or loaded from checkpoints."""
    arch = cfg.arch
    pairs = _cached_pairs(cfg_json, seed, "train", (arch.audio_context,))[arch.audio_context]
    builders = {
        "BL": lambda: train_paired(pairs, arch, _train_cfg(cfg.train, seed, "paired"), cfg.loss),
        "BL+A+S": lambda: _pretrained_then_finetuned(cfg, cfg_json, seed, arch, pairs),
    }
    return {tag: trained_network(cfg, study, tag, seed, arch, builders[tag], train) for tag in models}


# Tasks (top-level so they can run in worker processes)

def _context_attention_task(args) -> TaskResult:
    cfg_json, seed, tag, train = args
    cfg = ExperimentConfig.model_validate_json(cfg_json)
    arch = variant_arch(cfg.arch, tag)
    tier = cfg.data.tier
    pairs = _cached_pairs(cfg_json, seed, "train", CONTEXTS)[arch.audio_context]
    pool = corrupt_pairs(_test_pool(cfg_json, cfg, seed, arch.audio_context, CONTEXTS), tier, cfg.augment, seed)
    tcfg = _train_cfg(cfg.train, seed, "paired")
    net = trained_network(cfg, "table1", tag, seed, arch, lambda: train_paired(pairs, arch, tcfg, cfg.loss), train)
    metrics = pool_metrics(net, pool, ["audio-to-sheet"])["audio-to-sheet"]
    logger.info(f"table1 {tag} {tier} seed {seed}: {metrics.format_row()}")
    return seed, [(tag, tier, "audio-to-sheet", metrics)]


def _pretraining_task(args) -> TaskResult:
    cfg_json, seed, train = args
    cfg = ExperimentConfig.model_validate_json(cfg_json)
    arch = cfg.arch
    pool = _test_pool(cfg_json, cfg, seed, arch.audio_context, (arch.audio_context,))
    tiers = {tier: corrupt_pairs(pool, tier, cfg.augment, seed) for tier in TIERS}
    nets = study_networks(cfg, cfg_json, "table2", seed, ("BL", "BL+A+S"), train)
    results = {(tag, tier): pool_metrics(net, tiers[tier], cfg.eval.directions)
               for tag, net in nets.items() for tier in TIERS}
    entries = []
    for direction in cfg.eval.directions:
        for tag in nets:
            for tier in TIERS:
                metrics = results[(tag, tier)][direction]
                entries.append((tag, tier, direction, metrics))
                logger.info(f"table2 {tag} {tier} {direction} seed {seed}: {metrics.format_row('fraction')}")
    return seed, entries


def _pieceid_task(args) -> TaskResult:
    cfg_json, seed, train = args
    cfg = ExperimentConfig.model_validate_json(cfg_json)
    arch, pcfg = cfg.arch, cfg.pieceid
    nets = study_networks(cfg, cfg_json, "pieceid", seed, pcfg.models, train)
    pieces = list(corpus(cfg, seed, "pieceid"))
    kinds = ["audio-to-sheet"] + (["sheet-to-sheet"] if pcfg.self_queries else [])

    ranks: Dict[Tuple[str, str, str], List[int]] = defaultdict(list)
    for tag, net in nets.items():
        collection = PieceCollection([document_sequence(net, ap.score, ap.piece_id, pcfg.sheet_window,
                                                        pcfg.sheet_hop) for ap in pieces])
        for ap, stored in zip(pieces, collection.sequences):
            queries = {"audio-to-sheet": document_sequence(net, ap.performance, ap.piece_id, arch.audio_frames,
                                                           pcfg.audio_hop),
                       "sheet-to-sheet": stored}
            for kind in kinds:
                query = queries[kind]
                ranks[(kind, tag, "vote")].append(identify_vote(query, collection, ap.piece_id).rank_of_true_piece)
                ranks[(kind, tag, "dtw")].append(
                    identify_dtw(query, collection, pcfg.normalize, ap.piece_id).rank_of_true_piece)

    entries = []
    for kind in kinds:
        for tag in nets:
            for method in ("vote", "dtw"):
                metrics = evaluate(ranks[(kind, tag, method)])
                logger.info(f"pieceid {tag}/{method} {kind} seed {seed}: {metrics.format_row()}")
                entries.append((f"{tag}/{method}", "clean", kind, metrics))
    return seed, entries


def _worker_init():
    torch.set_num_threads(1)


def _run_tasks(fn: Callable, tasks: List[tuple], jobs: int) -> List[TaskResult]:
    if jobs > 1 and len(tasks) > 1:
        logger.info(f"Running {len(tasks)} tasks on {jobs} worker processes")
        with ProcessPoolExecutor(max_workers=jobs, initializer=_worker_init) as pool:
            return list(pool.map(fn, tasks))
    return [fn(task) for task in tasks]


# Aggregation

def median_metrics(runs: Sequence[RetrievalMetrics]) -> RetrievalMetrics:
    return RetrievalMetrics(
        r1=statistics.median(m.r1 for m in runs),
        r5=statistics.median(m.r5 for m in runs),
        r25=statistics.median(m.r25 for m in runs),
        mrr=statistics.median(m.mrr for m in runs),
        mr=int(statistics.median_low(m.mr for m in runs)),
        n=runs[0].n,
    )


def aggregate(study: str, cfg: ExperimentConfig, results: List[TaskResult], note: str = "") -> StudyReport:
    by_key: Dict[Tuple[str, str, str], List[RetrievalMetrics]] = defaultdict(list)
    per_seed: Dict[str, List[ReportRow]] = defaultdict(list)
    for seed, entries in sorted(results, key=lambda result: result[0]):
        for tag, tier, direction, metrics in entries:
            by_key[(tag, tier, direction)].append(metrics)
            per_seed[str(seed)].append(ReportRow.from_metrics(tag, tier, direction, metrics))
    keys = []
    for _, entries in results:
        for tag, tier, direction, _ in entries:
            if (tag, tier, direction) not in keys:
                keys.append((tag, tier, direction))
    rows = [ReportRow.from_metrics(*key, median_metrics(by_key[key])) for key in keys]
    return StudyReport(study=study, note=note, config=cfg.model_dump(mode="json"), seeds=list(cfg.seeds),
                       rows=rows, per_seed=dict(per_seed))


# Studies

def run_context_attention_study(cfg: ExperimentConfig, train: bool = True) -> StudyReport:
    """Short vs long audio context, with and without attention, on a tempo-varied pool of tier `data.tier`."""
    cfg_json = cfg.model_dump_json()
    tasks = [(cfg_json, seed, tag, train) for seed in cfg.seeds for tag in CONTEXT_ATTENTION_VARIANTS]
    results = _run_tasks(_context_attention_task, tasks, cfg.jobs)
    merged: Dict[int, list] = defaultdict(list)
    for seed, entries in results:
        merged[seed].extend(entries)
    return aggregate("table1", cfg, list(merged.items()))


def run_pretraining_study(cfg: ExperimentConfig, train: bool = True) -> StudyReport:
    """Baseline vs contrastively pretrained encoders across the clean, partial and noisy tiers."""
    cfg_json = cfg.model_dump_json()
    results = _run_tasks(_pretraining_task, [(cfg_json, seed, train) for seed in cfg.seeds], cfg.jobs)
    note = "partial = corrupted sheets + clean audio; noisy = both corrupted (synthetic stand-ins for real data)"
    return aggregate("table2", cfg, results, note=note)


def run_pieceid_study(cfg: ExperimentConfig, train: bool = True) -> StudyReport:
    """Vote-based vs DTW-based piece identification for each configured model.

    Tempo-varied performances are the audio-to-sheet queries; with `self_queries`
    every stored sheet sequence is also queried against the collection (sheet-to-sheet).
    """
    if cfg.pieceid.n_pieces < 2:
        raise ConfigError("piece identification needs at least 2 pieces")
    cfg_json = cfg.model_dump_json()
    results = _run_tasks(_pieceid_task, [(cfg_json, seed, train) for seed in cfg.seeds], cfg.jobs)
    return aggregate("pieceid", cfg, results)


STUDIES = {
    "table1": run_context_attention_study,
    "table2": run_pretraining_study,
    "pieceid": run_pieceid_study,
}


def write_report(report: StudyReport, out_dir) -> Tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out_dir / f"{report.study}.csv", out_dir / f"{report.study}.json"
    csv_path.write_text(report.to_csv())
    json_path.write_text(report.to_json())
    logger.info(f"Wrote {report.study} report ({len(report.rows)} rows) to {csv_path} and {json_path}")
    return csv_path, json_path


def record_report(report: StudyReport, database_url: Optional[str] = None) -> Optional[int]:
    """Store the report in the run ledger; a ledger failure does not lose the files already written."""
    try:
        with get_db(database_url) as db:
            return save_report(db, report).id
    except SQLAlchemyError as e:
        logger.error(f"Could not record {report.study} run in the ledger: {e}", exc_info=True)
        return None


def run_study(name: str, cfg: ExperimentConfig, train: bool = True, record: bool = True) -> StudyReport:
    if name not in STUDIES:
        raise ConfigError(f"unknown study {name!r}, expected one of {sorted(STUDIES)}")
    logger.info(f"Running study {name}: seeds={cfg.seeds}, jobs={cfg.jobs}, train={train}")
    report = STUDIES[name](cfg, train=train)
    write_report(report, cfg.out_dir)
    if record:
        run_id = record_report(report)
        if run_id is not None:
            logger.info(f"Study {name} recorded as run {run_id}")
    return report


def load_report(path) -> StudyReport:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"report {path} not found")
    try:
        return StudyReport.model_validate_json(path.read_text())
    except ValueError as e:
        raise ConfigError(f"{path} is not a study report: {e}") from e


def replay_report(path, train: bool = True, record: bool = False) -> StudyReport:
    """Re-run a study from the exact config and seeds embedded in its JSON report."""
    original = load_report(path)
    try:
        cfg = ExperimentConfig.model_validate(original.config)
    except ValueError as e:
        raise ConfigError(f"report {path} carries an invalid config: {e}") from e
    return run_study(original.study, cfg, train=train, record=record)
