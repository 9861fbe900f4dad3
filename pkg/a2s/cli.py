import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from a2s import __version__, settings
from a2s.database import get_db
from a2s.errors import A2SError, ArgumentError
from a2s.ledger import export_run_csv, list_runs
from a2s.network import embed_many
from a2s.pieceid import PieceCollection, identify_dtw, identify_vote, sequences_from_store
from a2s.retrieval import EmbeddingMeta, evaluate, query
from a2s.schemas.config import ExperimentConfig, dump_config, load_config
from a2s.storage import (
    load_checkpoint, load_dataset, load_embeddings, load_encoder_file, load_index, save_checkpoint,
    save_dataset, save_embeddings, save_encoder,
)
from a2s.studies import STUDIES, replay_report, run_study
from a2s.synthdata import iter_corpus, pairs_from_pieces, segment_document
from a2s.training import finetune, pretrain_selfsup, train_paired

logger = logging.getLogger(__name__)

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")
EXIT_OK, EXIT_USER_ERROR, EXIT_INTERNAL_ERROR = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = (lambda value: argparse.SUPPRESS) if suppress else (lambda value: value)
    parser.add_argument("--seed", type=int, default=default(None), help="global seed (overrides config seeds)")
    parser.add_argument("--config", default=default(None), help="dotted-key config file")
    parser.add_argument("--out", default=default(None), help="output file or directory")
    parser.add_argument("--log-level", type=str.upper, choices=LOG_LEVELS, default=default(settings.LOG_LEVEL))
    parser.add_argument("--dump-config", action="store_true", default=default(False),
                        help="print the effective configuration and exit")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="a2s", description="Audio to sheet-music snippet retrieval and piece identification")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_flags(parser, suppress=False)
    common = _Parser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic aligned dataset")
    p.add_argument("--pieces", type=int, required=True)
    p.add_argument("--notes", type=int, default=None)
    p.add_argument("--tempo-range", type=float, nargs=2, metavar=("LOW", "HIGH"), default=None)
    p.add_argument("--jobs", type=int, default=None)

    p = sub.add_parser("pretrain", parents=[common], help="contrastive pretraining of one encoder")
    p.add_argument("--data", required=True)
    p.add_argument("--modality", choices=("sheet", "audio"), required=True)

    p = sub.add_parser("train", parents=[common], help="paired training with the ranking loss")
    p.add_argument("--data", required=True)

    p = sub.add_parser("finetune", parents=[common], help="paired training from pretrained encoders")
    p.add_argument("--data", required=True)
    p.add_argument("--sheet-encoder", default=None)
    p.add_argument("--audio-encoder", default=None)

    p = sub.add_parser("embed", parents=[common], help="embed snippets or whole documents into a store")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--modality", choices=("sheet", "audio"), required=True)
    p.add_argument("--mode", choices=("snippets", "documents"), default="snippets")
    p.add_argument("--hop", type=int, default=None)

    p = sub.add_parser("retrieve", parents=[common], help="nearest-neighbour search of queries in an index")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--k", type=int, default=25)

    p = sub.add_parser("identify", parents=[common], help="identify pieces from document embeddings")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--method", choices=("vote", "dtw", "both"), default="both")
    p.add_argument("--raw", action="store_true", help="unnormalised DTW cost")

    p = sub.add_parser("study", parents=[common], help="run a comparative study")
    p.add_argument("name", nargs="?", choices=sorted(STUDIES))
    p.add_argument("--no-train", action="store_true", help="evaluate existing checkpoints only")
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--replay", default=None, help="re-run the study recorded in a JSON report")
    p.add_argument("--no-ledger", action="store_true")

    p = sub.add_parser("runs", parents=[common], help="list recorded study runs or export one as CSV")
    p.add_argument("--study", default=None)
    p.add_argument("--export", type=int, default=None, metavar="RUN_ID")
    return parser


def _seed(args, cfg: ExperimentConfig) -> int:
    return args.seed if args.seed is not None else cfg.seeds[0]


def _require_out(args) -> Path:
    if not args.out:
        raise ArgumentError(f"--out is required for {args.command}")
    return Path(args.out)


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def synth_command(args, cfg: ExperimentConfig) -> int:
    """Render pieces and write one directory per piece"""
    out = _require_out(args)
    if args.pieces < 1:
        raise ArgumentError("--pieces must be at least 1")
    seed = _seed(args, cfg)
    tempo = tuple(args.tempo_range) if args.tempo_range else (1.0, 1.0)
    logger.info(f"Synthesising {args.pieces} pieces: seed={seed}, tempo={tempo}, out={out}")
    pieces = iter_corpus(seed, args.pieces, args.notes or cfg.data.notes_per_piece,
                         (cfg.data.pitch_low, cfg.data.pitch_high), render_cfg=cfg.render,
                         base_tempo_bpm=cfg.data.base_tempo_bpm, tempo_range=tempo,
                         tempo_points=cfg.data.tempo_points if tempo[0] != tempo[1] else 1,
                         jobs=args.jobs or cfg.jobs)
    count = save_dataset(out, pieces)
    print(f"wrote {count} pieces to {out}")
    return EXIT_OK


def pretrain_command(args, cfg: ExperimentConfig) -> int:
    """Self-supervised pretraining on the snippets of a dataset"""
    out = _require_out(args)
    seed = _seed(args, cfg)
    pairs = pairs_from_pieces(load_dataset(args.data), cfg.arch.audio_context)
    tcfg = cfg.pretrain.model_copy(update={"seed": seed, "regime": f"pretrain_{args.modality}"})
    aug = cfg.augment.sheet if args.modality == "sheet" else cfg.augment.audio
    logger.info(f"Pretraining the {args.modality} encoder on {len(pairs)} snippets")
    state, history = pretrain_selfsup([getattr(p, args.modality) for p in pairs], cfg.arch, tcfg, aug, cfg.loss)
    save_encoder(out, state, cfg.arch, args.modality, seed)
    Path(f"{out}.history.jsonl").write_text(history.to_jsonl())
    return EXIT_OK


def train_command(args, cfg: ExperimentConfig) -> int:
    """Paired training; writes the checkpoint and its epoch history"""
    out = _require_out(args)
    tcfg = cfg.train.model_copy(update={"seed": _seed(args, cfg), "regime": "paired"})
    pairs = pairs_from_pieces(load_dataset(args.data), cfg.arch.audio_context)
    net, history = train_paired(pairs, cfg.arch, tcfg, cfg.loss)
    save_checkpoint(out, net, regime="paired")
    Path(f"{out}.history.jsonl").write_text(history.to_jsonl())
    print(f"best epoch {history.best_epoch}, checkpoint {out}")
    return EXIT_OK


def finetune_command(args, cfg: ExperimentConfig) -> int:
    """Paired training starting from pretrained encoder files"""
    out = _require_out(args)
    tcfg = cfg.train.model_copy(update={"seed": _seed(args, cfg), "regime": "finetune"})
    sheet_state = load_encoder_file(args.sheet_encoder, "sheet") if args.sheet_encoder else None
    audio_state = load_encoder_file(args.audio_encoder, "audio") if args.audio_encoder else None
    pairs = pairs_from_pieces(load_dataset(args.data), cfg.arch.audio_context)
    net, history = finetune(sheet_state, audio_state, pairs, cfg.arch, tcfg, cfg.loss)
    save_checkpoint(out, net, regime="finetune")
    Path(f"{out}.history.jsonl").write_text(history.to_jsonl())
    print(f"best epoch {history.best_epoch}, checkpoint {out}")
    return EXIT_OK


def embed_command(args, cfg: ExperimentConfig) -> int:
    """Embed every snippet (or sliding-window document segment) of a dataset"""
    out = _require_out(args)
    net, _ = load_checkpoint(args.checkpoint)
    pieces = load_dataset(args.data)
    modality = args.modality
    grids, metadata = [], []
    if args.mode == "snippets":
        for pair in pairs_from_pieces(pieces, net.arch.audio_context):
            grids.append(getattr(pair, modality))
            metadata.append(EmbeddingMeta(pair.piece_id, pair.anchor_note_index, modality))
    else:
        if modality == "sheet":
            window, hop = cfg.pieceid.sheet_window, args.hop or cfg.pieceid.sheet_hop
        else:
            window, hop = net.arch.audio_frames, args.hop or cfg.pieceid.audio_hop
        for ap in pieces:
            doc = ap.score if modality == "sheet" else ap.performance
            for offset, grid in segment_document(doc, window, hop):
                grids.append(grid)
                metadata.append(EmbeddingMeta(ap.piece_id, offset, modality))
    if not grids:
        raise ArgumentError(f"dataset {args.data} has nothing to embed")
    save_embeddings(out, embed_many(net, grids, modality), metadata, modality)
    return EXIT_OK


def retrieve_command(args, cfg: ExperimentConfig) -> int:
    """Rank index entries for every stored query; matching (piece, offset) entries are scored as targets"""
    index = load_index(args.index)
    vectors, metadata, modality = load_embeddings(args.queries)
    if modality == index.modality:
        logger.warning(f"queries and index are both {modality} embeddings")
    positions = {(m.piece_id, m.offset): i for i, m in enumerate(index.metadata)}
    results = [query(index, vector, args.k, query_id=f"{meta.piece_id}:{meta.offset}",
                     target=positions.get((meta.piece_id, meta.offset)))
               for vector, meta in zip(vectors, metadata)]
    ranks = [r.rank_of_target for r in results if r.rank_of_target is not None]
    if ranks:
        logger.info(f"{len(ranks)} queries with targets: R@1/R@5/R@25/MRR/MR = {evaluate(ranks).format_row()}")
    _emit(json.dumps([r.to_dict() for r in results], indent=2) + "\n", args.out)
    return EXIT_OK


def identify_command(args, cfg: ExperimentConfig) -> int:
    """Identify the piece of every query document"""
    vectors, metadata, _ = load_embeddings(args.index)
    collection = PieceCollection(sequences_from_store(vectors, metadata))
    q_vectors, q_metadata, _ = load_embeddings(args.queries)
    methods = ("vote", "dtw") if args.method == "both" else (args.method,)
    known = set(collection.piece_ids)
    reports, ranks = [], {method: [] for method in methods}
    for sequence in sequences_from_store(q_vectors, q_metadata):
        truth = sequence.piece_id if sequence.piece_id in known else None
        for method in methods:
            if method == "vote":
                result = identify_vote(sequence, collection, truth)
            else:
                result = identify_dtw(sequence, collection, not args.raw, truth, jobs=cfg.jobs)
            reports.append(result.to_report(sequence.piece_id).model_dump())
            if result.rank_of_true_piece is not None:
                ranks[method].append(result.rank_of_true_piece)
    for method, method_ranks in ranks.items():
        if method_ranks:
            logger.info(f"{method}: {evaluate(method_ranks).format_row()}")
    _emit(json.dumps(reports, indent=2) + "\n", args.out)
    return EXIT_OK


def study_command(args, cfg: ExperimentConfig) -> int:
    """Run (or replay) a study; prints the CSV report"""
    train = not args.no_train
    if args.replay:
        report = replay_report(args.replay, train=train, record=not args.no_ledger)
    else:
        if not args.name:
            raise ArgumentError(f"study needs a name ({', '.join(sorted(STUDIES))}) or --replay")
        update = {}
        if args.seed is not None:
            update["seeds"] = [args.seed]
        if args.out:
            update["out_dir"] = args.out
        if args.jobs:
            update["jobs"] = args.jobs
        report = run_study(args.name, cfg.model_copy(update=update), train=train, record=not args.no_ledger)
    sys.stdout.write(report.to_csv())
    return EXIT_OK


def runs_command(args, cfg: ExperimentConfig) -> int:
    """List ledger runs, or export one run's rows as CSV"""
    with get_db() as db:
        if args.export is not None:
            _emit(export_run_csv(db, args.export), args.out)
            return EXIT_OK
        for run in list_runs(db, args.study):
            print(f"{run.id}\t{run.created:%Y-%m-%d %H:%M:%S}\t{run.study}\tseeds={run.seeds}\trows={len(run.rows)}")
    return EXIT_OK


COMMANDS = {
    "synth": synth_command,
    "pretrain": pretrain_command,
    "train": train_command,
    "finetune": finetune_command,
    "embed": embed_command,
    "retrieve": retrieve_command,
    "identify": identify_command,
    "study": study_command,
    "runs": runs_command,
}


def cli_main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run one subcommand, and map the outcome to an exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USER_ERROR
    except SystemExit as e:
        return int(e.code or 0)

    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.dump_config:
            sys.stdout.write(dump_config(cfg))
            return EXIT_OK
        if not args.command:
            parser.print_usage(sys.stderr)
            return EXIT_USER_ERROR
        logger.info(f"Running {args.command}")
        return COMMANDS[args.command](args, cfg)
    except (A2SError, FileNotFoundError) as e:
        logger.error(f"{args.command or 'a2s'} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USER_ERROR
    except Exception as e:
        logger.error(f"Internal error in {args.command}: {str(e)}", exc_info=True)
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL_ERROR
