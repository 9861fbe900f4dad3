import copy
import logging
import time
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn
from torch.optim.lr_scheduler import ReduceLROnPlateau
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from a2s.augment import AugConfig, make_positive_pair, sample_seed
from a2s.errors import ConfigError
from a2s.losses import nt_xent_loss, pairwise_ranking_loss
from a2s.network import EmbeddingNetwork, embed_many, encoder_state, init_params, load_encoder
from a2s.retrieval import evaluate, rank_targets
from a2s.schemas.config import ArchConfig, AudioAugConfig, LossConfig, SheetAugConfig, TrainConfig
from a2s.schemas.report import EpochRecord, TrainHistory
from a2s.synthdata import SnippetPair

logger = logging.getLogger(__name__)

PRETRAIN_MODALITY = {"pretrain_sheet": "sheet", "pretrain_audio": "audio"}


class PairDataset(Dataset):
    def __init__(self, pairs: Sequence[SnippetPair]):
        self.pairs = pairs

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, i):
        pair = self.pairs[i]
        return torch.from_numpy(np.ascontiguousarray(pair.sheet)), torch.from_numpy(np.ascontiguousarray(pair.audio))


class AugmentedViewDataset(Dataset):
    """Positive pairs whose augmentation seed depends on (seed, epoch, index) only."""

    def __init__(self, samples: Sequence[np.ndarray], aug_cfg: AugConfig, seed: int):
        self.samples = samples
        self.aug_cfg = aug_cfg
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        view_i, view_j = make_positive_pair(self.samples[i], self.aug_cfg, sample_seed(self.seed, self.epoch, i))
        return torch.from_numpy(view_i.astype(np.float32)), torch.from_numpy(view_j.astype(np.float32))


def _loader(dataset: Dataset, cfg: TrainConfig) -> DataLoader:
    if len(dataset) < 2:
        raise ConfigError("training needs at least 2 samples per batch")
    return DataLoader(dataset, batch_size=cfg.batch_size, shuffle=True,
                      drop_last=len(dataset) >= cfg.batch_size, num_workers=cfg.num_workers,
                      generator=torch.Generator().manual_seed(cfg.seed))


def _optimizer(params, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum)
    return torch.optim.Adam(params, lr=cfg.learning_rate, betas=tuple(cfg.betas))


def split_by_piece(pairs: Sequence[SnippetPair], val_fraction: float, seed: int) -> Tuple[List[SnippetPair], List[SnippetPair]]:
    piece_ids = list(dict.fromkeys(pair.piece_id for pair in pairs))
    if len(piece_ids) < 2:
        raise ConfigError(f"cannot split {len(piece_ids)} piece(s) into train and validation")
    rng = np.random.default_rng(seed)
    n_val = min(max(1, int(round(val_fraction * len(piece_ids)))), len(piece_ids) - 1)
    val_ids = {piece_ids[i] for i in rng.permutation(len(piece_ids))[:n_val]}
    train = [pair for pair in pairs if pair.piece_id not in val_ids]
    val = [pair for pair in pairs if pair.piece_id in val_ids]
    return train, val


def check_split(train: Sequence[SnippetPair], val: Sequence[SnippetPair]) -> None:
    if not train:
        raise ConfigError("training set is empty")
    shared = {p.piece_id for p in train} & {p.piece_id for p in val}
    if shared:
        raise ConfigError(f"pieces appear in both train and validation: {sorted(shared)[:5]}")
    corrupted = {p.tier for p in list(train) + list(val)} - {"clean"}
    if corrupted:
        raise ConfigError(f"training data must be clean, found tiers {sorted(corrupted)}")


def validation_mrr(net: EmbeddingNetwork, pairs: Sequence[SnippetPair]) -> float:
    """Audio-to-sheet MRR, each audio excerpt querying all sheet snippets of the set."""
    sheets = embed_many(net, [p.sheet for p in pairs], "sheet")
    audio = embed_many(net, [p.audio for p in pairs], "audio")
    return evaluate(rank_targets(audio, sheets)).mrr


def _paired_step(net: EmbeddingNetwork, sheets: torch.Tensor, audio: torch.Tensor, margin: float):
    z_sheet = net.embed_sheet(sheets.unsqueeze(1).to(net.dtype))
    z_audio = net.embed_audio(audio.unsqueeze(1).to(net.dtype))
    audio_anchored = pairwise_ranking_loss(z_audio, z_sheet, margin)
    sheet_anchored = pairwise_ranking_loss(z_sheet, z_audio, margin)
    return 0.5 * (audio_anchored.value + sheet_anchored.value)


def _fit(net: EmbeddingNetwork, train: Sequence[SnippetPair], val: Sequence[SnippetPair], cfg: TrainConfig,
         loss_cfg: LossConfig, regime: str) -> Tuple[EmbeddingNetwork, TrainHistory]:
    check_split(train, val)
    torch.manual_seed(cfg.seed)
    loader = _loader(PairDataset(train), cfg)
    optimizer = _optimizer(net.parameters(), cfg)
    scheduler = ReduceLROnPlateau(optimizer, mode="max", factor=cfg.lr_factor, patience=cfg.lr_patience)

    history = TrainHistory(regime=regime, seed=cfg.seed)
    best_mrr = validation_mrr(net, val) if val else None
    history.initial_val_mrr = best_mrr
    best_state, best_epoch, stale = copy.deepcopy(net.state_dict()), 0, 0
    logger.info(f"[{regime}] {net.arch.tag}: {len(train)} train / {len(val)} validation pairs, "
                f"initial val MRR={best_mrr}")

    for epoch in range(1, cfg.epochs + 1):
        net.train()
        start, total, batches = time.perf_counter(), 0.0, 0
        for sheets, audio in tqdm(loader, desc=f"{regime} epoch {epoch}", disable=not cfg.progress, leave=False):
            loss = _paired_step(net, sheets, audio, loss_cfg.margin)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss.detach())
            batches += 1

        lr = optimizer.param_groups[0]["lr"]
        val_mrr = validation_mrr(net, val) if val else None
        if val_mrr is not None:
            scheduler.step(val_mrr)
        record = EpochRecord(epoch=epoch, regime=regime, loss=total / max(batches, 1), val_mrr=val_mrr,
                             lr=lr, seconds=time.perf_counter() - start)
        history.epochs.append(record)
        logger.info(f"[{regime}] epoch {epoch}: loss={record.loss:.4f} val_mrr={val_mrr} lr={lr:g}")

        if val_mrr is None or val_mrr > best_mrr:
            best_mrr, best_epoch, stale = val_mrr, epoch, 0
            best_state = copy.deepcopy(net.state_dict())
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                logger.warning(f"[{regime}] early stop after {epoch} epochs, best epoch {best_epoch}")
                break

    if cfg.checkpoint == "best":
        net.load_state_dict(best_state)
        history.best_epoch = best_epoch
    else:
        history.best_epoch = history.epochs[-1].epoch if history.epochs else 0
    net.eval()
    return net, history


def _split(pairs: Sequence[SnippetPair], cfg: TrainConfig,
           validation: Optional[Sequence[SnippetPair]]) -> Tuple[Sequence[SnippetPair], Sequence[SnippetPair]]:
    if not pairs:
        raise ConfigError("no snippet pairs to train on")
    if validation is None:
        return split_by_piece(pairs, cfg.val_fraction, cfg.seed)
    return pairs, validation


def train_paired(pairs: Sequence[SnippetPair], arch: ArchConfig, cfg: TrainConfig,
                 loss_cfg: Optional[LossConfig] = None,
                 validation: Optional[Sequence[SnippetPair]] = None) -> Tuple[EmbeddingNetwork, TrainHistory]:
    """Supervised cross-modal training with the ranking loss; returns the best-validation weights."""
    train, val = _split(pairs, cfg, validation)
    net = init_params(arch, cfg.seed)
    return _fit(net, train, val, cfg, loss_cfg or LossConfig(), regime="paired")


def finetune(pretrained_sheet: Optional[Dict[str, torch.Tensor]], pretrained_audio: Optional[Dict[str, torch.Tensor]],
             pairs: Sequence[SnippetPair], arch: ArchConfig, cfg: TrainConfig,
             loss_cfg: Optional[LossConfig] = None,
             validation: Optional[Sequence[SnippetPair]] = None) -> Tuple[EmbeddingNetwork, TrainHistory]:
    """Paired training starting from self-supervised encoders (either may be None for random init)."""
    train, val = _split(pairs, cfg, validation)
    net = init_params(arch, cfg.seed)
    if pretrained_sheet is not None:
        load_encoder(net, "sheet", pretrained_sheet)
    if pretrained_audio is not None:
        load_encoder(net, "audio", pretrained_audio)
    return _fit(net, train, val, cfg, loss_cfg or LossConfig(), regime="finetune")


class ProjectionHead(nn.Module):
    def __init__(self, in_dim: int, hidden: int = 128, out_dim: int = 32):
        super().__init__()
        self.layers = nn.Sequential(nn.Linear(in_dim, hidden), nn.ELU(), nn.Linear(hidden, out_dim))

    def forward(self, x):
        return self.layers(x)


def pretraining_modules(arch: ArchConfig, modality: str, seed: int) -> Tuple[EmbeddingNetwork, ProjectionHead]:
    """Seeded network and the throwaway projection head used during pretraining."""
    net = init_params(arch, seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        head = ProjectionHead(net.pathway(modality).head_dim, out_dim=arch.embedding_dim)
    return net, head


def pretrain_selfsup(snippets: Sequence[np.ndarray], arch: ArchConfig, cfg: TrainConfig, aug_cfg: AugConfig,
                     loss_cfg: Optional[LossConfig] = None) -> Tuple[Dict[str, torch.Tensor], TrainHistory]:
    """Contrastive pretraining of one pathway; the projection head is discarded afterwards."""
    if cfg.regime not in PRETRAIN_MODALITY:
        raise ConfigError(f"regime {cfg.regime!r} is not a pretraining regime")
    modality = PRETRAIN_MODALITY[cfg.regime]
    expected = SheetAugConfig if modality == "sheet" else AudioAugConfig
    if not isinstance(aug_cfg, expected):
        raise ConfigError(f"{cfg.regime} needs a {expected.__name__}, got {type(aug_cfg).__name__}")
    if len(snippets) < 2:
        raise ConfigError("pretraining needs at least 2 snippets (4 views) per batch")
    loss_cfg = loss_cfg or LossConfig()

    net, head = pretraining_modules(arch, modality, cfg.seed)
    pathway = net.pathway(modality)
    params = list(pathway.features.parameters()) + list(pathway.head.parameters()) + list(head.parameters())
    optimizer = _optimizer(params, cfg)
    dataset = AugmentedViewDataset(snippets, aug_cfg, cfg.seed)
    loader = _loader(dataset, cfg)

    history = TrainHistory(regime=cfg.regime, seed=cfg.seed)
    logger.info(f"[{cfg.regime}] {len(snippets)} unlabeled snippets, batch {cfg.batch_size}, tau={loss_cfg.ntxent.tau}")
    pathway.train()
    for epoch in range(1, cfg.epochs + 1):
        dataset.set_epoch(epoch)
        start, total, batches = time.perf_counter(), 0.0, 0
        for view_i, view_j in tqdm(loader, desc=f"{cfg.regime} epoch {epoch}", disable=not cfg.progress, leave=False):
            x = torch.cat([view_i, view_j]).unsqueeze(1).to(net.dtype)
            z = head(pathway.represent(x))
            loss = nt_xent_loss(z, tau=loss_cfg.ntxent.tau, reduction=loss_cfg.ntxent.reduction)
            optimizer.zero_grad()
            loss.value.backward()
            optimizer.step()
            total += loss.item()
            batches += 1
        record = EpochRecord(epoch=epoch, regime=cfg.regime, loss=total / max(batches, 1),
                             lr=optimizer.param_groups[0]["lr"], seconds=time.perf_counter() - start)
        history.epochs.append(record)
        logger.info(f"[{cfg.regime}] epoch {epoch}: loss={record.loss:.4f}")
    history.best_epoch = history.epochs[-1].epoch if history.epochs else 0
    return encoder_state(net, modality), history
