"""Joint training of the SED branch (BCE) and the open-world
occurrence/overlap branch, with mixup, warmup, early stopping, and
multi-seed ensemble bundles.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch

from . import eow
from .dataset import Clip, DatasetSplit, derive_sod_targets, rasterize_labels, sod_one_hot
from .eow import SgldConfig, SgldSampler, eow_loss, gaussian_negatives
from .features import FeatureConfig, log_mel_spectrogram, standardize
from .model import Adam, ArchConfig, CRNN, init_params, load_param_vector, param_vector, warmup_lr


@dataclass(frozen=True)
class TrainConfig:
    tau: float = 1.0               # weight of the open-world loss
    lam: float = 0.1               # weight of the negative-sample term inside it
    base_lr: float = 1e-3
    batch_size: int = 8
    max_epochs: int = 30
    warmup_epochs: int = 5
    patience: int = 5
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    mixup: bool = True
    mixup_alpha: float = 0.2
    sgld: SgldConfig = SgldConfig()
    negatives: str = "sgld"        # sgld | gaussian

    def __post_init__(self):
        if self.tau < 0 or self.lam < 0:
            raise ValueError("tau and lam must be >= 0")
        if self.patience < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("patience, max_epochs, batch_size must be >= 1")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if self.negatives not in ("sgld", "gaussian"):
            raise ValueError("negatives must be 'sgld' or 'gaussian'")


@dataclass
class ClipTensors:
    clip_id: str
    features: torch.Tensor    # (T, F)
    sed: torch.Tensor         # (T, C)
    sod: torch.Tensor         # (T,) hard labels
    sod_onehot: torch.Tensor  # (T, 3)


def prepare_clip(clip: Clip, feat_cfg: FeatureConfig,
                 class_map: dict[str, int]) -> ClipTensors:
    feats = standardize(log_mel_spectrogram(clip.waveform, feat_cfg))
    sed = rasterize_labels(clip.events, feats.n_frames, feats.hop_seconds, class_map)
    sod = derive_sod_targets(sed)
    return ClipTensors(
        clip.clip_id,
        torch.as_tensor(feats.values, dtype=torch.float64),
        torch.as_tensor(sed, dtype=torch.float64),
        torch.as_tensor(sod, dtype=torch.long),
        torch.as_tensor(sod_one_hot(sod), dtype=torch.float64),
    )


@dataclass
class PreparedSplit:
    train: list[ClipTensors]
    validation: list[ClipTensors]
    test: list[ClipTensors]


def prepare_split(split: DatasetSplit, feat_cfg: FeatureConfig,
                  class_map: dict[str, int]) -> PreparedSplit:
    prep = lambda clips: [prepare_clip(c, feat_cfg, class_map) for c in clips]
    return PreparedSplit(prep(split.train), prep(split.validation), prep(split.test))


# ---------------------------------------------------------------------------
# losses

def bce_loss(sed_logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean binary cross entropy from logits, numerically stabilized."""
    l = torch.as_tensor(sed_logits, dtype=torch.float64)
    y = torch.as_tensor(targets, dtype=torch.float64)
    if l.shape != y.shape:
        raise ValueError(f"shape mismatch: logits {tuple(l.shape)} vs targets {tuple(y.shape)}")
    if y.numel() and (y.min() < 0 or y.max() > 1):
        raise ValueError("BCE targets must lie in [0, 1]")
    return (l.clamp_min(0) - l * y + torch.log1p(torch.exp(-l.abs()))).mean()


@dataclass
class LossBreakdown:
    bce: torch.Tensor
    mll: torch.Tensor
    open: torch.Tensor
    tau: float
    lam: float

    @property
    def total(self) -> torch.Tensor:
        return self.bce + self.tau * (self.mll + self.lam * self.open)


def total_loss(model: CRNN, features: torch.Tensor, sed_targets: torch.Tensor,
               sod_targets: torch.Tensor, cfg: TrainConfig,
               neg_embeddings: torch.Tensor | None) -> LossBreakdown:
    """Joint loss on one batch. `neg_embeddings` are detached samples fed
    through the current occurrence/overlap head; pass None when tau or lam
    disables the negative term."""
    out = model(features)
    b = bce_loss(out.sed_logits, sed_targets)
    if cfg.tau == 0.0:
        zero = torch.zeros((), dtype=torch.float64)
        return LossBreakdown(b, zero, zero, cfg.tau, cfg.lam)
    sod_logits = out.sod_logits.reshape(-1, 4)
    target = sod_targets.reshape(-1, 3) if sod_targets.dim() == features.dim() \
        else sod_targets.reshape(-1)
    neg_logits = None
    if neg_embeddings is not None and len(neg_embeddings):
        neg_logits = model.sod_head(neg_embeddings.detach())
    terms = eow_loss(sod_logits, target, neg_logits, cfg.lam)
    return LossBreakdown(b, terms.mll_term, terms.open_term, cfg.tau, cfg.lam)


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainedModel:
    arch: ArchConfig
    params: np.ndarray           # best checkpoint, flat float64
    history: list[dict] = field(default_factory=list)
    seed: int = 0
    best_epoch: int = 0
    best_val_loss: float = float("inf")

    def build(self) -> CRNN:
        model = CRNN(self.arch)
        load_param_vector(model, self.params)
        return model


@dataclass
class EnsembleBundle:
    members: list[TrainedModel]

    def __post_init__(self):
        if not self.members:
            raise ValueError("empty ensemble bundle")
        archs = {m.arch for m in self.members}
        if len(archs) != 1:
            raise ValueError("ensemble members must share one architecture")

    def __len__(self):
        return len(self.members)


def _stack(clips: list[ClipTensors]):
    feats = torch.stack([c.features for c in clips])
    sed = torch.stack([c.sed for c in clips])
    sod = torch.stack([c.sod for c in clips])
    onehot = torch.stack([c.sod_onehot for c in clips])
    return feats, sed, sod, onehot


def _validation_loss(model: CRNN, clips: list[ClipTensors],
                     cfg: TrainConfig) -> dict:
    """Deterministic validation objective: BCE plus tau * MLL term. The
    negative-sample term depends on sampler state, so it is excluded from
    model selection."""
    with torch.no_grad():
        feats, sed, sod, _ = _stack(clips)
        out = model(feats)
        b = bce_loss(out.sed_logits, sed)
        if cfg.tau > 0:
            mll = eow_loss(out.sod_logits.reshape(-1, 4), sod.reshape(-1),
                           None, 0.0).mll_term
        else:
            mll = torch.zeros((), dtype=torch.float64)
    return {"val_bce": float(b), "val_mll": float(mll),
            "val_total": float(b + cfg.tau * mll)}


def train_model(split: DatasetSplit | PreparedSplit, arch: ArchConfig,
                feat_cfg: FeatureConfig, cfg: TrainConfig, seed: int,
                class_map: dict[str, int] | None = None,
                log=None) -> TrainedModel:
    """Train one model; returns the checkpoint with the lowest validation loss."""
    if isinstance(split, PreparedSplit):
        data = split
    else:
        if class_map is None:
            raise ValueError("class_map is required when passing a raw split")
        data = prepare_split(split, feat_cfg, class_map)
    if not data.train or not data.validation:
        raise ValueError("train and validation partitions must be non-empty")

    model = init_params(arch, seed)
    adam = Adam(model.parameters())
    sampler = SgldSampler(arch.embedding_dim, cfg.sgld, seed=seed * 7919 + 1)
    gauss_gen = torch.Generator().manual_seed(seed * 7919 + 2)
    need_negatives = cfg.tau > 0 and cfg.lam > 0

    result = TrainedModel(arch, param_vector(model), seed=seed)
    bad_epochs = 0

    for epoch in range(1, cfg.max_epochs + 1):
        rng = np.random.default_rng([seed, epoch, 0xE90C])
        lr = warmup_lr(epoch - 1, cfg.base_lr, cfg.warmup_epochs)
        order = rng.permutation(len(data.train))
        sums = {"bce": 0.0, "mll": 0.0, "open": 0.0, "total": 0.0}
        n_batches = 0

        for start in range(0, len(order), cfg.batch_size):
            batch = [data.train[i] for i in order[start:start + cfg.batch_size]]
            feats, sed, sod, onehot = _stack(batch)
            sod_target: torch.Tensor = sod
            if cfg.mixup and len(batch) > 1:
                lam_mix = float(rng.beta(cfg.mixup_alpha, cfg.mixup_alpha))
                perm = torch.as_tensor(rng.permutation(len(batch)))
                feats = lam_mix * feats + (1 - lam_mix) * feats[perm]
                sed = lam_mix * sed + (1 - lam_mix) * sed[perm]
                sod_target = lam_mix * onehot + (1 - lam_mix) * onehot[perm]

            neg = None
            if need_negatives:
                if cfg.negatives == "sgld":
                    frozen = copy.deepcopy(model.sod_head)
                    for p in frozen.parameters():
                        p.requires_grad_(False)
                    neg = sampler.sample(frozen, cfg.batch_size)
                else:
                    neg = gaussian_negatives(arch.embedding_dim, cfg.batch_size,
                                             gauss_gen)

            loss = total_loss(model, feats, sed, sod_target, cfg, neg)
            total = loss.total
            if not torch.isfinite(total):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch}, batch {n_batches}: "
                    f"bce={float(loss.bce)} mll={float(loss.mll)} open={float(loss.open)}")
            adam.zero_grad()
            total.backward()
            adam.step(lr)

            sums["bce"] += float(loss.bce.detach())
            sums["mll"] += float(loss.mll.detach())
            sums["open"] += float(loss.open.detach())
            sums["total"] += float(total.detach())
            n_batches += 1

        row = {"epoch": epoch, "lr": lr}
        row.update({f"train_{k}": v / n_batches for k, v in sums.items()})
        row.update(_validation_loss(model, data.validation, cfg))
        result.history.append(row)
        if log is not None:
            log(row)

        if row["val_total"] < result.best_val_loss:
            result.best_val_loss = row["val_total"]
            result.best_epoch = epoch
            result.params = param_vector(model)
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > cfg.patience:
                break

    return result


def train_ensemble(split: DatasetSplit | PreparedSplit, arch: ArchConfig,
                   feat_cfg: FeatureConfig, cfg: TrainConfig,
                   class_map: dict[str, int] | None = None,
                   log=None) -> EnsembleBundle:
    """One independently initialized model per configured seed."""
    if isinstance(split, DatasetSplit):
        if class_map is None:
            raise ValueError("class_map is required when passing a raw split")
        split = prepare_split(split, feat_cfg, class_map)
    members = [train_model(split, arch, feat_cfg, cfg, s, log=log)
               for s in cfg.seeds]
    return EnsembleBundle(members)
