"""Experiment orchestration: build the synthetic split, train the per-arm
model bundles, run inference + fusion + post-processing on the held-out
domain, and score the four arms.

The four arms differ only in the training weight tau and the fusion rule,
so the comparison trains two bundles (plain and open-world) and derives
all arm results from them.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .config import ExperimentConfig, SplitSpec
from .dataset import DatasetSplit, EventList, make_split
from .ensemble import (Posteriorgram, decode_events, frame_confidence,
                       fuse_average, fuse_calibrated, median_filter_tracks)
from .metrics import MetricsReport, evaluate_clipset
from .model import CRNN
from .training import (ClipTensors, EnsembleBundle, PreparedSplit,
                       TrainConfig, prepare_split, train_model)


def build_split(spec: SplitSpec) -> DatasetSplit:
    return make_split(list(spec.train_domains), spec.test_domain,
                      spec.n_train_clips, spec.n_test_clips,
                      spec.val_fraction, spec.seed)


def class_names(cfg: ExperimentConfig) -> list[str]:
    return [p.label for p in cfg.split.test_domain.targets]


def class_map(cfg: ExperimentConfig) -> dict[str, int]:
    return {name: i for i, name in enumerate(class_names(cfg))}


def clip_posteriorgram(model: CRNN, clip: ClipTensors,
                       hop_seconds: float) -> Posteriorgram:
    with torch.no_grad():
        out = model(clip.features)
        sed = torch.sigmoid(out.sed_logits).numpy()
        sod = torch.softmax(out.sod_logits, dim=-1).numpy()
    return Posteriorgram(sed, sod, hop_seconds)


def fuse_members(posts: list[Posteriorgram], fusion: str) -> np.ndarray:
    if fusion == "calibrated":
        confs = [frame_confidence(p.sod) for p in posts]
        return fuse_calibrated(posts, confs)
    if fusion == "average":
        return fuse_average(posts)
    raise ValueError(f"unknown fusion rule {fusion!r}")


def score_models(models: list[CRNN], prepared: PreparedSplit,
                 split: DatasetSplit, cfg: ExperimentConfig,
                 fusion: str) -> MetricsReport:
    """Fuse the given models on every test clip, post-process, and score
    against the target-class references."""
    cmap = class_map(cfg)
    names = class_names(cfg)
    hop = cfg.features.hop_seconds
    refs, preds = {}, {}
    for clip, tensors in zip(split.test, prepared.test):
        posts = [clip_posteriorgram(m, tensors, hop) for m in models]
        fused = fuse_members(posts, fusion)
        smoothed = median_filter_tracks(fused, cfg.post.median_window)
        binary = (smoothed >= cfg.post.threshold).astype(np.float64)
        est_events = decode_events(smoothed, hop, cmap, cfg.post.threshold,
                                   clip_id=clip.clip_id,
                                   duration=clip.events.duration)
        target_only = EventList(clip.clip_id, clip.events.duration,
                                [e for e in clip.events.events if e.label in cmap])
        refs[clip.clip_id] = (target_only, tensors.sed.numpy())
        preds[clip.clip_id] = (est_events, binary)
    return evaluate_clipset(refs, preds, names)


def mean_uncertainty(model: CRNN, clips: list[ClipTensors]) -> float:
    """Mean open-world uncertainty over all frames of the given clips."""
    total, count = 0.0, 0
    with torch.no_grad():
        for c in clips:
            sod = torch.softmax(model(c.features).sod_logits, dim=-1)
            total += float(sod[:, 3].sum())
            count += sod.shape[0]
    return total / count


@dataclass
class ArmResult:
    arm: str
    per_seed: list[dict] = field(default_factory=list)  # one row per single-model eval
    fused: dict | None = None                           # ensemble arms: one fused row

    @property
    def rows(self) -> list[dict]:
        return self.per_seed if self.fused is None else [self.fused]

    def summary(self) -> dict:
        """Reported row: mean of per-seed scores for single-model arms, the
        fused scores for ensemble arms."""
        if self.fused is not None:
            return {"id": self.arm, **{k: v for k, v in self.fused.items() if k != "id"}}
        keys = [k for k in self.per_seed[0] if k not in ("id", "seed")]
        return {"id": self.arm,
                **{k: float(np.mean([r[k] for r in self.per_seed])) for k in keys}}

    def median(self, key: str) -> float:
        return float(np.median([r[key] for r in self.rows]))


@dataclass
class ComparisonResult:
    arms: dict[str, ArmResult]
    uncertainty: list[dict]       # per open-world seed: in-domain vs OOD means
    plain_bundle: EnsembleBundle
    eow_bundle: EnsembleBundle

    def table_rows(self) -> list[dict]:
        return [self.arms[a].summary() for a in ("P1", "P2", "P3", "P4")]


def train_bundle(prepared: PreparedSplit, cfg: ExperimentConfig,
                 train_cfg: TrainConfig, log=None) -> EnsembleBundle:
    members = [train_model(prepared, cfg.arch, cfg.features, train_cfg, s, log=log)
               for s in train_cfg.seeds]
    return EnsembleBundle(members)


def run_comparison(cfg: ExperimentConfig, split: DatasetSplit | None = None,
                   prepared: PreparedSplit | None = None,
                   log=None) -> ComparisonResult:
    """Train plain and open-world bundles over all seeds and score arms
    P1..P4 on the held-out domain."""
    import dataclasses

    if split is None:
        split = build_split(cfg.split)
    if prepared is None:
        prepared = prepare_split(split, cfg.features, class_map(cfg))

    tau = cfg.train.tau if cfg.train.tau > 0 else 1.0
    plain_cfg = dataclasses.replace(cfg.train, tau=0.0)
    eow_cfg = dataclasses.replace(cfg.train, tau=tau)

    plain = train_bundle(prepared, cfg, plain_cfg, log=log)
    eowb = train_bundle(prepared, cfg, eow_cfg, log=log)

    plain_models = [m.build() for m in plain.members]
    eow_models = [m.build() for m in eowb.members]

    arms: dict[str, ArmResult] = {}
    for arm, models in (("P1", plain_models), ("P2", eow_models)):
        res = ArmResult(arm)
        for member, model in zip((plain if arm == "P1" else eowb).members, models):
            rep = score_models([model], prepared, split, cfg,
                               "calibrated" if arm == "P2" else "average")
            res.per_seed.append({"id": f"{arm}_seed{member.seed}",
                                 "seed": member.seed, **rep.as_row()})
        arms[arm] = res

    p3 = score_models(plain_models, prepared, split, cfg, "average")
    arms["P3"] = ArmResult("P3", fused={"id": "P3", **p3.as_row()})
    p4 = score_models(eow_models, prepared, split, cfg, "calibrated")
    arms["P4"] = ArmResult("P4", fused={"id": "P4", **p4.as_row()})

    unc = []
    for member, model in zip(eowb.members, eow_models):
        unc.append({
            "seed": member.seed,
            "in_domain": mean_uncertainty(model, prepared.validation),
            "ood": mean_uncertainty(model, prepared.test),
        })
    return ComparisonResult(arms, unc, plain, eowb)


def relative_improvement(p1: dict, p4: dict) -> dict:
    """(P4 - P1) / P1 per score column; None where P1 is zero."""
    out = {"id": "P4_vs_P1_rel"}
    for key in ("ema_f1", "emi_f1", "sma_f1", "smi_f1"):
        out[key] = (p4[key] - p1[key]) / p1[key] if p1[key] else float("nan")
    return out
