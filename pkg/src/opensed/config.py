"""Experiment configuration: one JSON document with sections for features,
synthesis, architecture, training, SGLD, fusion, and post-processing, plus
the experiment arm (P1..P4) that ties them together.

Arm semantics:
  P1  plain single model            (tau = 0, M = 1)
  P2  open-world single model       (tau > 0, M = 1)
  P3  plain average ensemble        (tau = 0, M = 5, equal weights)
  P4  calibrated ensemble           (tau > 0, M = 5, confidence weights)
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .dataset import SynthConfig
from .eow import SgldConfig
from .features import FeatureConfig
from .model import ArchConfig
from .training import TrainConfig

ARMS = ("P1", "P2", "P3", "P4")


@dataclass(frozen=True)
class PostConfig:
    threshold: float = 0.5
    median_window: int = 7

    def __post_init__(self):
        if not (0.0 < self.threshold < 1.0):
            raise ValueError("threshold must lie in (0, 1)")
        if self.median_window < 1 or self.median_window % 2 == 0:
            raise ValueError("median window must be odd and >= 1")


@dataclass(frozen=True)
class SplitSpec:
    train_domains: tuple[SynthConfig, ...]
    test_domain: SynthConfig
    n_train_clips: int = 20
    n_test_clips: int = 10
    val_fraction: float = 0.2
    seed: int = 0


def default_split_spec(seed: int = 0, n_train_clips: int = 20,
                       n_test_clips: int = 10) -> SplitSpec:
    """Two in-domain source scenes and one shifted held-out scene: the test
    domain has a steeper background spectrum, a louder floor, and lower
    event SNR."""
    d1 = SynthConfig(noise_exponent=0.0, noise_level_db=-33.0, snr_db=(3.0, 12.0))
    d2 = SynthConfig(noise_exponent=0.5, noise_level_db=-30.0, snr_db=(3.0, 12.0))
    ood = SynthConfig(noise_exponent=1.5, noise_level_db=-24.0, snr_db=(0.0, 9.0))
    return SplitSpec((d1, d2), ood, n_train_clips, n_test_clips, seed=seed)


@dataclass
class ExperimentConfig:
    arm: str = "P4"
    features: FeatureConfig = field(default_factory=FeatureConfig)
    split: SplitSpec = field(default_factory=default_split_spec)
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    post: PostConfig = field(default_factory=PostConfig)

    def __post_init__(self):
        self.validate()

    @property
    def fusion(self) -> str:
        return "calibrated" if self.arm in ("P2", "P4") else "average"

    def validate(self) -> None:
        if self.arm not in ARMS:
            raise ValueError(f"unknown arm {self.arm!r}; expected one of {ARMS}")
        if self.arm in ("P1", "P3") and self.train.tau != 0.0:
            raise ValueError(f"arm {self.arm} requires tau = 0")
        if self.arm in ("P2", "P4") and self.train.tau <= 0.0:
            raise ValueError(f"arm {self.arm} requires tau > 0")
        if self.arm in ("P3", "P4") and len(self.train.seeds) < 2:
            raise ValueError(f"arm {self.arm} is an ensemble; need >= 2 seeds")
        if self.arch.n_classes != len(self.split.test_domain.targets):
            raise ValueError("arch n_classes must match the target class count")

    @property
    def n_models(self) -> int:
        return 1 if self.arm in ("P1", "P2") else len(self.train.seeds)


def for_arm(cfg: ExperimentConfig, arm: str) -> ExperimentConfig:
    """The same experiment under a different arm: only tau and the fusion
    rule change; everything else (data, arch, schedule, seeds) is shared."""
    tau = 0.0 if arm in ("P1", "P3") else (cfg.train.tau if cfg.train.tau > 0 else 1.0)
    return ExperimentConfig(
        arm=arm, features=cfg.features, split=cfg.split, arch=cfg.arch,
        train=dataclasses.replace(cfg.train, tau=tau), post=cfg.post)


# ---------------------------------------------------------------------------
# JSON round-trip

def _as_dict(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _as_dict(getattr(obj, f.name))
                for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_as_dict(x) for x in obj]
    return obj


def to_json(cfg: ExperimentConfig) -> str:
    return json.dumps(_as_dict(cfg), indent=2, sort_keys=True) + "\n"


def _build(cls, data: dict):
    kwargs = {}
    hints = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in hints:
            raise ValueError(f"unknown {cls.__name__} field {key!r}")
        kwargs[key] = value
    return cls(**kwargs)


def _build_synth(data: dict) -> SynthConfig:
    from .dataset import EventPrototype

    def protos(items):
        return tuple(EventPrototype(
            label=p["label"], kind=p["kind"], f0=tuple(p["f0"]),
            f1=tuple(p.get("f1", (0.0, 0.0))), dur=tuple(p.get("dur", (0.3, 1.0))),
            mod_rate=p.get("mod_rate", 8.0)) for p in items)

    data = dict(data)
    for key in ("snr_db", "events_per_clip", "distractors_per_clip"):
        if key in data:
            data[key] = tuple(data[key])
    if "targets" in data:
        data["targets"] = protos(data["targets"])
    if "distractors" in data:
        data["distractors"] = protos(data["distractors"])
    return _build(SynthConfig, data)


def from_json(text: str) -> ExperimentConfig:
    data = json.loads(text)
    split_data = data.get("split", {})
    split = SplitSpec(
        train_domains=tuple(_build_synth(d) for d in split_data["train_domains"]),
        test_domain=_build_synth(split_data["test_domain"]),
        n_train_clips=split_data.get("n_train_clips", 20),
        n_test_clips=split_data.get("n_test_clips", 10),
        val_fraction=split_data.get("val_fraction", 0.2),
        seed=split_data.get("seed", 0),
    ) if split_data else default_split_spec()

    train_data = dict(data.get("train", {}))
    if "seeds" in train_data:
        train_data["seeds"] = tuple(train_data["seeds"])
    if "sgld" in train_data:
        train_data["sgld"] = _build(SgldConfig, train_data["sgld"])

    arch_data = dict(data.get("arch", {}))
    for key in ("conv_channels", "freq_pools"):
        if key in arch_data:
            arch_data[key] = tuple(arch_data[key])

    return ExperimentConfig(
        arm=data.get("arm", "P4"),
        features=_build(FeatureConfig, data.get("features", {})),
        split=split,
        arch=_build(ArchConfig, arch_data),
        train=_build(TrainConfig, train_data),
        post=_build(PostConfig, data.get("post", {})),
    )


def load_config(path) -> ExperimentConfig:
    return from_json(Path(path).read_text())
