"""Annotations, frame-level targets, and the synthetic two-domain benchmark.

The synthetic generator stands in for real recorded scenes: each clip is a
domain-specific colored-noise background plus parametric event carriers
(tones, chirps, noise bursts, AM tones). Domains differ in background
spectrum, level, and event SNR, which is what makes the held-out domain
out-of-distribution.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .features import Waveform, load_wav, save_wav


# ---------------------------------------------------------------------------
# events and annotation I/O

@dataclass(frozen=True)
class Event:
    onset: float
    offset: float
    label: str

    def __post_init__(self):
        if not (0.0 <= self.onset < self.offset):
            raise ValueError(f"bad event times: onset={self.onset} offset={self.offset}")


@dataclass
class EventList:
    clip_id: str
    duration: float
    events: list[Event] = field(default_factory=list)

    def sorted(self) -> "EventList":
        key = lambda e: (e.onset, e.offset, e.label)
        return EventList(self.clip_id, self.duration, sorted(self.events, key=key))


def parse_annotations(text: str, clip_id: str = "", duration: float = 0.0) -> EventList:
    """Parse "onset<TAB>offset<TAB>label" lines. Unknown labels are kept."""
    events = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"line {lineno}: expected 3 tab-separated fields, got {len(parts)}")
        try:
            onset, offset = float(parts[0]), float(parts[1])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: malformed number: {exc}") from exc
        if offset <= onset or onset < 0:
            raise ValueError(f"line {lineno}: need 0 <= onset < offset")
        events.append(Event(onset, offset, parts[2].strip()))
    dur = duration if duration > 0 else max((e.offset for e in events), default=0.0)
    return EventList(clip_id, dur, events)


def format_annotations(ev: EventList) -> str:
    return "".join(f"{e.onset:.6f}\t{e.offset:.6f}\t{e.label}\n" for e in ev.events)


# ---------------------------------------------------------------------------
# frame-level targets

def rasterize_labels(ev: EventList, n_frames: int, hop_seconds: float,
                     class_map: dict[str, int]) -> np.ndarray:
    """Binary (T, C) activity matrix. Cell (t, c) is 1 iff an event of class c
    overlaps the frame interval [t*hop, (t+1)*hop). Labels not in class_map
    are ignored."""
    if n_frames < 1:
        raise ValueError("need at least one frame")
    out = np.zeros((n_frames, len(class_map)))
    for e in ev.events:
        c = class_map.get(e.label)
        if c is None:
            continue
        # frames whose interval [t*hop, (t+1)*hop) intersects (onset, offset)
        t0 = max(0, int(np.floor(e.onset / hop_seconds)))
        t1 = min(n_frames - 1, int(np.ceil(e.offset / hop_seconds)) - 1)
        for t in range(t0, t1 + 1):
            if e.onset < (t + 1) * hop_seconds and e.offset > t * hop_seconds:
                out[t, c] = 1.0
    return out


def derive_sod_targets(sed: np.ndarray) -> np.ndarray:
    """Per-frame occurrence/overlap class: 0 silence, 1 mono, 2 polyphonic.

    Requires hard (binary) SED targets; derivation happens before mixup.
    """
    sed = np.asarray(sed)
    if not np.all((sed == 0.0) | (sed == 1.0)):
        raise ValueError("SOD derivation requires binary SED targets")
    return np.minimum(sed.sum(axis=1), 2).astype(np.int64)


def sod_one_hot(sod: np.ndarray, n_classes: int = 3) -> np.ndarray:
    sod = np.asarray(sod, dtype=np.int64)
    out = np.zeros((len(sod), n_classes))
    out[np.arange(len(sod)), sod] = 1.0
    return out


# ---------------------------------------------------------------------------
# synthetic scenes

@dataclass(frozen=True)
class EventPrototype:
    label: str
    kind: str                      # tone | chirp | burst | am
    f0: tuple[float, float]        # carrier frequency range (Hz)
    f1: tuple[float, float] = (0.0, 0.0)   # chirp end-frequency range
    dur: tuple[float, float] = (0.3, 1.0)  # duration range (s)
    mod_rate: float = 8.0          # AM modulation rate (Hz)


DEFAULT_TARGETS = (
    EventPrototype("beep", "tone", (800, 1200), dur=(0.3, 0.8)),
    EventPrototype("horn", "tone", (300, 500), dur=(0.5, 1.5)),
    EventPrototype("whistle", "tone", (2000, 3000), dur=(0.4, 1.0)),
    EventPrototype("chirp_up", "chirp", (400, 700), f1=(2500, 3500), dur=(0.3, 1.0)),
    EventPrototype("chirp_down", "chirp", (2500, 3500), f1=(400, 700), dur=(0.3, 1.0)),
    EventPrototype("buzz", "am", (150, 250), dur=(0.8, 2.0), mod_rate=30.0),
    EventPrototype("knock", "burst", (0, 0), dur=(0.06, 0.2)),
    EventPrototype("hiss", "burst", (0, 0), dur=(1.0, 2.5)),
    EventPrototype("siren", "am", (600, 900), dur=(1.0, 2.5), mod_rate=2.0),
)

DEFAULT_DISTRACTORS = (
    EventPrototype("ding", "tone", (1400, 1800), dur=(0.2, 0.5)),
    EventPrototype("rumble", "am", (60, 110), dur=(1.0, 3.0), mod_rate=5.0),
    EventPrototype("click", "burst", (0, 0), dur=(0.02, 0.06)),
    EventPrototype("sweep", "chirp", (900, 1100), f1=(3800, 4200), dur=(0.5, 1.2)),
)


@dataclass(frozen=True)
class SynthConfig:
    sample_rate: int = 16_000
    clip_duration: float = 10.0
    noise_exponent: float = 0.0    # colored-noise spectral slope (0 = white)
    noise_level_db: float = -30.0  # background RMS in dBFS
    snr_db: tuple[float, float] = (6.0, 15.0)
    events_per_clip: tuple[int, int] = (3, 6)
    distractors_per_clip: tuple[int, int] = (1, 3)
    polyphony_rate: float = 0.3
    targets: tuple[EventPrototype, ...] = DEFAULT_TARGETS
    distractors: tuple[EventPrototype, ...] = DEFAULT_DISTRACTORS
    seed: int = 0

    def __post_init__(self):
        tset = {p.label for p in self.targets}
        dset = {p.label for p in self.distractors}
        if tset & dset:
            raise ValueError(f"target/distractor class lists overlap: {tset & dset}")
        if not (0.0 <= self.polyphony_rate <= 1.0):
            raise ValueError("polyphony_rate must lie in [0, 1]")

    @property
    def class_map(self) -> dict[str, int]:
        return {p.label: i for i, p in enumerate(self.targets)}


def _colored_noise(n: int, exponent: float, rng: np.random.Generator) -> np.ndarray:
    white = rng.standard_normal(n)
    if exponent == 0.0:
        return white
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n)
    shaping = np.ones_like(freqs)
    shaping[1:] = freqs[1:] ** (-exponent / 2.0)
    shaping[0] = 0.0
    out = np.fft.irfft(spec * shaping, n=n)
    return out / (out.std() + 1e-12)


def _ramp(n_samples: int, sr: int, ramp_s: float = 0.01) -> np.ndarray:
    env = np.ones(n_samples)
    k = min(n_samples // 2, max(1, int(ramp_s * sr)))
    r = 0.5 - 0.5 * np.cos(np.pi * np.arange(k) / k)
    env[:k] = r
    env[-k:] = r[::-1]
    return env


def _render_carrier(proto: EventPrototype, dur: float, sr: int,
                    rng: np.random.Generator) -> np.ndarray:
    n = max(8, int(dur * sr))
    t = np.arange(n) / sr
    if proto.kind == "tone":
        f = rng.uniform(*proto.f0)
        sig = np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    elif proto.kind == "chirp":
        f0, f1 = rng.uniform(*proto.f0), rng.uniform(*proto.f1)
        phase = 2 * np.pi * (f0 * t + 0.5 * (f1 - f0) / dur * t**2)
        sig = np.sin(phase + rng.uniform(0, 2 * np.pi))
    elif proto.kind == "burst":
        sig = rng.standard_normal(n)
    elif proto.kind == "am":
        f = rng.uniform(*proto.f0)
        carrier = np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
        sig = carrier * (1.0 + 0.8 * np.sin(2 * np.pi * proto.mod_rate * t)) / 1.8
    else:
        raise ValueError(f"unknown carrier kind {proto.kind!r}")
    sig = sig * _ramp(n, sr)
    return sig / (sig.std() + 1e-12)


def _place(dur: float, clip_dur: float, occupied: list[tuple[float, float]],
           allow_overlap: bool, rng: np.random.Generator) -> float | None:
    if dur >= clip_dur:
        return None
    if allow_overlap:
        return float(rng.uniform(0.0, clip_dur - dur))
    for _ in range(200):
        onset = float(rng.uniform(0.0, clip_dur - dur))
        if all(onset >= b or onset + dur <= a for a, b in occupied):
            return onset
    return None


def synth_scene(cfg: SynthConfig, domain_id: int,
                rng: np.random.Generator, clip_id: str = "clip") -> tuple[Waveform, EventList]:
    """Render one 10 s scene: colored background plus target and distractor
    events at sampled times and SNRs. The returned EventList carries every
    rendered event, distractors under their own (non-target) labels."""
    sr = cfg.sample_rate
    n = int(cfg.clip_duration * sr)
    bg_rms = 10.0 ** (cfg.noise_level_db / 20.0)
    audio = _colored_noise(n, cfg.noise_exponent, rng) * bg_rms

    events: list[Event] = []
    occupied: list[tuple[float, float]] = []

    n_targets = int(rng.integers(cfg.events_per_clip[0], cfg.events_per_clip[1] + 1))
    for _ in range(n_targets):
        proto = cfg.targets[int(rng.integers(len(cfg.targets)))]
        dur = float(rng.uniform(*proto.dur))
        allow = bool(rng.random() < cfg.polyphony_rate)
        onset = _place(dur, cfg.clip_duration, occupied, allow, rng)
        snr = float(rng.uniform(*cfg.snr_db))
        if onset is None:
            continue
        sig = _render_carrier(proto, dur, sr, rng) * bg_rms * 10.0 ** (snr / 20.0)
        i0 = int(onset * sr)
        audio[i0:i0 + len(sig)] += sig[:n - i0]
        events.append(Event(onset, onset + dur, proto.label))
        occupied.append((onset, onset + dur))

    n_distr = int(rng.integers(cfg.distractors_per_clip[0], cfg.distractors_per_clip[1] + 1))
    for _ in range(n_distr):
        proto = cfg.distractors[int(rng.integers(len(cfg.distractors)))]
        dur = float(rng.uniform(*proto.dur))
        onset = _place(dur, cfg.clip_duration, [], True, rng)
        snr = float(rng.uniform(*cfg.snr_db))
        if onset is None:
            continue
        sig = _render_carrier(proto, dur, sr, rng) * bg_rms * 10.0 ** (snr / 20.0)
        i0 = int(onset * sr)
        audio[i0:i0 + len(sig)] += sig[:n - i0]
        events.append(Event(onset, onset + dur, proto.label))

    peak = np.max(np.abs(audio))
    if peak > 0.99:
        audio = audio * (0.99 / peak)
    ev = EventList(clip_id, cfg.clip_duration, events).sorted()
    return Waveform(audio, sr), ev


# ---------------------------------------------------------------------------
# splits

@dataclass
class Clip:
    clip_id: str
    domain_id: int
    partition: str   # train | validation | test
    waveform: Waveform
    events: EventList


@dataclass
class DatasetSplit:
    train: list[Clip]
    validation: list[Clip]
    test: list[Clip]

    @property
    def all_clips(self) -> list[Clip]:
        return self.train + self.validation + self.test


def _domains_identical(a: SynthConfig, b: SynthConfig) -> bool:
    return (a.noise_exponent == b.noise_exponent
            and a.noise_level_db == b.noise_level_db
            and a.snr_db == b.snr_db)


def make_split(train_domains: list[SynthConfig], test_domain: SynthConfig,
               n_train_clips: int, n_test_clips: int,
               val_fraction: float = 0.2, seed: int = 0) -> DatasetSplit:
    """Generate train/validation/test clips. `n_train_clips` is per train
    domain; validation is carved out of the train pool (never from the test
    domain). Train and test domain parameters must actually differ."""
    for d in train_domains:
        if _domains_identical(d, test_domain):
            raise ValueError(
                "test domain parameters equal a train domain; no distribution gap")

    pool: list[Clip] = []
    for dom, cfg in enumerate(train_domains, start=1):
        for i in range(n_train_clips):
            cid = f"d{dom}_c{i:03d}"
            rng = np.random.default_rng([cfg.seed, seed, dom, i])
            wav, ev = synth_scene(cfg, dom, rng, clip_id=cid)
            pool.append(Clip(cid, dom, "train", wav, ev))

    rng = np.random.default_rng([seed, 0xA11])
    n_val = max(1, int(round(val_fraction * len(pool))))
    val_idx = set(rng.permutation(len(pool))[:n_val].tolist())
    for i in val_idx:
        pool[i].partition = "validation"

    test_dom = len(train_domains) + 1
    test = []
    for i in range(n_test_clips):
        cid = f"d{test_dom}_c{i:03d}"
        c_rng = np.random.default_rng([test_domain.seed, seed, test_dom, i])
        wav, ev = synth_scene(test_domain, test_dom, c_rng, clip_id=cid)
        test.append(Clip(cid, test_dom, "test", wav, ev))

    return DatasetSplit(
        train=[c for c in pool if c.partition == "train"],
        validation=[c for c in pool if c.partition == "validation"],
        test=test,
    )


# ---------------------------------------------------------------------------
# on-disk dataset (WAV + TSV + JSON manifest)

def write_dataset(split: DatasetSplit, out_dir) -> Path:
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(parents=True, exist_ok=True)
    records = []
    for clip in split.all_clips:
        wav_path = out / "audio" / f"{clip.clip_id}.wav"
        ann_path = out / "annotations" / f"{clip.clip_id}.tsv"
        save_wav(wav_path, clip.waveform)
        ann_path.write_text(format_annotations(clip.events))
        records.append({
            "clip_id": clip.clip_id,
            "partition": clip.partition,
            "domain_id": clip.domain_id,
            "wav": str(wav_path.relative_to(out)),
            "annotations": str(ann_path.relative_to(out)),
            "duration": clip.events.duration,
        })
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps({"clips": records}, indent=2, sort_keys=True) + "\n")
    return manifest


def load_dataset(manifest_path) -> DatasetSplit:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    data = json.loads(manifest_path.read_text())
    parts: dict[str, list[Clip]] = {"train": [], "validation": [], "test": []}
    for rec in data["clips"]:
        wav = load_wav(root / rec["wav"])
        ev = parse_annotations((root / rec["annotations"]).read_text(),
                               clip_id=rec["clip_id"], duration=rec["duration"])
        parts[rec["partition"]].append(
            Clip(rec["clip_id"], rec["domain_id"], rec["partition"], wav, ev))
    return DatasetSplit(parts["train"], parts["validation"], parts["test"])
