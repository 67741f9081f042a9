"""Inference-time post-processing: per-frame confidence from the
occurrence/overlap branch, confidence-weighted and plain average fusion,
median filtering, and event decoding.

Everything here is numpy and pure; posteriorgrams can also be read from
files, so the fusion/eval path works on predictions produced elsewhere.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch

from .dataset import Event, EventList
from .features import FeatureMatrix
from .model import CRNN

_POST_MAGIC = b"SEDPOST1"
UNCERTAIN = 3


@dataclass
class Posteriorgram:
    sed: np.ndarray       # (T, C) probabilities
    sod: np.ndarray       # (T, 4) probabilities, rows sum to 1
    hop_seconds: float

    def __post_init__(self):
        self.sed = np.asarray(self.sed, dtype=np.float64)
        self.sod = np.asarray(self.sod, dtype=np.float64)
        if self.sed.ndim != 2 or self.sod.ndim != 2 or self.sod.shape[1] != 4:
            raise ValueError("expected sed (T, C) and sod (T, 4)")
        if self.sed.shape[0] != self.sod.shape[0]:
            raise ValueError("sed/sod frame counts differ")


def run_inference(model: CRNN, feats: FeatureMatrix) -> Posteriorgram:
    with torch.no_grad():
        out = model(torch.as_tensor(feats.values, dtype=torch.float64))
        sed = torch.sigmoid(out.sed_logits).numpy()
        sod = torch.softmax(out.sod_logits, dim=-1).numpy()
    return Posteriorgram(sed, sod, feats.hop_seconds)


def frame_confidence(sod: np.ndarray) -> np.ndarray:
    """Per-frame confidence = 1 - open-world uncertainty."""
    sod = np.asarray(sod, dtype=np.float64)
    if sod.ndim != 2 or sod.shape[1] != 4:
        raise ValueError("expected (T, 4) occurrence/overlap probabilities")
    return 1.0 - sod[:, UNCERTAIN]


def _check_members(members: list[Posteriorgram]):
    if not members:
        raise ValueError("need at least one ensemble member")
    shape = members[0].sed.shape
    for m in members[1:]:
        if m.sed.shape != shape:
            raise ValueError(f"member shape mismatch: {m.sed.shape} vs {shape}")
    return shape


def fuse_calibrated(members: list[Posteriorgram],
                    confs: list[np.ndarray],
                    eps: float = 1e-12) -> np.ndarray:
    """Confidence-weighted fusion: per frame and class, average member SED
    probabilities weighted by each member's frame confidence. Frames where
    all confidences vanish fall back to the unweighted mean."""
    shape = _check_members(members)
    if len(confs) != len(members):
        raise ValueError("one confidence track per member required")
    sed = np.stack([m.sed for m in members])              # (M, T, C)
    w = np.stack([np.asarray(c, dtype=np.float64) for c in confs])  # (M, T)
    if w.shape != (len(members), shape[0]):
        raise ValueError("confidence track length mismatch")
    denom = w.sum(axis=0)                                 # (T,)
    fused = np.empty(shape)
    safe = denom >= eps
    fused[safe] = (sed[:, safe] * w[:, safe, None]).sum(axis=0) / denom[safe, None]
    fused[~safe] = sed[:, ~safe].mean(axis=0)
    return fused


def fuse_average(members: list[Posteriorgram],
                 weights: np.ndarray | None = None) -> np.ndarray:
    """Fixed-weight interpolation of member SED probabilities (default:
    equal weights)."""
    _check_members(members)
    m = len(members)
    w = np.full(m, 1.0 / m) if weights is None else np.asarray(weights, dtype=np.float64)
    if len(w) != m or np.any(w < 0):
        raise ValueError("need one nonnegative weight per member")
    if w.sum() <= 0:
        raise ValueError("weights must not all be zero")
    w = w / w.sum()
    return np.tensordot(w, np.stack([p.sed for p in members]), axes=1)


def median_filter(track: np.ndarray, window: int = 7) -> np.ndarray:
    """Sliding median with truncated windows at the boundaries."""
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be odd and >= 1")
    track = np.asarray(track, dtype=np.float64)
    half = window // 2
    n = len(track)
    out = np.empty(n)
    for t in range(n):
        out[t] = np.median(track[max(0, t - half):min(n, t + half + 1)])
    return out


def median_filter_tracks(fused: np.ndarray, window: int = 7) -> np.ndarray:
    """Apply the median filter per class column."""
    return np.column_stack([median_filter(fused[:, c], window)
                            for c in range(fused.shape[1])])


def decode_events(fused: np.ndarray, hop_seconds: float,
                  class_map: dict[str, int], threshold: float = 0.5,
                  clip_id: str = "", duration: float | None = None) -> EventList:
    """Binarize per class and turn each maximal run of active frames into
    an event on the hop grid."""
    if not (0.0 < threshold < 1.0):
        raise ValueError("threshold must lie in (0, 1)")
    n_frames = fused.shape[0]
    events = []
    inv = {c: label for label, c in class_map.items()}
    for c in range(fused.shape[1]):
        active = fused[:, c] >= threshold
        t = 0
        while t < n_frames:
            if active[t]:
                t0 = t
                while t < n_frames and active[t]:
                    t += 1
                events.append(Event(t0 * hop_seconds, t * hop_seconds, inv[c]))
            else:
                t += 1
    dur = duration if duration is not None else n_frames * hop_seconds
    return EventList(clip_id, dur, events).sorted()


# ---------------------------------------------------------------------------
# posteriorgram file format: header {T, C, hop_seconds}, SED then SOD matrix

def save_posteriorgram(path, post: Posteriorgram) -> None:
    t, c = post.sed.shape
    with open(path, "wb") as fh:
        fh.write(_POST_MAGIC)
        fh.write(struct.pack("<qqd", t, c, post.hop_seconds))
        fh.write(np.ascontiguousarray(post.sed, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(post.sod, dtype="<f8").tobytes())


def load_posteriorgram(path) -> Posteriorgram:
    with open(path, "rb") as fh:
        if fh.read(8) != _POST_MAGIC:
            raise ValueError(f"not a posteriorgram file: {path}")
        t, c, hop = struct.unpack("<qqd", fh.read(24))
        sed = np.frombuffer(fh.read(8 * t * c), dtype="<f8").reshape(t, c)
        sod = np.frombuffer(fh.read(8 * t * 4), dtype="<f8").reshape(t, 4)
    return Posteriorgram(sed.copy(), sod.copy(), hop)
