"""Segment-based and event-based F-scores with macro/micro averaging.

Segment counting works on the per-hop frame grid; event counting matches
predicted events one-to-one against references under onset/offset collars
(200 ms onset, max(200 ms, 20% of reference duration) offset).
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .dataset import EventList

ONSET_COLLAR = 0.2
OFFSET_COLLAR = 0.2
OFFSET_COLLAR_FRAC = 0.2


@dataclass
class ClassCounts:
    counts: dict[str, tuple[int, int, int]] = field(default_factory=dict)  # label -> (tp, fp, fn)

    def add(self, label: str, tp: int = 0, fp: int = 0, fn: int = 0) -> None:
        a, b, c = self.counts.get(label, (0, 0, 0))
        self.counts[label] = (a + tp, b + fp, c + fn)

    def merge(self, other: "ClassCounts") -> None:
        for label, (tp, fp, fn) in other.counts.items():
            self.add(label, tp, fp, fn)

    def pooled(self) -> tuple[int, int, int]:
        tp = sum(v[0] for v in self.counts.values())
        fp = sum(v[1] for v in self.counts.values())
        fn = sum(v[2] for v in self.counts.values())
        return tp, fp, fn


def f_score(tp: int, fp: int, fn: int) -> float:
    """F1 = 2tp / (2tp + fp + fn); 0 when the denominator is 0."""
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be nonnegative")
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def segment_counts(ref: np.ndarray, est: np.ndarray,
                   class_names: list[str]) -> ClassCounts:
    """Per-class frame-level tp/fp/fn between binary (T, C) activity grids."""
    ref = np.asarray(ref)
    est = np.asarray(est)
    if ref.shape != est.shape:
        raise ValueError(f"grid mismatch: ref {ref.shape} vs est {est.shape}")
    if ref.shape[1] != len(class_names):
        raise ValueError("class count mismatch")
    r = ref > 0.5
    e = est > 0.5
    out = ClassCounts()
    for c, name in enumerate(class_names):
        tp = int(np.sum(r[:, c] & e[:, c]))
        fp = int(np.sum(~r[:, c] & e[:, c]))
        fn = int(np.sum(r[:, c] & ~e[:, c]))
        out.add(name, tp, fp, fn)
    return out


def _collars_match(ref_onset: float, ref_offset: float,
                   est_onset: float, est_offset: float,
                   onset_collar: float, offset_collar: float,
                   offset_frac: float) -> bool:
    off_tol = max(offset_collar, offset_frac * (ref_offset - ref_onset))
    return (abs(est_onset - ref_onset) <= onset_collar
            and abs(est_offset - ref_offset) <= off_tol)


def event_counts(ref: EventList, est: EventList,
                 onset_collar: float = ONSET_COLLAR,
                 offset_collar: float = OFFSET_COLLAR,
                 offset_frac: float = OFFSET_COLLAR_FRAC) -> ClassCounts:
    """Greedy one-to-one event matching per class, in onset order."""
    out = ClassCounts()
    labels = {e.label for e in ref.events} | {e.label for e in est.events}
    for label in sorted(labels):
        refs = sorted((e for e in ref.events if e.label == label),
                      key=lambda e: (e.onset, e.offset))
        ests = sorted((e for e in est.events if e.label == label),
                      key=lambda e: (e.onset, e.offset))
        matched_ref = [False] * len(refs)
        tp = 0
        for ev in ests:
            for i, rv in enumerate(refs):
                if matched_ref[i]:
                    continue
                if _collars_match(rv.onset, rv.offset, ev.onset, ev.offset,
                                  onset_collar, offset_collar, offset_frac):
                    matched_ref[i] = True
                    tp += 1
                    break
        out.add(label, tp=tp, fp=len(ests) - tp, fn=len(refs) - tp)
    return out


def aggregate(counts: ClassCounts, mode: str) -> float:
    """macro: mean per-class F1 over classes with any activity;
    micro: F1 of class-pooled counts."""
    if mode == "micro":
        return f_score(*counts.pooled())
    if mode == "macro":
        scores = [f_score(tp, fp, fn)
                  for tp, fp, fn in counts.counts.values() if tp + fp + fn > 0]
        if not scores:
            raise ValueError("macro average undefined: no class has any activity")
        return float(np.mean(scores))
    raise ValueError(f"unknown aggregation mode {mode!r}")


@dataclass
class MetricsReport:
    ema_f1: float
    emi_f1: float
    sma_f1: float
    smi_f1: float
    event: ClassCounts
    segment: ClassCounts

    def as_row(self) -> dict[str, float]:
        return {"ema_f1": self.ema_f1, "emi_f1": self.emi_f1,
                "sma_f1": self.sma_f1, "smi_f1": self.smi_f1}


def evaluate_clipset(refs: dict[str, tuple[EventList, np.ndarray]],
                     preds: dict[str, tuple[EventList, np.ndarray]],
                     class_names: list[str]) -> MetricsReport:
    """Pool counts over clips, then aggregate.

    refs/preds map clip_id to (event list, binary (T, C) frame grid).
    """
    event_total, seg_total = ClassCounts(), ClassCounts()
    for clip_id in refs:
        if clip_id not in preds:
            raise ValueError(f"missing prediction for clip {clip_id!r}")
        ref_ev, ref_grid = refs[clip_id]
        est_ev, est_grid = preds[clip_id]
        event_total.merge(event_counts(ref_ev, est_ev))
        seg_total.merge(segment_counts(ref_grid, est_grid, class_names))
    return MetricsReport(
        ema_f1=aggregate(event_total, "macro"),
        emi_f1=aggregate(event_total, "micro"),
        sma_f1=aggregate(seg_total, "macro"),
        smi_f1=aggregate(seg_total, "micro"),
        event=event_total,
        segment=seg_total,
    )


# ---------------------------------------------------------------------------
# report rendering

SCORE_COLUMNS = ("ema_f1", "emi_f1", "sma_f1", "smi_f1")


def render_csv(rows: list[dict]) -> str:
    out = io.StringIO()
    out.write("id," + ",".join(SCORE_COLUMNS) + "\n")
    for row in rows:
        out.write(row["id"] + ","
                  + ",".join(f"{row[c]:.6f}" for c in SCORE_COLUMNS) + "\n")
    return out.getvalue()


def render_table(rows: list[dict], title: str = "") -> str:
    headers = ["ID"] + [c.replace("_f1", "").capitalize() + "-F1 (%)"
                        for c in SCORE_COLUMNS]
    lines = []
    if title:
        lines.append(title)
    fmt = "{:<28}" + "{:>14}" * len(SCORE_COLUMNS)
    lines.append(fmt.format(*headers))
    lines.append("-" * (28 + 14 * len(SCORE_COLUMNS)))
    for row in rows:
        cells = [f"{100.0 * row[c]:.2f}" if isinstance(row[c], float) else str(row[c])
                 for c in SCORE_COLUMNS]
        lines.append(fmt.format(str(row["id"]), *cells))
    return "\n".join(lines) + "\n"
