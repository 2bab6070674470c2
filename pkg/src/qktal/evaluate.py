"""Detection metrics: temporal IoU, per-class average precision with
greedy score-ordered matching, and mAP tables with averaged bands."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .localize import ActionProposal, temporal_iou

tiou = temporal_iou

THUMOS_BANDS = {
    "0.1:0.5": [round(0.1 * i, 1) for i in range(1, 6)],
    "0.3:0.7": [round(0.1 * i, 1) for i in range(3, 8)],
    "0.1:0.7": [round(0.1 * i, 1) for i in range(1, 8)],
}
ACTIVITYNET_BAND = {
    "0.5:0.95": [round(0.5 + 0.05 * i, 2) for i in range(10)],
}


@dataclass
class GroundTruthSegment:
    video_id: str
    class_id: int
    t_start: float
    t_end: float

    def __post_init__(self):
        if self.t_start >= self.t_end:
            raise ValueError(f"ground truth must have t_start < t_end, got "
                             f"[{self.t_start}, {self.t_end}]")

    @property
    def interval(self) -> tuple[float, float]:
        return (self.t_start, self.t_end)


def average_precision(proposals: list[ActionProposal],
                      gts: list[GroundTruthSegment],
                      tiou_threshold: float) -> float:
    """AP for one class: proposals matched greedily in score order (ties
    broken by video id then start time) against unmatched same-video
    ground truths; AP is the sum of precisions at each hit over the
    ground-truth count."""
    if not gts:
        return 0.0
    order = sorted(proposals, key=lambda p: (-p.score, p.video_id, p.t_start))
    by_video: dict[str, list[GroundTruthSegment]] = {}
    for g in gts:
        by_video.setdefault(g.video_id, []).append(g)
    matched: set[int] = set()
    tp = 0
    precision_sum = 0.0
    for rank, p in enumerate(order, 1):
        best_iou = 0.0
        best_gt = None
        for g in by_video.get(p.video_id, []):
            if id(g) in matched:
                continue
            overlap = temporal_iou(p.interval, g.interval)
            if overlap > best_iou:
                best_iou, best_gt = overlap, g
        if best_gt is not None and best_iou >= tiou_threshold:
            matched.add(id(best_gt))
            tp += 1
            precision_sum += tp / rank
    return precision_sum / max(1, len(gts))


@dataclass
class EvalReport:
    thresholds: list[float]
    class_ids: list[int]
    ap: dict[int, dict[float, float]]
    map_at: dict[float, float]
    bands: dict[str, float] = field(default_factory=dict)

    def to_pairs(self, class_names: list[str] | None = None) -> list[tuple[str, float]]:
        """Flatten into (key, value) rows for the machine-readable report."""
        rows: list[tuple[str, float]] = []
        for thr in self.thresholds:
            rows.append((f"map@{thr:g}", self.map_at[thr]))
        for name, value in self.bands.items():
            rows.append((f"avg_map@{name}", value))
        for c in self.class_ids:
            label = class_names[c] if class_names else str(c)
            for thr in self.thresholds:
                rows.append((f"ap@{thr:g}/{label}", self.ap[c][thr]))
        return rows


def evaluate(proposals: list[ActionProposal], gts: list[GroundTruthSegment],
             thresholds: list[float]) -> EvalReport:
    """AP per (class, threshold) and mAP per threshold over the classes
    that occur in the ground truth, plus any fully-covered standard band."""
    if not gts:
        raise ConfigError("evaluation requires at least one ground-truth segment")
    class_ids = sorted({g.class_id for g in gts})
    props_by_class: dict[int, list[ActionProposal]] = {c: [] for c in class_ids}
    for p in proposals:
        if p.class_id in props_by_class:
            props_by_class[p.class_id].append(p)
    gts_by_class: dict[int, list[GroundTruthSegment]] = {c: [] for c in class_ids}
    for g in gts:
        gts_by_class[g.class_id].append(g)
    ap: dict[int, dict[float, float]] = {c: {} for c in class_ids}
    map_at: dict[float, float] = {}
    for thr in thresholds:
        for c in class_ids:
            ap[c][thr] = average_precision(props_by_class[c], gts_by_class[c], thr)
        map_at[thr] = float(np.mean([ap[c][thr] for c in class_ids]))
    present = {round(t, 2) for t in thresholds}
    bands: dict[str, float] = {}
    for name, members in {**THUMOS_BANDS, **ACTIVITYNET_BAND}.items():
        if all(round(m, 2) in present for m in members):
            bands[name] = float(np.mean([map_at[t] for t in thresholds
                                         if round(t, 2) in {round(m, 2) for m in members}]))
    return EvalReport(list(thresholds), class_ids, ap, map_at, bands)
