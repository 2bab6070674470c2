"""Action proposal extraction from model outputs: video-level class
filtering, multi-threshold segment runs on the foreground timeline,
outer-inner contrast scoring on the suppressed activation map, and
per-class soft non-maximum suppression.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .model import ModelOutputs


def _default_thresholds() -> list[float]:
    # 0.1 through 0.9 in steps of 0.08
    return [round(0.1 + 0.08 * i, 2) for i in range(11)]


@dataclass
class InferenceConfig:
    class_threshold: float = 0.2
    proposal_thresholds: list[float] = field(default_factory=_default_thresholds)
    soft_nms_iou: float = 0.7
    oic_inflation: float = 0.25
    min_score: float = 0.0
    m: int = 7
    frames_per_segment: int = 16
    fuse_class_prob: bool = False

    def __post_init__(self):
        t = self.proposal_thresholds
        if any(not 0.0 < x < 1.0 for x in t) or any(b <= a for a, b in zip(t, t[1:])):
            raise ConfigError(f"proposal thresholds must be strictly increasing in (0,1): {t}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "InferenceConfig":
        return cls(**d)


@dataclass
class ActionProposal:
    video_id: str
    class_id: int  # foreground class index, 0-based
    t_start: float
    t_end: float
    score: float

    def __post_init__(self):
        if self.t_start >= self.t_end:
            raise ValueError(f"proposal must have t_start < t_end, got "
                             f"[{self.t_start}, {self.t_end}]")

    @property
    def interval(self) -> tuple[float, float]:
        return (self.t_start, self.t_end)


def video_class_probs(cam_suppressed: np.ndarray, m: int) -> np.ndarray:
    """Video-level foreground class probabilities: top-k pooled row scores
    softmaxed over all classes, background entry dropped."""
    t_len = cam_suppressed.shape[1]
    k = max(1, t_len // m)
    scores = np.array([np.sort(row)[::-1][:k].mean() for row in cam_suppressed])
    shifted = scores - scores.max()
    pmf = np.exp(shifted) / np.exp(shifted).sum()
    return pmf[:-1]


def extract_segments(fg: np.ndarray, threshold: float) -> list[tuple[int, int]]:
    """Maximal runs of consecutive indices with fg >= threshold, as
    inclusive (start, end) pairs."""
    above = fg >= threshold
    runs: list[tuple[int, int]] = []
    start = None
    for i, flag in enumerate(above):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            runs.append((start, i - 1))
            start = None
    if start is not None:
        runs.append((start, len(fg) - 1))
    return runs


def oic_score(cam_row: np.ndarray, start: int, end: int,
              inflation: float = 0.25) -> float:
    """Inner mean minus outer-collar mean of one activation row.

    The collar extends ceil(inflation * run_length) indices on each side,
    clipped to the row; an entirely empty collar counts as mean 0.
    """
    t_len = cam_row.shape[0]
    if not 0 <= start <= end < t_len:
        raise ValueError(f"run [{start}, {end}] out of range for length {t_len}")
    inner = cam_row[start:end + 1].mean()
    pad = math.ceil(inflation * (end - start + 1))
    left = cam_row[max(0, start - pad):start]
    right = cam_row[end + 1:min(t_len, end + 1 + pad)]
    outer_count = left.size + right.size
    if outer_count == 0:
        outer = 0.0
    else:
        outer = (left.sum() + right.sum()) / outer_count
    return float(inner - outer)


def temporal_iou(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Intersection over union of two time intervals; 0 when disjoint."""
    if a[0] >= a[1] or b[0] >= b[1]:
        raise ValueError(f"degenerate interval: {a} vs {b}")
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union


def soft_nms(proposals: list[ActionProposal], iou_threshold: float = 0.7,
             min_score: float = 0.0) -> list[ActionProposal]:
    """Per-class linear soft suppression.

    Repeatedly keeps the highest-score survivor and decays every remaining
    same-class proposal with tIoU above the threshold by (1 - tIoU).
    Proposals at or below min_score are dropped (including on entry, so
    scores never increase). Result is sorted by descending score.
    """
    kept: list[ActionProposal] = []
    by_class: dict[int, list[ActionProposal]] = {}
    for p in proposals:
        if p.score > min_score:
            by_class.setdefault(p.class_id, []).append(p)
    for class_id in sorted(by_class):
        pool = [ActionProposal(p.video_id, p.class_id, p.t_start, p.t_end, p.score)
                for p in by_class[class_id]]
        while pool:
            best_i = max(range(len(pool)),
                         key=lambda i: (pool[i].score, -pool[i].t_start))
            best = pool.pop(best_i)
            kept.append(best)
            survivors = []
            for p in pool:
                overlap = temporal_iou(best.interval, p.interval)
                if overlap > iou_threshold:
                    p.score *= (1.0 - overlap)
                if p.score > min_score:
                    survivors.append(p)
            pool = survivors
    kept.sort(key=lambda p: (-p.score, p.class_id, p.t_start))
    return kept


@dataclass
class VideoMeta:
    video_id: str
    fps: float
    frames_per_segment: int = 16


def localize(outputs: ModelOutputs, meta: VideoMeta,
             config: InferenceConfig) -> list[ActionProposal]:
    """Full proposal pipeline for one video's model outputs.

    Classes whose video-level probability clears class_threshold are kept;
    for every proposal threshold, runs of the foreground timeline become
    candidate intervals scored per kept class by outer-inner contrast on
    the suppressed activation map; the pooled candidates then pass through
    per-class soft-NMS.
    """
    fg = outputs.fg.data
    cam_sup = outputs.cam_suppressed.data
    probs = video_class_probs(cam_sup, config.m)
    keep = [c for c in range(probs.shape[0]) if probs[c] >= config.class_threshold]
    if not keep:
        return []
    seconds = meta.frames_per_segment / meta.fps
    candidates: list[ActionProposal] = []
    for thr in config.proposal_thresholds:
        for start, end in extract_segments(fg, thr):
            for c in keep:
                score = oic_score(cam_sup[c], start, end, config.oic_inflation)
                if config.fuse_class_prob:
                    score *= float(probs[c])
                if score <= config.min_score:
                    continue
                candidates.append(ActionProposal(
                    meta.video_id, c, start * seconds, (end + 1) * seconds, score))
    return soft_nms(candidates, config.soft_nms_iou, config.min_score)


# --- proposal file -----------------------------------------------------------
# One proposal per line, tab-separated:
#   video_id <TAB> class_name <TAB> t_start <TAB> t_end <TAB> score

def write_proposals(path: str, proposals: list[ActionProposal],
                    class_names: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in proposals:
            fh.write(f"{p.video_id}\t{class_names[p.class_id]}\t"
                     f"{p.t_start:.6f}\t{p.t_end:.6f}\t{p.score:.6f}\n")


def read_proposals(path: str, class_names: list[str]) -> list[ActionProposal]:
    index = {name: i for i, name in enumerate(class_names)}
    out: list[ActionProposal] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 tab-separated fields, "
                                 f"got {len(parts)}")
            vid, cname, t0, t1, score = parts
            if cname not in index:
                raise ConfigError(f"{path}:{lineno}: unknown class {cname!r}")
            out.append(ActionProposal(vid, index[cname], float(t0), float(t1),
                                      float(score)))
    return out
