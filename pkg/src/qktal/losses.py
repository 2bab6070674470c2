"""Training objectives: video-level classification on both activation
maps, query similarity across a batch, stream mutual learning, sparsity,
background guidance, and co-activity similarity, combined into one
weighted joint loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .model import ModelOutputs

QS_DISTANCES = ("cosine", "jensen_shannon", "euclidean", "manhattan")


class LabelVector:
    """Multi-hot video label over the C foreground classes."""

    def __init__(self, classes):
        arr = np.asarray(classes, dtype=np.float64)
        if arr.ndim != 1 or not np.all((arr == 0) | (arr == 1)):
            raise ValueError("label must be a 1-D multi-hot vector")
        if arr.sum() < 1:
            raise ValueError("label must contain at least one foreground class")
        self.classes = arr

    @classmethod
    def from_indices(cls, indices, num_classes: int) -> "LabelVector":
        arr = np.zeros(num_classes)
        arr[list(indices)] = 1.0
        return cls(arr)

    @property
    def num_classes(self) -> int:
        return self.classes.shape[0]

    def has(self, class_id: int) -> bool:
        return bool(self.classes[class_id] > 0)

    def foreground_indices(self) -> np.ndarray:
        return np.flatnonzero(self.classes > 0)

    def background_positive(self) -> np.ndarray:
        """(C+1)-length target with the background forced on, normalized to sum 1."""
        y = np.append(self.classes, 1.0)
        return y / y.sum()

    def background_negative(self) -> np.ndarray:
        """(C+1)-length target with the background forced off, normalized to sum 1."""
        y = np.append(self.classes, 0.0)
        return y / y.sum()


@dataclass
class LossWeights:
    alpha: float = 5.0
    beta: float = 0.8
    gamma: float = 0.8
    m: int = 7
    casl_margin: float = 0.5

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0 or self.casl_margin < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.m < 1:
            raise ValueError("top-k divisor m must be a positive integer")

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "gamma": self.gamma,
                "m": self.m, "casl_margin": self.casl_margin}

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**d)


def topk_count(t_len: int, m: int) -> int:
    return max(1, t_len // m)


def topk_video_scores(cam: Tensor, m: int) -> Tensor:
    """Per-class video scores: mean of the top max(1, T // m) entries of
    each cam row."""
    return ad.topk_mean_rows(cam, topk_count(cam.shape[-1], m))


def class_pmf(scores: Tensor) -> Tensor:
    """Softmax over the class dimension of a per-class score vector."""
    return ad.softmax_vec(scores)


def _cross_entropy(pmf: Tensor, target: np.ndarray) -> Tensor:
    return ad.scale(ad.total(ad.mul(ad.tensor(target), ad.log(pmf))), -1.0)


def video_cls_loss(cam: Tensor, cam_suppressed: Tensor, label: LabelVector,
                   m: int) -> Tensor:
    """Cross-entropy of pooled class scores on both activation maps: the
    raw map against a background-positive target and the suppressed map
    against a background-negative target."""
    if cam.shape != cam_suppressed.shape:
        raise ShapeError(f"cam shapes differ: {cam.shape} vs {cam_suppressed.shape}")
    if cam.shape[0] != label.num_classes + 1:
        raise ValueError(f"cam has {cam.shape[0]} rows but label implies "
                         f"{label.num_classes + 1}")
    loss_a = _cross_entropy(class_pmf(topk_video_scores(cam, m)),
                            label.background_positive())
    loss_b = _cross_entropy(class_pmf(topk_video_scores(cam_suppressed, m)),
                            label.background_negative())
    return ad.add(loss_a, loss_b)


def _query_distance(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if kind == "cosine":
        return ad.cosine_distance(a, b)
    if kind == "euclidean":
        diff = ad.sub(a, b)
        return ad.sqrt(ad.add_const(ad.total(ad.mul(diff, diff)), 1e-12))
    if kind == "manhattan":
        return ad.total(ad.absolute(ad.sub(a, b)))
    if kind == "jensen_shannon":
        p = ad.softmax_vec(a)
        q = ad.softmax_vec(b)
        mid = ad.scale(ad.add(p, q), 0.5)
        kl_p = ad.total(ad.mul(p, ad.sub(ad.log(p), ad.log(mid))))
        kl_q = ad.total(ad.mul(q, ad.sub(ad.log(q), ad.log(mid))))
        return ad.sqrt(ad.add_const(ad.scale(ad.add(kl_p, kl_q), 0.5), 1e-12))
    raise ValueError(f"unknown query distance {kind!r}")


def query_similarity_loss(queries: list[Tensor], labels: list[LabelVector],
                          distance: str = "cosine") -> Tensor:
    """Average pairwise distance between same-category query rows across
    the batch.

    Category k contributes the mean distance over all unordered pairs of
    videos carrying k (the background category is shared by every video);
    categories with fewer than two members are skipped, and the result is
    the mean over contributing categories.
    """
    if len(queries) != len(labels):
        raise ValueError("queries and labels must align")
    if not queries:
        return ad.tensor(0.0)
    num_fg = labels[0].num_classes
    cat_terms: list[Tensor] = []
    for k in range(num_fg + 1):
        if k < num_fg:
            members = [i for i, lab in enumerate(labels) if lab.has(k)]
        else:
            members = list(range(len(queries)))
        if len(members) < 2:
            continue
        pair_terms = []
        for ai in range(len(members)):
            for bi in range(ai + 1, len(members)):
                qa = ad.get_row(queries[members[ai]], k)
                qb = ad.get_row(queries[members[bi]], k)
                pair_terms.append(_query_distance(qa, qb, distance))
        acc = pair_terms[0]
        for term in pair_terms[1:]:
            acc = ad.add(acc, term)
        cat_terms.append(ad.scale(acc, 1.0 / len(pair_terms)))
    if not cat_terms:
        return ad.tensor(0.0)
    acc = cat_terms[0]
    for term in cat_terms[1:]:
        acc = ad.add(acc, term)
    return ad.scale(acc, 1.0 / len(cat_terms))


def _sq_norm(t: Tensor) -> Tensor:
    return ad.total(ad.mul(t, t))


def mutual_learning_loss(fg_rgb: Tensor, fg_flow: Tensor) -> Tensor:
    """Symmetric squared-L2 alignment of the two stream probabilities,
    each side treating a detached copy of the other as its target."""
    if fg_rgb.shape != fg_flow.shape:
        raise ShapeError(f"stream lengths differ: {fg_rgb.shape} vs {fg_flow.shape}")
    a = _sq_norm(ad.sub(fg_rgb, ad.stop_gradient(fg_flow)))
    b = _sq_norm(ad.sub(ad.stop_gradient(fg_rgb), fg_flow))
    return ad.scale(ad.add(a, b), 0.5)


def sparsity_loss(fg_rgb: Tensor, fg_flow: Tensor, fg: Tensor,
                  normalize: bool = True) -> Tensor:
    """Mean of the three stream L1 norms; per-segment means by default so
    the weight transfers across timeline lengths."""
    reducer = ad.mean if normalize else ad.total
    acc = ad.add(ad.add(reducer(ad.absolute(fg_rgb)), reducer(ad.absolute(fg_flow))),
                 reducer(ad.absolute(fg)))
    return ad.scale(acc, 1.0 / 3.0)


def background_timeline(cam: Tensor) -> Tensor:
    """Background-class probability per segment: the last row of the cam
    after a softmax across classes at every time step."""
    per_step = ad.softmax_rows(ad.transpose(cam))   # [T, C+1]
    return ad.get_row(ad.transpose(per_step), cam.shape[0] - 1)


def guide_loss(bg_prob: Tensor, fg_rgb: Tensor, fg_flow: Tensor, fg: Tensor,
               normalize: bool = True) -> Tensor:
    """Push each foreground probability vector toward the complement of
    the background probability timeline."""
    reducer = ad.mean if normalize else ad.total
    rest = ad.rsub_const(1.0, bg_prob)
    acc = ad.add(ad.add(reducer(ad.absolute(ad.sub(rest, fg_rgb))),
                        reducer(ad.absolute(ad.sub(rest, fg_flow)))),
                 reducer(ad.absolute(ad.sub(rest, fg))))
    return ad.scale(acc, 1.0 / 3.0)


def _attention_pooled(fused: Tensor, weights: Tensor) -> Tensor:
    """Time-weighted feature vector: fused [T, D] pooled by weights [T]."""
    t_len = weights.shape[0]
    col = ad.reshape(weights, (t_len, 1))
    return ad.reshape(ad.matmul(ad.transpose(fused), col), (fused.shape[-1],))


def coactivity_loss(batch: list[tuple[Tensor, Tensor, LabelVector]],
                    margin: float = 0.5) -> Tensor:
    """Ranking loss over video pairs sharing a foreground class: features
    pooled under that class's attention should be closer to the partner's
    high-attention features than to its low-attention features.

    Each batch entry is (fused features [T, D], suppressed cam [(C+1), T],
    label). Returns 0 when no pair shares a class.
    """
    terms: list[Tensor] = []
    for i in range(len(batch)):
        for j in range(i + 1, len(batch)):
            fused_i, cam_i, lab_i = batch[i]
            fused_j, cam_j, lab_j = batch[j]
            shared = np.flatnonzero((lab_i.classes > 0) & (lab_j.classes > 0))
            for c in shared:
                lam_i = ad.softmax_vec(ad.get_row(cam_i, int(c)))
                lam_j = ad.softmax_vec(ad.get_row(cam_j, int(c)))
                rest_i = ad.rsub_const(1.0, lam_i)
                rest_j = ad.rsub_const(1.0, lam_j)
                w_low_i = ad.div(rest_i, ad.maximum_const(ad.total(rest_i), 1e-8))
                w_low_j = ad.div(rest_j, ad.maximum_const(ad.total(rest_j), 1e-8))
                hi_i = _attention_pooled(fused_i, lam_i)
                hi_j = _attention_pooled(fused_j, lam_j)
                lo_i = _attention_pooled(fused_i, w_low_i)
                lo_j = _attention_pooled(fused_j, w_low_j)
                d_hh = ad.cosine_distance(hi_i, hi_j)
                hinge_a = ad.relu(ad.add_const(ad.sub(d_hh, ad.cosine_distance(hi_i, lo_j)),
                                               margin))
                hinge_b = ad.relu(ad.add_const(ad.sub(d_hh, ad.cosine_distance(lo_i, hi_j)),
                                               margin))
                terms.append(ad.scale(ad.add(hinge_a, hinge_b), 0.5))
    if not terms:
        return ad.tensor(0.0)
    acc = terms[0]
    for term in terms[1:]:
        acc = ad.add(acc, term)
    return ad.scale(acc, 1.0 / len(terms))


def joint_loss(outputs: list[ModelOutputs], labels: list[LabelVector],
               weights: LossWeights, mode: str = "video_specific",
               qs_distance: str = "cosine",
               normalize_l1: bool = True) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of all six objectives over one batch.

    Per-video terms are averaged over the batch; the query-similarity and
    co-activity terms are computed once across the batch. Returns the
    scalar loss tensor and a per-term breakdown of plain floats.
    """
    if not outputs or len(outputs) != len(labels):
        raise ValueError("outputs and labels must be non-empty and aligned")
    n = len(outputs)

    def batch_mean(terms: list[Tensor]) -> Tensor:
        acc = terms[0]
        for term in terms[1:]:
            acc = ad.add(acc, term)
        return ad.scale(acc, 1.0 / n)

    vcls = batch_mean([video_cls_loss(o.cam, o.cam_suppressed, lab, weights.m)
                       for o, lab in zip(outputs, labels)])
    ml = batch_mean([mutual_learning_loss(o.fg_rgb, o.fg_flow) for o in outputs])
    sp = batch_mean([sparsity_loss(o.fg_rgb, o.fg_flow, o.fg, normalize_l1)
                     for o in outputs])
    guide = batch_mean([guide_loss(background_timeline(o.cam), o.fg_rgb, o.fg_flow,
                                   o.fg, normalize_l1) for o in outputs])
    casl = coactivity_loss([(o.fused, o.cam_suppressed, lab)
                            for o, lab in zip(outputs, labels)], weights.casl_margin)
    if mode == "uniform":
        # queries are shared across videos, so pairwise distances vanish
        qs = ad.tensor(0.0)
    else:
        qs = query_similarity_loss([o.queries for o in outputs], labels, qs_distance)

    loss = ad.add(vcls, ad.scale(qs, weights.alpha))
    loss = ad.add(loss, ml)
    loss = ad.add(loss, ad.scale(guide, weights.beta))
    loss = ad.add(loss, casl)
    loss = ad.add(loss, ad.scale(sp, weights.gamma))
    breakdown = {
        "video_cls": vcls.item(),
        "query_sim": qs.item(),
        "mutual": ml.item(),
        "guide": guide.item(),
        "coactivity": casl.item(),
        "sparsity": sp.item(),
        "total": loss.item(),
    }
    return loss, breakdown
