"""Finite-difference verification suite over every differentiable op and
every loss term at small random shapes.

The mutual-learning loss is checked with its pseudo-label targets frozen
at the evaluation point, since central differences cannot see through a
gradient stop; its exact stop-gradient contract is asserted separately in
the test suite.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .losses import (LabelVector, _sq_norm, background_timeline, coactivity_loss,
                     guide_loss, query_similarity_loss, sparsity_loss,
                     video_cls_loss)
from .model import AttentionBlockParams, attention_block, qk_attention


def _proj(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.normal(size=shape)


def _separated(rng: np.random.Generator, shape, min_gap: float = 1e-3) -> np.ndarray:
    """Random values whose pairwise gaps exceed min_gap, so top-k
    selections cannot flip under the probe step."""
    for _ in range(100):
        x = rng.normal(size=shape)
        flat = np.sort(x.reshape(-1))
        if flat.size < 2 or np.diff(flat).min() > min_gap:
            return x
    raise RuntimeError("could not draw separated values")


def run_suite(seeds=range(20), t_max: int = 8, d_max: int = 12,
              c_max: int = 3, h: float = 1e-5) -> dict[str, float]:
    """Max relative finite-difference error per op/loss over all seeds."""
    worst: dict[str, float] = {}

    def check(name: str, f, point):
        err = ad.finite_diff_check(f, point, h)
        worst[name] = max(worst.get(name, 0.0), err)

    for seed in seeds:
        rng = np.random.default_rng(seed)
        t_len = int(rng.integers(4, t_max + 1))
        d = int(rng.integers(4, d_max + 1))
        c = int(rng.integers(1, c_max + 1))

        a = ad.parameter(rng.normal(size=(3, 4)))
        b = ad.parameter(rng.normal(size=(4, 2)))
        r = ad.tensor(_proj(rng, (3, 2)))
        check("matmul", lambda: ad.total(ad.mul(ad.matmul(a, b), r)), [a, b])

        m = ad.parameter(rng.normal(size=(3, 5)))
        rm = ad.tensor(_proj(rng, (3, 5)))
        check("softmax_rows", lambda: ad.total(ad.mul(ad.softmax_rows(m), rm)), [m])

        v = ad.parameter(rng.normal(size=(2, d)))
        g = ad.parameter(rng.normal(size=d))
        bb = ad.parameter(rng.normal(size=d))
        rv = ad.tensor(_proj(rng, (2, d)))
        check("layer_norm",
              lambda: ad.total(ad.mul(ad.layer_norm(v, g, bb, 1e-5), rv)), [v, g, bb])

        cin, cout = 3, 2
        x = ad.parameter(rng.normal(size=(t_len, cin)))
        w = ad.parameter(rng.normal(size=(cout, cin, 3)))
        cb = ad.parameter(rng.normal(size=cout))
        rc = ad.tensor(_proj(rng, (t_len, cout)))
        check("conv1d_temporal",
              lambda: ad.total(ad.mul(ad.conv1d_temporal(x, w, cb), rc)), [x, w, cb])

        s = ad.parameter(rng.normal(size=t_len))
        rs = ad.tensor(_proj(rng, t_len))
        check("sigmoid", lambda: ad.total(ad.mul(ad.sigmoid(s), rs)), [s])
        s2 = ad.parameter(_separated(rng, t_len, 2e-4))
        check("leaky_relu", lambda: ad.total(ad.mul(ad.leaky_relu(s2, 0.2), rs)), [s2])

        tv = ad.parameter(_separated(rng, t_len))
        k = int(rng.integers(1, t_len + 1))
        check("topk_mean", lambda: ad.topk_mean(tv, k), [tv])

        e1 = ad.parameter(rng.normal(size=d))
        e2 = ad.parameter(rng.normal(size=d))
        check("cosine_distance", lambda: ad.cosine_distance(e1, e2), [e1, e2])

        blk = AttentionBlockParams(
            w_q=ad.parameter(rng.normal(size=(d, d)) / np.sqrt(d)),
            w_k=ad.parameter(rng.normal(size=(d, d)) / np.sqrt(d)),
            w_v=ad.parameter(rng.normal(size=(d, d)) / np.sqrt(d)),
            w_o=ad.parameter(rng.normal(size=(d, d)) / np.sqrt(d)),
            ln_gain=ad.parameter(np.ones(d) + 0.1 * rng.normal(size=d)),
            ln_bias=ad.parameter(0.1 * rng.normal(size=d)))
        q = ad.parameter(rng.normal(size=(c + 1, d)))
        kv = ad.parameter(rng.normal(size=(t_len, d)))
        ra = ad.tensor(_proj(rng, (c + 1, d)))
        check("attention_block",
              lambda: ad.total(ad.mul(attention_block(q, kv, kv, blk, 1e-5), ra)),
              [q, kv, blk.w_q, blk.w_k, blk.w_v, blk.w_o, blk.ln_gain, blk.ln_bias])

        kk = ad.parameter(rng.normal(size=(t_len, d)))
        rq = ad.tensor(_proj(rng, (c + 1, t_len)))
        check("qk_attention",
              lambda: ad.total(ad.mul(qk_attention(q, kk), rq)), [q, kk])

        # loss terms against their direct tensor inputs
        label = LabelVector.from_indices(
            rng.choice(c, size=int(rng.integers(1, c + 1)), replace=False), c)
        cam = ad.parameter(_separated(rng, (c + 1, t_len)))
        cam_sup = ad.parameter(_separated(rng, (c + 1, t_len)))
        check("video_cls_loss",
              lambda: video_cls_loss(cam, cam_sup, label, m=2), [cam, cam_sup])

        queries = [ad.parameter(rng.normal(size=(c + 1, d))) for _ in range(3)]
        labels = [LabelVector.from_indices(
            rng.choice(c, size=int(rng.integers(1, c + 1)), replace=False), c)
            for _ in range(3)]
        check("query_similarity_loss",
              lambda: query_similarity_loss(queries, labels), list(queries))

        fg_rgb = ad.parameter(rng.uniform(0.05, 0.95, size=t_len))
        fg_flow = ad.parameter(rng.uniform(0.05, 0.95, size=t_len))
        frozen_rgb = ad.tensor(fg_rgb.data.copy())
        frozen_flow = ad.tensor(fg_flow.data.copy())
        check("mutual_learning_loss(frozen targets)",
              lambda: ad.scale(ad.add(_sq_norm(ad.sub(fg_rgb, frozen_flow)),
                                      _sq_norm(ad.sub(frozen_rgb, fg_flow))), 0.5),
              [fg_rgb, fg_flow])

        fg_mean = ad.scale(ad.add(fg_rgb, fg_flow), 0.5)
        check("sparsity_loss",
              lambda: sparsity_loss(fg_rgb, fg_flow,
                                    ad.scale(ad.add(fg_rgb, fg_flow), 0.5)),
              [fg_rgb, fg_flow])

        gcam = ad.parameter(rng.normal(size=(c + 1, t_len)))
        check("guide_loss",
              lambda: guide_loss(background_timeline(gcam), fg_rgb, fg_flow,
                                 ad.scale(ad.add(fg_rgb, fg_flow), 0.5)),
              [gcam, fg_rgb, fg_flow])

        shared = LabelVector.from_indices([0], max(1, c))
        fused_a = ad.parameter(rng.normal(size=(t_len, d)))
        fused_b = ad.parameter(rng.normal(size=(t_len, d)))
        cam_a = ad.parameter(rng.normal(size=(max(1, c) + 1, t_len)))
        cam_b = ad.parameter(rng.normal(size=(max(1, c) + 1, t_len)))
        check("coactivity_loss",
              lambda: coactivity_loss([(fused_a, cam_a, shared),
                                       (fused_b, cam_b, shared)], 0.5),
              [fused_a, fused_b, cam_a, cam_b])
    return worst
