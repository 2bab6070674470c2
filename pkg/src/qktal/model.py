"""Forward pipeline: two-stream foreground scoring, feature fusion,
category query learning, key projection, and query-key attention.

Features arrive as a [T, D] matrix whose first D/2 columns are appearance
(RGB) features and last D/2 columns are motion (flow) features. The model
produces per-segment foreground probabilities, per-class category query
vectors, and a (C+1) x T class activation map over time (row C is the
background class).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError


@dataclass
class ModelConfig:
    num_classes: int
    feature_dim: int = 2048
    segments: int = 500
    hidden_dim: int = 512
    leaky_slope: float = 0.2
    layer_norm_eps: float = 1e-5
    conv_kernel: int = 3
    q_init_std: float = 0.02

    def __post_init__(self):
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.segments < 1:
            raise ConfigError(f"segments must be >= 1, got {self.segments}")
        if self.feature_dim % 2 != 0:
            raise ConfigError(f"feature_dim must be even (RGB/flow halves), got {self.feature_dim}")
        if self.conv_kernel % 2 == 0:
            raise ConfigError(f"conv_kernel must be odd, got {self.conv_kernel}")

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "feature_dim": self.feature_dim,
            "segments": self.segments,
            "hidden_dim": self.hidden_dim,
            "leaky_slope": self.leaky_slope,
            "layer_norm_eps": self.layer_norm_eps,
            "conv_kernel": self.conv_kernel,
            "q_init_std": self.q_init_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ConvParams:
    w: Tensor  # [Cout, Cin, k]
    b: Tensor  # [Cout]


@dataclass
class AttentionBlockParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    ln_gain: Tensor
    ln_bias: Tensor


@dataclass
class ModelParams:
    rgb_stack: list[ConvParams]
    flow_stack: list[ConvParams]
    fusion: list[ConvParams]
    key_conv: ConvParams
    q_init: Tensor  # [(C+1), D]
    self_attn: AttentionBlockParams
    cross_attn: AttentionBlockParams

    def named(self) -> list[tuple[str, Tensor]]:
        """All learnable tensors in a fixed, documented order."""
        out: list[tuple[str, Tensor]] = []
        for stack_name, stack in (("rgb", self.rgb_stack), ("flow", self.flow_stack),
                                  ("fusion", self.fusion)):
            for i, conv in enumerate(stack):
                out.append((f"{stack_name}.{i}.w", conv.w))
                out.append((f"{stack_name}.{i}.b", conv.b))
        out.append(("key.w", self.key_conv.w))
        out.append(("key.b", self.key_conv.b))
        out.append(("q_init", self.q_init))
        for blk_name, blk in (("self_attn", self.self_attn), ("cross_attn", self.cross_attn)):
            out.append((f"{blk_name}.w_q", blk.w_q))
            out.append((f"{blk_name}.w_k", blk.w_k))
            out.append((f"{blk_name}.w_v", blk.w_v))
            out.append((f"{blk_name}.w_o", blk.w_o))
            out.append((f"{blk_name}.ln_gain", blk.ln_gain))
            out.append((f"{blk_name}.ln_bias", blk.ln_bias))
        return out


@dataclass
class ModelOutputs:
    fg_rgb: Tensor      # [T] appearance-stream foreground probability
    fg_flow: Tensor     # [T] motion-stream foreground probability
    fg: Tensor          # [T] averaged foreground probability
    fused: Tensor       # [T, D] fused features
    queries: Tensor     # [(C+1), D] category queries for this video
    keys: Tensor        # [T, D] per-segment keys
    cam: Tensor         # [(C+1), T] class activation map
    cam_suppressed: Tensor  # [(C+1), T] cam with rows scaled by fg


def _init_conv(rng: np.random.Generator, cout: int, cin: int, k: int) -> ConvParams:
    bound = 1.0 / math.sqrt(cin * k)
    w = ad.parameter(rng.uniform(-bound, bound, size=(cout, cin, k)))
    b = ad.parameter(np.zeros(cout))
    return ConvParams(w, b)


def _init_attention(rng: np.random.Generator, d: int) -> AttentionBlockParams:
    bound = 1.0 / math.sqrt(d)

    def mat():
        return ad.parameter(rng.uniform(-bound, bound, size=(d, d)))

    return AttentionBlockParams(
        w_q=mat(), w_k=mat(), w_v=mat(), w_o=mat(),
        ln_gain=ad.parameter(np.ones(d)), ln_bias=ad.parameter(np.zeros(d)))


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Seeded parameter initialization: uniform(+-1/sqrt(fan_in)) weights,
    zero biases, small-normal initial queries."""
    d = config.feature_dim
    half = d // 2
    h = config.hidden_dim
    k = config.conv_kernel
    rgb = [_init_conv(rng, h, half, k), _init_conv(rng, h, h, k), _init_conv(rng, 1, h, k)]
    flow = [_init_conv(rng, h, half, k), _init_conv(rng, h, h, k), _init_conv(rng, 1, h, k)]
    fusion = [_init_conv(rng, d, d, k), _init_conv(rng, d, d, k)]
    key = _init_conv(rng, d, d, k)
    q_init = ad.parameter(rng.normal(0.0, config.q_init_std,
                                     size=(config.num_classes + 1, d)))
    return ModelParams(rgb, flow, fusion, key, q_init,
                       _init_attention(rng, d), _init_attention(rng, d))


def foreground_stream(x_half: Tensor, stack: list[ConvParams],
                      slope: float = 0.2) -> Tensor:
    """conv-LeakyReLU-conv-LeakyReLU-conv-sigmoid over one feature half;
    returns per-segment probabilities in (0, 1)."""
    h = ad.conv1d_temporal(x_half, stack[0].w, stack[0].b)
    h = ad.leaky_relu(h, slope)
    h = ad.conv1d_temporal(h, stack[1].w, stack[1].b)
    h = ad.leaky_relu(h, slope)
    h = ad.conv1d_temporal(h, stack[2].w, stack[2].b)
    return ad.sigmoid(ad.reshape(h, (h.shape[0],)))


def fuse_features(x: Tensor, fusion: list[ConvParams], slope: float = 0.2) -> Tensor:
    """Two temporal convolutions with a LeakyReLU in between; [T, D] -> [T, D]."""
    h = ad.conv1d_temporal(x, fusion[0].w, fusion[0].b)
    h = ad.leaky_relu(h, slope)
    return ad.conv1d_temporal(h, fusion[1].w, fusion[1].b)


def attention_block(q: Tensor, k: Tensor, v: Tensor,
                    params: AttentionBlockParams, eps: float = 1e-5) -> Tensor:
    """Single-head scaled dot-product attention with output projection,
    residual from the query input, and layer normalization."""
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-1] != d:
        raise ShapeError(f"attention_block: widths differ: q {q.shape}, k {k.shape}, v {v.shape}")
    qp = ad.matmul(q, params.w_q)
    kp = ad.matmul(k, params.w_k)
    vp = ad.matmul(v, params.w_v)
    scores = ad.scale(ad.matmul(qp, ad.transpose(kp)), 1.0 / math.sqrt(d))
    h = ad.matmul(ad.softmax_rows(scores), vp)
    out0 = ad.matmul(h, params.w_o)
    return ad.layer_norm(ad.add(q, out0), params.ln_gain, params.ln_bias, eps)


def learn_queries(q_init: Tensor, fused: Tensor, params: ModelParams,
                  eps: float = 1e-5) -> Tensor:
    """Refine initial category queries on themselves, then against the
    video's fused features."""
    q1 = attention_block(q_init, q_init, q_init, params.self_attn, eps)
    return attention_block(q1, fused, fused, params.cross_attn, eps)


def qk_attention(q_hat: Tensor, k_hat: Tensor) -> Tensor:
    """Scaled inner products of every category query against every
    per-segment key: [(C+1), D] x [T, D] -> [(C+1), T]."""
    d = q_hat.shape[-1]
    if k_hat.shape[-1] != d:
        raise ShapeError(f"qk_attention: widths differ: {q_hat.shape} vs {k_hat.shape}")
    return ad.scale(ad.matmul(q_hat, ad.transpose(k_hat)), 1.0 / math.sqrt(d))


def suppress_background(cam: Tensor, fg: Tensor) -> Tensor:
    """Scale every cam row elementwise by the foreground probabilities."""
    if cam.shape[-1] != fg.shape[0]:
        raise ShapeError(f"suppress_background: cam {cam.shape} vs fg {fg.shape}")
    return ad.mul(cam, fg)


def forward(features, params: ModelParams, config: ModelConfig,
            mode: str = "video_specific") -> ModelOutputs:
    """Run the full pipeline on one video's [T, D] feature matrix.

    ``mode`` selects video-specific query learning (default) or the
    uniform ablation where queries bypass both attention blocks.
    """
    if mode not in ("video_specific", "uniform"):
        raise ConfigError(f"unknown mode {mode!r}")
    x = features if isinstance(features, Tensor) else ad.tensor(features)
    t_len, d = x.shape
    if d != config.feature_dim:
        raise ShapeError(f"feature width {d} != configured dimension {config.feature_dim}")
    half = d // 2
    x_rgb = ad.tensor(x.data[:, :half])
    x_flow = ad.tensor(x.data[:, half:])

    fg_rgb = foreground_stream(x_rgb, params.rgb_stack, config.leaky_slope)
    fg_flow = foreground_stream(x_flow, params.flow_stack, config.leaky_slope)
    fg = ad.scale(ad.add(fg_rgb, fg_flow), 0.5)

    fused = fuse_features(x, params.fusion, config.leaky_slope)
    if mode == "uniform":
        queries = params.q_init
    else:
        queries = learn_queries(params.q_init, fused, params, config.layer_norm_eps)
    keys = ad.conv1d_temporal(fused, params.key_conv.w, params.key_conv.b)
    cam = qk_attention(queries, keys)
    cam_suppressed = suppress_background(cam, fg)
    return ModelOutputs(fg_rgb, fg_flow, fg, fused, queries, keys, cam, cam_suppressed)
