"""Optimization loop: pair-constrained batch construction, stratified
segment sampling, Adam with weight decay, checkpointing, and seeded
end-to-end reproducibility.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .losses import LabelVector, LossWeights, joint_loss
from .model import ModelConfig, ModelParams, init_params, forward


@dataclass
class TrainConfig:
    batch_size: int = 10
    min_shared_pairs: int = 3
    t_train: int = 500
    learning_rate: float = 5e-5
    weight_decay: float = 1e-3
    epochs: int = 100
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    mode: str = "video_specific"
    qs_distance: str = "cosine"
    normalize_l1: bool = True
    decoupled_weight_decay: bool = False
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.t_train < 1:
            raise ConfigError(f"t_train must be >= 1, got {self.t_train}")

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["weights"] = self.weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("weights"), dict):
            d["weights"] = LossWeights.from_dict(d["weights"])
        return cls(**d)


def sample_segments(features: np.ndarray, t_target: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Stratified temporal sampling down (or up) to t_target rows.

    The source timeline is split into t_target equal bins and one index is
    drawn uniformly from each, so coverage stays spread over the video;
    bins narrower than one index repeat their only candidate. Evaluation
    skips this entirely and uses all segments.
    """
    t_video = features.shape[0]
    if t_video < 1:
        raise ValueError("cannot sample from an empty feature sequence")
    edges = (np.arange(t_target + 1) * t_video) // t_target
    idx = np.empty(t_target, dtype=np.int64)
    for i in range(t_target):
        lo, hi = int(edges[i]), int(edges[i + 1])
        if hi <= lo:
            idx[i] = min(lo, t_video - 1)
        else:
            idx[i] = rng.integers(lo, hi)
    return features[idx]


def shared_pair_count(labels: list[LabelVector], batch: list[int]) -> int:
    """Unordered pairs within the batch sharing at least one foreground class."""
    count = 0
    for i in range(len(batch)):
        for j in range(i + 1, len(batch)):
            if np.any((labels[batch[i]].classes > 0) & (labels[batch[j]].classes > 0)):
                count += 1
    return count


def make_batches(labels: list[LabelVector], config: TrainConfig,
                 rng: np.random.Generator, max_retries: int = 1000) -> list[list[int]]:
    """Partition one epoch into batches of video indices.

    Every video appears at least once, each batch has exactly batch_size
    members, and each batch contains at least min_shared_pairs unordered
    pairs sharing a foreground class. Built by rejection sampling over
    whole-epoch shuffles with a bounded greedy repair fallback.
    """
    n = len(labels)
    bs = config.batch_size
    if n < bs:
        raise ConfigError(f"dataset has {n} videos but batch_size is {bs}")

    def build(perm: np.ndarray) -> list[list[int]]:
        batches = [list(perm[i:i + bs]) for i in range(0, n, bs)]
        if len(batches[-1]) < bs:
            short = batches[-1]
            pool = [v for v in perm if v not in short]
            extra = rng.choice(pool, size=bs - len(short), replace=False)
            short.extend(int(v) for v in extra)
        return batches

    def valid(batches: list[list[int]]) -> bool:
        return all(shared_pair_count(labels, b) >= config.min_shared_pairs
                   for b in batches)

    batches = build(rng.permutation(n))
    for _ in range(max_retries):
        if valid(batches):
            return batches
        batches = build(rng.permutation(n))
    # greedy repair: swap members between batches when that lifts a failing
    # batch without breaking the donor
    for bi, batch in enumerate(batches):
        guard = 0
        while shared_pair_count(labels, batch) < config.min_shared_pairs and guard < 200:
            guard += 1
            improved = False
            base = shared_pair_count(labels, batch)
            for oj, other in enumerate(batches):
                if oj == bi:
                    continue
                for ii in range(bs):
                    for jj in range(bs):
                        batch[ii], other[jj] = other[jj], batch[ii]
                        if (shared_pair_count(labels, batch) > base
                                and shared_pair_count(labels, other) >= config.min_shared_pairs):
                            improved = True
                            break
                        batch[ii], other[jj] = other[jj], batch[ii]
                    if improved:
                        break
                if improved:
                    break
            if not improved:
                break
    if valid(batches):
        return batches
    counts = np.zeros(labels[0].num_classes, dtype=int)
    for lab in labels:
        counts += (lab.classes > 0).astype(int)
    deficient = [int(c) for c in np.flatnonzero(counts < 2)]
    raise ConfigError(
        f"cannot build batches with {config.min_shared_pairs} shared-class pairs; "
        f"classes with fewer than two videos: {deficient}")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def fresh(cls, named: list[tuple[str, Tensor]]) -> "AdamState":
        return cls(m={n: np.zeros_like(p.data) for n, p in named},
                   v={n: np.zeros_like(p.data) for n, p in named})


def adam_step(named: list[tuple[str, Tensor]], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, weight_decay: float = 0.0,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              decoupled: bool = False) -> None:
    """One in-place Adam update with bias correction.

    Weight decay is the classic coupled form (added to the gradient)
    unless ``decoupled`` shrinks parameters directly instead.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in named:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if weight_decay and not decoupled:
            g = g + weight_decay * p.data
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay and decoupled:
            update = update + weight_decay * p.data
        p.data -= lr * update


@dataclass
class TrainVideo:
    """One training example: features already in memory plus its label."""
    video_id: str
    features: np.ndarray
    label: LabelVector


def _batch_loss(params: ModelParams, model_cfg: ModelConfig, cfg: TrainConfig,
                videos: list[TrainVideo], indices: list[int],
                rng: np.random.Generator):
    sampled = [sample_segments(videos[i].features, cfg.t_train, rng) for i in indices]
    labels = [videos[i].label for i in indices]
    with ad.ComputationRecord() as rec:
        outs = [forward(x, params, model_cfg, cfg.mode) for x in sampled]
        loss, breakdown = joint_loss(outs, labels, cfg.weights, cfg.mode,
                                     cfg.qs_distance, cfg.normalize_l1)
    return rec, loss, breakdown


def train(videos: list[TrainVideo], model_cfg: ModelConfig, cfg: TrainConfig,
          params: ModelParams | None = None,
          epoch_callback=None) -> tuple[ModelParams, list[dict]]:
    """Train on a list of videos; returns final parameters and a per-epoch
    log of mean loss-term values.

    Aborts with a diagnostic naming the offending term if any loss turns
    non-finite. ``epoch_callback(epoch, params)``, when given, runs after
    every epoch (used for validation hooks).
    """
    ss = np.random.SeedSequence(cfg.seed)
    init_rng, data_rng = [np.random.default_rng(s) for s in ss.spawn(2)]
    if params is None:
        params = init_params(model_cfg, init_rng)
    named = params.named()
    state = AdamState.fresh(named)
    log: list[dict] = []
    for epoch in range(cfg.epochs):
        batches = make_batches([v.label for v in videos], cfg, data_rng)
        sums: dict[str, float] = {}
        for batch in batches:
            assert shared_pair_count([v.label for v in videos], batch) >= cfg.min_shared_pairs
            rec, loss, breakdown = _batch_loss(params, model_cfg, cfg, videos,
                                               batch, data_rng)
            for term, value in breakdown.items():
                if not np.isfinite(value):
                    raise FloatingPointError(
                        f"non-finite loss term {term!r} = {value} at epoch {epoch}")
                sums[term] = sums.get(term, 0.0) + value
            grads_by_id = rec.backward(loss)
            grads = {name: grads_by_id.get(id(p), np.zeros_like(p.data))
                     for name, p in named}
            adam_step(named, grads, state, cfg.learning_rate, cfg.weight_decay,
                      cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps,
                      cfg.decoupled_weight_decay)
        entry = {"epoch": epoch}
        entry.update({k: v / len(batches) for k, v in sums.items()})
        log.append(entry)
        if epoch_callback is not None:
            epoch_callback(epoch, params)
    return params, log


# --- checkpoint container ---------------------------------------------------
#
# Byte layout (all integers little-endian):
#   magic           4 bytes  b"VQKC"
#   format version  u16      currently 1
#   config length   u32      followed by that many bytes of UTF-8 JSON
#   tensor count    u32
#   per tensor:
#     name length   u16      followed by UTF-8 name bytes
#     ndim          u8
#     dims          ndim x u32
#     data          product(dims) x f64 little-endian, row-major
#   optimizer flag  u8       0 = absent, 1 = present
#   if present:
#     step          u64
#     then first-moment and second-moment arrays for every tensor, in the
#     same order and layout as the tensor section (data only, no headers)

CHECKPOINT_MAGIC = b"VQKC"
CHECKPOINT_VERSION = 1


def _write_array(buf: io.BufferedIOBase, arr: np.ndarray) -> None:
    buf.write(arr.astype("<f8", copy=False).tobytes(order="C"))


def _read_array(buf: io.BufferedIOBase, shape: tuple) -> np.ndarray:
    count = int(np.prod(shape)) if shape else 1
    raw = buf.read(count * 8)
    if len(raw) != count * 8:
        raise ValueError("checkpoint truncated while reading tensor data")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def save_checkpoint(path: str, params: ModelParams, config: dict,
                    opt_state: AdamState | None = None) -> None:
    """Write parameters, a JSON config snapshot, and optional optimizer
    state in the documented binary layout."""
    named = params.named()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        blob = json.dumps(config, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(named)))
        for name, p in named:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", p.data.ndim))
            for dim in p.data.shape:
                fh.write(struct.pack("<I", dim))
            _write_array(fh, p.data)
        if opt_state is None:
            fh.write(struct.pack("<B", 0))
        else:
            fh.write(struct.pack("<B", 1))
            fh.write(struct.pack("<Q", opt_state.step))
            for name, p in named:
                _write_array(fh, opt_state.m[name])
            for name, p in named:
                _write_array(fh, opt_state.v[name])


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict, AdamState | None]:
    """Read a checkpoint; returns (named arrays, config snapshot, optimizer
    state or None)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (clen,) = struct.unpack("<I", fh.read(4))
        config = json.loads(fh.read(clen).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        tensors: dict[str, np.ndarray] = {}
        order: list[str] = []
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
            tensors[name] = _read_array(fh, shape)
            order.append(name)
        (flag,) = struct.unpack("<B", fh.read(1))
        opt_state = None
        if flag == 1:
            (step,) = struct.unpack("<Q", fh.read(8))
            m = {name: _read_array(fh, tensors[name].shape) for name in order}
            v = {name: _read_array(fh, tensors[name].shape) for name in order}
            opt_state = AdamState(m=m, v=v, step=step)
    return tensors, config, opt_state


def params_from_arrays(arrays: dict[str, np.ndarray],
                       model_cfg: ModelConfig) -> ModelParams:
    """Rebuild a ModelParams tree from named checkpoint arrays."""
    fresh = init_params(model_cfg, np.random.default_rng(0))
    for name, p in fresh.named():
        if name not in arrays:
            raise ValueError(f"checkpoint missing parameter {name!r}")
        if arrays[name].shape != p.data.shape:
            raise ValueError(f"checkpoint parameter {name!r} has shape "
                             f"{arrays[name].shape}, expected {p.data.shape}")
        p.data = arrays[name].copy()
    return fresh
