"""On-disk formats and the synthetic dataset generator.

Feature container byte layout (little-endian):
    magic    4 bytes  b"VQKF"
    version  u16      currently 1
    T        u32      number of segments
    D        u32      feature width
    payload  T*D f32, row-major

The dataset manifest is a JSON document:
    {
      "classes": ["name", ...],
      "videos": [
        {"id": str, "features": relative-or-absolute path, "fps": float,
         "labels": [class names...],
         "ground_truth": [{"class": name, "start": sec, "end": sec}, ...]}
      ]
    }
Feature paths are resolved against the manifest's directory.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .losses import LabelVector

FEATURE_MAGIC = b"VQKF"
FEATURE_VERSION = 1


class FeatureFileError(ValueError):
    """Base class for feature container parse failures."""


class BadMagicError(FeatureFileError):
    pass


class BadVersionError(FeatureFileError):
    pass


class TruncatedPayloadError(FeatureFileError):
    pass


def write_features(path: str, matrix: np.ndarray) -> None:
    """Write a [T, D] float matrix at 32-bit precision."""
    arr = np.asarray(matrix, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {arr.shape}")
    t_len, width = arr.shape
    header = (FEATURE_MAGIC
              + FEATURE_VERSION.to_bytes(2, "little")
              + t_len.to_bytes(4, "little")
              + width.to_bytes(4, "little"))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.astype("<f4").tobytes(order="C"))


def read_features(path: str) -> np.ndarray:
    """Read a feature container back as float64 (exact promotion)."""
    with open(path, "rb") as fh:
        header = fh.read(14)
        if len(header) < 14:
            raise TruncatedPayloadError(f"{path}: header truncated at {len(header)} bytes")
        if header[:4] != FEATURE_MAGIC:
            raise BadMagicError(f"{path}: bad magic {header[:4]!r}")
        version = int.from_bytes(header[4:6], "little")
        if version != FEATURE_VERSION:
            raise BadVersionError(f"{path}: unsupported version {version}")
        t_len = int.from_bytes(header[6:10], "little")
        width = int.from_bytes(header[10:14], "little")
        payload = fh.read()
    expected = t_len * width * 4
    if len(payload) != expected:
        raise TruncatedPayloadError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(t_len, width).astype(np.float64)


@dataclass
class VideoRecord:
    video_id: str
    feature_path: str
    fps: float
    label: LabelVector
    ground_truth: list[tuple[int, float, float]] = field(default_factory=list)

    def load_features(self) -> np.ndarray:
        return read_features(self.feature_path)


@dataclass
class Dataset:
    class_names: list[str]
    videos: list[VideoRecord]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


class ManifestError(ValueError):
    pass


def load_manifest(path: str, validate: bool = True) -> Dataset:
    """Parse and (by default) validate a dataset manifest.

    Validation rejects unknown label/ground-truth classes and feature
    paths that are missing or fail to parse, before any training starts.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}")
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest {path} is not valid JSON: {e}")
    if not isinstance(doc, dict) or "classes" not in doc or "videos" not in doc:
        raise ManifestError(f"manifest {path} must contain 'classes' and 'videos'")
    class_names = list(doc["classes"])
    if len(set(class_names)) != len(class_names):
        raise ManifestError(f"manifest {path} has duplicate class names")
    index = {name: i for i, name in enumerate(class_names)}
    base = os.path.dirname(os.path.abspath(path))
    videos: list[VideoRecord] = []
    for entry in doc["videos"]:
        vid = entry["id"]
        feat_path = entry["features"]
        if not os.path.isabs(feat_path):
            feat_path = os.path.join(base, feat_path)
        for name in entry["labels"]:
            if name not in index:
                raise ManifestError(f"video {vid!r}: unknown label class {name!r}")
        if not entry["labels"]:
            raise ManifestError(f"video {vid!r}: empty label list")
        label = LabelVector.from_indices([index[n] for n in entry["labels"]],
                                         len(class_names))
        gts: list[tuple[int, float, float]] = []
        for seg in entry.get("ground_truth", []):
            if seg["class"] not in index:
                raise ManifestError(f"video {vid!r}: unknown ground-truth class "
                                    f"{seg['class']!r}")
            if not seg["start"] < seg["end"]:
                raise ManifestError(f"video {vid!r}: ground-truth segment must have "
                                    f"start < end, got [{seg['start']}, {seg['end']}]")
            gts.append((index[seg["class"]], float(seg["start"]), float(seg["end"])))
        if validate:
            if not os.path.exists(feat_path):
                raise ManifestError(f"video {vid!r}: feature file missing: {feat_path}")
            read_features(feat_path)
        videos.append(VideoRecord(vid, feat_path, float(entry.get("fps", 25.0)),
                                  label, gts))
    return Dataset(class_names, videos)


def write_manifest(path: str, class_names: list[str],
                   entries: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"classes": class_names, "videos": entries}, fh, indent=2)
        fh.write("\n")


# --- synthetic data ----------------------------------------------------------

@dataclass
class SyntheticSpec:
    num_classes: int = 3
    train_videos: int = 50
    test_videos: int = 20
    t_min: int = 50
    t_max: int = 80
    feature_dim: int = 32
    noise: float = 0.1
    fps: float = 25.0
    frames_per_segment: int = 16
    max_instances: int = 3
    min_duration_frac: float = 0.08
    max_duration_frac: float = 0.25

    def __post_init__(self):
        if self.feature_dim % 2 != 0:
            raise ConfigError("feature_dim must be even")
        if self.t_min < 4 or self.t_max < self.t_min:
            raise ConfigError("need 4 <= t_min <= t_max")


def _make_prototypes(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Unit-norm class prototypes, re-drawn until pairwise cosine distance
    is at least 0.5 so classes stay distinguishable."""
    for _ in range(1000):
        protos = rng.normal(size=(spec.num_classes, spec.feature_dim))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
        sims = protos @ protos.T
        np.fill_diagonal(sims, 0.0)
        if sims.max() <= 0.5:
            return protos
    raise ConfigError("could not draw sufficiently distinct class prototypes; "
                      "increase feature_dim or reduce num_classes")


def _plant_instances(spec: SyntheticSpec, rng: np.random.Generator, t_len: int,
                     class_pool: np.ndarray):
    """Non-overlapping action spans with class ids; spans are inclusive."""
    count = int(rng.integers(1, spec.max_instances + 1))
    spans: list[tuple[int, int, int]] = []
    occupied = np.zeros(t_len, dtype=bool)
    for _ in range(count):
        for _attempt in range(50):
            dur = max(2, int(round(t_len * rng.uniform(spec.min_duration_frac,
                                                       spec.max_duration_frac))))
            if dur >= t_len:
                continue
            start = int(rng.integers(0, t_len - dur))
            end = start + dur - 1
            if not occupied[start:end + 1].any():
                occupied[start:end + 1] = True
                spans.append((int(rng.choice(class_pool)), start, end))
                break
    return spans


def _envelope(length: int) -> np.ndarray:
    """Plateau at 1 with smooth linear onset and offset ramps."""
    ramp = max(1, length // 5)
    env = np.ones(length)
    up = (np.arange(1, ramp + 1)) / ramp
    env[:ramp] = np.minimum(env[:ramp], up)
    env[length - ramp:] = np.minimum(env[length - ramp:], up[::-1])
    return env


def generate_synthetic(spec: SyntheticSpec, seed: int, out_dir: str) -> tuple[str, str]:
    """Write a seeded synthetic dataset; returns (train manifest path,
    test manifest path).

    Videos are background noise with planted class-prototype spans under a
    smooth envelope; labels and ground-truth segments record exactly what
    was planted.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    os.makedirs(out_dir, exist_ok=True)
    feat_dir = os.path.join(out_dir, "features")
    os.makedirs(feat_dir, exist_ok=True)
    protos = _make_prototypes(spec, rng)
    class_names = [f"action_{i:02d}" for i in range(spec.num_classes)]
    np.save(os.path.join(out_dir, "prototypes.npy"), protos)
    seconds = spec.frames_per_segment / spec.fps

    def make_split(split: str, count: int) -> str:
        entries = []
        for v in range(count):
            vid = f"{split}_{v:04d}"
            t_len = int(rng.integers(spec.t_min, spec.t_max + 1))
            # one or two classes per video so labels overlap across the set
            n_classes = int(rng.integers(1, min(2, spec.num_classes) + 1))
            class_pool = rng.choice(spec.num_classes, size=n_classes, replace=False)
            spans = _plant_instances(spec, rng, t_len, class_pool)
            while not spans:
                spans = _plant_instances(spec, rng, t_len, class_pool)
            features = rng.normal(0.0, spec.noise, size=(t_len, spec.feature_dim))
            for class_id, start, end in spans:
                env = _envelope(end - start + 1)
                features[start:end + 1] += env[:, None] * protos[class_id]
            rel = os.path.join("features", f"{vid}.vqkf")
            write_features(os.path.join(out_dir, rel), features)
            labels = sorted({c for c, _, _ in spans})
            entries.append({
                "id": vid,
                "features": rel,
                "fps": spec.fps,
                "labels": [class_names[c] for c in labels],
                "ground_truth": [
                    {"class": class_names[c], "start": round(s * seconds, 6),
                     "end": round((e + 1) * seconds, 6)}
                    for c, s, e in spans
                ],
            })
        manifest_path = os.path.join(out_dir, f"{split}.json")
        write_manifest(manifest_path, class_names, entries)
        return manifest_path

    train_path = make_split("train", spec.train_videos)
    test_path = make_split("test", spec.test_videos)
    return train_path, test_path
