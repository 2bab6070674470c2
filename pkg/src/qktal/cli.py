"""Command-line entry point tying the pipeline together:

    qktal synth     --out data/ [--seed 0 ...]
    qktal train     --manifest data/train.json --out runs/ckpt.bin [...]
    qktal infer     --checkpoint runs/ckpt.bin --manifest data/test.json --out runs/proposals.tsv
    qktal eval      --proposals runs/proposals.tsv --manifest data/test.json --out runs/report/
    qktal gradcheck [--seeds 20]

Training configuration precedence: command-line flags > --config JSON file
> built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .data import (Dataset, SyntheticSpec, generate_synthetic, load_manifest,
                   read_features)
from .evaluate import GroundTruthSegment, evaluate
from .localize import (InferenceConfig, VideoMeta, localize, read_proposals,
                       write_proposals)
from .losses import QS_DISTANCES, LossWeights
from .model import ModelConfig, forward
from .report import write_eval_report, write_train_log
from .training import (TrainConfig, TrainVideo, load_checkpoint,
                       params_from_arrays, save_checkpoint, train)

DEFAULT_EVAL_THRESHOLDS = [round(0.1 * i, 1) for i in range(1, 8)]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qktal",
                                     description="Weakly-supervised temporal "
                                                 "action localization toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--train-videos", type=int, default=50)
    p.add_argument("--test-videos", type=int, default=20)
    p.add_argument("--t-min", type=int, default=50)
    p.add_argument("--t-max", type=int, default=80)
    p.add_argument("--feature-dim", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.1)
    _add_common(p)

    p = sub.add_parser("train", help="train a model from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--config", default=None, help="JSON training config file")
    p.add_argument("--mode", choices=["video_specific", "uniform"], default=None)
    p.add_argument("--qs-distance", choices=list(QS_DISTANCES), default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--t-train", type=int, default=None)
    p.add_argument("--min-shared-pairs", type=int, default=None)
    p.add_argument("--hidden-dim", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--topk-divisor", type=int, default=None,
                   help="m in k = max(1, T // m)")
    p.add_argument("--report-dir", default=None,
                   help="directory for train_log.tsv and loss_curve.png "
                        "(default: alongside the checkpoint)")
    p.add_argument("--no-figures", action="store_true")
    _add_common(p)

    p = sub.add_parser("infer", help="write action proposals for a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="proposal TSV output path")
    p.add_argument("--class-threshold", type=float, default=None)
    p.add_argument("--nms-iou", type=float, default=None)
    p.add_argument("--oic-inflation", type=float, default=None)
    p.add_argument("--fuse-class-prob", action="store_true")

    p = sub.add_parser("eval", help="score proposals against ground truth")
    p.add_argument("--proposals", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--thresholds", default=None,
                   help="comma-separated tIoU thresholds "
                        "(default 0.1,...,0.7)")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("gradcheck", help="run the finite-difference suite")
    p.add_argument("--seeds", type=int, default=20)
    return parser


def _load_train_config(args) -> TrainConfig:
    base = TrainConfig().to_dict()
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            file_cfg = json.load(fh)
        unknown = set(file_cfg) - set(base) - {"hidden_dim"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        weights = base.pop("weights")
        weights.update(file_cfg.pop("weights", {}))
        base.update(file_cfg)
        base["weights"] = weights
    flag_map = {
        "mode": args.mode, "qs_distance": args.qs_distance,
        "epochs": args.epochs, "batch_size": args.batch_size,
        "learning_rate": args.learning_rate, "weight_decay": args.weight_decay,
        "t_train": args.t_train, "seed": args.seed,
        "min_shared_pairs": args.min_shared_pairs,
    }
    for key, value in flag_map.items():
        if value is not None:
            base[key] = value
    for key, value in (("alpha", args.alpha), ("beta", args.beta),
                       ("gamma", args.gamma), ("m", args.topk_divisor)):
        if value is not None:
            base["weights"][key] = value
    base.pop("hidden_dim", None)
    return TrainConfig.from_dict(base)


def _dataset_videos(dataset: Dataset) -> list[TrainVideo]:
    return [TrainVideo(v.video_id, v.load_features(), v.label)
            for v in dataset.videos]


def _cmd_synth(args) -> int:
    spec = SyntheticSpec(num_classes=args.classes, train_videos=args.train_videos,
                         test_videos=args.test_videos, t_min=args.t_min,
                         t_max=args.t_max, feature_dim=args.feature_dim,
                         noise=args.noise)
    train_path, test_path = generate_synthetic(spec, args.seed or 0, args.out)
    print(f"wrote {train_path} and {test_path}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_train_config(args)
    dataset = load_manifest(args.manifest)
    videos = _dataset_videos(dataset)
    feature_dim = videos[0].features.shape[1]
    hidden = args.hidden_dim
    if hidden is None and args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            hidden = json.load(fh).get("hidden_dim")
    model_cfg = ModelConfig(num_classes=dataset.num_classes,
                            feature_dim=feature_dim, segments=cfg.t_train,
                            hidden_dim=hidden if hidden is not None else 512)
    params, log = train(videos, model_cfg, cfg)
    snapshot = {"model": model_cfg.to_dict(), "train": cfg.to_dict()}
    save_checkpoint(args.out, params, snapshot)
    report_dir = args.report_dir
    if report_dir is None:
        import os
        report_dir = os.path.dirname(os.path.abspath(args.out))
    paths = write_train_log(log, report_dir, figures=not args.no_figures)
    final = log[-1] if log else {}
    print(f"checkpoint written to {args.out}")
    if log:
        print(f"final epoch losses: " +
              ", ".join(f"{k}={v:.4f}" for k, v in final.items() if k != "epoch"))
    print(f"train log: {paths['log']}")
    return 0


def _cmd_infer(args) -> int:
    arrays, snapshot, _ = load_checkpoint(args.checkpoint)
    model_cfg = ModelConfig.from_dict(snapshot["model"])
    mode = snapshot.get("train", {}).get("mode", "video_specific")
    params = params_from_arrays(arrays, model_cfg)
    dataset = load_manifest(args.manifest)
    if dataset.num_classes != model_cfg.num_classes:
        raise ValueError(f"manifest has {dataset.num_classes} classes but "
                         f"checkpoint was trained with {model_cfg.num_classes}")
    inf_cfg = InferenceConfig(m=snapshot.get("train", {})
                              .get("weights", {}).get("m", 7))
    if args.class_threshold is not None:
        inf_cfg.class_threshold = args.class_threshold
    if args.nms_iou is not None:
        inf_cfg.soft_nms_iou = args.nms_iou
    if args.oic_inflation is not None:
        inf_cfg.oic_inflation = args.oic_inflation
    inf_cfg.fuse_class_prob = args.fuse_class_prob
    proposals = []
    for video in dataset.videos:
        feats = video.load_features()
        outputs = forward(feats, params, model_cfg, mode)
        meta = VideoMeta(video.video_id, video.fps, inf_cfg.frames_per_segment)
        proposals.extend(localize(outputs, meta, inf_cfg))
    write_proposals(args.out, proposals, dataset.class_names)
    print(f"wrote {len(proposals)} proposals to {args.out}")
    return 0


def _gts_from_dataset(dataset: Dataset) -> list[GroundTruthSegment]:
    gts = []
    for video in dataset.videos:
        for class_id, start, end in video.ground_truth:
            gts.append(GroundTruthSegment(video.video_id, class_id, start, end))
    return gts


def _cmd_eval(args) -> int:
    dataset = load_manifest(args.manifest)
    proposals = read_proposals(args.proposals, dataset.class_names)
    gts = _gts_from_dataset(dataset)
    thresholds = DEFAULT_EVAL_THRESHOLDS
    if args.thresholds:
        thresholds = [float(x) for x in args.thresholds.split(",")]
    report = evaluate(proposals, gts, thresholds)
    paths = write_eval_report(report, dataset.class_names, args.out,
                              figures=not args.no_figures)
    for thr in thresholds:
        print(f"mAP@{thr:g}: {report.map_at[thr]:.4f}")
    for name, value in report.bands.items():
        print(f"avg mAP {name}: {value:.4f}")
    print(f"report written to {paths['table']}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite
    worst = run_suite(seeds=range(args.seeds))
    failed = False
    for name, err in worst.items():
        status = "ok" if err < 1e-4 else "FAIL"
        print(f"{status:4s} {name}: max relative error {err:.3e}")
        failed = failed or err >= 1e-4
    return 1 if failed else 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "synth": _cmd_synth,
        "train": _cmd_train,
        "infer": _cmd_infer,
        "eval": _cmd_eval,
        "gradcheck": _cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except Exception as e:  # surface one-line cause, nonzero exit
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
