"""Scratch calibration script (not part of the package)."""
import sys
import time

import numpy as np

from qktal.data import load_manifest
from qktal.evaluate import GroundTruthSegment, evaluate
from qktal.localize import InferenceConfig, VideoMeta, localize
from qktal.losses import LossWeights
from qktal.model import ModelConfig, forward
from qktal.training import TrainConfig, TrainVideo, train


def compute_map(params, model_cfg, dataset, mode, m, thresholds):
    inf_cfg = InferenceConfig(m=m)
    proposals = []
    gts = []
    for video in dataset.videos:
        feats = video.load_features()
        outputs = forward(feats, params, model_cfg, mode)
        proposals.extend(localize(outputs, VideoMeta(video.video_id, video.fps), inf_cfg))
        for cid, s, e in video.ground_truth:
            gts.append(GroundTruthSegment(video.video_id, cid, s, e))
    rep = evaluate(proposals, gts, thresholds)
    return rep


def run(lr, epochs, hidden, m, alpha=5.0, beta=0.8, gamma=0.8, seed=0,
        mode="video_specific", t_train=60, log_every=10):
    train_ds = load_manifest("/tmp/synth/train.json")
    test_ds = load_manifest("/tmp/synth/test.json")
    videos = [TrainVideo(v.video_id, v.load_features(), v.label) for v in train_ds.videos]
    model_cfg = ModelConfig(num_classes=3, feature_dim=32, segments=t_train, hidden_dim=hidden)
    cfg = TrainConfig(batch_size=10, t_train=t_train, learning_rate=lr,
                      weight_decay=1e-3, epochs=epochs, seed=seed,
                      weights=LossWeights(alpha=alpha, beta=beta, gamma=gamma, m=m),
                      mode=mode)
    t0 = time.time()
    thresholds = [round(0.1 * i, 1) for i in range(1, 8)]

    history = []
    def cb(epoch, params):
        if (epoch + 1) % log_every == 0 or epoch == epochs - 1:
            rep = compute_map(params, model_cfg, test_ds, mode, m, thresholds)
            avg = float(np.mean([rep.map_at[t] for t in thresholds]))
            history.append((epoch + 1, rep.map_at[0.5], avg))
            print(f"  epoch {epoch+1}: test mAP@0.5={rep.map_at[0.5]:.3f} "
                  f"avg(0.1:0.7)={avg:.3f}  [{time.time()-t0:.0f}s]")

    params, log = train(videos, model_cfg, cfg, epoch_callback=cb)
    print(f"  last losses: " + ", ".join(f"{k}={v:.3f}" for k, v in log[-1].items() if k != "epoch"))
    return history


if __name__ == "__main__":
    lr = float(sys.argv[1]) if len(sys.argv) > 1 else 1e-3
    epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 30
    hidden = int(sys.argv[3]) if len(sys.argv) > 3 else 16
    m = int(sys.argv[4]) if len(sys.argv) > 4 else 7
    print(f"lr={lr} epochs={epochs} hidden={hidden} m={m}")
    run(lr, epochs, hidden, m)
