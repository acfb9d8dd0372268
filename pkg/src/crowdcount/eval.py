"""Count metrics, evaluation reports and transfer adaptation.

Note on naming: ``mse`` here is the *root* of the mean squared count error,
which is the convention crowd-counting benchmarks report under the name MSE.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import density as D
from .convlstm import NetworkConfig, forward, resize_peepholes
from .data import VideoClip, assemble_overlapping, patch_origins, split_clips
from .errors import ConfigError, DataError
from .optim import TrainOptions, train
from .tensor import ShapeError, save_tensor


def metrics(true_counts: Sequence[float], pred_counts: Sequence[float]) -> tuple[float, float]:
    """``(MAE, MSE)`` where MSE = sqrt(mean squared error)."""
    if len(true_counts) != len(pred_counts):
        raise ValueError(f"{len(true_counts)} true counts vs {len(pred_counts)} predictions")
    if len(true_counts) == 0:
        raise ValueError("metrics of an empty list")
    err = np.asarray(true_counts, dtype=np.float64) - np.asarray(pred_counts, dtype=np.float64)
    return float(np.mean(np.abs(err))), float(math.sqrt(np.mean(err * err)))


@dataclass
class EvalReport:
    frames: list[int]
    true: list[float]
    pred: list[float]
    scene: str = ""
    model: str = ""
    mae: float = field(init=False)
    mse: float = field(init=False)

    def __post_init__(self):
        self.mae, self.mse = metrics(self.true, self.pred)

    def summary(self) -> dict:
        return {"scene": self.scene, "model": self.model, "frames": len(self.frames),
                "mae": self.mae, "mse": self.mse}

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for f, t, p in zip(self.frames, self.true, self.pred):
                fh.write(json.dumps({"frame": f, "true": t, "pred": p}) + "\n")
            fh.write(json.dumps({"summary": True, **self.summary()}) + "\n")

    def write_csv(self, path: str | Path) -> None:
        """Count curve ``frame,true,pred`` at 6 decimals."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "true", "pred"])
            for f, t, p in zip(self.frames, self.true, self.pred):
                w.writerow([f, f"{t:.6f}", f"{p:.6f}"])

    @classmethod
    def read_csv(cls, path: str | Path, scene: str = "", model: str = "") -> "EvalReport":
        frames, true, pred = [], [], []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                frames.append(int(row["frame"]))
                true.append(float(row["true"]))
                pred.append(float(row["pred"]))
        return cls(frames, true, pred, scene, model)


def predict_clip(params: Mapping, config: NetworkConfig, frames: Sequence[np.ndarray],
                 stride: int | None = None) -> list[np.ndarray]:
    """Density maps for a clip of arbitrary (at least model-sized) frames.

    Frames matching the model's spatial size go straight through. Larger
    frames are tiled into model-sized patch sequences on a grid (stride half
    the patch by default) and the overlapping predictions averaged.
    """
    c, h, w = frames[0].shape
    ph, pw = config.height, config.width
    if c != config.in_channels:
        raise ShapeError(f"frames have {c} channels, model expects {config.in_channels}")
    if (h, w) == (ph, pw):
        return [np.asarray(p, dtype=np.float64) for p in forward(list(frames), params, config)]
    if ph != pw:
        raise ShapeError("patched inference needs a square model")
    if h < ph or w < pw:
        raise ShapeError(f"frames {h}x{w} smaller than model input {ph}x{pw}")
    origins = patch_origins(h, w, ph, "grid", stride or max(ph // 2, 1))
    per_patch = [forward([f[:, y:y + ph, x:x + pw] for f in frames], params, config) for y, x in origins]
    return [assemble_overlapping([pp[t] for pp in per_patch], origins, (h, w)) for t in range(len(frames))]


def evaluate(params: Mapping, config: NetworkConfig, clips: Sequence[VideoClip],
             roi: np.ndarray | None = None, scene: str = "", model: str = "",
             predictions_dir: str | Path | None = None, stride: int | None = None) -> EvalReport:
    """Per-frame count comparison over a test stream.

    Predicted counts integrate the predicted map inside the ROI (the clip's
    own ROI when ``roi`` is not given). When
    ``predictions_dir`` is given each predicted map is also written there as
    ``pred_<frame>.cftn``.
    """
    frames_idx, true, pred = [], [], []
    if predictions_dir is not None:
        Path(predictions_dir).mkdir(parents=True, exist_ok=True)
    for clip in clips:
        maps = predict_clip(params, config, clip.frames, stride)
        for ann, m in zip(clip.annotations, maps):
            if predictions_dir is not None:
                m = m.astype(np.float32)
                save_tensor(Path(predictions_dir) / f"pred_{ann.frame_index:06d}.cftn", m)
            frames_idx.append(ann.frame_index)
            true.append(float(ann.count))
            pred.append(D.count(m, roi if roi is not None else clip.roi))
    if not frames_idx:
        raise DataError("evaluation stream is empty")
    return EvalReport(frames_idx, true, pred, scene, model or config.direction)


@dataclass
class TransferPlan:
    adapt_frames: int = 50
    adapt_epochs: int = 20
    lr_multiplier: float = 0.1
    contiguous: bool = True
    clip_len: int = 10
    seed: int = 0
    source: str | None = None
    target: str | None = None

    def __post_init__(self):
        if self.adapt_frames < 1 or self.adapt_epochs < 0 or self.lr_multiplier <= 0:
            raise ConfigError("invalid transfer plan")


def adaptation_clips(plan: TransferPlan, target_train: Sequence[VideoClip]) -> list[VideoClip]:
    """The adaptation set drawn from the target training split only."""
    frames, anns, dens = [], [], []
    for c in target_train:
        frames += c.frames
        anns += c.annotations
        dens += c.densities
    if plan.adapt_frames > len(frames):
        raise DataError(f"adaptation budget {plan.adapt_frames} exceeds {len(frames)} target training frames")
    if plan.contiguous:
        idx = list(range(plan.adapt_frames))
    else:
        rng = np.random.default_rng(plan.seed)
        idx = sorted(rng.choice(len(frames), size=plan.adapt_frames, replace=False).tolist())
    pool = VideoClip([frames[i] for i in idx], [anns[i] for i in idx], [dens[i] for i in idx], "adapt",
                     target_train[0].roi)
    return split_clips(pool, plan.clip_len)


def transfer_run(plan: TransferPlan, params: Mapping, config: NetworkConfig,
                 target_train: Sequence[VideoClip], target_test: Sequence[VideoClip],
                 options: TrainOptions = TrainOptions(), roi: np.ndarray | None = None):
    """Evaluate a source model on the target, fine-tune on the adaptation set, evaluate again.

    Returns ``(pre_report, post_report, adapted_params)``. When target frames
    differ in size from the source model the per-position peepholes are
    centre-cropped or zero-padded to the target size first.
    """
    adapt = adaptation_clips(plan, target_train)
    _, h, w = adapt[0].shape
    if (h, w) != (config.height, config.width):
        params = resize_peepholes(params, h, w)
        config = replace(config, height=h, width=w)
    pre = evaluate(params, config, target_test, roi, model=f"{config.direction}/pre")
    if plan.adapt_epochs == 0:
        post = evaluate(params, config, target_test, roi, model=f"{config.direction}/post")
        return pre, post, dict(params)
    opts = replace(options, epochs=plan.adapt_epochs, lr=options.lr * plan.lr_multiplier, seed=plan.seed)
    result = train(params, config, adapt, opts, roi=roi)
    post = evaluate(result.params, config, target_test, roi, model=f"{config.direction}/post")
    return pre, post, result.params
