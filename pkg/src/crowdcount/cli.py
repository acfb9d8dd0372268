"""Command-line entry point: ``crowdcount <command> [--config FILE] [--set key=value ...]``.

Settings come from a ``key = value`` run config file, then ``--set``
overrides, then dedicated flags (which win). Unknown keys are rejected before
any work starts. Every command writes ``manifest.json`` into the output
directory; commands that produce metrics also write ``metrics.json``, which
is byte-identical across runs with the same config and seed.

Exit codes: 0 success, 1 invalid configuration, 2 data error, 3 numerical
failure. Failures print one ``error: <kind>: <reason>`` line to stderr.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import platform
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import checkpoint as CK
from . import convlstm as M
from . import data as Dt
from . import density as D
from . import eval as E
from . import grad as G
from . import optim as O
from .errors import ConfigError, DataError, NumericalError
from .tensor import ShapeError, load_tensor, save_tensor

log = logging.getLogger("crowdcount")

THREADS_ENV = "CROWDCOUNT_THREADS"
GRADCHECK_TOL = 1e-4


@dataclass
class RunConfig:
    # data
    dataset: str = ""
    target_dataset: str = ""
    clip_len: int = 10
    # network
    layer_channels: list = field(default_factory=lambda: [128, 64, 64, 64])
    kernel: int = 5
    direction: str = "unidirectional"
    patch_size: int = 72
    output_scale: float = 1.0
    # patches
    patch_mode: str = "grid"
    patch_stride: int = 0
    patches_per_image: int = 16
    eval_stride: int = 0
    # optimiser
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 50
    batch_size: int = 1
    patience: int = 10
    eval_every: int = 1
    val_clips: int = 0
    # transfer
    adapt_frames: int = 50
    adapt_epochs: int = 20
    adapt_lr_multiplier: float = 0.1
    adapt_contiguous: bool = True
    # synthetic scenes
    synth_frames: int = 300
    synth_height: int = 32
    synth_width: int = 32
    synth_agents: float = 5.0
    synth_occlusion_prob: float = 0.0
    synth_margin: float = 0.0
    synth_kernel: str = "fixed:1.5"
    synth_train: str = "0-199"
    # gradient check
    gradcheck_channels: list = field(default_factory=lambda: [8, 4])
    gradcheck_direction: str = "bidirectional"
    gradcheck_size: int = 8
    gradcheck_frames: int = 3
    gradcheck_samples: int = 16
    # run
    seed: int = 0
    out: str = "runs/out"

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            want = type(f.default_factory()) if f.default_factory is not dataclasses.MISSING else type(f.default)
            if want is float and isinstance(v, int) and not isinstance(v, bool):
                v = float(v)
                setattr(self, f.name, v)
            if not isinstance(v, want) or (want is int and isinstance(v, bool)):
                raise ConfigError(f"config key {f.name!r} expects {want.__name__}, got {v!r}")
        if self.clip_len < 1 or self.epochs < 0 or self.batch_size < 1 or self.patience < 1:
            raise ConfigError("clip_len, batch_size and patience must be >= 1; epochs >= 0")
        if self.patch_mode not in ("grid", "random"):
            raise ConfigError(f"patch_mode must be 'grid' or 'random', got {self.patch_mode!r}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")

    @classmethod
    def build(cls, values: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        return cls(**values)

    def network(self, in_channels: int = 1, size: int | None = None) -> M.NetworkConfig:
        size = size or self.patch_size
        return M.NetworkConfig(list(self.layer_channels), self.kernel, self.direction, in_channels, size, size,
                               self.output_scale)

    def train_options(self) -> O.TrainOptions:
        return O.TrainOptions(self.epochs, self.lr, self.beta1, self.beta2, self.eps, self.batch_size,
                              self.patience, self.eval_every, self.seed)


def parse_assignment(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    key, raw = (s.strip() for s in text.split("=", 1))
    return key, Dt.parse_value(raw)


def load_config(args: argparse.Namespace) -> RunConfig:
    values = Dt.read_kv(args.config) if args.config else {}
    for item in args.set or []:
        k, v = parse_assignment(item)
        values[k] = v
    for key in ("seed", "out", "epochs", "dataset", "target_dataset"):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return RunConfig.build(values)


# ---------------------------------------------------------------- run records


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_manifest(out: Path, command: str, cfg: RunConfig, metrics: dict | None = None) -> None:
    write_json(out / "manifest.json", {
        "command": command,
        "config": dataclasses.asdict(cfg),
        "seed": cfg.seed,
        "versions": {"crowdcount": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "metrics": metrics or {},
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    })


def finish(out: Path, command: str, cfg: RunConfig, metrics: dict) -> None:
    write_json(out / "metrics.json", metrics)
    write_manifest(out, command, cfg, metrics)


def output_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def require(path: str, what: str) -> Path:
    if not path:
        raise ConfigError(f"{what} is not set")
    p = Path(path)
    if not p.exists():
        raise DataError(f"{p}: {what} not found")
    return p


# ---------------------------------------------------------------- helpers


def training_clips(cfg: RunConfig, ds: Dt.Dataset, clips: list) -> list:
    """Clips cropped to the model size when the source frames are larger."""
    size = cfg.patch_size
    if (ds.height, ds.width) == (size, size):
        return clips
    out = []
    for i, clip in enumerate(clips):
        parts = Dt.patch_clips(clip, size, ds.spec.kernel, cfg.patch_stride or None, cfg.patch_mode,
                               cfg.patches_per_image, cfg.seed + i, ds.perspective, ds.roi)
        out += [pc for _, pc in parts]
    return out


def fit(cfg: RunConfig, ds: Dt.Dataset, params=None, adam=None) -> tuple[O.TrainResult, M.NetworkConfig]:
    clips = ds.clips("train", cfg.clip_len)
    if not clips:
        raise DataError(f"{ds.spec.name}: training split is empty")
    val = []
    if cfg.val_clips:
        if cfg.val_clips >= len(clips):
            raise ConfigError(f"val_clips={cfg.val_clips} leaves no training clips")
        clips, val = clips[:-cfg.val_clips], clips[-cfg.val_clips:]
    net = cfg.network(ds.spec.channels)
    if params is None:
        params = M.init_params(net, cfg.seed)
    stride = cfg.eval_stride or None
    validate = (lambda p: E.evaluate(p, net, val, stride=stride).mae) if val else None
    result = O.train(params, net, training_clips(cfg, ds, clips), cfg.train_options(), validate=validate, adam=adam)
    return result, net


def write_loss_log(path: Path, result: O.TrainResult) -> None:
    val = dict(result.val_log)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "val_mae"])
        for epoch, loss in result.loss_log:
            w.writerow([epoch, repr(loss), repr(val[epoch]) if epoch in val else ""])


def open_spec(path: str, what: str = "dataset") -> Dt.Dataset:
    return Dt.open_dataset(Dt.DatasetSpec.from_file(require(path, what)))


# ---------------------------------------------------------------- commands


def cmd_density(cfg: RunConfig, args) -> dict:
    ds = open_spec(cfg.dataset)
    out = output_dir(cfg)
    target = out / "densities"
    target.mkdir(exist_ok=True)
    total = 0.0
    for i in range(len(ds.frame_paths)):
        m = ds.density(i)
        save_tensor(target / f"density_{i:06d}.cftn", m)
        total += D.count(m)
    metrics = {"frames": len(ds.frame_paths), "total_count": round(total, 6)}
    finish(out, "density", cfg, metrics)
    return metrics


def cmd_synth(cfg: RunConfig, args) -> dict:
    out = output_dir(cfg)
    scene = Dt.SyntheticSceneConfig(height=cfg.synth_height, width=cfg.synth_width, n_agents=cfg.synth_agents,
                                    occlusion_prob=cfg.synth_occlusion_prob, margin=cfg.synth_margin,
                                    kernel=D.KernelRule.parse(cfg.synth_kernel), seed=cfg.seed)
    clip = Dt.synth_generate(scene, cfg.synth_frames)
    (out / "frames").mkdir(exist_ok=True)
    for t, frame in enumerate(clip.frames):
        Dt.write_frame(out / "frames" / f"frame_{t:06d}.png", frame)
    D.write_annotations(out / "annotations.csv", clip.annotations)
    spec = Dt.DatasetSpec(Path("."), "frames/*.png", "annotations.csv", kernel=scene.kernel,
                          train=Dt.parse_ranges(cfg.synth_train), name=f"synth-{cfg.seed}")
    spec.write(out / "scene.dataset")
    metrics = {"frames": len(clip), "mean_count": round(float(np.mean(clip.counts)), 6)}
    finish(out, "synth", cfg, metrics)
    return metrics


def cmd_train(cfg: RunConfig, args) -> dict:
    ds = open_spec(cfg.dataset)
    out = output_dir(cfg)
    result, net = fit(cfg, ds)
    CK.save(out / "model.cfck", CK.Checkpoint(net, result.params, result.adam,
                                              {"dataset": ds.spec.name, "best_epoch": result.best_epoch}))
    write_loss_log(out / "loss_log.csv", result)
    metrics = {"epochs_run": len(result.loss_log), "best_epoch": result.best_epoch,
               "final_loss": result.loss_log[-1][1] if result.loss_log else None}
    if result.val_log:
        metrics["best_val_mae"] = min(v for _, v in result.val_log)
    finish(out, "train", cfg, metrics)
    return metrics


def _prediction_report(ds: Dt.Dataset, pred_dir: Path, indices: list[int]) -> E.EvalReport:
    frames, true, pred = [], [], []
    for i in indices:
        path = pred_dir / f"pred_{i:06d}.cftn"
        if not path.exists():
            raise DataError(f"{path}: prediction missing")
        frames.append(i)
        true.append(float(ds.annotation(i).count))
        pred.append(D.count(load_tensor(path), ds.roi))
    return E.EvalReport(frames, true, pred, ds.spec.name, f"files:{pred_dir}")


def cmd_eval(cfg: RunConfig, args) -> dict:
    ds = open_spec(cfg.dataset)
    out = output_dir(cfg)
    if args.predictions:
        report = _prediction_report(ds, require(args.predictions, "predictions directory"), ds.indices("test"))
    else:
        ck = CK.load(require(args.checkpoint, "checkpoint"))
        pred_dir = out / "predictions" if args.save_predictions else None
        report = E.evaluate(ck.params, ck.config, ds.clips("test", cfg.clip_len), ds.roi, ds.spec.name,
                            ck.config.direction, pred_dir, cfg.eval_stride or None)
    report.write_csv(out / "counts.csv")
    report.write_jsonl(out / "report.jsonl")
    metrics = report.summary()
    finish(out, "eval", cfg, metrics)
    return metrics


def cmd_predict(cfg: RunConfig, args) -> dict:
    ck = CK.load(require(args.checkpoint, "checkpoint"))
    paths = [Path(p) for p in args.frames]
    for p in paths:
        require(str(p), "frame")
    frames = [Dt.read_frame(p, ck.config.in_channels) for p in paths]
    if any(f.shape != frames[0].shape for f in frames):
        raise DataError("predict: frames differ in size")
    out = output_dir(cfg)
    maps = E.predict_clip(ck.params, ck.config, frames, cfg.eval_stride or None)
    counts = []
    with open(out / "counts.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "file", "pred"])
        for t, (p, m) in enumerate(zip(paths, maps)):
            save_tensor(out / f"pred_{t:06d}.cftn", m.astype(np.float32))
            counts.append(D.count(m))
            w.writerow([t, p.name, f"{counts[-1]:.6f}"])
    metrics = {"frames": len(paths), "total_count": round(float(sum(counts)), 6)}
    finish(out, "predict", cfg, metrics)
    return metrics


def cmd_transfer(cfg: RunConfig, args) -> dict:
    target = open_spec(cfg.target_dataset, "target dataset")
    out = output_dir(cfg)
    if args.checkpoint:
        ck = CK.load(require(args.checkpoint, "checkpoint"))
        params, net = ck.params, ck.config
    else:
        result, net = fit(cfg, open_spec(cfg.dataset, "source dataset"))
        params = result.params
    plan = E.TransferPlan(cfg.adapt_frames, cfg.adapt_epochs, cfg.adapt_lr_multiplier, cfg.adapt_contiguous,
                          cfg.clip_len, cfg.seed, cfg.dataset or None, target.spec.name)
    pre, post, adapted = E.transfer_run(plan, params, net, target.clips("train", cfg.clip_len),
                                        target.clips("test", cfg.clip_len), cfg.train_options(), target.roi)
    pre.write_csv(out / "pre.csv")
    post.write_csv(out / "post.csv")
    h, w = target.height, target.width
    adapted_net = dataclasses.replace(net, height=h, width=w) if (h, w) != (net.height, net.width) else net
    CK.save(out / "adapted.cfck", CK.Checkpoint(adapted_net, adapted, None, {"target": target.spec.name}))
    metrics = {"target": target.spec.name, "pre_mae": pre.mae, "pre_mse": pre.mse,
               "post_mae": post.mae, "post_mse": post.mse, "adapt_frames": cfg.adapt_frames}
    finish(out, "transfer", cfg, metrics)
    return metrics


def cmd_gradcheck(cfg: RunConfig, args) -> dict:
    size, T = cfg.gradcheck_size, cfg.gradcheck_frames
    net = M.NetworkConfig(list(cfg.gradcheck_channels), cfg.kernel, cfg.gradcheck_direction, 1, size, size)
    rng = np.random.default_rng(cfg.seed)
    params = M.init_params(net, cfg.seed, dtype=np.float64)
    # random peepholes and biases so no gradient is trivially zero
    params = {k: v + rng.normal(0, 0.1, v.shape) if k.split(".")[-1].startswith(("W_c", "b_")) else v
              for k, v in params.items()}
    clip = [rng.random((1, size, size)) for _ in range(T)]
    targets = [rng.random((1, size, size)) * 0.1 for _ in range(T)]
    err = G.finite_diff_check(lambda p: O.loss(M.forward(clip, p, net), targets), params,
                              samples=cfg.gradcheck_samples, seed=cfg.seed)
    ok = err < GRADCHECK_TOL
    metrics = {"max_rel_err": err, "tolerance": GRADCHECK_TOL, "passed": bool(ok)}
    if cfg.out:
        finish(output_dir(cfg), "gradcheck", cfg, metrics)
    print(f"{'PASS' if ok else 'FAIL'} max_rel_err<{GRADCHECK_TOL:g} value={err:.3e}")
    if not ok:
        raise NumericalError(f"gradient check failed: max_rel_err={err:.3e} >= {GRADCHECK_TOL:g}")
    return metrics


COMMANDS = {
    "density": (cmd_density, "write ground-truth density maps for every frame of a dataset"),
    "synth": (cmd_synth, "generate a synthetic pedestrian scene on disk"),
    "train": (cmd_train, "train a network on a dataset's training split"),
    "eval": (cmd_eval, "evaluate a checkpoint (or saved predictions) on the test split"),
    "predict": (cmd_predict, "predict density maps for a sequence of frame images"),
    "transfer": (cmd_transfer, "adapt a model to a target scene and report before/after"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of the network gradients"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crowdcount", description="ConvLSTM crowd counting toolkit")
    parser.add_argument("--version", action="version", version=f"crowdcount {__version__}")
    parser.add_argument("--threads", type=int, default=None,
                        help=f"cap numeric worker threads (default: ${THREADS_ENV} or library default)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="run config file of key = value lines")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        if name in ("density", "train", "eval", "transfer"):
            p.add_argument("--dataset", help="dataset spec file")
        if name == "train":
            p.add_argument("--epochs", type=int)
        if name in ("eval", "predict", "transfer"):
            p.add_argument("--checkpoint")
        if name == "eval":
            p.add_argument("--predictions", help="evaluate saved pred_<frame>.cftn maps instead of a checkpoint")
            p.add_argument("--save-predictions", action="store_true")
        if name == "transfer":
            p.add_argument("--target-dataset", dest="target_dataset")
        if name == "predict":
            p.add_argument("frames", nargs="+", help="frame images in temporal order")
    return parser


def thread_limit(n: int | None):
    from threadpoolctl import threadpool_limits

    if n is None:
        env = os.environ.get(THREADS_ENV)
        if not env:
            return threadpool_limits(limits=None)
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    if n < 1:
        raise ConfigError("thread count must be >= 1")
    return threadpool_limits(limits=n)


def _kind(exc: BaseException) -> tuple[int, str]:
    if isinstance(exc, (NumericalError, G.GradientError, FloatingPointError)):
        return 3, "numerical"
    if isinstance(exc, (DataError, FileNotFoundError)):
        return 2, "data"
    if isinstance(exc, (ConfigError, ShapeError)):
        return 1, "config"
    return 0, ""


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        with thread_limit(args.threads):
            metrics = COMMANDS[args.command][0](cfg, args)
    except Exception as exc:
        code, kind = _kind(exc)
        if not code:
            raise
        reason = " ".join(str(exc).split())
        print(f"error: {kind}: {reason}", file=sys.stderr)
        return code
    if args.command != "gradcheck":
        print(f"ok {args.command} " + " ".join(f"{k}={v}" for k, v in sorted(metrics.items())))
    return 0


if __name__ == "__main__":
    sys.exit(main())
