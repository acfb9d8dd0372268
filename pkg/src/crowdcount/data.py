"""Datasets, clips, patches and the synthetic pedestrian scene generator."""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import density as D
from .errors import ConfigError, DataError
from .tensor import ShapeError

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class VideoClip:
    frames: list[np.ndarray]
    annotations: list[D.AnnotationSet]
    densities: list[np.ndarray] | None = None
    source: str = ""
    roi: np.ndarray | None = None

    def __post_init__(self):
        if len(self.frames) != len(self.annotations):
            raise DataError(f"{len(self.frames)} frames but {len(self.annotations)} annotation sets")
        if self.densities is not None and len(self.densities) != len(self.frames):
            raise DataError("densities do not align with frames")
        if self.frames:
            shape = self.frames[0].shape
            if any(f.shape != shape for f in self.frames):
                raise ShapeError("clip frames differ in shape")
        idx = self.frame_indices
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise DataError("frame indices must be strictly increasing")

    def __len__(self):
        return len(self.frames)

    @property
    def frame_indices(self) -> list[int]:
        return [a.frame_index for a in self.annotations]

    @property
    def counts(self) -> list[int]:
        return [a.count for a in self.annotations]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.frames[0].shape

    def slice(self, start: int, stop: int) -> "VideoClip":
        dens = None if self.densities is None else self.densities[start:stop]
        return VideoClip(self.frames[start:stop], self.annotations[start:stop], dens, self.source, self.roi)


def split_clips(clip: VideoClip, clip_len: int) -> list[VideoClip]:
    """Cut consecutive runs of ``clip_len`` frames; the trailing shorter clip is kept."""
    if clip_len < 1:
        raise ConfigError("clip_len must be >= 1")
    return [clip.slice(s, s + clip_len) for s in range(0, len(clip), clip_len)]


def contiguous_runs(indices: Sequence[int]) -> list[list[int]]:
    runs: list[list[int]] = []
    for i in indices:
        if runs and i == runs[-1][-1] + 1:
            runs[-1].append(i)
        else:
            runs.append([i])
    return runs


# ---------------------------------------------------------------- dataset specs


def parse_ranges(text: str) -> list[tuple[int, int]]:
    """``"600-1399, 1500"`` -> inclusive zero-based ranges."""
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        m = re.fullmatch(r"(\d+)\s*(?:-\s*(\d+))?", part)
        if not m:
            raise ConfigError(f"bad frame range {part!r}")
        lo = int(m.group(1))
        hi = int(m.group(2)) if m.group(2) is not None else lo
        if hi < lo:
            raise ConfigError(f"empty frame range {part!r}")
        out.append((lo, hi))
    return out


def in_ranges(i: int, ranges) -> bool:
    return any(lo <= i <= hi for lo, hi in ranges)


def read_kv(path: str | Path) -> dict[str, object]:
    """Parse a ``key = value`` text file; values are JSON when they parse as JSON."""
    out: dict[str, object] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = parse_value(raw)
    return out


def parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def format_kv(d: dict) -> str:
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in d.items())


@dataclass
class DatasetSpec:
    root: Path
    frames: str
    annotations: str | None = None
    perspective: str | None = None
    perspective_scale: float = 1.0
    roi: str | None = None
    kernel: D.KernelRule = field(default_factory=lambda: D.KernelRule.fixed(2.0))
    train: list[tuple[int, int]] = field(default_factory=list)
    test: list[tuple[int, int]] = field(default_factory=list)
    channels: int = 1
    name: str = ""

    KEYS = ("root", "frames", "annotations", "perspective", "perspective_scale", "roi",
            "kernel", "train", "test", "channels", "name")

    def __post_init__(self):
        for a in self.train:
            for b in self.test:
                if a[0] <= b[1] and b[0] <= a[1]:
                    raise ConfigError(f"train range {a} overlaps test range {b}")
        if self.channels not in (1, 3):
            raise ConfigError("channels must be 1 or 3")

    @classmethod
    def from_file(cls, path: str | Path) -> "DatasetSpec":
        path = Path(path)
        kv = read_kv(path)
        unknown = set(kv) - set(cls.KEYS)
        if unknown:
            raise ConfigError(f"{path}: unknown dataset keys {sorted(unknown)}")
        if "frames" not in kv:
            raise ConfigError(f"{path}: 'frames' glob is required")
        root = Path(str(kv.get("root", ".")))
        if not root.is_absolute():
            root = path.parent / root
        kernel = kv.get("kernel", "fixed:2.0")
        return cls(
            root=root,
            frames=str(kv["frames"]),
            annotations=_opt_str(kv.get("annotations")),
            perspective=_opt_str(kv.get("perspective")),
            perspective_scale=float(kv.get("perspective_scale", 1.0)),
            roi=_opt_str(kv.get("roi")),
            kernel=D.KernelRule.parse(str(kernel)),
            train=parse_ranges(kv.get("train", "")),
            test=parse_ranges(kv.get("test", "")),
            channels=int(kv.get("channels", 1)),
            name=str(kv.get("name", path.stem)),
        )

    def write(self, path: str | Path) -> None:
        fmt = lambda rs: ",".join(f"{a}-{b}" for a, b in rs)
        kv = {"name": self.name, "root": str(self.root), "frames": self.frames}
        for key in ("annotations", "perspective", "roi"):
            if getattr(self, key):
                kv[key] = getattr(self, key)
        kv.update(perspective_scale=self.perspective_scale, kernel=str(self.kernel),
                  train=fmt(self.train), test=fmt(self.test), channels=self.channels)
        Path(path).write_text(format_kv(kv))


def _opt_str(v):
    return None if v in (None, "", "none") else str(v)


def _numeric_key(p: Path):
    nums = re.findall(r"\d+", p.stem)
    return (int(nums[-1]) if nums else -1, p.name)


def discover_frames(root: Path, pattern: str) -> list[Path]:
    files = sorted((p for p in root.glob(pattern) if p.is_file()), key=_numeric_key)
    if not files:
        raise DataError(f"{root}: no frame files match {pattern!r}")
    return files


def read_frame(path: Path, channels: int = 1) -> np.ndarray:
    """8-bit image as ``[C, H, W]`` in ``[0, 1]``; RGB converted to luma when ``channels == 1``."""
    from PIL import Image

    try:
        with Image.open(path) as im:
            arr = np.asarray(im, dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: cannot read frame ({exc})") from None
    arr = arr / 255.0
    if arr.ndim == 3:
        arr = arr[..., :3]
        if channels == 1:
            return (arr @ LUMA)[None].astype(np.float32)
        return arr.transpose(2, 0, 1).astype(np.float32)
    if channels == 3:
        return np.repeat(arr[None], 3, axis=0).astype(np.float32)
    return arr[None].astype(np.float32)


def write_frame(path: Path, frame: np.ndarray) -> None:
    from PIL import Image

    img = np.clip(np.rint(frame[0] * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path)


@dataclass
class Dataset:
    spec: DatasetSpec
    frame_paths: list[Path]
    annotations: dict[int, D.AnnotationSet]
    perspective: np.ndarray | None
    roi: np.ndarray | None
    height: int
    width: int

    def indices(self, split: str) -> list[int]:
        n = len(self.frame_paths)
        if split == "train":
            return [i for i in range(n) if in_ranges(i, self.spec.train)]
        if self.spec.test:
            return [i for i in range(n) if in_ranges(i, self.spec.test)]
        return [i for i in range(n) if not in_ranges(i, self.spec.train)]

    def annotation(self, i: int) -> D.AnnotationSet:
        return self.annotations.get(i, D.AnnotationSet(i))

    def density(self, i: int, dtype=np.float32) -> np.ndarray:
        return D.generate(self.annotation(i), self.spec.kernel, self.height, self.width,
                          self.perspective, self.roi, dtype=dtype)

    def clip(self, indices: Sequence[int], with_density: bool = True) -> VideoClip:
        frames = [read_frame(self.frame_paths[i], self.spec.channels) for i in indices]
        for i, f in zip(indices, frames):
            if f.shape[1:] != (self.height, self.width):
                raise DataError(f"{self.frame_paths[i]}: frame size {f.shape[1:]} differs from first frame")
        anns = [self.annotation(i) for i in indices]
        dens = [self.density(i) for i in indices] if with_density else None
        return VideoClip(frames, anns, dens, self.spec.name, self.roi)

    def clips(self, split: str, clip_len: int) -> list[VideoClip]:
        out = []
        for run in contiguous_runs(self.indices(split)):
            for s in range(0, len(run), clip_len):
                out.append(self.clip(run[s:s + clip_len]))
        return out


def open_dataset(spec: DatasetSpec) -> Dataset:
    paths = discover_frames(spec.root, spec.frames)
    first = read_frame(paths[0], spec.channels)
    h, w = first.shape[1:]
    anns = {}
    if spec.annotations:
        ann_path = spec.root / spec.annotations
        if not ann_path.exists():
            raise DataError(f"{ann_path}: annotation file not found")
        anns = D.read_annotations(ann_path)
        for f, a in anns.items():
            if f >= len(paths):
                raise DataError(f"{ann_path}: annotations for frame {f} but only {len(paths)} frames")
            try:
                a.check_bounds(h, w)
            except DataError as exc:
                raise DataError(f"{ann_path}: {exc}") from None
    persp = roi = None
    if spec.perspective:
        persp = D.load_perspective(spec.root / spec.perspective, h, w, spec.perspective_scale)
    if spec.roi:
        roi = D.load_roi(spec.root / spec.roi, h, w)
    if spec.kernel.mode == "perspective" and persp is None:
        raise ConfigError("perspective kernel rule requires a perspective map in the dataset spec")
    return Dataset(spec, paths, anns, persp, roi, h, w)


def load_dataset(spec: DatasetSpec, clip_len: int = 10) -> tuple[list[VideoClip], list[VideoClip]]:
    """Train and test clips cut from contiguous in-split frame runs."""
    ds = open_dataset(spec)
    return ds.clips("train", clip_len), ds.clips("test", clip_len)


# ---------------------------------------------------------------- patches


@dataclass
class Patch:
    origin: tuple[int, int]
    frame: np.ndarray
    annotations: D.AnnotationSet


def grid_origins(extent: int, size: int, stride: int) -> list[int]:
    if stride < 1:
        raise ConfigError("patch stride must be >= 1")
    starts = list(range(0, extent - size + 1, stride))
    if starts[-1] != extent - size:
        starts.append(extent - size)
    return starts


def patch_origins(height: int, width: int, size: int = 72, mode: str = "grid",
                  stride: int | None = None, n: int = 16, seed: int = 0) -> list[tuple[int, int]]:
    if size > height or size > width:
        raise ShapeError(f"patch size {size} exceeds frame {height}x{width}")
    if mode == "grid":
        stride = stride or size
        return [(y, x) for y in grid_origins(height, size, stride) for x in grid_origins(width, size, stride)]
    if mode == "random":
        rng = np.random.default_rng(seed)
        ys = rng.integers(0, height - size + 1, size=n)
        xs = rng.integers(0, width - size + 1, size=n)
        return [(int(y), int(x)) for y, x in zip(ys, xs)]
    raise ConfigError(f"unknown patch mode {mode!r}")


def crop_patches(frame: np.ndarray, ann: D.AnnotationSet, size: int = 72, mode: str = "grid",
                 stride: int | None = None, n: int = 16, seed: int = 0) -> list[Patch]:
    """Crop ``size x size`` patches and move the annotations into patch coordinates."""
    _, h, w = frame.shape
    out = []
    for y, x in patch_origins(h, w, size, mode, stride, n, seed):
        out.append(Patch((y, x), frame[:, y:y + size, x:x + size], ann.shifted(-x, -y, size, size)))
    return out


def assemble_overlapping(patch_preds: Sequence[np.ndarray], origins: Sequence[tuple[int, int]],
                         shape: tuple[int, int]) -> np.ndarray:
    """Per-pixel mean of overlapping ``[1, s, s]`` patch predictions on an ``H x W`` frame.

    The mean is taken as ``first + mean(p - first)`` so that patches which agree
    on their overlap reassemble bit-exactly.
    """
    h, w = shape
    base = np.zeros((h, w), dtype=np.float64)
    dev = np.zeros((h, w), dtype=np.float64)
    hits = np.zeros((h, w), dtype=np.int64)
    for p, (y, x) in zip(patch_preds, origins):
        p = np.asarray(p, dtype=np.float64).reshape(np.shape(p)[-2:])
        ph, pw = p.shape
        if y < 0 or x < 0 or y + ph > h or x + pw > w:
            raise ShapeError(f"patch at {(y, x)} of size {p.shape} exceeds frame {shape}")
        win = (slice(y, y + ph), slice(x, x + pw))
        fresh = hits[win] == 0
        base[win][fresh] = p[fresh]
        dev[win] += p - base[win]
        hits[win] += 1
    if (hits == 0).any():
        r, c = np.argwhere(hits == 0)[0]
        raise DataError(f"pixel (row={r}, col={c}) is not covered by any patch")
    return (base + dev / hits)[None]


def patch_clips(clip: VideoClip, size: int, rule: D.KernelRule, stride: int | None = None,
                mode: str = "grid", n: int = 16, seed: int = 0,
                perspective: np.ndarray | None = None, roi: np.ndarray | None = None) -> list[tuple[tuple[int, int], VideoClip]]:
    """Spatial crops of a whole clip at fixed origins.

    Targets are regenerated from patch-local annotations so each head keeps
    unit mass inside its patch.
    """
    _, h, w = clip.shape
    out = []
    for y, x in patch_origins(h, w, size, mode, stride, n, seed):
        frames = [f[:, y:y + size, x:x + size] for f in clip.frames]
        anns = [a.shifted(-x, -y, size, size) for a in clip.annotations]
        pp = None if perspective is None else perspective[:, y:y + size, x:x + size]
        pr = None if roi is None else roi[:, y:y + size, x:x + size]
        dens = [D.generate(a, rule, size, size, pp, pr, dtype=np.float32) for a in anns]
        out.append(((y, x), VideoClip(frames, anns, dens, clip.source, pr)))
    return out


# ---------------------------------------------------------------- synthetic scenes


@dataclass
class SyntheticSceneConfig:
    """Pedestrian-like blobs moving over a textured background.

    ``exit="respawn"``: agents leave through the border and new ones enter,
    so the count fluctuates around ``n_agents``. ``exit="bounce"``: exactly
    ``round(n_agents)`` agents reflect off the borders forever.

    An optional ``occluder`` column band ``(x0, x1)`` is painted over the
    agents. Independently, each agent starts a transient occlusion with
    probability ``occlusion_prob`` per frame, lasting 1 to ``occlusion_len``
    frames. Hidden agents stay annotated.

    With ``margin > 0`` the agents move in a world extending ``margin`` pixels
    beyond every border, as if the frame were a camera's view of a larger
    space: people just outside still show partly, but only those inside the
    frame are annotated. ``n_agents`` stays the average count inside the frame.
    """

    height: int = 32
    width: int = 32
    n_agents: float = 5.0
    speed: tuple[float, float] = (0.5, 1.5)
    exit: str = "respawn"
    heading: str = "any"
    turn_std: float = 0.05
    seed: int = 0
    kernel: D.KernelRule = field(default_factory=lambda: D.KernelRule.fixed(1.5))
    blob_sigma: float = 1.2
    blob_intensity: float = 0.6
    background: float = 0.2
    texture: float = 0.05
    noise: float = 0.02
    occluder: tuple[int, int] | None = None
    occluder_intensity: float = 0.45
    occlusion_prob: float = 0.0
    occlusion_len: int = 2
    margin: float = 0.0

    def __post_init__(self):
        if self.exit not in ("respawn", "bounce"):
            raise ConfigError(f"exit must be 'respawn' or 'bounce', got {self.exit!r}")
        if self.heading not in ("any", "horizontal"):
            raise ConfigError(f"heading must be 'any' or 'horizontal', got {self.heading!r}")
        if self.n_agents < 0 or self.speed[0] < 0 or self.speed[1] < self.speed[0]:
            raise ConfigError("invalid agent count or speed range")
        if not 0 <= self.occlusion_prob <= 1 or self.occlusion_len < 1:
            raise ConfigError("occlusion_prob must lie in [0, 1] and occlusion_len be >= 1")
        if self.margin < 0:
            raise ConfigError(f"margin must be >= 0, got {self.margin}")


class _Agents:
    def __init__(self, cfg: SyntheticSceneConfig, rng: np.random.Generator):
        self.cfg, self.rng = cfg, rng
        # world coordinates; the frame is the window [m, m + width) x [m, m + height)
        self.m = cfg.margin
        self.h, self.w = h, w = cfg.height + 2 * self.m, cfg.width + 2 * self.m
        expected = cfg.n_agents * (h * w) / (cfg.height * cfg.width)
        if cfg.exit == "bounce":
            n = int(round(expected))
            self.active = np.ones(n, dtype=bool)
        else:
            # twice as many slots, each active half of the time in steady state
            n = int(math.ceil(2 * expected))
            self.active = rng.random(n) < 0.5
        self.pos = np.column_stack([rng.uniform(0, w, n), rng.uniform(0, h, n)])
        self.heading = self._headings(n)
        self.speed = rng.uniform(cfg.speed[0], cfg.speed[1], n)
        self.hidden_for = np.zeros(n, dtype=int)
        # separate stream: trajectories do not depend on the occlusion settings
        self.occl_rng = np.random.default_rng([cfg.seed, 1])
        mean_speed = max(0.5 * (cfg.speed[0] + cfg.speed[1]), 1e-6)
        chord = w if cfg.heading == "horizontal" else math.pi * h * w / (2 * (h + w))
        self.enter_prob = min(1.0, mean_speed / chord)

    def _headings(self, n):
        if self.cfg.heading == "horizontal":
            return np.where(self.rng.random(n) < 0.5, 0.0, math.pi)
        return self.rng.uniform(0, 2 * math.pi, n)

    def _spawn(self, i):
        cfg, rng = self.cfg, self.rng
        h, w = self.h, self.w
        self.speed[i] = rng.uniform(cfg.speed[0], cfg.speed[1])
        self.hidden_for[i] = 0
        if cfg.heading == "horizontal":
            left = rng.random() < 0.5
            self.pos[i] = (0.0 if left else np.nextafter(w, 0), rng.uniform(0, h))
            self.heading[i] = 0.0 if left else math.pi
            return
        side = rng.integers(4)
        edge = {0: (rng.uniform(0, w), 0.0), 1: (rng.uniform(0, w), np.nextafter(h, 0)),
                2: (0.0, rng.uniform(0, h)), 3: (np.nextafter(w, 0), rng.uniform(0, h))}[int(side)]
        inward = {0: math.pi / 2, 1: -math.pi / 2, 2: 0.0, 3: math.pi}[int(side)]
        self.pos[i] = edge
        self.heading[i] = inward + rng.uniform(-math.pi / 3, math.pi / 3)

    def step(self):
        cfg, rng = self.cfg, self.rng
        h, w = self.h, self.w
        n = len(self.active)
        if cfg.occlusion_prob > 0:
            self.hidden_for = np.maximum(self.hidden_for - 1, 0)
            start = (self.hidden_for == 0) & (self.occl_rng.random(n) < cfg.occlusion_prob)
            self.hidden_for[start] = self.occl_rng.integers(1, cfg.occlusion_len + 1, size=int(start.sum()))
        self.heading = self.heading + rng.normal(0, cfg.turn_std, n)
        vel = np.column_stack([np.cos(self.heading), np.sin(self.heading)]) * self.speed[:, None]
        new = self.pos + vel
        if cfg.exit == "bounce":
            for axis, ext in ((0, w), (1, h)):
                lo, hi = new[:, axis] < 0, new[:, axis] >= ext
                new[lo, axis] = -new[lo, axis]
                new[hi, axis] = 2 * ext - new[hi, axis] - 1e-9
                flip = lo | hi
                if flip.any():
                    vx, vy = np.cos(self.heading[flip]), np.sin(self.heading[flip])
                    if axis == 0:
                        vx = -vx
                    else:
                        vy = -vy
                    self.heading[flip] = np.arctan2(vy, vx)
            self.pos = np.clip(new, 0, [np.nextafter(w, 0), np.nextafter(h, 0)])
            return
        self.pos = np.where(self.active[:, None], new, self.pos)
        inside = (self.pos[:, 0] >= 0) & (self.pos[:, 0] < w) & (self.pos[:, 1] >= 0) & (self.pos[:, 1] < h)
        self.active &= inside
        for i in np.flatnonzero(~self.active):
            if rng.random() < self.enter_prob:
                self._spawn(i)
                self.active[i] = True

    def _in_frame(self):
        x, y = self.pos[:, 0] - self.m, self.pos[:, 1] - self.m
        return (x >= 0) & (x < self.cfg.width) & (y >= 0) & (y < self.cfg.height)

    def annotated_points(self) -> np.ndarray:
        return self.pos[self.active & self._in_frame()] - self.m

    def visible_points(self) -> np.ndarray:
        return self.pos[self.active & (self.hidden_for == 0)] - self.m


def render_frame(cfg: SyntheticSceneConfig, points: np.ndarray, texture: np.ndarray,
                 rng: np.random.Generator) -> np.ndarray:
    h, w = cfg.height, cfg.width
    img = cfg.background + texture.copy()
    yy, xx = np.mgrid[0:h, 0:w]
    for x, y in points:
        img += cfg.blob_intensity * np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * cfg.blob_sigma ** 2))
    if cfg.occluder is not None:
        x0, x1 = cfg.occluder
        img[:, x0:x1] = cfg.occluder_intensity
    img += rng.normal(0, cfg.noise, (h, w))
    return np.clip(img, 0.0, 1.0)[None].astype(np.float32)


def synth_generate(cfg: SyntheticSceneConfig, T: int) -> VideoClip:
    """Deterministic synthetic clip of ``T`` frames with exact per-frame head positions."""
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.height, cfg.width
    # smooth static texture so the background is not trivially flat
    coarse = rng.normal(0, cfg.texture, (h // 8 + 2, w // 8 + 2))
    texture = np.kron(coarse, np.ones((8, 8)))[:h, :w]
    agents = _Agents(cfg, rng)
    frames, anns, dens = [], [], []
    for t in range(T):
        if t:
            agents.step()
        ann = D.AnnotationSet(t, agents.annotated_points())
        anns.append(ann)
        frames.append(render_frame(cfg, agents.visible_points(), texture, rng))
        dens.append(D.generate(ann, cfg.kernel, h, w, dtype=np.float32))
    return VideoClip(frames, anns, dens, f"synth-{cfg.seed}")


def with_seed(cfg: SyntheticSceneConfig, seed: int) -> SyntheticSceneConfig:
    return replace(cfg, seed=seed)
