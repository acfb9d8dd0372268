"""Ground-truth density maps built from head annotations.

Each annotated head contributes an isotropic Gaussian on the pixel grid. The
kernel is truncated at radius ``4 * sigma`` and renormalised so that its mass
inside the image (and inside the ROI, when one is given) is exactly one; the
integral of a map therefore equals the number of annotated people.

Coordinates follow image conventions: ``x`` is the column, ``y`` the row, and
pixel ``(row, col)`` sits at position ``(x=col, y=row)``.
"""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .tensor import ShapeError, load_tensor

MIN_SIGMA = 0.5
TRUNCATE = 4.0


@dataclass
class AnnotationSet:
    frame_index: int
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = np.zeros((0, 2))
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise DataError(f"frame {self.frame_index}: points must be (N, 2), got {pts.shape}")
        self.points = pts

    @property
    def count(self) -> int:
        return len(self.points)

    def check_bounds(self, height: int, width: int) -> None:
        for x, y in self.points:
            if not (0 <= x < width and 0 <= y < height):
                raise DataError(
                    f"frame {self.frame_index}: annotation ({x}, {y}) outside {width}x{height} frame"
                )

    def shifted(self, dx: float, dy: float, height: int, width: int) -> "AnnotationSet":
        """Translate by ``(dx, dy)`` and drop points that leave ``[0,width) x [0,height)``."""
        pts = self.points + np.array([dx, dy])
        keep = (pts[:, 0] >= 0) & (pts[:, 0] < width) & (pts[:, 1] >= 0) & (pts[:, 1] < height)
        return AnnotationSet(self.frame_index, pts[keep])


@dataclass(frozen=True)
class KernelRule:
    """Gaussian width rule: a fixed sigma in pixels, or ``coeff * M(head)``."""

    mode: str
    value: float

    def __post_init__(self):
        if self.mode not in ("fixed", "perspective"):
            raise DataError(f"unknown kernel mode {self.mode!r}")
        if not self.value > 0:
            raise DataError(f"kernel {self.mode} value must be > 0, got {self.value}")

    @classmethod
    def fixed(cls, sigma: float) -> "KernelRule":
        return cls("fixed", sigma)

    @classmethod
    def perspective(cls, coeff: float) -> "KernelRule":
        return cls("perspective", coeff)

    @classmethod
    def parse(cls, text: str) -> "KernelRule":
        """Parse ``"fixed:2.0"`` or ``"perspective:0.3"``."""
        try:
            mode, val = text.split(":")
            return cls(mode.strip(), float(val))
        except ValueError as exc:
            raise DataError(f"bad kernel rule {text!r}: {exc}") from None

    def __str__(self):
        return f"{self.mode}:{self.value:g}"

    def sigma_at(self, x: float, y: float, perspective: np.ndarray | None) -> float:
        if self.mode == "fixed":
            sigma = self.value
        else:
            if perspective is None:
                raise DataError("perspective kernel rule needs a perspective map")
            h, w = perspective.shape[-2:]
            row = min(max(int(round(y)), 0), h - 1)
            col = min(max(int(round(x)), 0), w - 1)
            sigma = self.value * float(perspective.reshape(h, w)[row, col])
        if not sigma > 0:
            raise DataError(f"non-positive kernel width {sigma} at ({x}, {y})")
        return max(sigma, MIN_SIGMA)


def _check_grid(grid: np.ndarray, height: int, width: int, what: str) -> np.ndarray:
    grid = np.asarray(grid)
    if grid.shape not in ((height, width), (1, height, width)):
        raise ShapeError(f"{what} shape {grid.shape} does not match frame {height}x{width}")
    return grid.reshape(height, width)


def check_perspective(persp: np.ndarray, height: int, width: int) -> np.ndarray:
    grid = _check_grid(persp, height, width, "perspective map")
    if not np.all(grid > 0):
        raise DataError("perspective map must be strictly positive")
    return grid.reshape(1, height, width)


def check_roi(roi: np.ndarray, height: int, width: int) -> np.ndarray:
    grid = _check_grid(roi, height, width, "ROI mask")
    if not np.all((grid == 0) | (grid == 1)):
        raise DataError("ROI mask must be binary")
    return grid.reshape(1, height, width)


def kernel_patch(x: float, y: float, sigma: float, height: int, width: int):
    """Truncated unnormalised Gaussian around ``(x, y)``: ``(row0, col0, values)``."""
    r = TRUNCATE * sigma
    c0, c1 = max(0, math.floor(x - r)), min(width - 1, math.ceil(x + r))
    r0, r1 = max(0, math.floor(y - r)), min(height - 1, math.ceil(y + r))
    dx = np.arange(c0, c1 + 1) - x
    dy = np.arange(r0, r1 + 1) - y
    d2 = dy[:, None] ** 2 + dx[None, :] ** 2
    g = np.exp(-d2 / (2.0 * sigma * sigma))
    g[d2 > r * r] = 0.0
    return r0, c0, g


def generate(
    ann: AnnotationSet,
    rule: KernelRule,
    height: int,
    width: int,
    perspective: np.ndarray | None = None,
    roi: np.ndarray | None = None,
    dtype=np.float64,
) -> np.ndarray:
    """Density map ``[1, H, W]`` whose in-ROI integral equals ``ann.count``.

    A head whose truncated kernel has no in-ROI support contributes nothing.
    """
    ann.check_bounds(height, width)
    persp = None if perspective is None else check_perspective(perspective, height, width)
    mask = None if roi is None else check_roi(roi, height, width)[0]
    out = np.zeros((height, width), dtype=np.float64)
    for x, y in ann.points:
        sigma = rule.sigma_at(x, y, persp)
        r0, c0, g = kernel_patch(x, y, sigma, height, width)
        if mask is not None:
            g = g * mask[r0:r0 + g.shape[0], c0:c0 + g.shape[1]]
        mass = g.sum()
        if mass > 0:
            out[r0:r0 + g.shape[0], c0:c0 + g.shape[1]] += g / mass
    return out.reshape(1, height, width).astype(dtype, copy=False)


def apply_roi(t: np.ndarray, roi: np.ndarray) -> np.ndarray:
    if t.shape != roi.shape:
        raise ShapeError(f"apply_roi: map {t.shape} vs mask {roi.shape}")
    return t * roi.astype(t.dtype, copy=False)


def count(density: np.ndarray, roi: np.ndarray | None = None) -> float:
    if roi is not None:
        density = apply_roi(density, roi)
    return float(density.sum(dtype=np.float64))


# ---------------------------------------------------------------- file formats


def read_annotations(path: str | Path) -> dict[int, AnnotationSet]:
    """Read a ``frame,x,y`` CSV into per-frame annotation sets."""
    per_frame: dict[int, list] = defaultdict(list)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return {}
        if [h.strip() for h in header] != ["frame", "x", "y"]:
            raise DataError(f"{path}:1: expected header 'frame,x,y', got {','.join(header)!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                frame, x, y = int(row[0]), float(row[1]), float(row[2])
                if len(row) != 3 or frame < 0 or not (math.isfinite(x) and math.isfinite(y)):
                    raise ValueError
            except (ValueError, IndexError):
                raise DataError(f"{path}:{lineno}: malformed annotation row {','.join(row)!r}") from None
            per_frame[frame].append((x, y))
    return {f: AnnotationSet(f, np.array(pts)) for f, pts in per_frame.items()}


def write_annotations(path: str | Path, sets) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "x", "y"])
        for ann in sorted(sets, key=lambda a: a.frame_index):
            for x, y in ann.points:
                w.writerow([ann.frame_index, repr(float(x)), repr(float(y))])


def load_grid(path: str | Path, scale: float = 1.0) -> np.ndarray:
    """Load a map as ``[1, H, W]`` float64 from CFTN or 8/16-bit PGM.

    PGM samples are taken as raw integers multiplied by ``scale``.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == b"CFTN":
        grid = load_tensor(path).astype(np.float64)
    elif magic[:2] in (b"P2", b"P5"):
        from PIL import Image

        with Image.open(path) as im:
            grid = np.asarray(im, dtype=np.float64) * scale
    else:
        raise DataError(f"{path}: unrecognised map format")
    if grid.ndim == 2:
        grid = grid[None]
    if grid.ndim != 3 or grid.shape[0] != 1:
        raise DataError(f"{path}: expected a single-channel map, got shape {grid.shape}")
    return grid


def load_perspective(path, height: int, width: int, scale: float = 1.0) -> np.ndarray:
    return check_perspective(load_grid(path, scale), height, width)


def load_roi(path, height: int, width: int) -> np.ndarray:
    grid = load_grid(path)
    return check_roi((grid > 0).astype(np.float64), height, width)
