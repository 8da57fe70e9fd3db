"""Binary spatial masks, the x (+) p blend, and prefabricated facial regions."""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import tensor as T
from ..errors import DimensionError, FormatError, ParameterError
from ..tensorio import load_tensor, save_tensor

# (row_lo, row_hi, col_lo, col_hi) as fractions of H / W; a pixel (i, j) is
# inside when lo * H <= i < hi * H (and likewise for columns)
REGION_BOXES = {
    "eye": [(0.29, 0.46, 0.0, 1.0)],
    "nose": [(0.46, 0.63, 0.25, 0.75)],
    "mouth": [(0.63, 0.77, 0.25, 0.75)],
    "forehead": [(0.10, 0.29, 0.10, 0.90)],
    "cheek": [(0.46, 0.77, 0.10, 0.25), (0.46, 0.77, 0.75, 0.90)],
}
FRAME_WIDTH = 0.10
REGIONS = ("eye", "nose", "mouth", "cheek", "forehead", "background")


@dataclass
class Mask:
    grid: np.ndarray      # H x W of exact 0.0 / 1.0
    region: str = "learned"

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 2:
            raise DimensionError(f"mask must be H x W, got {self.grid.shape}")
        if not np.all((self.grid == 0.0) | (self.grid == 1.0)):
            raise ParameterError("mask values must be exactly 0 or 1")

    @property
    def cover_rate(self):
        return float(self.grid.mean())

    @property
    def shape(self):
        return self.grid.shape

    def pixels(self):
        return int(self.grid.sum())


def _span(lo, hi, n):
    idx = np.arange(n)
    return (idx >= lo * n) & (idx < hi * n)


def _boxes(boxes, h, w):
    grid = np.zeros((h, w), dtype=bool)
    for r0, r1, c0, c1 in boxes:
        grid |= np.outer(_span(r0, r1, h), _span(c0, c1, w))
    return grid


def prefab_mask(region, h=48, w=48):
    """Fixed facial-region mask; background is the outer frame minus the eye band."""
    if region == "background":
        inner = np.outer(_span(FRAME_WIDTH, 1 - FRAME_WIDTH, h), _span(FRAME_WIDTH, 1 - FRAME_WIDTH, w))
        grid = ~inner & ~_boxes(REGION_BOXES["eye"], h, w)
    elif region in REGION_BOXES:
        grid = _boxes(REGION_BOXES[region], h, w)
    else:
        raise ParameterError(f"unknown mask region {region!r}")
    return Mask(grid.astype(np.float64), region)


def random_mask(cover_rate, h=48, w=48, rng=None):
    """Uniformly random pixel subset with round(cover_rate * H * W) pixels."""
    rng = np.random.default_rng() if rng is None else rng
    n = int(round(cover_rate * h * w))
    flat = np.zeros(h * w)
    flat[rng.choice(h * w, size=n, replace=False)] = 1.0
    return Mask(flat.reshape(h, w), "random")


def iou(a, b):
    ga = a.grid if isinstance(a, Mask) else np.asarray(a)
    gb = b.grid if isinstance(b, Mask) else np.asarray(b)
    union = np.logical_or(ga > 0, gb > 0).sum()
    return float(np.logical_and(ga > 0, gb > 0).sum() / union) if union else 0.0


def _grid(m):
    return m.grid if isinstance(m, Mask) else np.asarray(m, dtype=np.float64)


def compose(x, p, m):
    """x (+) p = x * (1 - m) + p * m, differentiable w.r.t. x and p.

    x is (C, H, W) or (N, C, H, W), p is (C, H, W), m is an H x W mask.
    """
    g = _grid(m)
    x_shape = x.shape if hasattr(x, "shape") else np.shape(x)
    p_shape = p.shape if hasattr(p, "shape") else np.shape(p)
    if tuple(x_shape[-2:]) != g.shape or tuple(p_shape[-2:]) != g.shape or x_shape[-3] != p_shape[-3]:
        raise DimensionError(f"compose shape mismatch: x {x_shape}, p {p_shape}, m {g.shape}")
    if not isinstance(x, T.Tensor) and not isinstance(p, T.Tensor):
        return np.asarray(x, dtype=np.float64) * (1.0 - g) + np.asarray(p, dtype=np.float64) * g
    return T.as_tensor(x) * (1.0 - g) + T.as_tensor(p) * g


def mask_from_patch(p):
    """Support of a patch: 1 wherever any channel is non-zero."""
    arr = p.data if isinstance(p, T.Tensor) else np.asarray(p, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    return Mask(np.any(arr != 0, axis=0).astype(np.float64), "from_patch")


def save_mask(mask, path):
    path = Path(path)
    save_tensor(mask.grid, path)
    path.with_suffix(".json").write_text(json.dumps(
        {"kind": "mask", "region": mask.region, "cover_rate": mask.cover_rate}, indent=2))


def load_mask(path):
    path = Path(path)
    grid = load_tensor(path)
    meta = {}
    sidecar = path.with_suffix(".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
    if grid.ndim != 2:
        raise FormatError("mask tensor must be 2-D")
    return Mask(grid, meta.get("region", "learned"))
