"""Axis-aligned box algebra and the crop-window/patch coordinate transform.

Coordinates are continuous pixels: pixel (r, c) occupies the unit square
[c, c+1) x [r, r+1), so the tight box of a pixel set touches the outer
boundaries of its extreme pixels. All operations here are pure functions
over immutable values; the random stream passed to :func:`perturb` is the
only stateful argument.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .errors import DegenerateBoxError

# Sub-pixel residue below this (in output pixels) is float rounding, not padding.
_PAD_SNAP = 1e-6

# Edge-shift draws are truncated this many sigmas from the mean.
TRUNCATION_SIGMAS = 3.0

# Smallest side (pixels) a perturbed crop window may have.
MIN_PERTURBED_SIDE = 4.0


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box with strictly positive width and height.

    Corners are (x_min, y_min) top-left and (x_max, y_max) bottom-right in
    continuous pixel coordinates.
    """

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        for name in ("x_min", "y_min", "x_max", "y_max"):
            object.__setattr__(self, name, float(getattr(self, name)))
        values = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) for v in values):
            raise DegenerateBoxError(f"box has non-finite coordinates: {values}")
        if self.x_min >= self.x_max or self.y_min >= self.y_max:
            raise DegenerateBoxError(f"box has non-positive extent: {values}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def longest_side(self) -> float:
        return max(self.width, self.height)

    def as_tuple(self):
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def translated(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)


@dataclass(frozen=True)
class EdgeErrorModel:
    """Per-edge Gaussian error-ratio statistics of rough boxes.

    Vertical edges (left/right) move by a ratio of box width, horizontal
    edges (top/bottom) by a ratio of box height. ``scale`` multiplies every
    draw and is the knob for training with deliberately larger or smaller
    error than the fitted statistics.
    """

    mean_vertical: float = 0.0
    sigma_vertical: float = 0.0
    mean_horizontal: float = 0.0
    sigma_horizontal: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if self.sigma_vertical < 0 or self.sigma_horizontal < 0:
            raise ValueError("sigmas must be nonnegative")
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    def scaled(self, factor: float) -> "EdgeErrorModel":
        """Return a copy with ``scale`` multiplied by ``factor``."""
        return replace(self, scale=self.scale * factor)

    def zero_mean(self) -> "EdgeErrorModel":
        return replace(self, mean_vertical=0.0, mean_horizontal=0.0)

    def to_dict(self) -> dict:
        return {
            "mean_vertical": self.mean_vertical,
            "sigma_vertical": self.sigma_vertical,
            "mean_horizontal": self.mean_horizontal,
            "sigma_horizontal": self.sigma_horizontal,
            "scale": self.scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EdgeErrorModel":
        return cls(**{k: float(d[k]) for k in (
            "mean_vertical", "sigma_vertical", "mean_horizontal", "sigma_horizontal", "scale")})


# Zero-mean spread typical of detector pre-labels: std 0.08 of the width for
# vertical edges, 0.14 of the height for horizontal edges.
DEFAULT_ERROR_MODEL = EdgeErrorModel(0.0, 0.08, 0.0, 0.14, 1.0)


@dataclass(frozen=True)
class PatchTransform:
    """Invertible map between an image-space crop window and a square patch.

    The window is scaled by ``output_size / longest side`` and anchored
    top-left; the leftover strip on the right or bottom is padding.
    """

    window: BBox
    output_size: int
    scale: float
    pad_right: float
    pad_bottom: float

    @property
    def content_width(self) -> float:
        return self.output_size - self.pad_right

    @property
    def content_height(self) -> float:
        return self.output_size - self.pad_bottom


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 0 when disjoint."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union


def expand(box: BBox, ratio: float) -> BBox:
    """Move all four edges outward by ``ratio`` of the box's own extent.

    Left/right edges move by ratio * width each, top/bottom by
    ratio * height each, so the result is (1 + 2*ratio) times as large per
    axis. The result may exit the image on purpose; out-of-image area is
    filled with the pad value at crop time.
    """
    if ratio < 0:
        raise ValueError(f"expand ratio must be nonnegative, got {ratio}")
    dx = ratio * box.width
    dy = ratio * box.height
    return BBox(box.x_min - dx, box.y_min - dy, box.x_max + dx, box.y_max + dy)


def shift_edges(box: BBox, ratios) -> BBox:
    """Shift the four edges by signed ratios (left, right, top, bottom).

    Vertical-edge ratios are fractions of the width, horizontal-edge ratios
    fractions of the height; positive moves an edge toward +x/+y.
    """
    d_left, d_right, d_top, d_bottom = ratios
    w, h = box.width, box.height
    return BBox(
        box.x_min + d_left * w,
        box.y_min + d_top * h,
        box.x_max + d_right * w,
        box.y_max + d_bottom * h,
    )


def _draw_ratio(mean: float, sigma: float, rng) -> float:
    """One edge-shift ratio ~ N(mean, sigma) truncated at +/- 3 sigma."""
    if sigma == 0.0:
        return mean
    limit = TRUNCATION_SIGMAS * sigma
    # Rejection keeps the true truncated distribution (no atoms at the limit);
    # acceptance probability is ~0.997 so the bound is never hit in practice.
    for _ in range(64):
        d = rng.normal(0.0, sigma)
        if abs(d) <= limit:
            return mean + d
    return mean


def perturb(box: BBox, model: EdgeErrorModel, rng) -> BBox:
    """Independently shift each edge by a random ratio from ``model``.

    Draws are truncated at 3 sigma and the whole draw is rejected and
    redrawn (up to 16 attempts, then zero shift) if the shifted box would
    invert or either side would fall below 4 px.

    Args:
        box: the box to perturb.
        model: edge-error statistics; ``model.scale`` multiplies each draw.
        rng: ``numpy.random.Generator``-style stream, owned by the caller.
    """
    w, h = box.width, box.height
    for _ in range(16):
        d_left = _draw_ratio(model.mean_vertical, model.sigma_vertical, rng) * model.scale
        d_right = _draw_ratio(model.mean_vertical, model.sigma_vertical, rng) * model.scale
        d_top = _draw_ratio(model.mean_horizontal, model.sigma_horizontal, rng) * model.scale
        d_bottom = _draw_ratio(model.mean_horizontal, model.sigma_horizontal, rng) * model.scale
        x_min = box.x_min + d_left * w
        x_max = box.x_max + d_right * w
        y_min = box.y_min + d_top * h
        y_max = box.y_max + d_bottom * h
        if x_max - x_min >= MIN_PERTURBED_SIDE and y_max - y_min >= MIN_PERTURBED_SIDE:
            return BBox(x_min, y_min, x_max, y_max)
    return box


def clip(box: BBox, image_w: float, image_h: float) -> BBox:
    """Intersect a box with the image rectangle [0, w] x [0, h]."""
    if image_w <= 0 or image_h <= 0:
        raise ValueError("image dimensions must be positive")
    x_min = max(box.x_min, 0.0)
    y_min = max(box.y_min, 0.0)
    x_max = min(box.x_max, float(image_w))
    y_max = min(box.y_max, float(image_h))
    if x_min >= x_max or y_min >= y_max:
        raise DegenerateBoxError(
            f"box {box.as_tuple()} lies outside a {image_w}x{image_h} image")
    return BBox(x_min, y_min, x_max, y_max)


def make_patch_transform(window: BBox, output_size: int) -> PatchTransform:
    """Letterbox transform: scale by the longest side, anchor top-left.

    The shorter axis leaves a padding strip on the right or bottom; a square
    window pads nothing.
    """
    if output_size < 8:
        raise ValueError(f"output_size must be >= 8, got {output_size}")
    w, h = window.width, window.height
    scale = output_size / max(w, h)
    if w >= h:
        pad_right = 0.0
        pad_bottom = output_size - h * scale
    else:
        pad_right = output_size - w * scale
        pad_bottom = 0.0
    if pad_right < _PAD_SNAP:
        pad_right = 0.0
    if pad_bottom < _PAD_SNAP:
        pad_bottom = 0.0
    return PatchTransform(window, output_size, scale, pad_right, pad_bottom)


def to_patch_coords(t: PatchTransform, box: BBox):
    """Map a box into the patch's normalized coordinates.

    Each value is (coordinate - window origin) * scale / output_size. Values
    may lie outside [0, 1] when the box exceeds the window; that is the
    regression target convention, not an error.
    """
    s = t.scale / t.output_size
    return (
        (box.x_min - t.window.x_min) * s,
        (box.y_min - t.window.y_min) * s,
        (box.x_max - t.window.x_min) * s,
        (box.y_max - t.window.y_min) * s,
    )


def from_patch_coords(t: PatchTransform, coords) -> BBox:
    """Exact inverse of :func:`to_patch_coords`.

    Raises:
        DegenerateBoxError: if the unmapped values do not form a valid box.
    """
    x_min, y_min, x_max, y_max = coords
    s = t.output_size / t.scale
    return BBox(
        t.window.x_min + float(x_min) * s,
        t.window.y_min + float(y_min) * s,
        t.window.x_min + float(x_max) * s,
        t.window.y_min + float(y_max) * s,
    )


def edge_errors(pred: BBox, truth: BBox):
    """Absolute per-edge errors as (left, right, top, bottom) pixels."""
    return (
        abs(pred.x_min - truth.x_min),
        abs(pred.x_max - truth.x_max),
        abs(pred.y_min - truth.y_min),
        abs(pred.y_max - truth.y_max),
    )
