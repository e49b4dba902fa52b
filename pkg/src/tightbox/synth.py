"""Synthetic single-object scenes with exactly known tight boxes.

Shapes are rasterized by evaluating an implicit membership test at pixel
centers (no anti-aliasing), so the tight box of the rendered pixel set is
exact and matches the mask-extraction path bit for bit.
"""

from __future__ import annotations

import math

import numpy as np

from .dataset import LabeledInstance
from .geometry import BBox

SHAPE_KINDS = ("ellipse", "capsule", "blob")
BACKGROUNDS = ("flat", "noise", "texture")

_NOISE_STD = 11.0
_MIN_LUMA_GAP = 70.0


def _pixel_centers(height: int, width: int):
    ys, xs = np.mgrid[0:height, 0:width]
    return xs + 0.5, ys + 0.5


def ellipse_mask(shape_hw, center, semi_axes, angle: float = 0.0) -> np.ndarray:
    """Filled rotated ellipse; membership tested at pixel centers."""
    xs, ys = _pixel_centers(*shape_hw)
    dx, dy = xs - center[0], ys - center[1]
    c, s = math.cos(angle), math.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    a, b = semi_axes
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def capsule_mask(shape_hw, p0, p1, radius: float) -> np.ndarray:
    """Filled capsule: all pixels within ``radius`` of the segment p0-p1."""
    xs, ys = _pixel_centers(*shape_hw)
    px, py = p1[0] - p0[0], p1[1] - p0[1]
    norm2 = px * px + py * py
    if norm2 == 0:
        t = np.zeros_like(xs)
    else:
        t = np.clip(((xs - p0[0]) * px + (ys - p0[1]) * py) / norm2, 0.0, 1.0)
    dx = xs - (p0[0] + t * px)
    dy = ys - (p0[1] + t * py)
    return dx * dx + dy * dy <= radius * radius


def blob_mask(shape_hw, center, semi_axes, angle: float, harmonics) -> np.ndarray:
    """Star-convex blob: an ellipse whose radius is modulated by harmonics.

    ``harmonics`` is a list of (order, amplitude, phase); the summed
    amplitude must stay below 1 so the radius remains positive.
    """
    xs, ys = _pixel_centers(*shape_hw)
    dx, dy = xs - center[0], ys - center[1]
    c, s = math.cos(angle), math.sin(angle)
    u = (c * dx + s * dy) / semi_axes[0]
    v = (-s * dx + c * dy) / semi_axes[1]
    rho = np.hypot(u, v)
    theta = np.arctan2(v, u)
    r = np.ones_like(rho)
    for order, amplitude, phase in harmonics:
        r += amplitude * np.cos(order * theta + phase)
    return rho <= r


def tight_box_of_mask(mask: np.ndarray) -> BBox | None:
    """Tight box of the true pixels of a binary mask; None when empty."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    return BBox(float(xs.min()), float(ys.min()), float(xs.max()) + 1.0, float(ys.max()) + 1.0)


def _luma(color):
    return 0.299 * color[0] + 0.587 * color[1] + 0.114 * color[2]


def _pick_colors(rng):
    bg = rng.uniform(0.0, 255.0, size=3)
    for _ in range(64):
        fg = rng.uniform(0.0, 255.0, size=3)
        if abs(_luma(fg) - _luma(bg)) >= _MIN_LUMA_GAP:
            return bg, fg
    # Extremely unlucky stream: force the gap.
    fg = np.clip(bg + (255.0 if _luma(bg) < 128 else -255.0), 0.0, 255.0)
    return bg, fg


def _background_field(rng, height, width, kind, base):
    field = np.broadcast_to(base, (height, width, 3)).astype(np.float64).copy()
    if kind == "texture":
        xs, ys = _pixel_centers(height, width)
        for channel in range(3):
            fx, fy = rng.uniform(0.5, 2.5, size=2)
            phase = rng.uniform(0.0, 2 * math.pi)
            amp = rng.uniform(8.0, 25.0)
            field[..., channel] += amp * np.sin(
                2 * math.pi * (fx * xs / width + fy * ys / height) + phase)
    return field


def _render_scene(rng, image_size, background):
    """One image, its silhouette mask, and the shape kind."""
    size = int(image_size)
    kind = SHAPE_KINDS[rng.integers(len(SHAPE_KINDS))]
    box_h = rng.uniform(0.30, 0.70) * size
    box_w = rng.uniform(0.30, 0.85) * box_h  # biased tall
    angle = rng.uniform(-0.35, 0.35)

    # Bound the extent after rotation/modulation so the object stays fully
    # inside the frame with a small margin.
    a, b = box_w / 2.0, box_h / 2.0
    c, s = abs(math.cos(angle)), abs(math.sin(angle))
    extent_x = math.hypot(a * c, b * s)
    extent_y = math.hypot(a * s, b * c)
    harmonics = []
    if kind == "blob":
        orders = (2, 3, 4)
        amps = rng.uniform(0.02, 0.11, size=len(orders))
        phases = rng.uniform(0.0, 2 * math.pi, size=len(orders))
        harmonics = list(zip(orders, amps, phases))
        bound = 1.0 + float(amps.sum())
        extent_x *= bound
        extent_y *= bound
    margin = 3.0
    cx = rng.uniform(margin + extent_x, size - margin - extent_x)
    cy = rng.uniform(margin + extent_y, size - margin - extent_y)

    if kind == "ellipse":
        mask = ellipse_mask((size, size), (cx, cy), (a, b), angle)
    elif kind == "capsule":
        radius = min(a, b * 0.45)
        half = b - radius
        dx, dy = -math.sin(angle) * half, math.cos(angle) * half
        mask = capsule_mask((size, size), (cx - dx, cy - dy), (cx + dx, cy + dy), radius)
    else:
        mask = blob_mask((size, size), (cx, cy), (a, b), angle, harmonics)

    bg_color, fg_color = _pick_colors(rng)
    image = _background_field(rng, size, size, background, bg_color)
    image[mask] = fg_color
    if background == "noise":
        image += rng.normal(0.0, _NOISE_STD, size=image.shape)
    return np.clip(image, 0.0, 255.0).astype(np.uint8), mask, kind


def synth_generate(n: int, seed, image_size: int = 144, background: str = "noise"):
    """Generate ``n`` single-object scenes with exact ground-truth boxes.

    Returns a list of (image, instance) where each instance's true box is
    the tight box of the rendered silhouette pixel set.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if background not in BACKGROUNDS:
        raise ValueError(f"background must be one of {BACKGROUNDS}")
    rng = np.random.default_rng(seed)
    out = []
    for index in range(n):
        image, mask, kind = _render_scene(rng, image_size, background)
        true_box = tight_box_of_mask(mask)
        instance = LabeledInstance(
            image_id=f"synth_{index:06d}.png",
            class_tag=kind,
            source="ground_truth",
            true_box=true_box,
        )
        out.append((image, instance))
    return out


def synth_sequence(n_frames: int, seed, image_size: int = 144, background: str = "noise"):
    """An accelerating single-object sequence with exact per-frame boxes.

    The object's vertical position and size follow quadratic trajectories,
    so linear interpolation between distant frames is visibly wrong while
    the object itself stays fully inside every frame.
    """
    if n_frames < 2:
        raise ValueError("n_frames must be >= 2")
    if background not in BACKGROUNDS:
        raise ValueError(f"background must be one of {BACKGROUNDS}")
    rng = np.random.default_rng(seed)
    size = int(image_size)
    t_max = n_frames - 1
    margin = 4.0
    ts = np.arange(n_frames, dtype=np.float64)

    for _ in range(64):
        b0 = rng.uniform(0.13, 0.18) * size
        aspect = rng.uniform(0.42, 0.62)
        growth = rng.uniform(0.0015, 0.0030)    # quadratic size factor
        accel = rng.uniform(0.30, 0.50)         # px / frame^2, vertical
        vx = rng.uniform(-1.2, 1.2)
        # initial velocity opposes the acceleration, so the trajectory arcs
        # within the frame instead of running off one side
        vy = -accel * t_max * rng.uniform(0.40, 0.60)
        semi_y = b0 * (1.0 + growth * ts * ts)
        semi_x = aspect * semi_y
        rel_y = vy * ts + accel * ts * ts
        rel_x = vx * ts
        top, bottom = (rel_y - semi_y).min(), (rel_y + semi_y).max()
        left, right = (rel_x - semi_x).min(), (rel_x + semi_x).max()
        if bottom - top <= size - 2 * margin and right - left <= size - 2 * margin:
            break
    else:
        raise ValueError(f"no feasible trajectory for {n_frames} frames in {size} px")
    cy0 = rng.uniform(margin - top, size - margin - bottom)
    cx0 = rng.uniform(margin - left, size - margin - right)

    bg_color, fg_color = _pick_colors(rng)
    frames = []
    for t in range(n_frames):
        mask = ellipse_mask((size, size), (cx0 + rel_x[t], cy0 + rel_y[t]),
                            (semi_x[t], semi_y[t]), 0.0)
        image = _background_field(rng, size, size, background, bg_color)
        image[mask] = fg_color
        if background == "noise":
            image += rng.normal(0.0, _NOISE_STD, size=image.shape)
        image = np.clip(image, 0.0, 255.0).astype(np.uint8)
        instance = LabeledInstance(
            image_id=f"frame_{t:04d}.png",
            class_tag="ellipse",
            source="ground_truth",
            true_box=tight_box_of_mask(mask),
        )
        frames.append((image, instance))
    return frames
