"""Label ingestion, pre-label matching, error statistics, and patch sampling.

Label files are UTF-8 JSON lines, one object per line:

    {"image": str, "class": str, "box": [x_min, y_min, x_max, y_max],
     "source": str, "visible": bool}

Coordinates are continuous pixels as defined in :mod:`tightbox.geometry`.
Instance masks are single-channel 16-bit PNG id maps (0 = background,
class*1000 + index ids accepted); images are 8-bit RGB PNG/JPEG.
"""

from __future__ import annotations

import json
import math
import os
from collections import OrderedDict
from collections.abc import Mapping
from dataclasses import dataclass, field

import cv2
import numpy as np
from scipy import ndimage

from .errors import DegenerateBoxError, InsufficientDataError, LabelParseError
from .geometry import (
    BBox,
    DEFAULT_ERROR_MODEL,
    EdgeErrorModel,
    PatchTransform,
    expand,
    iou,
    make_patch_transform,
    perturb,
    to_patch_coords,
)

SOURCES = ("ground_truth", "detector", "tracker", "human", "model")

# Sources whose box counts as ground truth when (de)serializing.
TRUTH_SOURCES = frozenset({"ground_truth", "human"})

_4CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=np.uint8)


@dataclass
class LabeledInstance:
    """One labeled object: a ground-truth box, a pre-label box, or both."""

    image_id: str
    class_tag: str = "object"
    source: str = "ground_truth"
    true_box: BBox | None = None
    prelabel_box: BBox | None = None
    visible: bool = True

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}; expected one of {SOURCES}")
        if self.true_box is None and self.prelabel_box is None:
            raise ValueError("instance needs at least one of true_box/prelabel_box")


@dataclass(frozen=True)
class SampleConfig:
    """How crops are taken: expansion, error model, patch size, padding."""

    expand_ratio: float = 0.15
    error_model: EdgeErrorModel = DEFAULT_ERROR_MODEL
    patch_size: int = 256
    pad_value: float = -1.0  # in normalized [-1, 1] units; raw 0 maps to -1

    def __post_init__(self):
        if self.expand_ratio < 0:
            raise ValueError("expand_ratio must be nonnegative")
        if self.patch_size < 8:
            raise ValueError("patch_size must be >= 8")
        if not -1.0 <= self.pad_value <= 1.0:
            raise ValueError("pad_value must be within [-1, 1]")

    def to_dict(self) -> dict:
        return {
            "expand_ratio": self.expand_ratio,
            "error_model": self.error_model.to_dict(),
            "patch_size": self.patch_size,
            "pad_value": self.pad_value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SampleConfig":
        kwargs = dict(d)
        if "error_model" in kwargs:
            kwargs["error_model"] = EdgeErrorModel.from_dict(kwargs["error_model"])
        return cls(**kwargs)


@dataclass
class ImagePatch:
    """A letterboxed, normalized network input and the transform behind it."""

    pixels: np.ndarray  # patch_size x patch_size x 3, float32 in [-1, 1]
    transform: PatchTransform
    instance: LabeledInstance | None = None


def mask_to_instances(mask: np.ndarray, min_pixels: int = 50):
    """Tight boxes of instance-id components in an id mask.

    For each nonzero id, 4-connected components with at least ``min_pixels``
    pixels survive; the surviving pixels of one id form one instance whose
    box touches its outermost pixels. Returns (id, box) pairs sorted by id.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    out = []
    for inst_id in np.unique(mask):
        if inst_id <= 0:
            continue
        component_map, n_components = ndimage.label(mask == inst_id, structure=_4CONNECTED)
        if n_components == 0:
            continue
        counts = np.bincount(component_map.ravel())
        keep = np.flatnonzero(counts >= min_pixels)
        keep = keep[keep != 0]
        if keep.size == 0:
            continue
        ys, xs = np.nonzero(np.isin(component_map, keep))
        out.append((int(inst_id), BBox(
            float(xs.min()), float(ys.min()),
            float(xs.max()) + 1.0, float(ys.max()) + 1.0)))
    return out


def match_prelabels(gt, pre, iou_threshold: float = 0.5):
    """Greedy one-to-one matching of pre-labels to ground-truth boxes.

    Pairs are taken in descending IoU order; pairs below the threshold are
    dropped. Returns (gt index, pre index) pairs.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    ranked = sorted(
        ((iou(g, p), gi, pi) for gi, g in enumerate(gt) for pi, p in enumerate(pre)),
        key=lambda item: (-item[0], item[1], item[2]))
    gt_used, pre_used = set(), set()
    pairs = []
    for score, gi, pi in ranked:
        if score < iou_threshold:
            break
        if gi in gt_used or pi in pre_used:
            continue
        gt_used.add(gi)
        pre_used.add(pi)
        pairs.append((gi, pi))
    return pairs


def fit_error_model(pairs, force_zero_mean: bool = False) -> EdgeErrorModel:
    """Fit per-edge Gaussian error ratios from (true_box, prelabel_box) pairs.

    Signed ratios are (pre edge - true edge) / true width for left/right and
    / true height for top/bottom; left+right pool into the vertical group,
    top+bottom into the horizontal one. Mean and sigma are the pooled sample
    mean and maximum-likelihood standard deviation.
    """
    if len(pairs) < 2:
        raise InsufficientDataError(f"need at least 2 pairs, got {len(pairs)}")
    vertical, horizontal = [], []
    for true_box, pre_box in pairs:
        w, h = true_box.width, true_box.height
        vertical.append((pre_box.x_min - true_box.x_min) / w)
        vertical.append((pre_box.x_max - true_box.x_max) / w)
        horizontal.append((pre_box.y_min - true_box.y_min) / h)
        horizontal.append((pre_box.y_max - true_box.y_max) / h)
    vertical = np.asarray(vertical)
    horizontal = np.asarray(horizontal)
    model = EdgeErrorModel(
        mean_vertical=float(vertical.mean()),
        sigma_vertical=float(vertical.std()),
        mean_horizontal=float(horizontal.mean()),
        sigma_horizontal=float(horizontal.std()),
        scale=1.0,
    )
    return model.zero_mean() if force_zero_mean else model


def letterbox_crop(image: np.ndarray, transform: PatchTransform, pad_value: float = -1.0) -> np.ndarray:
    """Crop the transform's window, letterbox it, and normalize to [-1, 1].

    Out-of-image area and the letterbox strip are filled with ``pad_value``.
    The warp samples at pixel centers so the continuous coordinate map and
    the pixel content agree to sub-pixel precision.
    """
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {img.shape}")
    img = np.ascontiguousarray(img, dtype=np.float32)
    size = transform.output_size
    pad_raw = (pad_value + 1.0) * 127.5
    s = transform.scale
    # cv2 treats integer indices as pixel centers; our continuous convention
    # puts centers at index + 0.5, hence the half-pixel terms.
    matrix = np.array([
        [s, 0.0, s * (0.5 - transform.window.x_min) - 0.5],
        [0.0, s, s * (0.5 - transform.window.y_min) - 0.5],
    ])
    raw = cv2.warpAffine(
        img, matrix, (size, size),
        flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_CONSTANT,
        borderValue=(pad_raw, pad_raw, pad_raw),
    )
    # Pixels whose centers fall past the scaled content belong to the
    # letterbox strip even when the source image extends beyond the window.
    col0 = min(size, max(0, math.ceil(transform.content_width - 0.5)))
    row0 = min(size, max(0, math.ceil(transform.content_height - 0.5)))
    raw[:, col0:] = pad_raw
    raw[row0:, :] = pad_raw
    return raw / 127.5 - 1.0


def sample_training_patch(image, instance: LabeledInstance, cfg: SampleConfig, rng):
    """One freshly perturbed training patch and its regression target.

    The crop window is the ground-truth box expanded by ``cfg.expand_ratio``
    and then randomly shifted per ``cfg.error_model``; the target is the
    true box in the patch's normalized coordinates (values may exceed
    [0, 1] when a shift cuts into the object).
    """
    if instance.true_box is None:
        raise ValueError(f"instance {instance.image_id} has no true_box")
    window = perturb(expand(instance.true_box, cfg.expand_ratio), cfg.error_model, rng)
    transform = make_patch_transform(window, cfg.patch_size)
    pixels = letterbox_crop(image, transform, cfg.pad_value)
    targets = np.asarray(to_patch_coords(transform, instance.true_box), dtype=np.float64)
    return ImagePatch(pixels, transform, instance), targets


def make_inference_patch(image, rough_box: BBox, cfg: SampleConfig) -> ImagePatch:
    """Deterministic inference patch: expand the rough box, crop, letterbox."""
    window = expand(rough_box, cfg.expand_ratio)
    transform = make_patch_transform(window, cfg.patch_size)
    return ImagePatch(letterbox_crop(image, transform, cfg.pad_value), transform, None)


def _instance_from_record(record, lineno: int) -> LabeledInstance:
    if not isinstance(record, dict):
        raise LabelParseError(f"line {lineno}: expected a JSON object")
    for key in ("image", "class", "box", "source"):
        if key not in record:
            raise LabelParseError(f"line {lineno}: missing '{key}'")
    raw = record["box"]
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        raise LabelParseError(f"line {lineno}: 'box' must be a 4-element array")
    try:
        box = BBox(*(float(v) for v in raw))
    except (TypeError, ValueError) as exc:
        raise LabelParseError(f"line {lineno}: bad box {raw!r} ({exc})") from exc
    source = record["source"]
    if source not in SOURCES:
        raise LabelParseError(f"line {lineno}: unknown source {source!r}")
    truth = source in TRUTH_SOURCES
    return LabeledInstance(
        image_id=str(record["image"]),
        class_tag=str(record["class"]),
        source=source,
        true_box=box if truth else None,
        prelabel_box=None if truth else box,
        visible=bool(record.get("visible", True)),
    )


def load_labels(path) -> list:
    """Read a JSON-lines label file; blank lines are ignored."""
    instances = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise LabelParseError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            instances.append(_instance_from_record(record, lineno))
    return instances


def save_labels(path, instances) -> None:
    """Write instances as JSON lines; inverse of :func:`load_labels`.

    Each instance persists the box its source implies (ground truth for
    truth-bearing sources, the pre-label otherwise).
    """
    lines = []
    for n, inst in enumerate(instances):
        box = inst.true_box if inst.source in TRUTH_SOURCES else inst.prelabel_box
        if box is None:
            raise ValueError(
                f"instance {n} (source {inst.source!r}) is missing the box its source implies")
        lines.append(json.dumps({
            "image": inst.image_id,
            "class": inst.class_tag,
            "box": list(box.as_tuple()),
            "source": inst.source,
            "visible": inst.visible,
        }))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def load_image(path) -> np.ndarray:
    """8-bit RGB image from PNG/JPEG."""
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise FileNotFoundError(f"cannot read image {path}")
    return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)


def save_image(path, image: np.ndarray) -> None:
    ok = cv2.imwrite(str(path), cv2.cvtColor(np.asarray(image, dtype=np.uint8), cv2.COLOR_RGB2BGR))
    if not ok:
        raise OSError(f"cannot write image {path}")


def load_mask(path) -> np.ndarray:
    """Instance-id mask from a single-channel (typically 16-bit) PNG."""
    mask = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if mask is None:
        raise FileNotFoundError(f"cannot read mask {path}")
    if mask.ndim == 3:
        if not (mask[..., 0] == mask[..., 1]).all() or not (mask[..., 0] == mask[..., 2]).all():
            raise ValueError(f"mask {path} has distinct channels; expected an id map")
        mask = mask[..., 0]
    return mask.astype(np.int64)


def save_mask(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.min() < 0 or mask.max() > np.iinfo(np.uint16).max:
        raise ValueError("mask ids must fit in uint16")
    if not cv2.imwrite(str(path), mask.astype(np.uint16)):
        raise OSError(f"cannot write mask {path}")


IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")


class DirectoryImages(Mapping):
    """Lazy id -> RGB array mapping over an image directory tree.

    Ids are root-relative POSIX paths. A bounded cache keeps recently used
    images decoded; loading is read-only so concurrent readers are safe.
    """

    def __init__(self, root, cache_size: int = 1024):
        self.root = str(root)
        if not os.path.isdir(self.root):
            raise NotADirectoryError(f"image root {self.root!r} is not a directory")
        self._cache_size = cache_size
        self._cache = OrderedDict()
        self._ids = self._scan()
        self._id_set = frozenset(self._ids)

    def _scan(self):
        found = []
        for dirpath, _dirnames, filenames in os.walk(self.root):
            for name in filenames:
                if os.path.splitext(name)[1].lower() in IMAGE_EXTENSIONS:
                    rel = os.path.relpath(os.path.join(dirpath, name), self.root)
                    found.append(rel.replace(os.sep, "/"))
        return sorted(found)

    def __len__(self):
        return len(self._ids)

    def __iter__(self):
        return iter(self._ids)

    def __contains__(self, image_id):
        return image_id in self._id_set

    def path_for(self, image_id) -> str:
        if image_id not in self._id_set:
            raise KeyError(image_id)
        return os.path.join(self.root, image_id)

    def __getitem__(self, image_id):
        if image_id in self._cache:
            self._cache.move_to_end(image_id)
            return self._cache[image_id]
        path = os.path.join(self.root, image_id)
        if not os.path.isfile(path):
            raise KeyError(image_id)
        image = load_image(path)
        self._cache[image_id] = image
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return image
