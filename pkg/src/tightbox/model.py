"""The refinement network: a feature extractor plus a three-layer coordinate head.

The head's final layer is linear (no squashing): targets may lie outside
[0, 1] when the crop window cuts into the object, so a bounded activation
would make them unreachable. Clamping to the image happens only at the very
end of :func:`refine`.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .dataset import SampleConfig, make_inference_patch
from .errors import DegenerateBoxError, ShapeMismatchError, UnsupportedBackboneError
from .geometry import BBox, EdgeErrorModel, clip, from_patch_coords

BACKBONES = ("tiny", "vgg16", "resnet50", "mobilenet")

# Feature maps are average-pooled to this grid and flattened before the head;
# a 1x1 grid would be a plain global average pool, but coordinate regression
# needs the spatial layout, so a small grid is kept.
FEATURE_GRID = 4

_HEAD_WIDTHS = {"tiny": (256, 64, 4), "vgg16": (512, 128, 4),
                "resnet50": (512, 128, 4), "mobilenet": (512, 128, 4)}

_TINY_WIDTHS = (16, 32, 64, 128, 128)


@dataclass(frozen=True)
class LossConfig:
    """Huber loss on normalized-coordinate residuals."""

    huber_delta: float = 1.0

    def __post_init__(self):
        if not self.huber_delta > 0:
            raise ValueError("huber_delta must be positive")


def _tiny_backbone():
    layers = []
    in_ch = 3
    for out_ch in _TINY_WIDTHS:
        # stride-2 3x3 conv fuses the convolution with the 2x downsample
        layers += [nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1), nn.ReLU(inplace=True)]
        in_ch = out_ch
    return nn.Sequential(*layers)


def _vgg16_backbone():
    config = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M",
              512, 512, 512, "M", 512, 512, 512, "M")
    layers = []
    in_ch = 3
    for item in config:
        if item == "M":
            layers.append(nn.MaxPool2d(2, 2))
        else:
            layers += [nn.Conv2d(in_ch, item, 3, padding=1), nn.ReLU(inplace=True)]
            in_ch = item
    return nn.Sequential(*layers)


class _Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, in_ch, width, stride=1):
        super().__init__()
        out_ch = width * self.expansion
        self.conv1 = nn.Conv2d(in_ch, width, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, width, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(width)
        self.conv3 = nn.Conv2d(width, out_ch, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch))
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + self.shortcut(x))


def _resnet50_backbone():
    stem = [nn.Conv2d(3, 64, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(64), nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1)]
    blocks = []
    in_ch = 64
    for width, count, stride in ((64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)):
        for i in range(count):
            blocks.append(_Bottleneck(in_ch, width, stride if i == 0 else 1))
            in_ch = width * _Bottleneck.expansion
    return nn.Sequential(*stem, *blocks)


def _mobilenet_backbone():
    def conv_bn(in_ch, out_ch, stride):
        return [nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False),
                nn.BatchNorm2d(out_ch), nn.ReLU(inplace=True)]

    def dw_separable(in_ch, out_ch, stride):
        return [nn.Conv2d(in_ch, in_ch, 3, stride=stride, padding=1, groups=in_ch, bias=False),
                nn.BatchNorm2d(in_ch), nn.ReLU(inplace=True),
                nn.Conv2d(in_ch, out_ch, 1, bias=False),
                nn.BatchNorm2d(out_ch), nn.ReLU(inplace=True)]

    layers = conv_bn(3, 32, 2)
    plan = ((32, 64, 1), (64, 128, 2), (128, 128, 1), (128, 256, 2), (256, 256, 1),
            (256, 512, 2), (512, 512, 1), (512, 512, 1), (512, 512, 1), (512, 512, 1),
            (512, 512, 1), (512, 1024, 2), (1024, 1024, 1))
    for in_ch, out_ch, stride in plan:
        layers += dw_separable(in_ch, out_ch, stride)
    return nn.Sequential(*layers)


_BACKBONE_BUILDERS = {
    "tiny": _tiny_backbone,
    "vgg16": _vgg16_backbone,
    "resnet50": _resnet50_backbone,
    "mobilenet": _mobilenet_backbone,
}


class CoordinateRegressor(nn.Module):
    """Feature extractor followed by three fully connected layers.

    Output is four patch-normalized coordinates (x_min, y_min, x_max, y_max);
    ordering is not guaranteed by the raw head and is enforced downstream in
    :func:`refine`.
    """

    def __init__(self, backbone_kind: str, input_size: int = 256, head_widths=None):
        super().__init__()
        if backbone_kind not in _BACKBONE_BUILDERS:
            raise UnsupportedBackboneError(
                f"unknown backbone {backbone_kind!r}; expected one of {BACKBONES}")
        if input_size < 8:
            raise ValueError("input_size must be >= 8")
        self.backbone_kind = backbone_kind
        self.input_size = int(input_size)
        self.head_widths = tuple(head_widths or _HEAD_WIDTHS[backbone_kind])
        if self.head_widths[-1] != 4:
            raise ValueError("head must end in 4 outputs")
        self.features = _BACKBONE_BUILDERS[backbone_kind]()
        self.pool = nn.AdaptiveAvgPool2d(FEATURE_GRID)
        with torch.no_grad():
            probe = self.features(torch.zeros(1, 3, self.input_size, self.input_size))
        feature_dim = probe.shape[1] * FEATURE_GRID * FEATURE_GRID
        head = []
        widths = (feature_dim,) + self.head_widths
        for i in range(len(widths) - 1):
            head.append(nn.Linear(widths[i], widths[i + 1]))
            if i < len(widths) - 2:
                head.append(nn.ReLU(inplace=True))
        self.head = nn.Sequential(*head)

    def forward(self, x):
        feats = self.pool(self.features(x))
        return self.head(torch.flatten(feats, 1))

    def predict_coords(self, patches) -> np.ndarray:
        """Coordinates for a batch of normalized patches, without gradients.

        Accepts (B, S, S, 3) or a single (S, S, 3) array with S equal to the
        model's input size; returns float64 (B, 4).
        """
        arr = np.asarray(patches, dtype=np.float32)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4 or arr.shape[3] != 3:
            raise ShapeMismatchError(f"expected (B, S, S, 3) patches, got {arr.shape}")
        if arr.shape[1] != self.input_size or arr.shape[2] != self.input_size:
            raise ShapeMismatchError(
                f"patch size {arr.shape[1]}x{arr.shape[2]} does not match "
                f"model input {self.input_size}")
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                x = torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2)
                out = self(x)
        finally:
            self.train(was_training)
        return out.numpy().astype(np.float64)


def build(backbone_kind: str, input_size: int = 256, seed: int = 0) -> CoordinateRegressor:
    """Deterministically initialized model; same seed, same parameters."""
    torch.manual_seed(seed)
    model = CoordinateRegressor(backbone_kind, input_size)
    model.eval()
    return model


def huber_loss(pred, target, cfg: LossConfig = LossConfig()):
    """Mean Huber loss over all coordinates.

    Per residual r: 0.5 r^2 when |r| <= delta, else delta (|r| - 0.5 delta).
    Returns a float for array inputs, a differentiable scalar tensor when
    either input is a torch tensor.
    """
    tensor_in = isinstance(pred, torch.Tensor) or isinstance(target, torch.Tensor)
    p = pred if isinstance(pred, torch.Tensor) else torch.as_tensor(np.asarray(pred, dtype=np.float64))
    t = target if isinstance(target, torch.Tensor) else torch.as_tensor(np.asarray(target, dtype=np.float64))
    if p.shape != t.shape:
        raise ShapeMismatchError(f"pred shape {tuple(p.shape)} != target shape {tuple(t.shape)}")
    delta = cfg.huber_delta
    r = (p - t.to(p.dtype)).abs()
    loss = torch.where(r <= delta, 0.5 * r * r, delta * (r - 0.5 * delta)).mean()
    return loss if tensor_in else float(loss)


def refine(model, image, rough_box: BBox, cfg: SampleConfig,
           image_w=None, image_h=None) -> BBox:
    """Tighten a rough box: crop, predict, unmap, clamp to the image.

    Inverted coordinate pairs are fixed by swapping (a refinement tool must
    always return a box); the result is clipped to the image.

    Raises:
        DegenerateBoxError: if the unmapped box is below 1 px on either side
            or lies entirely outside the image.
    """
    if image_w is None:
        image_w = image.shape[1]
    if image_h is None:
        image_h = image.shape[0]
    patch = make_inference_patch(image, rough_box, cfg)
    coords = model.predict_coords(patch.pixels[None])[0]
    box = coords_to_box(patch.transform, coords)
    return clip(box, image_w, image_h)


def coords_to_box(transform, coords) -> BBox:
    """Order-fix raw head output and unmap it; shared by refine paths."""
    x_min, y_min, x_max, y_max = (float(v) for v in coords)
    if x_max < x_min:
        x_min, x_max = x_max, x_min
    if y_max < y_min:
        y_min, y_max = y_max, y_min
    box = from_patch_coords(transform, (x_min, y_min, x_max, y_max))
    if box.width < 1.0 or box.height < 1.0:
        raise DegenerateBoxError(
            f"refined box collapsed to {box.width:.3f}x{box.height:.3f} px")
    return box


def save_checkpoint(model: CoordinateRegressor, sample_cfg: SampleConfig, path,
                    init: str = "random") -> str:
    """Write the weight blob plus its JSON sidecar; returns the sidecar path.

    The sidecar fully determines refine behavior: backbone, input size, head
    widths, expansion ratio, error model, and pad value.
    """
    path = str(path)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    torch.save({"state_dict": model.state_dict()}, path)
    sidecar = sidecar_path(path)
    meta = {
        "backbone": model.backbone_kind,
        "input_size": model.input_size,
        "head": list(model.head_widths),
        "expand_ratio": sample_cfg.expand_ratio,
        "error_model": sample_cfg.error_model.to_dict(),
        "pad_value": sample_cfg.pad_value,
        "init": init,
        "format_version": 1,
    }
    with open(sidecar, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return sidecar


def sidecar_path(checkpoint_path) -> str:
    return os.path.splitext(str(checkpoint_path))[0] + ".json"


def load_checkpoint(path):
    """Load (model, sample config, sidecar dict) from a checkpoint path."""
    path = str(path)
    with open(sidecar_path(path), encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("format_version") != 1:
        raise ValueError(f"unsupported checkpoint format_version {meta.get('format_version')!r}")
    model = CoordinateRegressor(meta["backbone"], meta["input_size"], tuple(meta["head"]))
    blob = torch.load(path, map_location="cpu", weights_only=True)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    cfg = SampleConfig(
        expand_ratio=float(meta["expand_ratio"]),
        error_model=EdgeErrorModel.from_dict(meta["error_model"]),
        patch_size=int(meta["input_size"]),
        pad_value=float(meta.get("pad_value", -1.0)),
    )
    return model, cfg, meta
