"""Training loops for the coordinate regressor.

Patches are generated on the fly: every epoch re-perturbs each instance's
crop window, so the network never sees the same framing twice. Sampling is
keyed by (seed, epoch, instance index), which makes runs reproducible and
independent of batch composition or worker count.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import model as model_mod
from .dataset import SampleConfig, sample_training_patch
from .errors import EmptyDatasetError, SizeMismatchError, TightboxError
from .evaluation import mae_le

OPTIMIZERS = ("adam", "sgd")

_RESAMPLE_ATTEMPTS = 16


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    seed: int = 0
    sample: SampleConfig = field(default_factory=SampleConfig)
    loss: model_mod.LossConfig = field(default_factory=model_mod.LossConfig)
    data_fraction: float = 1.0
    error_scale: float = 1.0
    backbone: str = "tiny"
    val_fraction: float = 0.1
    record_windows: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if not 0 < self.data_fraction <= 1:
            raise ValueError("data_fraction must be in (0, 1]")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must be in [0, 1)")
        if self.error_scale < 0:
            raise ValueError("error_scale must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "optimizer": self.optimizer,
            "seed": self.seed,
            "sample": self.sample.to_dict(),
            "loss": {"huber_delta": self.loss.huber_delta},
            "data_fraction": self.data_fraction,
            "error_scale": self.error_scale,
            "backbone": self.backbone,
            "val_fraction": self.val_fraction,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        kwargs = dict(data)
        if "sample" in kwargs:
            kwargs["sample"] = SampleConfig.from_dict(kwargs["sample"])
        if "loss" in kwargs:
            kwargs["loss"] = model_mod.LossConfig(**kwargs["loss"])
        kwargs.pop("record_windows", None)
        return cls(**kwargs)


@dataclass
class TrainHistory:
    """Per-epoch curves; all three lists have one entry per epoch."""

    loss: list
    val_mae_le: list
    seconds: list
    selected_ids: list = field(default_factory=list)
    val_ids: list = field(default_factory=list)
    windows: list = None  # per epoch: list of (instance id, window tuple), only when recorded

    def to_dict(self) -> dict:
        return {"loss": self.loss, "val_mae_le": self.val_mae_le, "seconds": self.seconds}


def save_history(path, history: TrainHistory):
    with open(str(path), "w", encoding="utf-8") as fh:
        json.dump(history.to_dict(), fh, indent=2)
        fh.write("\n")


def select_subset(n: int, fraction: float, seed: int) -> np.ndarray:
    """Deterministic fraction subset as indices into the instance list.

    The permutation depends on the seed only, so subsets for growing
    fractions are nested prefixes: results at 25% vs 100% differ by data
    volume, not by resampling luck.
    """
    if n < 1:
        raise EmptyDatasetError("no instances to select from")
    perm = np.random.default_rng((seed, _tag("data-subset"))).permutation(n)
    k = max(1, int(round(fraction * n)))
    return perm[:k]


def _tag(name: str) -> int:
    # SeedSequence entropy must be integers; fold short labels into one
    return int.from_bytes(name.encode(), "big")


def _optimizer_for(cfg: TrainConfig, model):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    return torch.optim.SGD(model.parameters(), lr=cfg.learning_rate)


def _sample_with_retry(image, instance, sample_cfg, rng):
    for attempt in range(_RESAMPLE_ATTEMPTS):
        try:
            return sample_training_patch(image, instance, sample_cfg, rng)
        except TightboxError:
            continue
    return None


def _val_batch(instances, images, ids, sample_cfg: SampleConfig, seed: int):
    """Fixed validation patches: windows drawn once, identical every epoch.

    Windows come from the unscaled error model so the curve tracks the
    deployment condition even when training uses error_scale != 1.
    """
    patches, transforms, boxes = [], [], []
    for idx in ids:
        inst = instances[idx]
        rng = np.random.default_rng((seed, _tag("val-window"), int(idx)))
        patch, _ = sample_training_patch(images[inst.image_id], inst, sample_cfg, rng)
        patches.append(patch.pixels)
        transforms.append(patch.transform)
        boxes.append(inst.true_box)
    return np.stack(patches), transforms, boxes


def _val_mae_le(model, val_data) -> float:
    patches, transforms, boxes = val_data
    coords = model.predict_coords(patches)
    pairs = []
    for i, true_box in enumerate(boxes):
        try:
            pred = model_mod.coords_to_box(transforms[i], coords[i])
        except TightboxError:
            # collapsed prediction (possible early in training): score the
            # sample as if no refinement happened
            pred = transforms[i].window
        pairs.append((pred, true_box))
    return mae_le(pairs)


def train(instances, images, cfg: TrainConfig):
    """Train a fresh model; returns (model, history).

    data_fraction picks a seeded subset once, before epoch 1; within it a
    val_fraction tail is held out for the validation curve and the rest is
    trained on. Same config and data give bitwise-identical history.
    """
    _check_instances(instances)
    net = model_mod.build(cfg.backbone, cfg.sample.patch_size, cfg.seed)
    return _fit(net, instances, images, cfg)


def finetune(model, instances, images, cfg: TrainConfig):
    """Continue training from an existing model's parameters."""
    if model.input_size != cfg.sample.patch_size:
        raise SizeMismatchError(
            f"model input {model.input_size} != cfg patch size {cfg.sample.patch_size}")
    _check_instances(instances)
    torch.manual_seed(cfg.seed)
    return _fit(model, instances, images, cfg)


def _check_instances(instances):
    if not instances:
        raise EmptyDatasetError("no training instances")
    for inst in instances:
        if inst.true_box is None:
            raise ValueError(f"instance {inst.image_id} has no true box")


def _fit(net, instances, images, cfg: TrainConfig):
    selected = select_subset(len(instances), cfg.data_fraction, cfg.seed)
    k = len(selected)
    n_val = min(max(1, int(round(cfg.val_fraction * k))), k - 1) if (cfg.val_fraction > 0 and k >= 2) else 0
    train_ids = selected[:k - n_val]
    val_ids = selected[k - n_val:]

    train_sample = replace(cfg.sample,
                           error_model=cfg.sample.error_model.scaled(cfg.error_scale))
    val_data = _val_batch(instances, images, val_ids, cfg.sample, cfg.seed) if n_val else None

    optimizer = _optimizer_for(cfg, net)
    history = TrainHistory([], [], [],
                           selected_ids=[int(i) for i in selected],
                           val_ids=[int(i) for i in val_ids],
                           windows=[] if cfg.record_windows else None)

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng((cfg.seed, _tag("order"), epoch)).permutation(len(train_ids))
        epoch_windows = []
        net.train()
        loss_sum, n_seen = 0.0, 0
        batch_patches, batch_targets = [], []

        def step():
            nonlocal loss_sum, n_seen, batch_patches, batch_targets
            x = torch.from_numpy(np.stack(batch_patches)).permute(0, 3, 1, 2)
            t = torch.from_numpy(np.stack(batch_targets).astype(np.float32))
            optimizer.zero_grad()
            loss = model_mod.huber_loss(net(x), t, cfg.loss)
            loss.backward()
            optimizer.step()
            loss_sum += float(loss.detach()) * len(batch_patches)
            n_seen += len(batch_patches)
            batch_patches, batch_targets = [], []

        for pos in order:
            idx = int(train_ids[pos])
            inst = instances[idx]
            rng = np.random.default_rng((cfg.seed, _tag("patch"), epoch, idx))
            sampled = _sample_with_retry(images[inst.image_id], inst, train_sample, rng)
            if sampled is None:
                continue
            patch, targets = sampled
            if cfg.record_windows:
                epoch_windows.append((idx, patch.transform.window.as_tuple()))
            batch_patches.append(patch.pixels)
            batch_targets.append(targets)
            if len(batch_patches) == cfg.batch_size:
                step()
        if batch_patches:
            step()
        if n_seen == 0:
            raise EmptyDatasetError("every sample failed patch generation this epoch")

        net.eval()
        history.loss.append(loss_sum / n_seen)
        history.val_mae_le.append(_val_mae_le(net, val_data) if val_data else float("nan"))
        history.seconds.append(time.perf_counter() - t0)
        if cfg.record_windows:
            history.windows.append(epoch_windows)

    net.eval()
    return net, history
