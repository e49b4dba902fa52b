"""Linear-interpolation pre-labels between annotated key frames.

A human labels every K-th frame; the frames in between get boxes by
linearly blending the bracketing keyframes, and those blended boxes can
then be tightened by the refinement model. Keyframes always pass through
untouched.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .dataset import SampleConfig
from .errors import MissingFrameError
from .geometry import BBox
from .model import refine


@dataclass(frozen=True)
class TrackSequence:
    track_id: str
    keyframes: tuple  # ((frame index, BBox), ...) with strictly increasing indices
    key_interval: int = 5

    def __post_init__(self):
        object.__setattr__(self, "keyframes", tuple((int(f), b) for f, b in self.keyframes))
        if len(self.keyframes) < 2:
            raise ValueError("need at least 2 keyframes")
        frames = [f for f, _ in self.keyframes]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise ValueError("keyframe indices must be strictly increasing")
        for _, box in self.keyframes:
            if not isinstance(box, BBox):
                raise TypeError("keyframe boxes must be BBox")
        if self.key_interval < 1:
            raise ValueError("key_interval must be >= 1")


def interpolate_track(seq: TrackSequence):
    """Boxes for every frame from the first to the last keyframe.

    Each coordinate is blended linearly between the bracketing keyframes;
    keyframe outputs are the input boxes themselves, not a recomputed blend.
    No extrapolation beyond the keyframe span: a tracker guess outside the
    annotated range would be unreviewed guesswork.
    """
    out = []
    keys = seq.keyframes
    for (f0, b0), (f1, b1) in zip(keys, keys[1:]):
        out.append((f0, b0))
        for frame in range(f0 + 1, f1):
            w = (frame - f0) / (f1 - f0)
            out.append((frame, BBox(
                b0.x_min + w * (b1.x_min - b0.x_min),
                b0.y_min + w * (b1.y_min - b0.y_min),
                b0.x_max + w * (b1.x_max - b0.x_max),
                b0.y_max + w * (b1.y_max - b0.y_max))))
    out.append(keys[-1])
    return out


def refine_track(model, images, seq: TrackSequence, sample_cfg: SampleConfig):
    """Refine the interpolated frames; returns (frame, box, source) triples.

    Keyframes pass through bit-identical with source "human"; in-between
    boxes are refined and tagged "model".
    """
    key_frames = {f for f, _ in seq.keyframes}
    out = []
    for frame, box in interpolate_track(seq):
        if frame in key_frames:
            out.append((frame, box, "human"))
            continue
        if frame not in images:
            raise MissingFrameError(f"no image for frame {frame}")
        out.append((frame, refine(model, images[frame], box, sample_cfg), "model"))
    return out


def load_track(path) -> TrackSequence:
    with open(str(path), encoding="utf-8") as fh:
        data = json.load(fh)
    keyframes = tuple((kf["frame"], BBox(*kf["box"])) for kf in data["keyframes"])
    return TrackSequence(track_id=data["track_id"], keyframes=keyframes,
                         key_interval=int(data.get("key_interval", 5)))


def save_track(path, seq: TrackSequence):
    payload = {
        "track_id": seq.track_id,
        "key_interval": seq.key_interval,
        "keyframes": [{"frame": f, "box": list(b.as_tuple())} for f, b in seq.keyframes],
    }
    with open(str(path), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
