"""Command-line entry points for the whole pipeline.

Every command writes its outputs plus a run manifest (resolved config, seed,
input/output paths, artifact hashes, wall time), so a run can be reproduced
from the manifest alone. Config precedence: explicit flag > config file >
built-in default.

Exit codes: 0 success, 1 input/validation problem, 2 runtime failure. On
failure a machine-readable error JSON lands beside the outputs.
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
import time

import click
from click.core import ParameterSource

from . import dataset as ds
from . import evaluation as ev
from . import interp as ip
from . import model as md
from . import synth as sy
from . import training as tr
from .errors import LabelParseError

_VALIDATION_ERRORS = (
    ValueError, TypeError, KeyError, FileNotFoundError, NotADirectoryError,
    json.JSONDecodeError, LabelParseError,
)


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _error_json_path(out):
    out = str(out)
    if os.path.isdir(out) or not os.path.splitext(out)[1]:
        return os.path.join(out, "error.json")
    return out + ".error.json"


def _write_error(out, exc: BaseException):
    path = _error_json_path(out)
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"error": str(exc), "type": type(exc).__name__}, fh, indent=2)
            fh.write("\n")
    except OSError:
        pass  # the stderr message still goes out


def _run(command: str, out, inputs: dict, config: dict, seed, body):
    """Execute a command body, then write the manifest; maps errors to exit codes."""
    t0 = time.perf_counter()
    try:
        artifacts = body()
    except _VALIDATION_ERRORS as exc:
        _write_error(out, exc)
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    except Exception as exc:
        _write_error(out, exc)
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    # a rerun into the same out dir must not leave last time's failure lying around
    try:
        os.remove(_error_json_path(out))
    except OSError:
        pass
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": inputs,
        "outputs": sorted(artifacts),
        "artifacts": {os.path.basename(p): _sha256(p) for p in sorted(artifacts)},
        "wall_seconds": time.perf_counter() - t0,
    }
    out = str(out)
    manifest_path = (os.path.join(out, "manifest.json")
                     if os.path.isdir(out) or not os.path.splitext(out)[1]
                     else out + ".manifest.json")
    os.makedirs(os.path.dirname(os.path.abspath(manifest_path)), exist_ok=True)
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _explicit(ctx) -> dict:
    """Parameters the user actually typed, for flag-over-file precedence."""
    return {name: value for name, value in ctx.params.items()
            if ctx.get_parameter_source(name) == ParameterSource.COMMANDLINE}


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _resolve_train_config(config_path, explicit: dict) -> tr.TrainConfig:
    data = _load_config_file(config_path)
    sample = dict(data.get("sample", {}))
    for key in ("patch_size", "expand_ratio"):
        if key in explicit:
            sample[key] = explicit[key]
    if sample:
        data["sample"] = sample
    for key in ("epochs", "batch_size", "learning_rate", "optimizer", "seed",
                "data_fraction", "error_scale", "backbone"):
        if key in explicit:
            data[key] = explicit[key]
    return tr.TrainConfig.from_dict(data)


def _require_true_boxes(instances):
    missing = [i.image_id for i in instances if i.true_box is None]
    if missing:
        raise ValueError(f"{len(missing)} labels carry no ground-truth box "
                         f"(first: {missing[0]})")


@click.group()
@click.version_option()
def main():
    """Bounding-box refinement pipeline."""


@main.command()
@click.option("--n", type=int, required=True, help="Number of images to generate.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--image-size", type=int, default=144, show_default=True)
@click.option("--background", type=click.Choice(sy.BACKGROUNDS), default="noise",
              show_default=True)
@click.option("--out", type=click.Path(), required=True, help="Output directory.")
def synth(n, seed, image_size, background, out):
    """Generate synthetic labeled images."""
    config = {"n": n, "seed": seed, "image_size": image_size, "background": background}

    def body():
        items = sy.synth_generate(n, seed, image_size, background)
        image_dir = os.path.join(out, "images")
        os.makedirs(image_dir, exist_ok=True)
        artifacts = []
        for image, inst in items:
            path = os.path.join(image_dir, inst.image_id)
            ds.save_image(path, image)
            artifacts.append(path)
        labels_path = os.path.join(out, "labels.jsonl")
        ds.save_labels(labels_path, [inst for _, inst in items])
        artifacts.append(labels_path)
        return artifacts

    _run("synth", out, {}, config, seed, body)


@main.command()
@click.option("--masks", type=click.Path(), required=True,
              help="Directory of instance-id mask PNGs.")
@click.option("--images", type=click.Path(), default=None,
              help="Matching image directory (ids recorded relative to it).")
@click.option("--min-pixels", type=int, default=50, show_default=True)
@click.option("--out", type=click.Path(), required=True, help="Output label file.")
def extract(masks, images, min_pixels, out):
    """Extract tight ground-truth boxes from instance masks."""
    config = {"masks": masks, "min_pixels": min_pixels}

    def body():
        if not os.path.isdir(masks):
            raise NotADirectoryError(masks)
        instances = []
        for dirpath, _dirs, files in sorted(os.walk(masks)):
            for name in sorted(files):
                if not name.lower().endswith(".png"):
                    continue
                rel = os.path.relpath(os.path.join(dirpath, name), masks).replace(os.sep, "/")
                mask = ds.load_mask(os.path.join(dirpath, name))
                for instance_id, box in ds.mask_to_instances(mask, min_pixels):
                    class_tag = str(instance_id // 1000) if instance_id >= 1000 else "object"
                    instances.append(ds.LabeledInstance(
                        image_id=rel, class_tag=class_tag,
                        source="ground_truth", true_box=box))
        ds.save_labels(out, instances)
        return [out]

    _run("extract", out, {"masks": masks, "images": images}, config, None, body)


@main.command()
@click.option("--gt", type=click.Path(), required=True,
              help="Ground-truth label file.")
@click.option("--pre", type=click.Path(), required=True,
              help="Pre-label file to measure against the ground truth.")
@click.option("--iou-threshold", type=float, default=0.5, show_default=True)
@click.option("--out", type=click.Path(), required=True, help="Output error-model JSON.")
def stats(gt, pre, iou_threshold, out):
    """Fit per-edge error statistics from matched label pairs."""
    config = {"gt": gt, "pre": pre, "iou_threshold": iou_threshold}

    def body():
        pairs = _matched_box_pairs(gt, pre, iou_threshold)
        model = ds.fit_error_model(pairs)
        with open(out, "w", encoding="utf-8") as fh:
            json.dump({**model.to_dict(), "n_pairs": len(pairs)}, fh, indent=2)
            fh.write("\n")
        return [out]

    _run("stats", out, {"gt": gt, "pre": pre}, config, None, body)


def _matched_box_pairs(gt_path, pre_path, iou_threshold: float):
    gt = ds.load_labels(gt_path)
    pre = ds.load_labels(pre_path)
    by_image_gt, by_image_pre = {}, {}
    for inst in gt:
        if inst.true_box is not None:
            by_image_gt.setdefault(inst.image_id, []).append(inst.true_box)
    for inst in pre:
        box = inst.prelabel_box if inst.prelabel_box is not None else inst.true_box
        by_image_pre.setdefault(inst.image_id, []).append(box)
    pairs = []
    for image_id in sorted(by_image_gt):
        gt_boxes = by_image_gt[image_id]
        pre_boxes = by_image_pre.get(image_id, [])
        for gi, pi in ds.match_prelabels(gt_boxes, pre_boxes, iou_threshold):
            pairs.append((gt_boxes[gi], pre_boxes[pi]))
    return pairs


_train_options = [
    click.option("--labels", type=click.Path(), required=True),
    click.option("--images", "images_dir", type=click.Path(), required=True),
    click.option("--config", "config_path", type=click.Path(), default=None,
                 help="JSON config mirroring the training config fields."),
    click.option("--out", type=click.Path(), required=True, help="Output directory."),
    click.option("--epochs", type=int, default=10, show_default=True),
    click.option("--batch-size", "batch_size", type=int, default=32, show_default=True),
    click.option("--learning-rate", "learning_rate", type=float, default=1e-4,
                 show_default=True),
    click.option("--optimizer", type=click.Choice(tr.OPTIMIZERS), default="adam",
                 show_default=True),
    click.option("--seed", type=int, default=0, show_default=True),
    click.option("--fraction", "data_fraction", type=float, default=1.0, show_default=True,
                 help="Deterministic nested subset of the training labels."),
    click.option("--error-scale", "error_scale", type=float, default=1.0, show_default=True,
                 help="Multiplier on the perturbation statistics during training."),
    click.option("--backbone", type=click.Choice(md.BACKBONES), default="tiny",
                 show_default=True),
    click.option("--patch-size", "patch_size", type=int, default=256, show_default=True),
    click.option("--expand-ratio", "expand_ratio", type=float, default=0.15,
                 show_default=True),
]


def _with_options(options):
    def wrap(fn):
        for option in reversed(options):
            fn = option(fn)
        return fn
    return wrap


def _train_like(ctx, labels, images_dir, config_path, out, checkpoint=None):
    cfg = _resolve_train_config(config_path, _explicit(ctx))

    def body():
        instances = ds.load_labels(labels)
        _require_true_boxes(instances)
        images = ds.DirectoryImages(images_dir)
        if checkpoint is None:
            net, history = tr.train(instances, images, cfg)
        else:
            net, prev_cfg, _meta = md.load_checkpoint(checkpoint)
            del prev_cfg  # the new config governs the finetune
            net, history = tr.finetune(net, instances, images, cfg)
        os.makedirs(out, exist_ok=True)
        ckpt = os.path.join(out, "checkpoint.pt")
        sidecar = md.save_checkpoint(net, cfg.sample, ckpt,
                                     init="random" if checkpoint is None else "finetuned")
        hist_path = os.path.join(out, "history.json")
        tr.save_history(hist_path, history)
        return [ckpt, sidecar, hist_path]

    inputs = {"labels": labels, "images": images_dir}
    if checkpoint is not None:
        inputs["checkpoint"] = checkpoint
    _run("finetune" if checkpoint else "train", out, inputs, cfg.to_dict(), cfg.seed, body)


@main.command()
@_with_options(_train_options)
@click.pass_context
def train(ctx, labels, images_dir, config_path, out, **_flags):
    """Train a refinement model from scratch."""
    _train_like(ctx, labels, images_dir, config_path, out)


@main.command()
@click.option("--checkpoint", type=click.Path(), required=True)
@_with_options(_train_options)
@click.pass_context
def finetune(ctx, checkpoint, labels, images_dir, config_path, out, **_flags):
    """Continue training from an existing checkpoint."""
    _train_like(ctx, labels, images_dir, config_path, out, checkpoint=checkpoint)


@main.command("eval")
@click.option("--checkpoint", type=click.Path(), required=True)
@click.option("--labels", type=click.Path(), required=True,
              help="Ground-truth label file.")
@click.option("--images", "images_dir", type=click.Path(), required=True)
@click.option("--scenario", type=click.Choice(ev.SCENARIOS), default="perturbed_gt",
              show_default=True)
@click.option("--pre", type=click.Path(), default=None,
              help="Pre-label file (required for the prelabel scenario).")
@click.option("--iou-threshold", type=float, default=0.5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True, help="Output directory.")
def eval_cmd(checkpoint, labels, images_dir, scenario, pre, iou_threshold, seed, out):
    """Before/after evaluation of a checkpoint."""
    config = {"scenario": scenario, "seed": seed, "iou_threshold": iou_threshold}

    def body():
        net, sample_cfg, meta = md.load_checkpoint(checkpoint)
        instances = ds.load_labels(labels)
        _require_true_boxes(instances)
        if scenario == "prelabel":
            if pre is None:
                raise ValueError("--pre is required for the prelabel scenario")
            instances = _merge_prelabels(instances, ds.load_labels(pre), iou_threshold)
        images = ds.DirectoryImages(images_dir)
        eval_cfg = ev.EvalConfig(
            scenario=scenario, seed=seed,
            error_model=sample_cfg.error_model)
        report = ev.evaluate(net, instances, images, sample_cfg, eval_cfg)
        text, payload = ev.report_render(report)
        os.makedirs(out, exist_ok=True)
        json_path = os.path.join(out, "report.json")
        text_path = os.path.join(out, "report.txt")
        with open(json_path, "w", encoding="utf-8") as fh:
            fh.write(payload)
        with open(text_path, "w", encoding="utf-8") as fh:
            fh.write(text)
        click.echo(text)
        return [json_path, text_path]

    _run("eval", out, {"checkpoint": checkpoint, "labels": labels, "images": images_dir,
                       "pre": pre}, config, seed, body)


def _merge_prelabels(gt_instances, pre_instances, iou_threshold: float):
    """Attach matched prelabel boxes to ground-truth instances."""
    by_image_pre = {}
    for inst in pre_instances:
        box = inst.prelabel_box if inst.prelabel_box is not None else inst.true_box
        by_image_pre.setdefault(inst.image_id, []).append(box)
    merged = []
    by_image_gt = {}
    for inst in gt_instances:
        by_image_gt.setdefault(inst.image_id, []).append(inst)
    for image_id in sorted(by_image_gt):
        gts = by_image_gt[image_id]
        pre_boxes = by_image_pre.get(image_id, [])
        matches = ds.match_prelabels([g.true_box for g in gts], pre_boxes, iou_threshold)
        for gi, pi in matches:
            inst = gts[gi]
            merged.append(ds.LabeledInstance(
                image_id=inst.image_id, class_tag=inst.class_tag, source=inst.source,
                true_box=inst.true_box, prelabel_box=pre_boxes[pi],
                visible=inst.visible))
    if not merged:
        raise ValueError("no ground-truth label matched any prelabel")
    return merged


@main.command("refine")
@click.option("--checkpoint", type=click.Path(), required=True)
@click.option("--labels", type=click.Path(), required=True,
              help="Rough labels to tighten (whatever box each row carries).")
@click.option("--images", "images_dir", type=click.Path(), required=True)
@click.option("--out", type=click.Path(), required=True, help="Output label file.")
def refine_cmd(checkpoint, labels, images_dir, out):
    """Batch-refine every labeled box."""

    def body():
        net, sample_cfg, _meta = md.load_checkpoint(checkpoint)
        instances = ds.load_labels(labels)
        images = ds.DirectoryImages(images_dir)
        refined = []
        for inst in instances:
            rough = inst.prelabel_box if inst.prelabel_box is not None else inst.true_box
            box = md.refine(net, images[inst.image_id], rough, sample_cfg)
            refined.append(ds.LabeledInstance(
                image_id=inst.image_id, class_tag=inst.class_tag,
                source="model", prelabel_box=box, visible=inst.visible))
        ds.save_labels(out, refined)
        return [out]

    _run("refine", out, {"checkpoint": checkpoint, "labels": labels,
                         "images": images_dir}, {}, None, body)


@main.command("track-interp")
@click.option("--track", type=click.Path(), required=True,
              help="Track JSON with keyframes.")
@click.option("--images", "images_dir", type=click.Path(), required=True)
@click.option("--checkpoint", type=click.Path(), default=None,
              help="Refine interpolated frames when given.")
@click.option("--pattern", default="frame_{frame:04d}.png", show_default=True,
              help="Image id pattern keyed by frame index.")
@click.option("--out", type=click.Path(), required=True, help="Output track JSON.")
def track_interp(track, images_dir, checkpoint, pattern, out):
    """Interpolate keyframes into per-frame boxes, optionally refined."""
    config = {"pattern": pattern}

    def body():
        seq = ip.load_track(track)
        if checkpoint is None:
            frames = [(f, box, "human" if f in {k for k, _ in seq.keyframes} else "tracker")
                      for f, box in ip.interpolate_track(seq)]
        else:
            net, sample_cfg, _meta = md.load_checkpoint(checkpoint)
            images = ds.DirectoryImages(images_dir)
            by_frame = {}
            for f, _box in ip.interpolate_track(seq):
                image_id = pattern.format(frame=f)
                if image_id in images:
                    by_frame[f] = images[image_id]
            frames = ip.refine_track(net, by_frame, seq, sample_cfg)
        payload = {
            "track_id": seq.track_id,
            "key_interval": seq.key_interval,
            "frames": [{"frame": f, "box": list(b.as_tuple()), "source": s}
                       for f, b, s in frames],
        }
        with open(out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
        return [out]

    _run("track-interp", out, {"track": track, "images": images_dir,
                               "checkpoint": checkpoint}, config, None, body)


@main.command()
@click.option("--checkpoint", type=click.Path(), required=True)
@click.option("--data", type=click.Path(), required=True,
              help="Image directory to annotate.")
@click.option("--port", type=int, default=8321, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--store", type=click.Path(), default=None,
              help="Label store path (default: <data>/labels.db.jsonl).")
def serve(checkpoint, data, port, host, store):
    """Run the annotation HTTP service."""
    from .service import serve as run_service

    try:
        run_service(data, checkpoint, port=port, store_path=store, host=host)
    except _VALIDATION_ERRORS as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    except Exception as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)


if __name__ == "__main__":
    main()
