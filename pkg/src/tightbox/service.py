"""Local HTTP service: box refinement plus a durable label store.

One process serves one checkpoint over one dataset directory. The label
store is an append-only JSON-lines operation log; every acknowledged write
is flushed and fsynced first, so a crash after the ack never loses it.
Refinement requests run one at a time through a bounded queue.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import mimetypes
import os
import threading
import time

import numpy as np
from fastapi import FastAPI, Request, Response
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import FileResponse, JSONResponse

from .dataset import SOURCES, DirectoryImages, LabeledInstance, SampleConfig, save_labels
from .errors import DegenerateBoxError
from .geometry import BBox
from .model import load_checkpoint, refine

DEFAULT_PORT = 8321

MIN_REFINE_AREA = 16.0  # px^2; smaller requests are junk input, not boxes

# One request refining, up to 32 more waiting; beyond that clients get 429.
_QUEUE_DEPTH = 32


class LabelStore:
    """Append-only JSON-lines label log with add/delete operations.

    The live set is the replay of the log. Writes take an internal lock,
    append one line, flush, and fsync before returning; readers see only
    acknowledged state.
    """

    def __init__(self, path):
        self.path = str(path)
        self._lock = threading.Lock()
        self._labels = {}
        self._counter = itertools.count()
        self._replay()
        os.makedirs(os.path.dirname(os.path.abspath(self.path)), exist_ok=True)
        self._fh = open(self.path, "a", encoding="utf-8")

    def _replay(self):
        if not os.path.isfile(self.path):
            return
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    op = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ValueError(f"{self.path}:{lineno}: bad log line") from exc
                if op.get("op") == "add":
                    self._labels[op["id"]] = op["label"]
                elif op.get("op") == "del":
                    self._labels.pop(op["id"], None)
                else:
                    raise ValueError(f"{self.path}:{lineno}: unknown op {op.get('op')!r}")

    def _write_op(self, op: dict):
        self._fh.write(json.dumps(op, sort_keys=True) + "\n")
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def add(self, image: str, class_tag: str, box, source: str) -> str:
        label = {"image": image, "class": class_tag,
                 "box": [float(v) for v in box], "source": source}
        with self._lock:
            label_id = self._new_id(label)
            self._write_op({"op": "add", "id": label_id, "label": label})
            self._labels[label_id] = label
        return label_id

    def _new_id(self, label) -> str:
        # content hash; counter and clock make concurrent duplicates distinct
        for _ in range(8):
            payload = json.dumps(
                [label, time.time_ns(), next(self._counter)], sort_keys=True)
            label_id = hashlib.sha256(payload.encode()).hexdigest()[:16]
            if label_id not in self._labels:
                return label_id
        raise RuntimeError("could not allocate a unique label id")

    def delete(self, label_id: str) -> bool:
        with self._lock:
            if label_id not in self._labels:
                return False
            self._write_op({"op": "del", "id": label_id})
            del self._labels[label_id]
        return True

    def get(self, label_id: str):
        with self._lock:
            return self._labels.get(label_id)

    def list(self, image: str | None = None):
        with self._lock:
            items = [{"id": k, **v} for k, v in self._labels.items()]
        if image is not None:
            items = [item for item in items if item["image"] == image]
        return items

    def export_labels(self, path):
        """Write the live set in the dataset label-file format."""
        instances = []
        for item in self.list():
            box = BBox(*item["box"])
            truth = item["source"] in ("ground_truth", "human")
            instances.append(LabeledInstance(
                image_id=item["image"], class_tag=item["class"], source=item["source"],
                true_box=box if truth else None,
                prelabel_box=None if truth else box))
        save_labels(path, instances)

    def close(self):
        self._fh.close()

    def __len__(self):
        with self._lock:
            return len(self._labels)


class RefineQueue:
    """Serializes inference: one active request, a bounded waiting line."""

    def __init__(self, depth: int = _QUEUE_DEPTH):
        self._slots = threading.BoundedSemaphore(depth + 1)
        self._running = threading.Lock()

    def run(self, fn):
        if not self._slots.acquire(blocking=False):
            return None  # full
        try:
            with self._running:
                return fn()
        finally:
            self._slots.release()


class Session:
    """Everything one service process holds: data, model, store."""

    def __init__(self, data_root, checkpoint_path=None, store_path=None):
        self.images = DirectoryImages(data_root)
        self.store = LabelStore(store_path or os.path.join(str(data_root), "labels.db.jsonl"))
        self.queue = RefineQueue()
        self.model = None
        self.sample_cfg = None
        self.meta = None
        self._dims = {}
        self._dims_lock = threading.Lock()
        if checkpoint_path is not None:
            self.load_model(checkpoint_path)

    def load_model(self, checkpoint_path):
        self.model, self.sample_cfg, self.meta = load_checkpoint(checkpoint_path)
        if self.model.input_size != self.sample_cfg.patch_size:
            raise ValueError("checkpoint input size disagrees with its sample config")

    def attach_model(self, model, sample_cfg: SampleConfig, meta: dict):
        """Install an in-process model (tests use doubles through this)."""
        self.model = model
        self.sample_cfg = sample_cfg
        self.meta = meta

    def image_dims(self, image_id):
        with self._dims_lock:
            if image_id in self._dims:
                return self._dims[image_id]
        image = self.images[image_id]
        dims = (int(image.shape[1]), int(image.shape[0]))
        with self._dims_lock:
            self._dims[image_id] = dims
        return dims


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": message})


def _parse_box(raw):
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        raise ValueError("box must be [x_min, y_min, x_max, y_max]")
    try:
        values = [float(v) for v in raw]
    except (TypeError, ValueError) as exc:
        raise ValueError("box coordinates must be numbers") from exc
    if not all(np.isfinite(values)):
        raise ValueError("box coordinates must be finite")
    try:
        box = BBox(*values)
    except DegenerateBoxError as exc:
        raise ValueError(str(exc)) from exc
    return box


def create_app(session: Session) -> FastAPI:
    app = FastAPI(title="tightbox refinement service", docs_url=None, redoc_url=None)
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"])
    app.state.session = session

    @app.exception_handler(RequestValidationError)
    async def malformed(request: Request, exc: RequestValidationError):
        # schema problems are client errors, not semantic 422s
        return _error(400, "invalid request body")

    @app.get("/health")
    def health():
        if session.model is None:
            return _error(503, "model not loaded")
        return {"status": "ok", "model": session.meta}

    @app.get("/images")
    def list_images(page: int = 0, page_size: int = 50):
        if page < 0 or page_size < 1:
            return _error(400, "page must be >= 0 and page_size >= 1")
        ids = list(session.images)
        start = page * page_size
        chunk = ids[start:start + page_size]
        items = []
        for image_id in chunk:
            w, h = session.image_dims(image_id)
            items.append({"id": image_id, "width": w, "height": h})
        return {"images": items, "page": page, "page_size": page_size, "total": len(ids)}

    @app.get("/images/{image_id:path}")
    def get_image(image_id: str):
        try:
            path = session.images.path_for(image_id)
        except KeyError:
            return _error(404, f"unknown image {image_id!r}")
        media_type = mimetypes.guess_type(path)[0] or "application/octet-stream"
        return FileResponse(path, media_type=media_type)

    @app.post("/refine")
    def refine_box(body: dict):
        if session.model is None:
            return _error(503, "model not loaded")
        image_id = body.get("image")
        if not isinstance(image_id, str):
            return _error(400, "image must be a string id")
        try:
            box = _parse_box(body.get("box"))
        except ValueError as exc:
            return _error(400, str(exc))
        if box.area < MIN_REFINE_AREA:
            return _error(400, f"box area below {MIN_REFINE_AREA:g} px^2")
        if image_id not in session.images:
            return _error(404, f"unknown image {image_id!r}")

        def work():
            image = session.images[image_id]
            t0 = time.perf_counter()
            refined = refine(session.model, image, box, session.sample_cfg)
            return refined, (time.perf_counter() - t0) * 1000.0

        try:
            result = session.queue.run(work)
        except DegenerateBoxError as exc:
            return _error(422, str(exc))
        if result is None:
            return _error(429, "refinement queue full")
        refined, latency_ms = result
        return {"box": list(refined.as_tuple()), "latency_ms": latency_ms}

    @app.post("/labels")
    def add_label(body: dict):
        image_id = body.get("image")
        class_tag = body.get("class")
        source = body.get("source")
        if not isinstance(image_id, str) or not image_id:
            return _error(400, "image must be a nonempty string")
        if not isinstance(class_tag, str) or not class_tag:
            return _error(400, "class must be a nonempty string")
        if source not in SOURCES:
            return _error(400, f"source must be one of {SOURCES}")
        try:
            box = _parse_box(body.get("box"))
        except ValueError as exc:
            return _error(400, str(exc))
        label_id = session.store.add(image_id, class_tag, box.as_tuple(), source)
        return {"id": label_id}

    @app.get("/labels")
    def list_labels(image: str | None = None):
        return {"labels": session.store.list(image)}

    @app.delete("/labels/{label_id}")
    def delete_label(label_id: str):
        if not session.store.delete(label_id):
            return _error(404, f"unknown label id {label_id!r}")
        return {"id": label_id, "deleted": True}

    return app


def serve(data_root, checkpoint_path, port: int = DEFAULT_PORT, store_path=None,
          host: str = "127.0.0.1"):
    """Blocking entry point used by the command line."""
    import uvicorn

    session = Session(data_root, checkpoint_path, store_path)
    app = create_app(session)
    uvicorn.run(app, host=host, port=port, log_level="warning")
