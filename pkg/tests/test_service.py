"""Tests for the HTTP refinement/label service and its store."""

import json
import threading

import cv2
import numpy as np
import pytest
from fastapi.testclient import TestClient

from tightbox.dataset import SampleConfig, load_labels
from tightbox.geometry import BBox, expand, make_patch_transform, to_patch_coords
from tightbox.service import (
    LabelStore,
    RefineQueue,
    Session,
    _parse_box,
    create_app,
)

from conftest import MEASURED_ERRORS

SAMPLE = SampleConfig(expand_ratio=0.15, error_model=MEASURED_ERRORS, patch_size=64)


class FixedCoords:
    def __init__(self, coords):
        self.coords = np.asarray(coords, dtype=np.float64)

    def predict_coords(self, patches):
        return np.tile(self.coords, (np.asarray(patches).shape[0], 1))


def write_png(path, h, w, value=90):
    img = np.full((h, w, 3), value, dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    assert cv2.imwrite(str(path), img)


@pytest.fixture()
def data_root(tmp_path):
    root = tmp_path / "data"
    write_png(root / "a.png", 50, 40)
    write_png(root / "b.png", 30, 60)
    write_png(root / "sub" / "c.png", 20, 20)
    return root


@pytest.fixture()
def session(data_root, tmp_path):
    s = Session(data_root, store_path=tmp_path / "store.jsonl")
    s.attach_model(FixedCoords((0.2, 0.2, 0.8, 0.8)), SAMPLE,
                   {"format_version": 1, "backbone": "double", "input_size": 64})
    yield s
    s.store.close()


@pytest.fixture()
def client(session):
    return TestClient(create_app(session))


class TestHealth:
    def test_ok_with_model(self, client):
        r = client.get("/health")
        assert r.status_code == 200
        body = r.json()
        assert body["status"] == "ok"
        assert body["model"]["format_version"] == 1

    def test_503_without_model(self, data_root, tmp_path):
        s = Session(data_root, store_path=tmp_path / "s2.jsonl")
        try:
            r = TestClient(create_app(s)).get("/health")
            assert r.status_code == 503
        finally:
            s.store.close()


class TestImages:
    def test_list_then_fetch(self, client):
        listing = client.get("/images").json()
        assert listing["total"] == 3
        first = listing["images"][0]
        assert first == {"id": "a.png", "width": 40, "height": 50}
        raw = client.get("/images/a.png")
        assert raw.status_code == 200
        decoded = cv2.imdecode(np.frombuffer(raw.content, np.uint8), cv2.IMREAD_COLOR)
        assert decoded.shape == (50, 40, 3)

    def test_nested_id(self, client):
        r = client.get("/images/sub/c.png")
        assert r.status_code == 200

    def test_unknown_image_404(self, client):
        assert client.get("/images/nope.png").status_code == 404

    def test_pagination_2_over_3(self, client):
        page0 = client.get("/images", params={"page": 0, "page_size": 2}).json()
        page1 = client.get("/images", params={"page": 1, "page_size": 2}).json()
        assert [i["id"] for i in page0["images"]] == ["a.png", "b.png"]
        assert [i["id"] for i in page1["images"]] == ["sub/c.png"]
        assert page0["total"] == page1["total"] == 3

    def test_bad_page_params(self, client):
        assert client.get("/images", params={"page": -1}).status_code == 400
        assert client.get("/images", params={"page_size": 0}).status_code == 400


class TestRefine:
    def test_idempotent(self, client):
        req = {"image": "a.png", "box": [5, 5, 30, 40]}
        a = client.post("/refine", json=req).json()
        b = client.post("/refine", json=req).json()
        assert a["box"] == b["box"]
        assert "latency_ms" in a

    def test_oracle_double_recovers_truth(self, data_root, tmp_path):
        true = BBox(12, 10, 30, 42)
        rough = BBox(10, 8, 32, 44)
        t = make_patch_transform(expand(rough, 0.15), 64)
        s = Session(data_root, store_path=tmp_path / "s3.jsonl")
        s.attach_model(FixedCoords(to_patch_coords(t, true)), SAMPLE,
                       {"format_version": 1})
        try:
            r = TestClient(create_app(s)).post(
                "/refine", json={"image": "a.png", "box": list(rough.as_tuple())})
            assert r.status_code == 200
            assert r.json()["box"] == pytest.approx(list(true.as_tuple()), abs=1e-6)
        finally:
            s.store.close()

    def test_inverted_box_400(self, client):
        r = client.post("/refine", json={"image": "a.png", "box": [30, 5, 10, 40]})
        assert r.status_code == 400
        assert "error" in r.json()

    def test_tiny_area_400(self, client):
        r = client.post("/refine", json={"image": "a.png", "box": [5, 5, 8, 9]})
        assert r.status_code == 400

    def test_area_boundary_accepted(self, client):
        r = client.post("/refine", json={"image": "a.png", "box": [5, 5, 9, 9]})
        assert r.status_code == 200

    def test_unknown_image_404(self, client):
        r = client.post("/refine", json={"image": "zz.png", "box": [5, 5, 30, 40]})
        assert r.status_code == 404

    def test_malformed_body_400(self, client):
        assert client.post("/refine", json={"image": "a.png"}).status_code == 400
        assert client.post("/refine", json={"image": "a.png",
                                            "box": [1, 2, 3]}).status_code == 400
        assert client.post("/refine", json=[1, 2, 3]).status_code == 400

    def test_no_model_503(self, data_root, tmp_path):
        s = Session(data_root, store_path=tmp_path / "s4.jsonl")
        try:
            r = TestClient(create_app(s)).post(
                "/refine", json={"image": "a.png", "box": [5, 5, 30, 40]})
            assert r.status_code == 503
        finally:
            s.store.close()

    def test_degenerate_prediction_422(self, session):
        session.attach_model(FixedCoords((0.5, 0.2, 0.50001, 0.9)), SAMPLE,
                             {"format_version": 1})
        r = TestClient(create_app(session)).post(
            "/refine", json={"image": "a.png", "box": [5, 5, 30, 40]})
        assert r.status_code == 422

    def test_queue_full_429(self, session):
        class FullQueue:
            def run(self, fn):
                return None
        session.queue = FullQueue()
        r = TestClient(create_app(session)).post(
            "/refine", json={"image": "a.png", "box": [5, 5, 30, 40]})
        assert r.status_code == 429

    def test_result_stays_inside_image(self, session, client):
        # a double that points far outside the patch must come back clipped
        session.attach_model(FixedCoords((-0.8, -0.7, 1.9, 1.8)), SAMPLE,
                             {"format_version": 1})
        r = client.post("/refine", json={"image": "a.png", "box": [2, 2, 38, 48]})
        assert r.status_code == 200
        x_min, y_min, x_max, y_max = r.json()["box"]
        assert 0 <= x_min < x_max <= 40
        assert 0 <= y_min < y_max <= 50


class TestParseBox:
    def test_accepts_list(self):
        assert _parse_box([1, 2, 3, 4]) == BBox(1, 2, 3, 4)

    @pytest.mark.parametrize("raw", [
        None, "box", [1, 2, 3], [1, 2, 3, 4, 5], [1, 2, "x", 4],
        [float("inf"), 0, 1, 1], [3, 0, 1, 1], [0, 0, 0, 5],
    ])
    def test_rejects(self, raw):
        with pytest.raises(ValueError):
            _parse_box(raw)


class TestLabels:
    def test_post_then_get(self, client):
        body = {"image": "a.png", "class": "pedestrian",
                "box": [1, 2, 11, 22], "source": "human"}
        created = client.post("/labels", json=body)
        assert created.status_code == 200
        label_id = created.json()["id"]
        labels = client.get("/labels").json()["labels"]
        assert len(labels) == 1
        assert labels[0]["id"] == label_id
        assert labels[0]["box"] == [1.0, 2.0, 11.0, 22.0]
        assert labels[0]["source"] == "human"

    def test_image_filter(self, client):
        client.post("/labels", json={"image": "a.png", "class": "c",
                                     "box": [0, 0, 5, 5], "source": "human"})
        client.post("/labels", json={"image": "b.png", "class": "c",
                                     "box": [0, 0, 5, 5], "source": "human"})
        only_a = client.get("/labels", params={"image": "a.png"}).json()["labels"]
        assert len(only_a) == 1 and only_a[0]["image"] == "a.png"

    def test_delete_then_absent(self, client):
        created = client.post("/labels", json={
            "image": "a.png", "class": "c", "box": [0, 0, 5, 5], "source": "human"})
        label_id = created.json()["id"]
        assert client.delete(f"/labels/{label_id}").status_code == 200
        assert client.get("/labels").json()["labels"] == []
        assert client.delete(f"/labels/{label_id}").status_code == 404

    @pytest.mark.parametrize("patch", [
        {"image": ""}, {"class": ""}, {"source": "psychic"},
        {"box": [5, 5, 1, 1]}, {"box": "bad"},
    ])
    def test_validation_400(self, client, patch):
        body = {"image": "a.png", "class": "c", "box": [0, 0, 5, 5],
                "source": "human"}
        body.update(patch)
        assert client.post("/labels", json=body).status_code == 400

    def test_restart_persists(self, data_root, tmp_path):
        store_path = tmp_path / "persist.jsonl"
        s1 = Session(data_root, store_path=store_path)
        c1 = TestClient(create_app(s1))
        label_id = c1.post("/labels", json={
            "image": "a.png", "class": "c", "box": [3, 4, 13, 24],
            "source": "human"}).json()["id"]
        s1.store.close()

        s2 = Session(data_root, store_path=store_path)
        try:
            labels = TestClient(create_app(s2)).get("/labels").json()["labels"]
            assert [l["id"] for l in labels] == [label_id]
            assert labels[0]["box"] == [3.0, 4.0, 13.0, 24.0]
        finally:
            s2.store.close()


class TestLabelStore:
    def test_durable_log_replays(self, tmp_path):
        path = tmp_path / "log.jsonl"
        store = LabelStore(path)
        a = store.add("x.png", "c", (0, 0, 5, 5), "human")
        b = store.add("x.png", "c", (1, 1, 6, 6), "detector")
        store.delete(a)
        store.close()

        reopened = LabelStore(path)
        try:
            assert len(reopened) == 1
            assert reopened.get(b)["box"] == [1.0, 1.0, 6.0, 6.0]
            assert reopened.get(a) is None
        finally:
            reopened.close()

    def test_corrupt_log_rejected(self, tmp_path):
        path = tmp_path / "log.jsonl"
        path.write_text('{"op": "add", "id": "x", "label": {}}\nnot json\n')
        with pytest.raises(ValueError):
            LabelStore(path)

    def test_unknown_op_rejected(self, tmp_path):
        path = tmp_path / "log.jsonl"
        path.write_text('{"op": "upsert", "id": "x"}\n')
        with pytest.raises(ValueError):
            LabelStore(path)

    def test_export_round_trips_through_label_format(self, tmp_path):
        store = LabelStore(tmp_path / "log.jsonl")
        store.add("img/a.png", "pedestrian", (1, 2, 11, 22), "human")
        store.add("img/a.png", "pedestrian", (3, 4, 13, 24), "detector")
        out = tmp_path / "export.jsonl"
        store.export_labels(out)
        store.close()
        instances = load_labels(out)
        assert len(instances) == 2
        human = next(i for i in instances if i.source == "human")
        detector = next(i for i in instances if i.source == "detector")
        assert human.true_box == BBox(1, 2, 11, 22)
        assert detector.prelabel_box == BBox(3, 4, 13, 24)

    def test_concurrent_adds_are_unique_and_durable(self, tmp_path):
        path = tmp_path / "log.jsonl"
        store = LabelStore(path)
        ids, errors = [], []
        lock = threading.Lock()

        def worker(k):
            try:
                mine = [store.add("img.png", "c", (k, 0, k + 5, 5), "human")
                        for _ in range(100)]
                with lock:
                    ids.extend(mine)
            except Exception as exc:  # pragma: no cover - diagnostic only
                errors.append(exc)

        threads = [threading.Thread(target=worker, args=(k,)) for k in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        store.close()
        assert not errors
        assert len(ids) == 800 and len(set(ids)) == 800

        reopened = LabelStore(path)
        try:
            assert len(reopened) == 800
        finally:
            reopened.close()


class TestRefineQueue:
    def test_serializes_and_rejects_overflow(self):
        queue = RefineQueue(depth=0)  # one slot total: the running request
        started = threading.Event()
        release = threading.Event()
        results = {}

        def long_job():
            def fn():
                started.set()
                release.wait(timeout=5)
                return "done"
            results["long"] = queue.run(fn)

        t = threading.Thread(target=long_job)
        t.start()
        assert started.wait(timeout=5)
        # slot taken: a second request must be turned away, not queued
        assert queue.run(lambda: "second") is None
        release.set()
        t.join()
        assert results["long"] == "done"
        assert queue.run(lambda: "after") == "after"
