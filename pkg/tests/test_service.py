import base64
import io

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image as PILImage

from grainseg.rle import rle_decode
from grainseg.service import create_app

from .conftest import make_image


def png_b64(image) -> str:
    arr = (image.pixels * 255).round().astype(np.uint8)
    buf = io.BytesIO()
    PILImage.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


@pytest.fixture
def client(tiny_model):
    return TestClient(create_app(tiny_model))


@pytest.fixture
def session(client):
    image = make_image(32, 32, seed=1)
    resp = client.post("/sessions", json={"image": png_b64(image)})
    assert resp.status_code == 200
    body = resp.json()
    assert body["h"] == 32 and body["w"] == 32
    return body["session_id"]


def decode_mask(payload) -> np.ndarray:
    assert payload["format"] == "rle"
    return rle_decode(payload)


class TestSessionLifecycle:
    def test_create_click_mask_shape(self, client, session):
        resp = client.post(
            f"/sessions/{session}/clicks", json={"row": 16, "col": 16, "polarity": "positive"}
        )
        assert resp.status_code == 200
        mask = decode_mask(resp.json()["mask"])
        assert mask.shape == (32, 32)

    def test_png_format_flag(self, client, session):
        resp = client.post(
            f"/sessions/{session}/clicks",
            params={"format": "png"},
            json={"row": 10, "col": 10, "polarity": "positive"},
        )
        payload = resp.json()["mask"]
        assert payload["format"] == "png"
        raw = base64.b64decode(payload["data"])
        arr = np.asarray(PILImage.open(io.BytesIO(raw)))
        assert arr.shape == (32, 32)
        assert set(np.unique(arr)) <= {0, 255}

    def test_granularity_without_clicks_empty_mask(self, client, session):
        resp = client.put(f"/sessions/{session}/granularity", json={"value": 0.3})
        assert resp.status_code == 200
        mask = decode_mask(resp.json()["mask"])
        assert not mask.any()

    def test_get_summary_mirrors_clicks(self, client, session):
        client.post(f"/sessions/{session}/clicks", json={"row": 5, "col": 6, "polarity": "positive"})
        client.post(f"/sessions/{session}/clicks", json={"row": 20, "col": 21, "polarity": "negative"})
        summary = client.get(f"/sessions/{session}").json()
        assert summary["clicks"] == [
            {"row": 5, "col": 6, "polarity": "positive"},
            {"row": 20, "col": 21, "polarity": "negative"},
        ]
        assert summary["granularity"] == 1.0
        assert "created_at" in summary and "updated_at" in summary

    def test_reset_clears_clicks(self, client, session):
        client.post(f"/sessions/{session}/clicks", json={"row": 5, "col": 6, "polarity": "positive"})
        assert client.post(f"/sessions/{session}/reset").status_code == 200
        summary = client.get(f"/sessions/{session}").json()
        assert summary["clicks"] == []

    def test_delete_then_404(self, client, session):
        assert client.delete(f"/sessions/{session}").status_code == 200
        resp = client.get(f"/sessions/{session}")
        assert resp.status_code == 404
        assert resp.json()["error"]["code"] == "session_not_found"


class TestErrors:
    def test_unknown_session(self, client):
        resp = client.post("/sessions/zzz/clicks", json={"row": 1, "col": 1, "polarity": "positive"})
        assert resp.status_code == 404
        assert resp.json()["error"]["code"] == "session_not_found"

    def test_malformed_body(self, client, session):
        resp = client.post(f"/sessions/{session}/clicks", json={"row": 1})
        assert resp.status_code == 400
        assert resp.json()["error"]["code"] == "invalid_payload"

    def test_out_of_bounds_click(self, client, session):
        resp = client.post(
            f"/sessions/{session}/clicks", json={"row": 40, "col": 1, "polarity": "positive"}
        )
        assert resp.status_code == 400
        assert resp.json()["error"]["code"] == "click_out_of_bounds"

    def test_bad_image_payload(self, client):
        resp = client.post("/sessions", json={"image": "definitely-not-base64!!"})
        assert resp.status_code == 400
        assert resp.json()["error"]["code"] == "invalid_payload"

    def test_bad_granularity(self, client, session):
        resp = client.put(f"/sessions/{session}/granularity", json={"value": 1.4})
        assert resp.status_code == 400

    def test_undo_without_clicks(self, client, session):
        resp = client.post(f"/sessions/{session}/undo")
        assert resp.status_code == 400
        assert resp.json()["error"]["code"] == "nothing_to_undo"


class TestReplaySemantics:
    def run_session(self, client, image, clicks, granularity=None, undo_last=False):
        """Drive a fresh session; returns the final mask."""
        sid = client.post("/sessions", json={"image": png_b64(image)}).json()["session_id"]
        if granularity is not None:
            client.put(f"/sessions/{sid}/granularity", json={"value": granularity})
        mask = None
        for row, col, polarity in clicks:
            resp = client.post(
                f"/sessions/{sid}/clicks", json={"row": row, "col": col, "polarity": polarity}
            )
            mask = decode_mask(resp.json()["mask"])
        if undo_last:
            resp = client.post(f"/sessions/{sid}/undo")
            mask = decode_mask(resp.json()["mask"])
        client.delete(f"/sessions/{sid}")
        return mask

    def test_replay_determinism(self, client):
        image = make_image(32, 32, seed=2)
        clicks = [(8, 8, "positive"), (20, 22, "negative"), (14, 9, "positive")]
        a = self.run_session(client, image, clicks, granularity=0.6)
        b = self.run_session(client, image, clicks, granularity=0.6)
        assert np.array_equal(a, b)

    def test_undo_equals_replay_minus_one(self, client):
        image = make_image(32, 32, seed=3)
        clicks = [(8, 8, "positive"), (20, 22, "negative")]
        undone = self.run_session(client, image, clicks, undo_last=True)
        fresh = self.run_session(client, image, clicks[:1])
        assert np.array_equal(undone, fresh)

    def test_granularity_change_resets_chain(self, client):
        """After a granularity PUT the mask equals a fresh replay at that value."""
        image = make_image(32, 32, seed=4)
        sid = client.post("/sessions", json={"image": png_b64(image)}).json()["session_id"]
        for row, col, polarity in [(8, 8, "positive"), (20, 22, "negative")]:
            client.post(f"/sessions/{sid}/clicks", json={"row": row, "col": col, "polarity": polarity})
        changed = decode_mask(
            client.put(f"/sessions/{sid}/granularity", json={"value": 0.2}).json()["mask"]
        )
        fresh = self.run_session(
            client, image, [(8, 8, "positive"), (20, 22, "negative")], granularity=0.2
        )
        assert np.array_equal(changed, fresh)

    def test_session_isolation(self, client):
        img_a = make_image(32, 32, seed=5)
        img_b = make_image(32, 32, seed=6)
        sid_a = client.post("/sessions", json={"image": png_b64(img_a)}).json()["session_id"]
        sid_b = client.post("/sessions", json={"image": png_b64(img_b)}).json()["session_id"]
        mask_a1 = decode_mask(
            client.post(f"/sessions/{sid_a}/clicks", json={"row": 8, "col": 8, "polarity": "positive"}).json()["mask"]
        )
        client.post(f"/sessions/{sid_b}/clicks", json={"row": 20, "col": 20, "polarity": "positive"})
        client.put(f"/sessions/{sid_b}/granularity", json={"value": 0.1})
        summary_a = client.get(f"/sessions/{sid_a}").json()
        assert summary_a["granularity"] == 1.0
        assert len(summary_a["clicks"]) == 1
        # replaying A alone gives the same mask despite B's activity
        fresh_a = self.run_session(client, img_a, [(8, 8, "positive")])
        assert np.array_equal(mask_a1, fresh_a)


def test_ttl_eviction(tiny_model):
    client = TestClient(create_app(tiny_model, ttl_seconds=0.0))
    image = make_image(32, 32, seed=7)
    sid = client.post("/sessions", json={"image": png_b64(image)}).json()["session_id"]
    import time

    time.sleep(0.01)
    resp = client.get(f"/sessions/{sid}")
    assert resp.status_code == 404
