import base64
import io
import json

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from instructedit.backends import make_fake_suite
from instructedit.prompting import FewShotExample
from instructedit.service import b64_to_image, create_app


def make_image_bytes(size=24, seed=0):
    rng = np.random.default_rng(seed)
    image = Image.fromarray(rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8), "RGB")
    buffer = io.BytesIO()
    image.save(buffer, format="PNG")
    return buffer.getvalue()


def make_pool():
    return [
        FewShotExample(
            transformation=f"repaint wall {i}",
            before_captions=tuple(f"wall {i} photo {j}" for j in range(4)),
            after_captions=tuple(f"repainted wall {i} photo {j}" for j in range(4)),
        )
        for i in range(4)
    ]


@pytest.fixture()
def client():
    suite = make_fake_suite(token_positions=8, embed_dim=16)
    app = create_app(suite, pool=make_pool())
    with TestClient(app, raise_server_exceptions=False) as test_client:
        test_client.suite = suite
        yield test_client


FAST = json.dumps({"ddim_steps": 3})


class TestHealthAndConfig:
    def test_health_reports_backends(self, client):
        response = client.get("/health")
        assert response.status_code == 200
        body = response.json()
        assert body["status"] == "ok"
        assert "captioner" in body["backends"]

    def test_config_reports_edit_defaults(self, client):
        body = client.get("/config").json()
        assert body["edit_defaults"]["ddim_steps"] == 100
        assert body["guidance"] == {"edit": 7.5, "invert": 1.0}
        assert body["pool_examples"] == 4


class TestEditEndpoint:
    def test_round_trip(self, client):
        response = client.post(
            "/edit",
            files={"image": ("src.png", make_image_bytes(), "image/png")},
            data={"instruction": "make the wall blue", "config": FAST},
        )
        assert response.status_code == 200
        body = response.json()
        edited = b64_to_image(body["edited_image"])
        assert edited.size == (24, 24)
        assert body["caption_used"]
        assert len(body["bundle"]["before"]) == 1
        assert body["provenance"]["config"]["ddim_steps"] == 3
        assert body["direction"]["l2_norm"] > 0

    def test_seed_makes_responses_identical(self, client):
        def call():
            return client.post(
                "/edit",
                files={"image": ("src.png", make_image_bytes(), "image/png")},
                data={"instruction": "make the wall blue", "config": FAST, "seed": "7"},
            ).json()

        assert call()["edited_image"] == call()["edited_image"]

    def test_missing_image_is_request_error(self, client):
        response = client.post("/edit", data={"instruction": "make the wall blue"})
        assert response.status_code == 400
        assert response.json()["stage"] == "request"

    def test_invalid_knobs_are_request_error(self, client):
        response = client.post(
            "/edit",
            files={"image": ("src.png", make_image_bytes(), "image/png")},
            data={"instruction": "x", "config": json.dumps({"n_captions": 3})},
        )
        assert response.status_code == 400
        assert response.json()["stage"] == "request"

    def test_undecodable_image_is_request_error(self, client):
        response = client.post(
            "/edit",
            files={"image": ("src.png", b"garbage bytes", "image/png")},
            data={"instruction": "x", "config": FAST},
        )
        assert response.status_code == 400
        assert response.json()["stage"] == "request"

    def test_backend_failure_carries_stage(self, client):
        class BrokenCaptioner:
            def caption(self, image):
                raise RuntimeError("offline")

        client.suite.captioner = BrokenCaptioner()
        response = client.post(
            "/edit",
            files={"image": ("src.png", make_image_bytes(), "image/png")},
            data={"instruction": "make the wall blue", "config": FAST},
        )
        assert response.status_code == 500
        assert response.json()["stage"] == "captioning"


class TestInvertEndpoint:
    def test_returns_latent_and_reconstruction(self, client):
        response = client.post(
            "/invert",
            files={"image": ("src.png", make_image_bytes(), "image/png")},
            data={"ddim_steps": "3"},
        )
        assert response.status_code == 200
        body = response.json()
        assert body["caption_used"]
        latent = body["noise_latent"]
        assert latent["shape"] == [4, 24, 24]
        raw = base64.b64decode(latent["data"])
        values = np.frombuffer(raw, dtype="<f4").reshape(latent["shape"])
        assert np.all(np.isfinite(values))
        assert b64_to_image(body["reconstruction"]).size == (24, 24)

    def test_supplied_caption_skips_captioner(self, client):
        client.post(
            "/invert",
            files={"image": ("src.png", make_image_bytes(), "image/png")},
            data={"caption": "a brown teddy bear", "ddim_steps": "3"},
        )
        assert client.suite.captioner.calls == 0


class TestDirectionsEndpoint:
    def test_bundle_and_stats(self, client):
        response = client.post(
            "/directions",
            json={"instruction": "make it a dog", "config": {"n_captions": 2, "ddim_steps": 3}},
        )
        assert response.status_code == 200
        body = response.json()
        assert len(body["bundle"]["before"]) == 2
        assert len(body["bundle"]["after"]) == 2
        assert body["direction"]["shape"] == [8, 16]
        assert body["completion"]

    def test_lock_in_caption_respected(self, client):
        response = client.post(
            "/directions",
            json={
                "instruction": "make it a dog",
                "caption": "A photo of an orange cat.",
                "config": {"lock_in_mode": "generated_caption", "n_captions": 2},
            },
        )
        assert response.status_code == 200
        assert response.json()["bundle"]["before"][0] == "A photo of an orange cat."

    def test_missing_instruction_is_request_error(self, client):
        response = client.post("/directions", json={"config": {}})
        assert response.status_code == 400
        assert response.json()["stage"] == "request"
