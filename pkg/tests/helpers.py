"""Shared builders for the test suite: calibrated desk-scale oracles, seeded
images with exact confidence margins, and a stdlib wire-protocol stub server.
"""

from __future__ import annotations

import json
import math
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from evoattack import AttackConfig, HalfBrightnessOracle, ImageTensor, PrototypeOracle

DATA_DIR = Path(__file__).parent / "data"

# The half-brightness benchmark: 32x32 gray images whose halves differ by
# GAP in mean brightness; temperature chosen so the clean probability margin
# is exactly 2*sigmoid(GAP/TEMPERATURE) - 1 = 0.2.
GAP = 0.0015
TEMPERATURE = GAP / math.log(0.6 / 0.4)
IMAGE_SIDE = 32
ATTACK_GRID = dict(
    init_stddevs=(0.2, 0.15, 0.1, 0.05, 0.5),
    init_point_counts=(512, 256, 128, 64),
)

# Binary-outcome benchmark runs on 16x16 images (the Monte-Carlo estimate
# costs 100 queries per evaluation, so the spatial budget is kept small).
BINARY_SIDE = 16
BINARY_GAP = 0.006
BINARY_GRID = dict(
    init_stddevs=(0.2, 0.15, 0.1, 0.05, 0.5),
    init_point_counts=(128, 64, 32, 16),
)

# Targeted benchmark: four 16x16 prototypes with a faint corner patch each.
PROTO_SIDE = 16
PROTO_PATCH = 6
PROTO_INTENSITY = 0.02
PROTO_TEMPERATURE = 0.05


def balanced_image(seed: int, gap: float = GAP, side: int = IMAGE_SIDE) -> ImageTensor:
    """Textured gray image whose left/right half means are exactly
    0.5 +/- gap/2, so the half-brightness margin is exact."""
    rng = np.random.default_rng(10_000 + seed)
    arr = np.full((side, side, 1), 0.5) + rng.uniform(-0.05, 0.05, size=(side, side, 1))
    half = side // 2
    arr[:, :half, :] -= arr[:, :half, :].mean() - (0.5 + gap / 2)
    arr[:, half:, :] -= arr[:, half:, :].mean() - (0.5 - gap / 2)
    return ImageTensor(np.clip(arr, 0.0, 1.0))


def brightness_oracle(binary_only: bool = False, side: int = IMAGE_SIDE) -> HalfBrightnessOracle:
    return HalfBrightnessOracle(side, side, temperature=TEMPERATURE, binary_only=binary_only)


def attack_config(seed: int, **overrides) -> AttackConfig:
    base = dict(ATTACK_GRID, rng_seed=seed)
    base.update(overrides)
    return AttackConfig(**base)


def prototype_images(side: int = PROTO_SIDE, patch: int = PROTO_PATCH,
                     intensity: float = PROTO_INTENSITY) -> list[ImageTensor]:
    corners = [(0, 0), (0, side - patch), (side - patch, 0), (side - patch, side - patch)]
    protos = []
    for r, c in corners:
        arr = np.full((side, side, 1), 0.5)
        arr[r:r + patch, c:c + patch, :] += intensity
        protos.append(ImageTensor(arr))
    return protos


def prototype_oracle(protos=None, temperature: float = PROTO_TEMPERATURE) -> PrototypeOracle:
    return PrototypeOracle(protos or prototype_images(), temperature=temperature)


def load_wire_corpus() -> list[dict]:
    return [json.loads(p.read_text()) for p in sorted((DATA_DIR / "wire_corpus").glob("*.json"))]


class WireStub:
    """Minimal threaded HTTP server speaking the oracle wire protocol.

    predict_fn maps a (H, W, C) array to a list of probs; the failure knobs
    simulate transport flakiness and malformed services.
    """

    def __init__(self, predict_fn, classes: int, shape: tuple[int, int, int],
                 binary_only: bool = False, fail_first: int = 0,
                 respond_500_first: int = 0):
        self.predict_fn = predict_fn
        self.classes = classes
        self.shape = tuple(shape)
        self.binary_only = binary_only
        self.fail_first = fail_first
        self.respond_500_first = respond_500_first
        self.predict_calls = 0
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def _send(self, code: int, payload: dict):
                body = json.dumps(payload).encode()
                self.send_response(code)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_GET(self):
                if self.path == "/info":
                    self._send(200, {"classes": stub.classes, "shape": list(stub.shape),
                                     "binary_only": stub.binary_only})
                else:
                    self._send(404, {"error": "not found"})

            def do_POST(self):
                if self.path != "/predict":
                    self._send(404, {"error": "not found"})
                    return
                stub.predict_calls += 1
                if stub.fail_first > 0:
                    stub.fail_first -= 1
                    self.connection.close()
                    return
                if stub.respond_500_first > 0:
                    stub.respond_500_first -= 1
                    self._send(500, {"error": "transient"})
                    return
                length = int(self.headers.get("Content-Length", 0))
                try:
                    payload = json.loads(self.rfile.read(length))
                    arr = np.asarray(payload["data"], dtype=np.float64).reshape(payload["shape"])
                except Exception:
                    self._send(400, {"error": "bad request"})
                    return
                if tuple(arr.shape) != stub.shape:
                    self._send(400, {"error": f"expected shape {stub.shape}"})
                    return
                self._send(200, {"probs": list(stub.predict_fn(arr))})

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self._server.server_address
        return f"http://{host}:{port}"

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5)
        return False


def echo_stub(probs, classes=None, shape=(2, 2, 1), **kwargs) -> WireStub:
    probs = list(probs)
    return WireStub(lambda arr: probs, classes or len(probs), shape, **kwargs)
