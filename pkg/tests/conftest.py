"""Shared fixtures: scene paths and a one-time JIT warm-up.

The compiled kernels are cached on disk, but the very first call in a fresh
environment pays the compile cost. Timed tests must never pay it, so a
session-scoped autouse fixture touches every hot kernel once.
"""

import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer
from pathlib import Path

import pytest

from elastident import Camera, observe, simulate
from elastident.scene import load_scene

SCENES = Path(__file__).resolve().parents[1] / "scenes"

MINI_SCENE = SCENES / "mini.txt"
BENCHMARK_SCENE = SCENES / "benchmark_soft_cube.txt"
TWO_OBJECT_SCENE = SCENES / "two_object_frozen.txt"


@pytest.fixture(scope="session", autouse=True)
def _warm_kernels():
    """Compile (or load from cache) every jitted kernel before any test runs."""
    scene = load_scene(MINI_SCENE)
    snapshots = simulate(scene, scene.sim, n_frames=1)
    observe(snapshots, scene.camera, scene.sim.dt * scene.sim.substeps_per_frame)


@pytest.fixture(scope="session")
def mini_scene():
    return load_scene(MINI_SCENE)


@pytest.fixture(scope="session")
def benchmark_scene():
    return load_scene(BENCHMARK_SCENE)


@pytest.fixture(scope="session")
def two_object_scene():
    return load_scene(TWO_OBJECT_SCENE)


@pytest.fixture()
def camera_32():
    return Camera(image_w=32, image_h=32, world_window=(0.0, 1.0, 0.0, 1.0),
                  splat_radius=1.5)


class _QueueHandler(BaseHTTPRequestHandler):
    """Serves queued (status, body-bytes) responses and records request bodies."""

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        body = self.rfile.read(length)
        self.server.requests.append(
            (dict(self.headers), json.loads(body) if body else None)
        )
        status, payload = self.server.responses.pop(0)
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, fmt, *args):
        pass


class MockEndpoint:
    """A local HTTP endpoint that replays scripted responses."""

    def __init__(self):
        self.server = HTTPServer(("127.0.0.1", 0), _QueueHandler)
        self.server.responses = []
        self.server.requests = []
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    @property
    def url(self):
        host, port = self.server.server_address
        return f"http://{host}:{port}/init"

    @property
    def requests(self):
        return self.server.requests

    def queue(self, payload, status=200):
        body = payload if isinstance(payload, bytes) else json.dumps(payload).encode()
        self.server.responses.append((status, body))

    def close(self):
        self.server.shutdown()
        self.server.server_close()
        self.thread.join()


@pytest.fixture()
def mock_endpoint():
    endpoint = MockEndpoint()
    yield endpoint
    endpoint.close()


def valid_init_payload():
    """A well-formed response for object ids {0, 1}."""
    return {
        "objects": [
            {"object_id": 0, "youngs_modulus_pa": 5431.25, "poisson_ratio": 0.31,
             "is_rigid": False, "confidence": 0.9},
            {"object_id": 1, "youngs_modulus_pa": 2.5e9, "poisson_ratio": 0.3,
             "is_rigid": True, "confidence": 0.75},
        ]
    }


def make_malformed_payload(rng):
    """One payload violating the init-response contract, chosen at random.

    Every branch is invalid by construction, so a validator accepting any
    of these is a bug.
    """
    payload = valid_init_payload()
    entry = payload["objects"][int(rng.integers(0, 2))]
    kind = int(rng.integers(0, 12))
    if kind == 0:
        del payload["objects"]
    elif kind == 1:
        payload["objects"] = rng.choice(["prose answer", 17, None, {"0": entry}])
    elif kind == 2:
        payload["objects"].append("not an object")
    elif kind == 3:
        del entry[rng.choice(["object_id", "youngs_modulus_pa", "poisson_ratio",
                              "is_rigid", "confidence"])]
    elif kind == 4:
        entry["object_id"] = rng.choice([True, "zero", 1.5, None, 99])
    elif kind == 5:
        payload["objects"].append(dict(payload["objects"][0]))  # duplicate id
    elif kind == 6:
        entry["youngs_modulus_pa"] = rng.choice(
            [0.0, -1e4, float("nan"), float("inf"), "1e4", False, None]
        )
    elif kind == 7:
        entry["poisson_ratio"] = rng.choice(
            [0.0, 0.5, -0.2, 0.75, float("nan"), "0.3", True, None]
        )
    elif kind == 8:
        entry["is_rigid"] = rng.choice([0, 1, "false", 2.5, None])
    elif kind == 9:
        entry["confidence"] = rng.choice([-0.1, 1.5, float("nan"), "high", None])
    elif kind == 10:
        entry["shear_modulus_pa"] = 1e3  # key outside the schema
    else:
        payload["objects"] = payload["objects"][:1]  # misses object id 1
    return payload
