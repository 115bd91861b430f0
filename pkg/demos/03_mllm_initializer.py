"""Exercise the MLLM initializer contract against a local mock service.

Spins up a throwaway HTTP server standing in for a multimodal-LLM endpoint,
then walks through the three behaviors that matter in production: a valid
response becomes a material field (rigid objects frozen and capped), an
out-of-contract response is rejected field-by-field, and with a fallback
field configured the failure degrades gracefully instead of raising.

    python demos/03_mllm_initializer.py
"""

import json
import logging
import sys
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer
from pathlib import Path

from elastident.errors import SchemaViolationError
from elastident.initializer import InitRequest, manual_init, mllm_init
from elastident.scene import load_scene

ROOT = Path(__file__).resolve().parents[1]


class _Handler(BaseHTTPRequestHandler):
    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        labels = [o["label"] for o in body["objects"]]
        print(f"  [mock service] asked about objects: {labels}")
        response = json.dumps(self.server.next_response).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(response)

    def log_message(self, fmt, *args):
        pass


def main():
    logging.basicConfig(level=logging.WARNING, format="  [log] %(message)s",
                        stream=sys.stdout)
    scene = load_scene(ROOT / "scenes" / "two_object_frozen.txt")
    request = InitRequest.from_scene(scene)

    server = HTTPServer(("127.0.0.1", 0), _Handler)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    endpoint = f"http://127.0.0.1:{server.server_address[1]}/init"
    print(f"mock MLLM endpoint at {endpoint}\n")

    print("1) valid response -> material field")
    server.next_response = {
        "objects": [
            {"object_id": 0, "youngs_modulus_pa": 8.0e3, "poisson_ratio": 0.42,
             "is_rigid": False, "confidence": 0.8},
            {"object_id": 1, "youngs_modulus_pa": 2.0e11, "poisson_ratio": 0.29,
             "is_rigid": True, "confidence": 0.95},
        ]
    }
    field = mllm_init(endpoint, request)
    for oid in field.object_ids():
        p = field.params(oid)
        state = "frozen" if field.is_frozen(oid) else "optimizable"
        print(f"  object {oid}: E = {p.youngs_modulus:.3g} Pa, "
              f"nu = {p.poisson_ratio}, density = {p.density} kg/m^3 ({state})")
    print("  note: the rigid object's 2e11 Pa was capped to the searchable "
          "maximum and frozen\n")

    print("2) out-of-contract response -> typed rejection")
    server.next_response = {
        "objects": [
            {"object_id": 0, "youngs_modulus_pa": -3.0, "poisson_ratio": 0.42,
             "is_rigid": False, "confidence": 0.8},
            {"object_id": 1, "youngs_modulus_pa": 2.0e11, "poisson_ratio": 0.29,
             "is_rigid": True, "confidence": 0.95},
        ]
    }
    try:
        mllm_init(endpoint, request)
    except SchemaViolationError as err:
        print(f"  rejected (field {err.field!r}): {err}\n")

    print("3) same bad response, but with the scene materials as fallback")
    fallback = manual_init(scene)
    field = mllm_init(endpoint, request, fallback=fallback)
    print(f"  got the fallback field back: {field == fallback}")

    server.shutdown()
    server.server_close()


if __name__ == "__main__":
    main()
