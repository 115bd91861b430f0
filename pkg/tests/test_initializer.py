"""Initial material fields: validation contract and the MLLM HTTP path."""

import json
import logging

import numpy as np
import pytest

from elastident.errors import (
    DomainError,
    NoFallbackError,
    SchemaViolationError,
    TransportError,
)
from elastident.initializer import (
    API_KEY_ENV,
    RIGID_E_CAP,
    InitObject,
    InitRequest,
    manual_init,
    mllm_init,
    validate_init_response,
)
from elastident.material import MaterialField, MaterialParams

from conftest import make_malformed_payload, valid_init_payload

SEED = 60601


def request_for_ids():
    return InitRequest(
        objects=(
            InitObject(object_id=0, label="soft tissue", density=1000.0),
            InitObject(object_id=1, label="metal tool", density=7800.0),
        )
    )


# -------------------------------------------------------------- containers


def test_init_object_validation():
    InitObject(object_id=0, label="tissue", density=1000.0)
    for bad in (
        dict(object_id=-1, label="x", density=1.0),
        dict(object_id=0, label="", density=1.0),
        dict(object_id=0, label="x", density=0.0),
    ):
        with pytest.raises(DomainError):
            InitObject(**bad)


def test_init_request_validation():
    obj = InitObject(object_id=0, label="x", density=1.0)
    with pytest.raises(DomainError):
        InitRequest(objects=())
    with pytest.raises(DomainError):
        InitRequest(objects=(obj, obj))  # duplicate id
    with pytest.raises(DomainError):
        InitRequest(objects=("nope",))
    with pytest.raises(DomainError):
        InitRequest(objects=(obj,), prompt_template="haiku-v9")


def test_init_request_from_scene(mini_scene):
    request = InitRequest.from_scene(mini_scene)
    (obj,) = request.objects
    assert obj.object_id == 0
    assert obj.label == "test block"
    assert obj.density == 1000.0


def test_manual_init_is_identity(mini_scene):
    field = manual_init(mini_scene)
    assert field == mini_scene.material_field()
    assert field.params(0).youngs_modulus == 5e3


# -------------------------------------------------------------- validation


def test_validate_accepts_valid_payload():
    out = validate_init_response(valid_init_payload(), {0, 1})
    assert out[0] == (5431.25, 0.31, False, 0.9)
    assert out[1] == (2.5e9, 0.3, True, 0.75)


def test_validate_rejects_malformed_with_field_name():
    cases = [
        ({"answer": []}, "objects"),
        ({"objects": "prose"}, "objects"),
        ({"objects": [{"youngs_modulus_pa": 1.0}]}, "object_id"),
        ({"objects": [{"object_id": True, "youngs_modulus_pa": 1e4,
                       "poisson_ratio": 0.3, "is_rigid": False,
                       "confidence": 1.0}]}, "object_id"),
        ({"objects": [{"object_id": 0, "youngs_modulus_pa": -5.0,
                       "poisson_ratio": 0.3, "is_rigid": False,
                       "confidence": 1.0}]}, "youngs_modulus_pa"),
        ({"objects": [{"object_id": 0, "youngs_modulus_pa": True,
                       "poisson_ratio": 0.3, "is_rigid": False,
                       "confidence": 1.0}]}, "youngs_modulus_pa"),
        ({"objects": [{"object_id": 0, "youngs_modulus_pa": 1e4,
                       "poisson_ratio": 0.5, "is_rigid": False,
                       "confidence": 1.0}]}, "poisson_ratio"),
        ({"objects": [{"object_id": 0, "youngs_modulus_pa": 1e4,
                       "poisson_ratio": 0.3, "is_rigid": 1,
                       "confidence": 1.0}]}, "is_rigid"),
        ({"objects": [{"object_id": 0, "youngs_modulus_pa": 1e4,
                       "poisson_ratio": 0.3, "is_rigid": False,
                       "confidence": 1.5}]}, "confidence"),
        ({"objects": [{"object_id": 0, "youngs_modulus_pa": 1e4,
                       "poisson_ratio": 0.3, "is_rigid": False,
                       "confidence": 1.0, "color": "red"}]}, "color"),
        ({"objects": []}, "object_id"),  # missing coverage
    ]
    for payload, field_name in cases:
        with pytest.raises(SchemaViolationError) as err:
            validate_init_response(payload, {0})
        assert err.value.field == field_name, payload


def test_validate_fuzz_never_accepts():
    rng = np.random.default_rng(SEED)
    for _ in range(300):
        with pytest.raises(SchemaViolationError):
            validate_init_response(make_malformed_payload(rng), {0, 1})


# --------------------------------------------------------------- http path


def test_mllm_init_success(mock_endpoint, monkeypatch):
    monkeypatch.delenv(API_KEY_ENV, raising=False)
    mock_endpoint.queue(valid_init_payload())
    field = mllm_init(mock_endpoint.url, request_for_ids())
    assert isinstance(field, MaterialField)
    # Non-rigid values round-trip bit-exactly; the density is client-side.
    assert field.params(0).youngs_modulus == 5431.25
    assert field.params(0).poisson_ratio == 0.31
    assert field.params(0).density == 1000.0
    assert not field.is_frozen(0)
    # Rigid objects come back frozen and capped at the searchable maximum.
    assert field.is_frozen(1)
    assert field.params(1).youngs_modulus == RIGID_E_CAP
    assert field.params(1).density == 7800.0

    headers, body = mock_endpoint.requests[0]
    assert "Authorization" not in headers
    assert body["prompt_template"] == "surgical-material-v1"
    assert "ONLY with JSON" in body["prompt"]
    assert [o["label"] for o in body["objects"]] == ["soft tissue", "metal tool"]


def test_mllm_init_sends_api_key_and_image(mock_endpoint, monkeypatch, tmp_path):
    monkeypatch.setenv(API_KEY_ENV, "sk-test-123")
    image = tmp_path / "ref.png"
    image.write_bytes(b"\x89PNG fake bytes")
    request = InitRequest(
        objects=(
            InitObject(object_id=0, label="soft tissue", density=1000.0,
                       image_path=str(image)),
            InitObject(object_id=1, label="metal tool", density=7800.0),
        )
    )
    mock_endpoint.queue(valid_init_payload())
    mllm_init(mock_endpoint.url, request)
    headers, body = mock_endpoint.requests[0]
    assert headers["Authorization"] == "Bearer sk-test-123"
    import base64

    assert base64.b64decode(body["objects"][0]["image_b64"]) == b"\x89PNG fake bytes"
    assert "image_b64" not in body["objects"][1]


def test_mllm_init_transport_errors(mock_endpoint, monkeypatch):
    monkeypatch.delenv(API_KEY_ENV, raising=False)
    mock_endpoint.queue({"unused": True}, status=503)
    with pytest.raises(TransportError):
        mllm_init(mock_endpoint.url, request_for_ids())

    mock_endpoint.queue(b"this is not json")
    with pytest.raises(TransportError):
        mllm_init(mock_endpoint.url, request_for_ids())

    # Nothing listens on this port: connection-level failure.
    with pytest.raises(TransportError):
        mllm_init("http://127.0.0.1:9/init", request_for_ids(), timeout=0.5)


def test_mllm_init_schema_error_without_fallback(mock_endpoint, monkeypatch):
    monkeypatch.delenv(API_KEY_ENV, raising=False)
    mock_endpoint.queue({"objects": []})
    with pytest.raises(SchemaViolationError):
        mllm_init(mock_endpoint.url, request_for_ids())


def test_mllm_init_fallback_paths(mock_endpoint, monkeypatch, caplog):
    monkeypatch.delenv(API_KEY_ENV, raising=False)
    fallback = MaterialField({0: (MaterialParams(1e4, 0.3), False)})

    with caplog.at_level(logging.WARNING, logger="elastident.initializer"):
        assert mllm_init(None, request_for_ids(), fallback=fallback) is fallback
    assert "no endpoint" in caplog.text

    with pytest.raises(NoFallbackError):
        mllm_init(None, request_for_ids())
    with pytest.raises(NoFallbackError):
        mllm_init("", request_for_ids())

    mock_endpoint.queue({"objects": []})  # schema violation -> fallback
    assert mllm_init(mock_endpoint.url, request_for_ids(),
                     fallback=fallback) is fallback
    mock_endpoint.queue({"unused": True}, status=500)  # transport -> fallback
    assert mllm_init(mock_endpoint.url, request_for_ids(),
                     fallback=fallback) is fallback


def test_mllm_init_fuzz_through_http(mock_endpoint, monkeypatch):
    # Malformed service responses must never become a material field: each
    # raises a typed error, and anything that does validate obeys the
    # MaterialParams invariants by construction.
    monkeypatch.delenv(API_KEY_ENV, raising=False)
    rng = np.random.default_rng(SEED + 1)
    request = request_for_ids()
    rejected = 0
    for _ in range(60):
        mock_endpoint.queue(make_malformed_payload(rng))
        try:
            field = mllm_init(mock_endpoint.url, request)
        except (SchemaViolationError, TransportError):
            rejected += 1
            continue
        for oid in field.object_ids():  # pragma: no cover - must not happen
            MaterialParams(
                field.params(oid).youngs_modulus,
                field.params(oid).poisson_ratio,
                field.params(oid).density,
            )
    assert rejected == 60
