"""Initial material fields: from scene configuration or an MLLM service.

manual_init reads the per-object materials straight out of the scene file.
mllm_init asks an external multimodal-LLM HTTP endpoint to estimate
(E, nu, rigidity) per labeled object under a strict answer-only-JSON
contract, validates every field client-side, and never lets an out-of-range
response become a material field. Densities always come from the scene
configuration; the service is never asked for them.
"""

import base64
import logging
import os
from dataclasses import dataclass
from typing import Optional

import requests

from .errors import (
    DomainError,
    NoFallbackError,
    SchemaViolationError,
    TransportError,
)
from .identify import OptimizeOptions
from .material import MaterialField, MaterialParams

__all__ = [
    "API_KEY_ENV",
    "RIGID_E_CAP",
    "PROMPT_TEMPLATES",
    "InitObject",
    "InitRequest",
    "manual_init",
    "validate_init_response",
    "mllm_init",
]

logger = logging.getLogger(__name__)

# Name of the environment variable holding the service API key; when set,
# requests carry "Authorization: Bearer <key>".
API_KEY_ENV = "ELASTIDENT_MLLM_KEY"

# Rigid objects are frozen and their modulus capped at the optimizer's
# upper log10(E) bound so the value stays inside the searchable range.
RIGID_E_CAP = 10.0 ** OptimizeOptions().logE_bounds[1]

_RESPONSE_SCHEMA = (
    '{"objects": [{"object_id": <int>, "youngs_modulus_pa": <number > 0>, '
    '"poisson_ratio": <number in (0, 0.5)>, "is_rigid": <bool>, '
    '"confidence": <number in [0, 1]>}]}'
)

PROMPT_TEMPLATES = {
    "surgical-material-v1": (
        "You are given surgical-scene objects, each with a text label and "
        "optionally a reference image. Estimate the elastic material of each "
        "object: Young's modulus in pascals, Poisson's ratio, whether the "
        "object is rigid (a metal tool, bone, or anything that deforms "
        "negligibly), and your confidence in [0, 1]. Answer ONLY with JSON "
        "matching this schema, no prose: " + _RESPONSE_SCHEMA
    ),
}


@dataclass(frozen=True)
class InitObject:
    """One object to estimate: id, text label, density (client-side only,
    used to build the resulting field), optional reference image path."""

    object_id: int
    label: str
    density: float
    image_path: Optional[str] = None

    def __post_init__(self):
        if self.object_id < 0:
            raise DomainError(f"object_id must be >= 0, got {self.object_id}")
        if not self.label:
            raise DomainError(f"object {self.object_id} needs a non-empty label")
        if not self.density > 0:
            raise DomainError(
                f"object {self.object_id} density must be positive, got {self.density}"
            )


@dataclass(frozen=True)
class InitRequest:
    """Objects to estimate plus the prompt template to use."""

    objects: tuple
    prompt_template: str = "surgical-material-v1"

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        if not self.objects:
            raise DomainError("init request needs at least one object")
        seen = set()
        for obj in self.objects:
            if not isinstance(obj, InitObject):
                raise DomainError(f"request entries must be InitObject, got {obj!r}")
            if obj.object_id in seen:
                raise DomainError(
                    f"object_id {obj.object_id} appears more than once in the request"
                )
            seen.add(obj.object_id)
        if self.prompt_template not in PROMPT_TEMPLATES:
            raise DomainError(
                f"unknown prompt template {self.prompt_template!r}; "
                f"available: {sorted(PROMPT_TEMPLATES)}"
            )

    @staticmethod
    def from_scene(scene, prompt_template="surgical-material-v1"):
        """Build a request from a parsed scene's labels and densities."""
        objects = tuple(
            InitObject(object_id=o.object_id, label=o.label, density=o.density)
            for o in scene.objects
        )
        return InitRequest(objects=objects, prompt_template=prompt_template)


def manual_init(scene):
    """Material field straight from the scene's inline per-object materials.

    The identity on its inputs: values in the returned field are bit-equal
    to the configured ones. Raises MissingMaterialError listing objects
    without an inline material.
    """
    return scene.material_field()


def _check(condition, field_name, detail):
    if not condition:
        raise SchemaViolationError(
            f"response field '{field_name}' {detail}", field=field_name
        )


def _number(entry, field_name):
    """A strictly-typed finite JSON number (bool is not a number here)."""
    _check(field_name in entry, field_name, "is missing")
    value = entry[field_name]
    _check(
        isinstance(value, (int, float)) and not isinstance(value, bool),
        field_name,
        f"must be a number, got {value!r}",
    )
    value = float(value)
    _check(value == value and abs(value) != float("inf"), field_name,
           f"must be finite, got {value!r}")
    return value


def validate_init_response(payload, expected_ids):
    """Validate a decoded response body against the InitResponse contract.

    Returns {object_id: (youngs_modulus_pa, poisson_ratio, is_rigid,
    confidence)}. Raises SchemaViolationError naming the offending field for
    anything missing, mistyped, out of range, duplicated, or not covering
    exactly the requested object ids.
    """
    _check(isinstance(payload, dict), "objects", "requires a JSON object body")
    _check("objects" in payload, "objects", "is missing")
    entries = payload["objects"]
    _check(isinstance(entries, list), "objects", f"must be a list, got {entries!r}")
    out = {}
    for entry in entries:
        _check(isinstance(entry, dict), "objects",
               f"entries must be objects, got {entry!r}")
        _check("object_id" in entry, "object_id", "is missing")
        oid = entry["object_id"]
        _check(
            isinstance(oid, int) and not isinstance(oid, bool),
            "object_id",
            f"must be an integer, got {oid!r}",
        )
        _check(oid in expected_ids, "object_id",
               f"{oid} was not part of the request")
        _check(oid not in out, "object_id", f"{oid} appears more than once")
        e = _number(entry, "youngs_modulus_pa")
        _check(e > 0.0, "youngs_modulus_pa", f"must be > 0, got {e!r}")
        nu = _number(entry, "poisson_ratio")
        _check(0.0 < nu < 0.5, "poisson_ratio",
               f"must lie strictly in (0, 0.5), got {nu!r}")
        _check("is_rigid" in entry, "is_rigid", "is missing")
        rigid = entry["is_rigid"]
        _check(isinstance(rigid, bool), "is_rigid",
               f"must be a boolean, got {rigid!r}")
        confidence = _number(entry, "confidence")
        _check(0.0 <= confidence <= 1.0, "confidence",
               f"must lie in [0, 1], got {confidence!r}")
        unknown = set(entry) - {
            "object_id", "youngs_modulus_pa", "poisson_ratio", "is_rigid",
            "confidence",
        }
        _check(not unknown, sorted(unknown)[0] if unknown else "",
               "is not part of the response schema")
        out[oid] = (e, nu, rigid, confidence)
    missing = sorted(set(expected_ids) - set(out))
    _check(not missing, "object_id",
           f"response is missing object ids {missing}")
    return out


def _request_body(request):
    objects = []
    for obj in request.objects:
        entry = {"object_id": obj.object_id, "label": obj.label}
        if obj.image_path is not None:
            with open(obj.image_path, "rb") as fh:
                entry["image_b64"] = base64.b64encode(fh.read()).decode("ascii")
        objects.append(entry)
    return {
        "prompt_template": request.prompt_template,
        "prompt": PROMPT_TEMPLATES[request.prompt_template],
        "objects": objects,
    }


def _field_from_response(request, validated):
    entries = {}
    for obj in request.objects:
        e, nu, rigid, confidence = validated[obj.object_id]
        if rigid:
            e = min(e, RIGID_E_CAP)
        params = MaterialParams(
            youngs_modulus=e, poisson_ratio=nu, density=obj.density
        )
        entries[obj.object_id] = (params, rigid)
        logger.info(
            "mllm init: object %d (%s) E=%.4g Pa nu=%.3f rigid=%s confidence=%.2f",
            obj.object_id, obj.label, e, nu, rigid, confidence,
        )
    return MaterialField(entries)


def mllm_init(endpoint, request, timeout=30.0, fallback=None):
    """Ask an MLLM HTTP endpoint for initial materials; validate strictly.

    POSTs a JSON body with the answer-only-JSON prompt and the per-object
    labels (plus base64 reference images when provided), then validates the
    response field by field. Rigid objects come back frozen with the modulus
    capped at RIGID_E_CAP. On any transport, parse, or validation failure
    the fallback field is returned when provided (with the failure recorded
    in the log); without a fallback the failure is raised: TransportError
    for connection/HTTP/decoding problems, SchemaViolationError for contract
    violations. A missing endpoint with no fallback is NoFallbackError.
    """
    if not endpoint:
        if fallback is not None:
            logger.warning("mllm init: no endpoint configured; using fallback field")
            return fallback
        raise NoFallbackError(
            "no MLLM endpoint configured and no fallback material field provided"
        )
    try:
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(API_KEY_ENV)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        try:
            response = requests.post(
                endpoint, json=_request_body(request), headers=headers,
                timeout=timeout,
            )
        except requests.RequestException as exc:
            raise TransportError(f"POST {endpoint} failed: {exc}") from exc
        if response.status_code != 200:
            raise TransportError(
                f"POST {endpoint} returned HTTP {response.status_code}"
            )
        try:
            payload = response.json()
        except ValueError as exc:
            raise TransportError(
                f"response from {endpoint} is not valid JSON: {exc}"
            ) from exc
        expected = {obj.object_id for obj in request.objects}
        validated = validate_init_response(payload, expected)
        return _field_from_response(request, validated)
    except (TransportError, SchemaViolationError) as exc:
        if fallback is not None:
            logger.warning("mllm init failed (%s); using fallback field", exc)
            return fallback
        raise
