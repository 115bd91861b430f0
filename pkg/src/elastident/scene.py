"""Scene description: text format, particle sampling, material records.

A scene file is line-oriented text: optional top-level keys, then sections
introduced by ``[name]``. ``[sim]`` and ``[camera]`` appear at most once;
``[object]`` and ``[force]`` repeat. Keys are ``key = value`` pairs; ``#``
starts a comment. The grammar is documented in the README.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (
    MissingMaterialError,
    SceneParseError,
    SceneValidationError,
)
from .material import MaterialField, MaterialParams
from .mpm import BOUNDARY_BAND_CELLS, ForceEvent, Particles, SimConfig
from .observation import Camera

__all__ = [
    "BoxPrimitive",
    "SpherePrimitive",
    "SceneObject",
    "Scene",
    "parse_scene",
    "load_scene",
    "write_material_field",
    "read_material_field",
]

_TRUE_WORDS = {"true", "yes", "1", "on"}
_FALSE_WORDS = {"false", "no", "0", "off"}


@dataclass(frozen=True)
class BoxPrimitive:
    lo: tuple
    hi: tuple


@dataclass(frozen=True)
class SpherePrimitive:
    center: tuple
    radius: float


@dataclass(frozen=True)
class SceneObject:
    object_id: int
    label: str
    primitive: object
    particles_per_cell: int
    density: float
    youngs_modulus: Optional[float]
    poisson_ratio: Optional[float]
    frozen: bool


@dataclass(frozen=True)
class Scene:
    """Parsed scene: solver config, camera, objects, and the sampling seed."""

    seed: int
    sim: SimConfig
    camera: Camera
    objects: tuple

    @property
    def forces(self):
        return self.sim.external_forces

    def material_field(self):
        """Material field from the inline per-object materials.

        Raises MissingMaterialError listing objects whose scene entry has no
        inline Young's modulus / Poisson's ratio pair.
        """
        entries = {}
        missing = []
        for obj in self.objects:
            if obj.youngs_modulus is None or obj.poisson_ratio is None:
                missing.append(obj.object_id)
                continue
            params = MaterialParams(
                youngs_modulus=obj.youngs_modulus,
                poisson_ratio=obj.poisson_ratio,
                density=obj.density,
            )
            entries[obj.object_id] = (params, obj.frozen)
        if missing:
            raise MissingMaterialError(missing)
        return MaterialField(entries)

    def densities(self):
        """object_id -> density (kg/m^3) straight from the scene entries."""
        return {obj.object_id: obj.density for obj in self.objects}

    def sample_particles(self, config=None):
        """Grid-stratified jittered particle sampling, fixed by the seed.

        Each grid cell overlapping a primitive's bounding box draws exactly
        particles_per_cell candidate points from one seeded generator in a
        fixed (object order, lexicographic cell) order; candidates outside
        the primitive are dropped, so identical (file, seed) pairs always
        produce identical particle sets. Rest volume is cell_volume / ppc
        and mass is density * rest volume.
        """
        cfg = self.sim if config is None else config
        h = cfg.h
        n_cells = cfg.grid_n - 1
        rng = np.random.default_rng(self.seed)
        xs, ms, v0s, oids = [], [], [], []
        for obj in self.objects:
            lo, hi = _primitive_bbox(obj.primitive)
            c_lo = [max(0, int(np.floor(lo[a] / h))) for a in range(3)]
            c_hi = [min(n_cells - 1, int(np.floor(hi[a] / h))) for a in range(3)]
            v0 = h**3 / obj.particles_per_cell
            mass = obj.density * v0
            for ci in range(c_lo[0], c_hi[0] + 1):
                for cj in range(c_lo[1], c_hi[1] + 1):
                    for ck in range(c_lo[2], c_hi[2] + 1):
                        pts = rng.random((obj.particles_per_cell, 3))
                        pts[:, 0] = (ci + pts[:, 0]) * h
                        pts[:, 1] = (cj + pts[:, 1]) * h
                        pts[:, 2] = (ck + pts[:, 2]) * h
                        keep = _inside_primitive(obj.primitive, pts)
                        if keep.any():
                            xs.append(pts[keep])
                            count = int(keep.sum())
                            ms.append(np.full(count, mass))
                            v0s.append(np.full(count, v0))
                            oids.append(np.full(count, obj.object_id, dtype=np.int64))
        if xs:
            x = np.concatenate(xs)
            m = np.concatenate(ms)
            v0 = np.concatenate(v0s)
            oid = np.concatenate(oids)
        else:
            x = np.zeros((0, 3))
            m = np.zeros(0)
            v0 = np.zeros(0)
            oid = np.zeros(0, dtype=np.int64)
        return Particles(x, np.zeros_like(x), m, v0, oid)


def _primitive_bbox(primitive):
    if isinstance(primitive, BoxPrimitive):
        return primitive.lo, primitive.hi
    c, r = primitive.center, primitive.radius
    return tuple(c[a] - r for a in range(3)), tuple(c[a] + r for a in range(3))


def _inside_primitive(primitive, pts):
    if isinstance(primitive, BoxPrimitive):
        lo = np.asarray(primitive.lo)
        hi = np.asarray(primitive.hi)
        return np.all((pts >= lo) & (pts <= hi), axis=1)
    c = np.asarray(primitive.center)
    d = pts - c
    return np.sum(d * d, axis=1) <= primitive.radius**2


class _Section:
    def __init__(self, name, line):
        self.name = name
        self.line = line
        self.entries = {}  # key -> (value, line, column)


def _tokenize(text):
    """Split into (top_entries, sections); raises SceneParseError."""
    top = {}
    sections = []
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        stripped = line.strip()
        col = line.index(stripped[0]) + 1
        if stripped.startswith("["):
            if not stripped.endswith("]") or len(stripped) < 3:
                raise SceneParseError(
                    f"malformed section header {stripped!r}", line=lineno, column=col
                )
            current = _Section(stripped[1:-1].strip(), lineno)
            sections.append(current)
            continue
        if "=" not in stripped:
            raise SceneParseError(
                f"expected 'key = value' or '[section]', got {stripped!r}",
                line=lineno,
                column=col,
            )
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise SceneParseError("empty key before '='", line=lineno, column=col)
        if not value:
            raise SceneParseError(
                f"key '{key}' has an empty value", line=lineno,
                column=line.index("=") + 2,
            )
        value_col = line.index("=") + 1 + line[line.index("=") + 1 :].index(
            value[0]
        ) + 1
        target = top if current is None else current.entries
        if key in target:
            raise SceneParseError(
                f"duplicate key '{key}'", line=lineno, column=col
            )
        # (value, line, value column, key column): value-shaped complaints
        # point at the value, key-shaped ones (unknown key) at the key.
        target[key] = (value, lineno, value_col, col)
    return top, sections


def _floats(entry, key, count):
    value, line, col = entry[:3]
    parts = value.split()
    if len(parts) != count:
        raise SceneParseError(
            f"'{key}' needs {count} numbers, got {len(parts)}", line=line, column=col
        )
    out = []
    for p in parts:
        try:
            out.append(float(p))
        except ValueError:
            raise SceneParseError(
                f"'{key}' has a non-numeric entry {p!r}", line=line, column=col
            ) from None
    return out


def _float(entry, key):
    return _floats(entry, key, 1)[0]


def _int(entry, key):
    value, line, col = entry[:3]
    try:
        return int(value)
    except ValueError:
        raise SceneParseError(
            f"'{key}' must be an integer, got {value!r}", line=line, column=col
        ) from None


def _bool(entry, key):
    value, line, col = entry[:3]
    word = value.lower()
    if word in _TRUE_WORDS:
        return True
    if word in _FALSE_WORDS:
        return False
    raise SceneParseError(
        f"'{key}' must be a boolean, got {value!r}", line=line, column=col
    )


def _reject_unknown(entries, allowed, section):
    for key, (_, line, _, col) in entries.items():
        if key not in allowed:
            raise SceneParseError(
                f"unknown key '{key}' in [{section}]", line=line, column=col
            )


def _parse_sim(entries, forces):
    _reject_unknown(
        entries, {"grid_n", "dt", "substeps", "gravity", "boundary"}, "sim"
    )
    kwargs = {}
    if "grid_n" in entries:
        kwargs["grid_n"] = _int(entries["grid_n"], "grid_n")
    if "dt" in entries:
        kwargs["dt"] = _float(entries["dt"], "dt")
    if "substeps" in entries:
        kwargs["substeps_per_frame"] = _int(entries["substeps"], "substeps")
    if "gravity" in entries:
        kwargs["gravity"] = tuple(_floats(entries["gravity"], "gravity", 3))
    if "boundary" in entries:
        value, line, col = entries["boundary"][:3]
        words = value.split()
        if len(words) == 1:
            kwargs["boundary"] = words[0]
        elif len(words) == 6:
            kwargs["boundary"] = tuple(words)
        else:
            raise SceneParseError(
                "'boundary' needs one wall type or six", line=line, column=col
            )
    try:
        return SimConfig(external_forces=tuple(forces), **kwargs)
    except Exception as exc:
        raise SceneValidationError(f"[sim] is invalid: {exc}") from exc


def _parse_camera(entries):
    _reject_unknown(
        entries, {"image_w", "image_h", "window", "splat_radius"}, "camera"
    )
    kwargs = {"image_w": 64, "image_h": 64, "world_window": (0.0, 1.0, 0.0, 1.0)}
    if "image_w" in entries:
        kwargs["image_w"] = _int(entries["image_w"], "image_w")
    if "image_h" in entries:
        kwargs["image_h"] = _int(entries["image_h"], "image_h")
    if "window" in entries:
        kwargs["world_window"] = tuple(_floats(entries["window"], "window", 4))
    if "splat_radius" in entries:
        kwargs["splat_radius"] = _float(entries["splat_radius"], "splat_radius")
    try:
        return Camera(**kwargs)
    except Exception as exc:
        raise SceneValidationError(f"[camera] is invalid: {exc}") from exc


def _parse_object(section):
    entries = section.entries
    _reject_unknown(
        entries,
        {"id", "label", "box", "sphere", "ppc", "density", "youngs", "poisson", "frozen"},
        "object",
    )
    if "id" not in entries:
        raise SceneValidationError(
            f"[object] at line {section.line} is missing required key 'id'"
        )
    object_id = _int(entries["id"], "id")
    if object_id < 0:
        raise SceneValidationError(f"object id must be >= 0, got {object_id}")
    if ("box" in entries) == ("sphere" in entries):
        raise SceneValidationError(
            f"object {object_id} needs exactly one of 'box' or 'sphere'"
        )
    if "box" in entries:
        vals = _floats(entries["box"], "box", 6)
        primitive = BoxPrimitive(lo=tuple(vals[:3]), hi=tuple(vals[3:]))
        for a in range(3):
            if not primitive.lo[a] < primitive.hi[a]:
                raise SceneValidationError(
                    f"object {object_id} 'box' needs lo < hi per axis, got {vals}"
                )
    else:
        vals = _floats(entries["sphere"], "sphere", 4)
        primitive = SpherePrimitive(center=tuple(vals[:3]), radius=vals[3])
        if not primitive.radius > 0:
            raise SceneValidationError(
                f"object {object_id} 'sphere' needs a positive radius"
            )
    if "density" not in entries:
        raise SceneValidationError(f"object {object_id} is missing required key 'density'")
    density = _float(entries["density"], "density")
    ppc = _int(entries["ppc"], "ppc") if "ppc" in entries else 8
    if not 1 <= ppc <= 64:
        raise SceneValidationError(
            f"object {object_id} 'ppc' must be in [1, 64], got {ppc}"
        )
    has_e = "youngs" in entries
    has_nu = "poisson" in entries
    if has_e != has_nu:
        raise SceneValidationError(
            f"object {object_id} must set 'youngs' and 'poisson' together or neither"
        )
    youngs = _float(entries["youngs"], "youngs") if has_e else None
    poisson = _float(entries["poisson"], "poisson") if has_nu else None
    if has_e:
        try:
            MaterialParams(youngs, poisson, density)
        except Exception as exc:
            raise SceneValidationError(f"object {object_id} material: {exc}") from exc
    elif not (density > 0 and np.isfinite(density)):
        raise SceneValidationError(
            f"object {object_id} 'density' must be positive and finite, got {density}"
        )
    label = entries["label"][0] if "label" in entries else f"object {object_id}"
    frozen = _bool(entries["frozen"], "frozen") if "frozen" in entries else False
    return SceneObject(
        object_id=object_id,
        label=label,
        primitive=primitive,
        particles_per_cell=ppc,
        density=density,
        youngs_modulus=youngs,
        poisson_ratio=poisson,
        frozen=frozen,
    )


def _parse_force(section):
    entries = section.entries
    _reject_unknown(entries, {"region", "force", "t"}, "force")
    for key in ("region", "force", "t"):
        if key not in entries:
            raise SceneValidationError(
                f"[force] at line {section.line} is missing required key '{key}'"
            )
    region = _floats(entries["region"], "region", 6)
    force = _floats(entries["force"], "force", 3)
    t0, t1 = _floats(entries["t"], "t", 2)
    try:
        return ForceEvent(
            region_lo=tuple(region[:3]),
            region_hi=tuple(region[3:]),
            force_density=tuple(force),
            t_start=t0,
            t_end=t1,
        )
    except Exception as exc:
        raise SceneValidationError(
            f"[force] at line {section.line} is invalid: {exc}"
        ) from exc


def _check_interior(obj, config):
    lo, hi = _primitive_bbox(obj.primitive)
    bound_lo = config.interior_lo
    bound_hi = config.interior_hi
    for a in range(3):
        if lo[a] < bound_lo or hi[a] > bound_hi:
            raise SceneValidationError(
                f"object {obj.object_id} primitive leaves the valid interior "
                f"[{bound_lo:.6g}, {bound_hi:.6g}] on axis {a} "
                f"(bounds [{lo[a]:.6g}, {hi[a]:.6g}])"
            )


def parse_scene(text):
    """Parse scene text into a Scene; see load_scene for the file variant."""
    top, sections = _tokenize(text)
    for key, (_, line, _, col) in top.items():
        if key != "seed":
            raise SceneParseError(
                f"unknown top-level key '{key}' (only 'seed' is allowed)",
                line=line,
                column=col,
            )
    seed = _int(top["seed"], "seed") if "seed" in top else 0
    if seed < 0:
        raise SceneValidationError(f"seed must be >= 0, got {seed}")

    sim_entries = None
    cam_entries = None
    objects = []
    forces = []
    for section in sections:
        if section.name == "sim":
            if sim_entries is not None:
                raise SceneParseError("[sim] appears twice", line=section.line, column=1)
            sim_entries = section.entries
        elif section.name == "camera":
            if cam_entries is not None:
                raise SceneParseError(
                    "[camera] appears twice", line=section.line, column=1
                )
            cam_entries = section.entries
        elif section.name == "object":
            objects.append(_parse_object(section))
        elif section.name == "force":
            forces.append(section)
        else:
            raise SceneParseError(
                f"unknown section [{section.name}]", line=section.line, column=1
            )
    events = [_parse_force(s) for s in forces]
    sim = _parse_sim(sim_entries or {}, events)
    camera = _parse_camera(cam_entries or {})
    if not objects:
        raise SceneValidationError("scene defines no [object] sections")
    seen = set()
    for obj in objects:
        if obj.object_id in seen:
            raise SceneValidationError(
                f"object id {obj.object_id} appears more than once"
            )
        seen.add(obj.object_id)
        _check_interior(obj, sim)
    return Scene(seed=seed, sim=sim, camera=camera, objects=tuple(objects))


def load_scene(path):
    """Read and parse a scene file.

    Raises SceneParseError with 1-based line/column for grammar problems and
    SceneValidationError naming the offending field for contract problems.
    """
    with open(path, "r", encoding="utf-8") as fh:
        return parse_scene(fh.read())


def write_material_field(path, field):
    """Write a material field as text: object_id E nu density frozen."""
    lines = ["# object_id youngs_modulus_pa poisson_ratio density frozen"]
    for oid in field.object_ids():
        params = field.params(oid)
        frozen = field.is_frozen(oid)
        lines.append(
            f"{oid} {params.youngs_modulus!r} {params.poisson_ratio!r} "
            f"{params.density!r} {int(frozen)}"
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_material_field(path):
    """Read a material field written by write_material_field.

    Raises SceneParseError (with the line number) on malformed rows.
    """
    entries = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 5:
                raise SceneParseError(
                    f"expected 'object_id E nu density frozen', got {line!r}",
                    line=lineno,
                    column=1,
                )
            try:
                oid = int(parts[0])
                e, nu, rho = (float(p) for p in parts[1:4])
                frozen = bool(int(parts[4]))
            except ValueError:
                raise SceneParseError(
                    f"non-numeric field in {line!r}", line=lineno, column=1
                ) from None
            if oid in entries:
                raise SceneValidationError(
                    f"object id {oid} appears more than once in {path}"
                )
            entries[oid] = (MaterialParams(e, nu, rho), frozen)
    return MaterialField(entries)
