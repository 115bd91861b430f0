"""Proxy observation pipeline: splat renders, correspondence flow, file IO.

A fixed orthographic camera looks along -z; particles project onto the
(x, y) plane. Renders and flow fields are float32 end to end, so a
simulate -> render -> write -> read cycle reproduces frames bit-exactly.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import (
    CorrespondenceError,
    DimensionMismatchError,
    DomainError,
    MalformedHeaderError,
    TruncatedPayloadError,
)

__all__ = [
    "Camera",
    "splat_render",
    "particle_flow",
    "epe",
    "write_image",
    "read_image",
    "write_flow",
    "read_flow",
]

# Pixels whose accumulated splat weight falls below this carry zero flow.
FLOW_WEIGHT_EPSILON = 1e-6

_FLW_MAGIC = b"FLW1"


@dataclass(frozen=True)
class Camera:
    """Orthographic camera looking along -z.

    world_window = (x_min, x_max, y_min, y_max) is the world-space
    rectangle mapped onto the image; +x maps to +u (columns) and +y maps
    upward, i.e. to decreasing row index. splat_radius is the particle
    footprint in pixels (Gaussian sigma = splat_radius / 2, truncated at
    3 sigma).
    """

    image_w: int
    image_h: int
    world_window: tuple
    splat_radius: float = 2.0
    axis: str = "-z"

    def __post_init__(self):
        if self.axis != "-z":
            raise DomainError(f"projection axis is fixed at '-z', got {self.axis!r}")
        if self.image_w < 8 or self.image_h < 8:
            raise DomainError(
                f"image must be at least 8x8 pixels, got {self.image_w}x{self.image_h}"
            )
        window = tuple(float(c) for c in self.world_window)
        if len(window) != 4:
            raise DomainError(
                f"world_window must be (x_min, x_max, y_min, y_max), got {self.world_window!r}"
            )
        x_min, x_max, y_min, y_max = window
        if not (x_max > x_min and y_max > y_min):
            raise DomainError(f"world_window must have positive area, got {window}")
        object.__setattr__(self, "world_window", window)
        if not (self.splat_radius > 0.0):
            raise DomainError(f"splat_radius must be positive, got {self.splat_radius}")

    @property
    def sigma(self):
        return self.splat_radius / 2.0

    @property
    def pixels_per_meter(self):
        """(ppm_x, ppm_y) scale factors of the projection."""
        x_min, x_max, y_min, y_max = self.world_window
        return (self.image_w / (x_max - x_min), self.image_h / (y_max - y_min))

    def project(self, positions):
        """World positions (N, 3) to pixel coordinates (u, v) arrays."""
        x_min, x_max, y_min, y_max = self.world_window
        ppm_x, ppm_y = self.pixels_per_meter
        pos = np.asarray(positions, dtype=np.float64)
        u = (pos[:, 0] - x_min) * ppm_x
        v = (y_max - pos[:, 1]) * ppm_y
        return u, v


def _positions(snapshot):
    x = getattr(snapshot, "x", snapshot)
    return np.ascontiguousarray(x, dtype=np.float64)


def _splat_amplitude(n_particles, u, v, sigma):
    """Per-particle peak so interior coverage averages about one half.

    The sum of all unit-peak footprints integrates to N * 2 pi sigma^2;
    dividing by twice that over the projected bounding-box area (floored at
    1 px per side) makes the accumulated intensity of a uniformly spread
    cloud sit near 0.5 regardless of sampling density.
    """
    if n_particles == 0:
        return 0.0
    span_u = max(float(u.max() - u.min()), 1.0)
    span_v = max(float(v.max() - v.min()), 1.0)
    area = span_u * span_v
    expected_coverage = 2.0 * n_particles * 2.0 * np.pi * sigma**2 / area
    return 1.0 / expected_coverage


def splat_render(snapshot, camera):
    """Render particle positions to a grayscale image in [0, 1].

    Every particle deposits a truncated Gaussian footprint at its projected
    position, scaled by a coverage normalizer shared across the snapshot;
    particles projecting outside the image rectangle contribute nothing.
    Returns a float32 (image_h, image_w) array.
    """
    pos = _positions(snapshot)
    out = np.zeros((camera.image_h, camera.image_w), dtype=np.float64)
    if pos.shape[0]:
        u, v = camera.project(pos)
        amp = _splat_amplitude(pos.shape[0], u, v, camera.sigma)
        _kernels.splat_image(u, v, amp, camera.sigma, out)
    np.clip(out, 0.0, 1.0, out=out)
    return out.astype(np.float32)


def particle_flow(snapshot_t, snapshot_t1, camera):
    """Dense 2D flow (pixels) from index correspondence of two snapshots.

    Each particle's projected displacement is splatted with the same
    Gaussian weights as splat_render, anchored at its first-frame position;
    per-pixel flow is the weight-normalized average, zero where total
    weight is below 1e-6. Returns a float32 (image_h, image_w, 2) array.
    """
    pos_t = _positions(snapshot_t)
    pos_t1 = _positions(snapshot_t1)
    if pos_t.shape[0] != pos_t1.shape[0]:
        raise CorrespondenceError(
            f"snapshots have {pos_t.shape[0]} vs {pos_t1.shape[0]} particles; "
            "flow needs index correspondence"
        )
    wsum = np.zeros((camera.image_h, camera.image_w), dtype=np.float64)
    acc = np.zeros((camera.image_h, camera.image_w, 2), dtype=np.float64)
    if pos_t.shape[0]:
        u0, v0 = camera.project(pos_t)
        u1, v1 = camera.project(pos_t1)
        _kernels.splat_flow(u0, v0, u1 - u0, v1 - v0, camera.sigma, wsum, acc)
    flow = np.zeros_like(acc)
    covered = wsum >= FLOW_WEIGHT_EPSILON
    flow[covered] = acc[covered] / wsum[covered, None]
    return flow.astype(np.float32)


def epe(flow_a, flow_b):
    """End-point error: mean flow-difference norm over covered pixels.

    A pixel counts as covered when either field is nonzero there; with no
    covered pixels the error is 0. Raises DimensionMismatchError when the
    fields disagree in shape.
    """
    a = np.asarray(flow_a, dtype=np.float64)
    b = np.asarray(flow_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 3 or a.shape[2] != 2:
        raise DimensionMismatchError(
            f"flow fields must share shape (H, W, 2), got {a.shape} vs {b.shape}"
        )
    mask = np.any(a != 0.0, axis=2) | np.any(b != 0.0, axis=2)
    if not mask.any():
        return 0.0
    diff = a[mask] - b[mask]
    return float(np.mean(np.sqrt(np.sum(diff * diff, axis=1))))


def write_image(path, image):
    """Write a grayscale image as PFM (little-endian, rows bottom-up)."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 2:
        raise DimensionMismatchError(f"image must be 2-D, got shape {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(img[::-1].astype("<f4").tobytes())


def _read_line(data, offset, what):
    end = data.find(b"\n", offset)
    if end < 0:
        raise TruncatedPayloadError(
            f"file ends inside the {what} line", missing=1
        )
    return data[offset:end], end + 1


def read_image(path):
    """Read a PFM grayscale image written by write_image.

    Raises MalformedHeaderError (with byte offset) on bad magic, bad
    dimensions, or a non-negative scale, and TruncatedPayloadError when
    pixel data runs short.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    magic, offset = _read_line(data, 0, "magic")
    if magic != b"Pf":
        raise MalformedHeaderError(f"expected PFM magic b'Pf', got {magic!r}", offset=0)
    dims_raw, dims_end = _read_line(data, offset, "dimensions")
    parts = dims_raw.split()
    try:
        w, h = (int(p) for p in parts)
    except ValueError:
        raise MalformedHeaderError(
            f"expected 'width height', got {dims_raw!r}", offset=offset
        ) from None
    if w <= 0 or h <= 0:
        raise MalformedHeaderError(
            f"dimensions must be positive, got {w}x{h}", offset=offset
        )
    scale_raw, payload_start = _read_line(data, dims_end, "scale")
    try:
        scale = float(scale_raw)
    except ValueError:
        raise MalformedHeaderError(
            f"expected a scale float, got {scale_raw!r}", offset=dims_end
        ) from None
    if scale >= 0.0:
        raise MalformedHeaderError(
            "only little-endian PFM (negative scale) is supported", offset=dims_end
        )
    expected = w * h * 4
    have = len(data) - payload_start
    if have < expected:
        raise TruncatedPayloadError(
            f"pixel data for {w}x{h} runs short", missing=expected - have
        )
    if have > expected:
        raise MalformedHeaderError(
            f"{have - expected} trailing bytes after pixel data",
            offset=payload_start + expected,
        )
    img = np.frombuffer(data[payload_start:], dtype="<f4").reshape(h, w)
    return np.ascontiguousarray(img[::-1])


def write_flow(path, flow):
    """Write a flow field as FLW1: magic, u32 w, u32 h, row-major f32 pairs."""
    arr = np.asarray(flow, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise DimensionMismatchError(f"flow must have shape (H, W, 2), got {arr.shape}")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(_FLW_MAGIC)
        fh.write(np.array([w, h], dtype="<u4").tobytes())
        fh.write(arr.astype("<f4").tobytes())


def read_flow(path):
    """Read an FLW1 flow field written by write_flow.

    Raises MalformedHeaderError on a wrong magic or trailing bytes and
    TruncatedPayloadError naming the missing byte count when data is short.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[:4] != _FLW_MAGIC:
        raise MalformedHeaderError(
            f"expected magic {_FLW_MAGIC!r}, got {data[:4]!r}", offset=0
        )
    if len(data) < 12:
        raise TruncatedPayloadError(
            "header ends before width/height", missing=12 - len(data)
        )
    w, h = (int(x) for x in np.frombuffer(data[4:12], dtype="<u4"))
    if w <= 0 or h <= 0:
        raise MalformedHeaderError(f"dimensions must be positive, got {w}x{h}", offset=4)
    expected = 12 + w * h * 8
    if len(data) < expected:
        raise TruncatedPayloadError(
            f"flow data for {w}x{h} runs short", missing=expected - len(data)
        )
    if len(data) > expected:
        raise MalformedHeaderError(
            f"{len(data) - expected} trailing bytes after flow data", offset=expected
        )
    return np.frombuffer(data[12:], dtype="<f4").reshape(h, w, 2).copy()
