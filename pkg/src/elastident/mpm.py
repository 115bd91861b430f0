"""Forward MLS-MPM solver on a unit-cube grid.

One substep runs clear -> p2g -> grid_update -> g2p. Transfers are pure
APIC (affine particle-in-cell) with quadratic B-spline weights; the
deformation gradient evolves as F <- (I + dt C) F. All accumulation happens
in a fixed serial order inside numba kernels, so runs are bit-identical on
identical inputs. simulate drives whole frames inside one kernel call; the
op-level functions (p2g, grid_update, g2p, substep) expose the same phases
individually for tests and inspection.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import (
    DegenerateDeformationError,
    DomainError,
    InstabilityError,
    MalformedHeaderError,
    MissingMaterialError,
    OutOfDomainError,
    TruncatedPayloadError,
)
from .material import lame_from_params

__all__ = [
    "MASS_EPSILON",
    "BOUNDARY_BAND_CELLS",
    "ForceEvent",
    "SimConfig",
    "Grid",
    "Particles",
    "Snapshot",
    "bspline_weights",
    "p2g",
    "grid_update",
    "g2p",
    "substep",
    "apply_material_field",
    "simulate",
    "simulate_particles",
    "write_mpms",
    "read_mpms",
]

# Nodes lighter than this carry no velocity (kg).
MASS_EPSILON = 1e-12
# Wall bands span this many cells from each face; particles are clamped to
# stay outside the bands so the quadratic stencil never touches a wall node
# from the interior side.
BOUNDARY_BAND_CELLS = 2

_BC_CODES = {"sticky": 0, "slip": 1}
_MPMS_MAGIC = b"MPMS"
_MPMS_RECORD = np.dtype(
    [("x", "<f4", 3), ("v", "<f4", 3), ("object_id", "<u4")]
)


def _vec3(value, name):
    arr = np.asarray(value, dtype=np.float64).reshape(-1)
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} must be a finite 3-vector, got {value!r}")
    return tuple(float(c) for c in arr)


@dataclass(frozen=True)
class ForceEvent:
    """Uniform force per unit mass applied inside a box for a time window."""

    region_lo: tuple
    region_hi: tuple
    force_density: tuple
    t_start: float
    t_end: float

    def __post_init__(self):
        lo = _vec3(self.region_lo, "region_lo")
        hi = _vec3(self.region_hi, "region_hi")
        f = _vec3(self.force_density, "force_density")
        object.__setattr__(self, "region_lo", lo)
        object.__setattr__(self, "region_hi", hi)
        object.__setattr__(self, "force_density", f)
        if not (self.t_start < self.t_end):
            raise DomainError(
                f"force event needs t_start < t_end, got [{self.t_start}, {self.t_end})"
            )
        for a in range(3):
            if not (0.0 <= lo[a] <= hi[a] <= 1.0):
                raise DomainError(
                    f"force event region must satisfy 0 <= lo <= hi <= 1 per axis, "
                    f"got lo={lo} hi={hi}"
                )


@dataclass(frozen=True)
class SimConfig:
    """Solver configuration; defaults follow the reference operating point."""

    grid_n: int = 50
    dt: float = 2e-4
    substeps_per_frame: int = 25
    gravity: tuple = (0.0, -9.8, 0.0)
    external_forces: tuple = ()
    boundary: tuple = "sticky"
    flip_ratio: float = 0.0

    def __post_init__(self):
        if self.grid_n < 8:
            raise DomainError(f"grid_n must be >= 8, got {self.grid_n}")
        if not (self.dt > 0.0 and np.isfinite(self.dt)):
            raise DomainError(f"dt must be positive and finite, got {self.dt}")
        if self.substeps_per_frame < 1:
            raise DomainError(
                f"substeps_per_frame must be >= 1, got {self.substeps_per_frame}"
            )
        object.__setattr__(self, "gravity", _vec3(self.gravity, "gravity"))
        object.__setattr__(self, "external_forces", tuple(self.external_forces))
        for ev in self.external_forces:
            if not isinstance(ev, ForceEvent):
                raise DomainError(f"external_forces entries must be ForceEvent, got {ev!r}")
        boundary = self.boundary
        if isinstance(boundary, str):
            boundary = (boundary,) * 6
        boundary = tuple(boundary)
        if len(boundary) != 6 or any(b not in _BC_CODES for b in boundary):
            raise DomainError(
                "boundary must be 'sticky'/'slip' or a 6-tuple of those "
                f"(x_lo, x_hi, y_lo, y_hi, z_lo, z_hi), got {self.boundary!r}"
            )
        object.__setattr__(self, "boundary", boundary)
        if self.flip_ratio != 0.0:
            raise DomainError(
                f"flip_ratio is fixed at 0 (pure APIC transfer), got {self.flip_ratio}"
            )

    @property
    def h(self):
        """Cell spacing of the unit-cube grid (m)."""
        return 1.0 / (self.grid_n - 1)

    @property
    def interior_lo(self):
        """Lower clamp bound for particle positions, per axis (m)."""
        return BOUNDARY_BAND_CELLS * self.h

    @property
    def interior_hi(self):
        """Upper clamp bound for particle positions, per axis (m)."""
        return 1.0 - BOUNDARY_BAND_CELLS * self.h


class Grid:
    """Background grid: node masses plus momentum/velocity storage.

    mom_or_vel holds momentum (kg m/s) between the p2g scatter and
    normalization, node velocities (m/s) afterwards. inv_mass caches 1/mass
    where mass > MASS_EPSILON (zero elsewhere) for the stress scatter.
    """

    def __init__(self, n):
        if n < 8:
            raise DomainError(f"grid needs n >= 8 nodes per axis, got {n}")
        self.n = int(n)
        self.h = 1.0 / (self.n - 1)
        self.mass = np.zeros((self.n, self.n, self.n), dtype=np.float64)
        self.mom_or_vel = np.zeros((self.n, self.n, self.n, 3), dtype=np.float64)
        self.inv_mass = np.zeros((self.n, self.n, self.n), dtype=np.float64)

    def clear(self):
        self.mass.fill(0.0)
        self.mom_or_vel.fill(0.0)
        self.inv_mass.fill(0.0)


class Particles:
    """Structure-of-arrays particle state.

    mu/lam are per-particle Lame coefficients; fresh instances start at zero
    (stress-free) until apply_material_field resolves them from object ids.
    """

    def __init__(self, x, v, m, V0, object_id, F=None, C=None, mu=None, lam=None):
        self.x = np.ascontiguousarray(x, dtype=np.float64)
        n = self.x.shape[0]
        if self.x.shape != (n, 3):
            raise DomainError(f"positions must have shape (N, 3), got {self.x.shape}")
        self.v = np.ascontiguousarray(v, dtype=np.float64)
        self.m = np.ascontiguousarray(m, dtype=np.float64)
        self.V0 = np.ascontiguousarray(V0, dtype=np.float64)
        self.object_id = np.ascontiguousarray(object_id, dtype=np.int64)
        if F is None:
            F = np.broadcast_to(np.eye(3), (n, 3, 3))
        if C is None:
            C = np.zeros((n, 3, 3))
        self.F = np.ascontiguousarray(F, dtype=np.float64).copy()
        self.C = np.ascontiguousarray(C, dtype=np.float64).copy()
        self.mu = (
            np.zeros(n) if mu is None else np.ascontiguousarray(mu, dtype=np.float64)
        )
        self.lam = (
            np.zeros(n) if lam is None else np.ascontiguousarray(lam, dtype=np.float64)
        )
        if (
            self.v.shape != (n, 3)
            or self.m.shape != (n,)
            or self.V0.shape != (n,)
            or self.object_id.shape != (n,)
            or self.F.shape != (n, 3, 3)
            or self.C.shape != (n, 3, 3)
            or self.mu.shape != (n,)
            or self.lam.shape != (n,)
        ):
            raise DomainError("particle arrays disagree on particle count")
        if n and (not np.all(self.m > 0.0) or not np.all(self.V0 > 0.0)):
            raise DomainError("particle masses and rest volumes must be positive")

    def __len__(self):
        return self.x.shape[0]

    def copy(self):
        return Particles(
            self.x.copy(),
            self.v.copy(),
            self.m.copy(),
            self.V0.copy(),
            self.object_id.copy(),
            self.F.copy(),
            self.C.copy(),
            self.mu.copy(),
            self.lam.copy(),
        )


@dataclass(frozen=True)
class Snapshot:
    """Immutable per-frame particle state (arrays are read-only views)."""

    frame: int
    t: float
    x: np.ndarray
    v: np.ndarray
    object_id: np.ndarray

    @staticmethod
    def capture(frame, t, particles):
        x = particles.x.copy()
        v = particles.v.copy()
        oid = particles.object_id.copy()
        for arr in (x, v, oid):
            arr.flags.writeable = False
        return Snapshot(frame=int(frame), t=float(t), x=x, v=v, object_id=oid)


def bspline_weights(xp, h, n):
    """Quadratic B-spline stencil of a position on an n-node grid.

    Returns (base, w, dw): base the lowest stencil node index per axis,
    w[a, o] the weight of offset o along axis a, and dw[a, o] the per-axis
    derivative already divided by h (so the 3D gradient of node (i, j, k)
    is assembled by tensor products of w and dw rows). Raises
    OutOfDomainError when the 3x3x3 stencil would leave the grid.
    """
    xp = np.asarray(xp, dtype=np.float64).reshape(3)
    rel = xp / h
    base = np.floor(rel - 0.5).astype(np.int64)
    if np.any(base < 0) or np.any(base + 2 > n - 1):
        raise OutOfDomainError(
            f"stencil for position {tuple(xp)} leaves the {n}^3 grid"
        )
    fx = rel - base
    w = np.stack(
        [0.5 * (1.5 - fx) ** 2, 0.75 - (fx - 1.0) ** 2, 0.5 * (fx - 0.5) ** 2],
        axis=1,
    )
    dw = np.stack([fx - 1.5, -2.0 * (fx - 1.0), fx - 0.5], axis=1) / h
    return base, w, dw


def _weight_cache(n_particles):
    base = np.empty((n_particles, 3), dtype=np.int64)
    w = np.empty((n_particles, 3, 3), dtype=np.float64)
    dw = np.empty((n_particles, 3, 3), dtype=np.float64)
    return base, w, dw


def _compute_weights(particles, grid):
    base, w, dw = _weight_cache(len(particles))
    status, idx = _kernels.compute_weights(particles.x, grid.h, grid.n, base, w, dw)
    if status == _kernels.STATUS_OUT_OF_DOMAIN:
        raise OutOfDomainError(
            f"particle {idx} at {tuple(particles.x[idx])} has a stencil outside the grid"
        )
    return base, w, dw


def p2g(particles, grid):
    """Scatter particle mass and APIC momentum to the grid, then normalize.

    After the call grid.mass holds node masses and grid.mom_or_vel node
    velocities (zero where mass <= MASS_EPSILON).
    """
    base, w, _ = _compute_weights(particles, grid)
    _kernels.p2g_scatter(
        particles.x, particles.v, particles.C, particles.m,
        base, w, grid.mass, grid.mom_or_vel, grid.h,
    )
    _kernels.grid_normalize(grid.mass, grid.mom_or_vel, grid.inv_mass, MASS_EPSILON)


def _event_arrays(config):
    events = config.external_forces
    k = len(events)
    lo = np.zeros((k, 3))
    hi = np.zeros((k, 3))
    f = np.zeros((k, 3))
    t0 = np.zeros(k)
    t1 = np.zeros(k)
    for i, ev in enumerate(events):
        lo[i] = ev.region_lo
        hi[i] = ev.region_hi
        f[i] = ev.force_density
        t0[i] = ev.t_start
        t1[i] = ev.t_end
    return lo, hi, f, t0, t1


def _bc_array(config):
    return np.array([_BC_CODES[b] for b in config.boundary], dtype=np.int64)


def grid_update(grid, particles, config, t):
    """Integrate stress, gravity, and active force events on node velocities.

    Stress forces scatter through the weight gradients of each particle's
    stencil; then every massive node gains dt * (gravity + force events
    covering it), and wall bands are enforced (sticky zeroes the velocity,
    slip zeroes the wall-normal component). Requires p2g to have run this
    substep (node velocities and the 1/mass cache populated).
    """
    base, w, dw = _compute_weights(particles, grid)
    status, idx = _kernels.grid_apply_stress(
        particles.F, particles.V0, particles.mu, particles.lam,
        base, w, dw, grid.inv_mass, grid.mom_or_vel, config.dt,
    )
    if status == _kernels.STATUS_DEGENERATE:
        det = float(np.linalg.det(particles.F[idx]))
        raise DegenerateDeformationError(
            f"particle {idx} has det(F) = {det:.6g} at t = {t:.6g} s"
        )
    ev_lo, ev_hi, ev_f, ev_t0, ev_t1 = _event_arrays(config)
    _kernels.grid_forces_and_bc(
        grid.mass, grid.mom_or_vel, grid.h, grid.n, config.dt, float(t),
        np.asarray(config.gravity, dtype=np.float64),
        ev_lo, ev_hi, ev_f, ev_t0, ev_t1,
        _bc_array(config), BOUNDARY_BAND_CELLS, MASS_EPSILON,
    )


def g2p(grid, particles, dt):
    """Gather node velocities back to particles and advect.

    Updates v, C, x, F in place; positions are clamped to the valid
    interior. Returns the maximum particle speed (m/s) for stability checks.
    """
    base, w, _ = _compute_weights(particles, grid)
    lo = BOUNDARY_BAND_CELLS * grid.h
    hi = 1.0 - BOUNDARY_BAND_CELLS * grid.h
    max_sp2 = _kernels.g2p_update(
        particles.x, particles.v, particles.C, particles.F,
        base, w, grid.mom_or_vel, grid.h, float(dt), lo, hi,
    )
    return float(np.sqrt(max_sp2)) if np.isfinite(max_sp2) else float("inf")


def substep(particles, grid, config, t):
    """Advance the state by one dt: clear -> p2g -> grid_update -> g2p.

    Returns t + dt. Raises InstabilityError when the fastest particle
    covers more than one cell per substep (speed above h/dt), which is the
    solver's hard stability guard.
    """
    grid.clear()
    p2g(particles, grid)
    grid_update(grid, particles, config, t)
    vmax = g2p(grid, particles, config.dt)
    limit = grid.h / config.dt
    if vmax > limit:
        raise InstabilityError(
            f"max particle speed {vmax:.6g} m/s exceeds h/dt = {limit:.6g} m/s "
            f"at t = {t + config.dt:.6g} s"
        )
    return t + config.dt


def apply_material_field(particles, field):
    """Resolve per-particle Lame coefficients from a material field.

    Raises MissingMaterialError listing object ids present in the particle
    state but absent from the field.
    """
    present = np.unique(particles.object_id)
    missing = [int(oid) for oid in present if int(oid) not in field]
    if missing:
        raise MissingMaterialError(missing)
    for oid in present:
        lame = lame_from_params(field.params(int(oid)))
        mask = particles.object_id == oid
        particles.mu[mask] = lame.mu
        particles.lam[mask] = lame.lam


def simulate_particles(particles, field, config, n_frames):
    """Run the solver from an explicit particle state and material field.

    Returns n_frames + 1 snapshots, the first being the initial state. The
    input particle state is not mutated. Each frame advances
    substeps_per_frame substeps inside a single kernel call.
    """
    if n_frames < 0:
        raise DomainError(f"n_frames must be >= 0, got {n_frames}")
    state = particles.copy()
    apply_material_field(state, field)
    grid = Grid(config.grid_n)
    base, w, dw = _weight_cache(len(state))
    ev_lo, ev_hi, ev_f, ev_t0, ev_t1 = _event_arrays(config)
    bc = _bc_array(config)
    gravity = np.asarray(config.gravity, dtype=np.float64)
    t = 0.0
    frames = [Snapshot.capture(0, t, state)]
    for frame in range(1, n_frames + 1):
        status, idx, value, t = _kernels.run_substeps(
            state.x, state.v, state.C, state.F, state.m, state.V0,
            state.mu, state.lam,
            grid.mass, grid.mom_or_vel, grid.inv_mass,
            base, w, dw,
            grid.h, grid.n, config.dt, t, config.substeps_per_frame,
            gravity, ev_lo, ev_hi, ev_f, ev_t0, ev_t1,
            bc, BOUNDARY_BAND_CELLS, MASS_EPSILON,
        )
        if status == _kernels.STATUS_OUT_OF_DOMAIN:
            raise OutOfDomainError(
                f"particle {idx} has a stencil outside the grid at t = {t:.6g} s"
            )
        if status == _kernels.STATUS_DEGENERATE:
            det = float(np.linalg.det(state.F[idx]))
            raise DegenerateDeformationError(
                f"particle {idx} has det(F) = {det:.6g} at t = {t:.6g} s"
            )
        if status == _kernels.STATUS_UNSTABLE:
            raise InstabilityError(
                f"max particle speed {value:.6g} m/s exceeds h/dt = "
                f"{grid.h / config.dt:.6g} m/s at t = {t:.6g} s"
            )
        frames.append(Snapshot.capture(frame, t, state))
    return frames


def simulate(scene, config, n_frames):
    """Sample a scene's particles and run the solver for n_frames frames."""
    particles = scene.sample_particles(config)
    field = scene.material_field()
    return simulate_particles(particles, field, config, n_frames)


def write_mpms(path, snapshot):
    """Write one frame in the MPMS binary layout.

    Magic "MPMS", u32 little-endian particle count, then per particle
    3 x f32 position, 3 x f32 velocity, u32 object id.
    """
    n = snapshot.x.shape[0]
    rec = np.empty(n, dtype=_MPMS_RECORD)
    rec["x"] = snapshot.x.astype(np.float32)
    rec["v"] = snapshot.v.astype(np.float32)
    rec["object_id"] = snapshot.object_id.astype(np.uint32)
    with open(path, "wb") as fh:
        fh.write(_MPMS_MAGIC)
        fh.write(np.uint32(n).tobytes())
        fh.write(rec.tobytes())


def read_mpms(path):
    """Read one MPMS frame; returns (x, v, object_id) float64/int64 arrays.

    Raises MalformedHeaderError for a bad magic or trailing garbage and
    TruncatedPayloadError when the particle records run short.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[:4] != _MPMS_MAGIC:
        raise MalformedHeaderError(
            f"expected magic {_MPMS_MAGIC!r}, got {data[:4]!r}", offset=0
        )
    if len(data) < 8:
        raise TruncatedPayloadError(
            "header ends before the particle count", missing=8 - len(data)
        )
    count = int(np.frombuffer(data[4:8], dtype="<u4")[0])
    expected = 8 + count * _MPMS_RECORD.itemsize
    if len(data) < expected:
        raise TruncatedPayloadError(
            f"payload holds fewer than {count} particle records",
            missing=expected - len(data),
        )
    if len(data) > expected:
        raise MalformedHeaderError(
            f"{len(data) - expected} trailing bytes after {count} records",
            offset=expected,
        )
    rec = np.frombuffer(data[8:expected], dtype=_MPMS_RECORD)
    x = rec["x"].astype(np.float64)
    v = rec["v"].astype(np.float64)
    object_id = rec["object_id"].astype(np.int64)
    return x, v, object_id
