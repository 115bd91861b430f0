"""Joint render+flow loss and finite-difference parameter identification.

The loss simulates a scene under a candidate material field, renders it
with the observation pipeline, and compares against observed frames and
flows: sum over frames of the mean-per-pixel squared image difference plus
lambda_flow times the sum over frame pairs of the mean-per-pixel squared
flow difference. Gradients come from central finite differences in a low
dimensional parameter vector (log10 E, nu per unfrozen object), driven by
an Adam loop with bound projection and best-so-far tracking.
"""

import math
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .errors import (
    DomainError,
    GradientUnavailableError,
    InstabilityError,
    NoUnfrozenObjectsError,
)
from .material import MaterialParams
from .mpm import simulate_particles
from .observation import particle_flow, splat_render

__all__ = [
    "ObservationSet",
    "OptimizeOptions",
    "HistoryEntry",
    "observe",
    "joint_loss",
    "fd_gradient",
    "optimize",
    "write_history",
    "read_history",
]

# Convergence is declared when the best loss improves by less than
# convergence_tol (relative) across this many consecutive iterations.
CONVERGENCE_WINDOW = 10

PARAM_SPACES = ("log10_e", "linear_e")


@dataclass(frozen=True)
class ObservationSet:
    """Observed frames (T+1), flows between consecutive frames (T), camera."""

    frames: tuple
    flows: tuple
    camera: object
    frame_dt: float

    def __post_init__(self):
        frames = tuple(np.asarray(f, dtype=np.float32) for f in self.frames)
        flows = tuple(np.asarray(f, dtype=np.float32) for f in self.flows)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "flows", flows)
        if not frames:
            raise DomainError("observation set needs at least one frame")
        if len(flows) != len(frames) - 1:
            raise DomainError(
                f"need one flow per frame pair: {len(frames)} frames but "
                f"{len(flows)} flows"
            )
        shape = frames[0].shape
        if len(shape) != 2:
            raise DomainError(f"frames must be 2-D images, got shape {shape}")
        for f in frames:
            if f.shape != shape:
                raise DomainError("frames disagree on image dimensions")
        for f in flows:
            if f.shape != shape + (2,):
                raise DomainError("flows disagree with the frame dimensions")
        if not (self.frame_dt > 0.0):
            raise DomainError(f"frame_dt must be positive, got {self.frame_dt}")

    @property
    def n_transitions(self):
        return len(self.flows)


@dataclass(frozen=True)
class OptimizeOptions:
    """Knobs of the identification loop; defaults match the benchmark."""

    lambda_flow: float = 0.1
    max_iters: int = 200
    learning_rate: float = 0.05
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    fd_rel_step: float = 1e-3
    nu_bounds: tuple = (0.05, 0.49)
    logE_bounds: tuple = (2.0, 8.0)
    convergence_tol: float = 1e-3
    param_space: str = "log10_e"
    pin_nu: frozenset = dataclass_field(default_factory=frozenset)

    def __post_init__(self):
        if self.lambda_flow < 0:
            raise DomainError(f"lambda_flow must be >= 0, got {self.lambda_flow}")
        if self.max_iters < 1:
            raise DomainError(f"max_iters must be >= 1, got {self.max_iters}")
        if not (self.learning_rate > 0):
            raise DomainError(f"learning_rate must be > 0, got {self.learning_rate}")
        for name in ("adam_beta1", "adam_beta2"):
            b = getattr(self, name)
            if not (0.0 <= b < 1.0):
                raise DomainError(f"{name} must be in [0, 1), got {b}")
        if not (self.adam_eps > 0):
            raise DomainError(f"adam_eps must be > 0, got {self.adam_eps}")
        if not (self.fd_rel_step > 0):
            raise DomainError(f"fd_rel_step must be > 0, got {self.fd_rel_step}")
        nu_lo, nu_hi = self.nu_bounds
        le_lo, le_hi = self.logE_bounds
        if not (nu_lo < nu_hi) or not (le_lo < le_hi):
            raise DomainError("parameter bounds must be ordered (lo < hi)")
        if self.param_space not in PARAM_SPACES:
            raise DomainError(
                f"param_space must be one of {PARAM_SPACES}, got {self.param_space!r}"
            )
        object.__setattr__(self, "pin_nu", frozenset(self.pin_nu))


@dataclass(frozen=True)
class HistoryEntry:
    """One optimizer iteration: loss and the unfrozen parameters."""

    iteration: int
    loss: float
    params: tuple  # ((object_id, E, nu), ...) sorted by object_id


def observe(snapshots, camera, frame_dt):
    """Render a trajectory into an ObservationSet (frames plus flows)."""
    frames = tuple(splat_render(s, camera) for s in snapshots)
    flows = tuple(
        particle_flow(a, b, camera) for a, b in zip(snapshots[:-1], snapshots[1:])
    )
    return ObservationSet(frames=frames, flows=flows, camera=camera, frame_dt=frame_dt)


def _loss_terms(observed, snapshots, camera, lambda_flow):
    image_term = 0.0
    for obs_frame, snap in zip(observed.frames, snapshots):
        sim_frame = splat_render(snap, camera)
        diff = obs_frame.astype(np.float64) - sim_frame.astype(np.float64)
        image_term += float(np.mean(diff * diff))
    flow_term = 0.0
    if lambda_flow > 0.0:
        for obs_flow, snap_a, snap_b in zip(
            observed.flows, snapshots[:-1], snapshots[1:]
        ):
            sim_flow = particle_flow(snap_a, snap_b, camera)
            diff = obs_flow.astype(np.float64) - sim_flow.astype(np.float64)
            flow_term += float(np.mean(np.sum(diff * diff, axis=2)))
    return image_term, flow_term


def _loss_from_particles(observed, particles, config, field, lambda_flow):
    try:
        snapshots = simulate_particles(
            particles, field, config, observed.n_transitions
        )
    except InstabilityError:
        return math.inf
    image_term, flow_term = _loss_terms(
        observed, snapshots, observed.camera, lambda_flow
    )
    return image_term + lambda_flow * flow_term


def joint_loss(observed, scene, config, field, lambda_flow=0.1):
    """Render-and-compare loss of a material field against observations.

    Simulates the scene for as many frames as the observations cover and
    returns sum_t mean((I_t - sim_t)^2) + lambda_flow * sum_t
    mean(|U_t - sim_U_t|^2). An unstable simulation returns math.inf as a
    sentinel: the value is never a valid loss and optimizers must treat it
    as a rejected step.
    """
    particles = scene.sample_particles(config)
    return _loss_from_particles(observed, particles, config, field, lambda_flow)


def fd_gradient(loss_fn, theta, rel_step=1e-3):
    """Central finite-difference gradient with one-sided instability fallback.

    Per coordinate the step is rel_step * max(|theta_i|, 1e-2). A probe that
    returns the infinite-loss sentinel falls back to one-sided differencing
    from the stable side against loss_fn(theta); if both sides (or the
    center, when needed) are unstable the coordinate has no usable gradient
    and GradientUnavailableError is raised.
    """
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    f_center = None
    for i in range(theta.size):
        h = rel_step * max(abs(float(theta[i])), 1e-2)
        tp = theta.copy()
        tp[i] += h
        tm = theta.copy()
        tm[i] -= h
        fp = float(loss_fn(tp))
        fm = float(loss_fn(tm))
        if math.isinf(fp) and math.isinf(fm):
            raise GradientUnavailableError(
                f"both probes of coordinate {i} hit unstable simulations "
                f"(theta[{i}] = {theta[i]:.6g}, step {h:.3g})"
            )
        if math.isinf(fp) or math.isinf(fm):
            if f_center is None:
                f_center = float(loss_fn(theta))
            if math.isinf(f_center):
                raise GradientUnavailableError(
                    f"loss is unstable at the expansion point theta = {theta.tolist()}"
                )
            if math.isinf(fp):
                grad[i] = (f_center - fm) / h
            else:
                grad[i] = (fp - f_center) / h
        else:
            grad[i] = (fp - fm) / (2.0 * h)
    return grad


class _ParamCoding:
    """Maps between the optimizer vector and per-object (E, nu) values."""

    def __init__(self, init_field, opts):
        self.opts = opts
        self.object_ids = init_field.unfrozen_ids()
        if not self.object_ids:
            raise NoUnfrozenObjectsError(
                "every object in the material field is frozen; nothing to optimize"
            )
        self.init_field = init_field
        self.coords = []  # (object_id, kind) with kind in {"e", "nu"}
        for oid in self.object_ids:
            self.coords.append((oid, "e"))
            if oid not in opts.pin_nu:
                self.coords.append((oid, "nu"))
        # decode(encode(field)) must be the identity: 10**log10(E) is not
        # bit-exact, so unmoved coordinates map back to their exact values.
        self._theta0 = self.encode(init_field)

    def encode(self, field):
        theta = np.zeros(len(self.coords))
        for i, (oid, kind) in enumerate(self.coords):
            params = field.params(oid)
            if kind == "e":
                e = params.youngs_modulus
                theta[i] = math.log10(e) if self.opts.param_space == "log10_e" else e
            else:
                theta[i] = params.poisson_ratio
        return theta

    def bounds(self):
        lo = np.zeros(len(self.coords))
        hi = np.zeros(len(self.coords))
        le_lo, le_hi = self.opts.logE_bounds
        if self.opts.param_space == "linear_e":
            le_lo, le_hi = 10.0**le_lo, 10.0**le_hi
        for i, (_, kind) in enumerate(self.coords):
            if kind == "e":
                lo[i], hi[i] = le_lo, le_hi
            else:
                lo[i], hi[i] = self.opts.nu_bounds
        return lo, hi

    def decode(self, theta):
        """Material field with unfrozen entries replaced from theta."""
        field = self.init_field
        values = {oid: {} for oid in self.object_ids}
        for i, (oid, kind) in enumerate(self.coords):
            base = self.init_field.params(oid)
            if theta[i] == self._theta0[i]:
                value = (
                    base.youngs_modulus if kind == "e" else base.poisson_ratio
                )
            elif kind == "e" and self.opts.param_space == "log10_e":
                value = 10.0 ** float(theta[i])
            else:
                value = float(theta[i])
            values[oid][kind] = value
        for oid in self.object_ids:
            base = self.init_field.params(oid)
            e = values[oid]["e"]
            nu = values[oid].get("nu", base.poisson_ratio)
            field = field.replace(
                oid, MaterialParams(e, nu, base.density)
            )
        return field

    def entry_params(self, theta):
        field = self.decode(theta)
        return tuple(
            (oid, field.params(oid).youngs_modulus, field.params(oid).poisson_ratio)
            for oid in self.object_ids
        )


def optimize(observed, scene, config, init_field, opts=None):
    """Identify unfrozen material parameters by Adam over FD gradients.

    Optimizes (log10 E, nu) per unfrozen object (or linear E when
    opts.param_space == "linear_e"), projecting onto the configured bounds
    after every step. Returns (final_field, history) where final_field
    carries the best-loss parameters seen (frozen entries bit-identical to
    init_field) and history holds one entry per evaluated iterate, starting
    with the initial point. Stops at max_iters or when the best loss
    improves by less than convergence_tol (relative) over 10 iterations.
    """
    if opts is None:
        opts = OptimizeOptions()
    coding = _ParamCoding(init_field, opts)
    particles = scene.sample_particles(config)

    def loss_fn(theta):
        return _loss_from_particles(
            observed, particles, config, coding.decode(theta), opts.lambda_flow
        )

    lo, hi = coding.bounds()
    theta = np.clip(coding.encode(init_field), lo, hi)
    loss = loss_fn(theta)
    history = [HistoryEntry(0, loss, coding.entry_params(theta))]
    best_loss = loss
    best_theta = theta.copy()
    best_trace = [best_loss]

    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for it in range(1, opts.max_iters + 1):
        grad = fd_gradient(loss_fn, theta, opts.fd_rel_step)
        m = opts.adam_beta1 * m + (1.0 - opts.adam_beta1) * grad
        v = opts.adam_beta2 * v + (1.0 - opts.adam_beta2) * grad * grad
        m_hat = m / (1.0 - opts.adam_beta1**it)
        v_hat = v / (1.0 - opts.adam_beta2**it)
        theta = np.clip(
            theta - opts.learning_rate * m_hat / (np.sqrt(v_hat) + opts.adam_eps),
            lo,
            hi,
        )
        loss = loss_fn(theta)
        history.append(HistoryEntry(it, loss, coding.entry_params(theta)))
        if loss < best_loss:
            best_loss = loss
            best_theta = theta.copy()
        best_trace.append(best_loss)
        if len(best_trace) > CONVERGENCE_WINDOW:
            past = best_trace[-1 - CONVERGENCE_WINDOW]
            if math.isfinite(past):
                improvement = (past - best_loss) / max(abs(past), 1e-300)
                if improvement < opts.convergence_tol:
                    break
    return coding.decode(best_theta), history


def write_history(path, history):
    """Write optimizer history: iter loss then object_id E nu triples."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# iter loss [object_id youngs_modulus_pa poisson_ratio ...]\n")
        for entry in history:
            parts = [str(entry.iteration), repr(float(entry.loss))]
            for oid, e, nu in entry.params:
                parts.extend([str(oid), repr(float(e)), repr(float(nu))])
            fh.write(" ".join(parts) + "\n")


def read_history(path):
    """Read a history file written by write_history."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            iteration = int(parts[0])
            loss = float(parts[1])
            rest = parts[2:]
            if len(rest) % 3:
                raise DomainError(f"malformed history row: {line!r}")
            params = tuple(
                (int(rest[i]), float(rest[i + 1]), float(rest[i + 2]))
                for i in range(0, len(rest), 3)
            )
            out.append(HistoryEntry(iteration, loss, params))
    return out
