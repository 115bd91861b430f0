"""Command-line entry point.

Subcommands: gen-observations (simulate ground truth and write frames,
flows, trajectories, and the truth material record), identify (recover
materials from an observation directory), simulate (trajectories only),
render (images only). All outputs land under --out; deterministic mode
(default) makes re-runs byte-identical. Failures exit with status 1 and a
single machine-parsable line "<error-category>: <message>" on stderr;
argparse usage problems exit with status 2.
"""

import argparse
import dataclasses
import math
import os
import secrets
import sys

from .errors import (
    ElastidentError,
    InstabilityError,
    TruncatedPayloadError,
    UsageError,
)
from .identify import (
    ObservationSet,
    OptimizeOptions,
    observe,
    optimize,
    write_history,
)
from .initializer import InitRequest, manual_init, mllm_init
from .material import field_relative_error
from .mpm import simulate_particles, write_mpms
from .observation import (
    epe,
    particle_flow,
    read_flow,
    read_image,
    splat_render,
    write_flow,
    write_image,
)
from .scene import load_scene, read_material_field, write_material_field

__all__ = ["main"]

FRAME_NAME = "frame_%04d.pfm"
FLOW_NAME = "flow_%04d.flw"
TRAJ_NAME = "traj_%04d.mpms"
TRUTH_NAME = "truth_materials.txt"

FINAL_FIELD_NAME = "final_materials.txt"
HISTORY_NAME = "history.txt"
REPORT_NAME = "report.txt"


def _effective_scene(args):
    """Load the scene, applying --seed and the determinism mode.

    Deterministic mode (default) keeps the scene's sampling seed;
    --no-deterministic replaces it with a fresh entropy seed, and --seed
    pins it explicitly either way.
    """
    scene = load_scene(args.scene)
    seed = scene.seed
    if not args.deterministic:
        seed = secrets.randbits(63)
    if args.seed is not None:
        seed = args.seed
    if seed != scene.seed:
        scene = dataclasses.replace(scene, seed=seed)
    return scene


def _frame_dt(config):
    return config.dt * config.substeps_per_frame


def cmd_gen_observations(args):
    scene = _effective_scene(args)
    field = scene.material_field()
    particles = scene.sample_particles()
    snapshots = simulate_particles(particles, field, scene.sim, args.frames)
    observed = observe(snapshots, scene.camera, _frame_dt(scene.sim))
    os.makedirs(args.out, exist_ok=True)
    for t, frame in enumerate(observed.frames):
        write_image(os.path.join(args.out, FRAME_NAME % t), frame)
    for t, flow in enumerate(observed.flows):
        write_flow(os.path.join(args.out, FLOW_NAME % t), flow)
    for t, snap in enumerate(snapshots):
        write_mpms(os.path.join(args.out, TRAJ_NAME % t), snap)
    write_material_field(os.path.join(args.out, TRUTH_NAME), field)
    print(
        f"wrote {len(observed.frames)} frames, {len(observed.flows)} flows, "
        f"{len(snapshots)} trajectory files to {args.out}"
    )
    return 0


def _read_observations(obs_dir, camera, frame_dt):
    """Load frames and flows from an observation directory.

    Frames are frame_0000.pfm onward; each consecutive pair needs its
    flow_%04d.flw (indexed by the earlier frame). A gap in the flow files
    raises TruncatedPayloadError naming the missing file.
    """
    frames = []
    t = 0
    while True:
        path = os.path.join(obs_dir, FRAME_NAME % t)
        if not os.path.exists(path):
            break
        frames.append(read_image(path))
        t += 1
    if len(frames) < 2:
        raise TruncatedPayloadError(
            f"observation directory {obs_dir} holds {len(frames)} "
            f"frame_NNNN.pfm files; at least 2 are needed",
            missing=2 - len(frames),
        )
    flows = []
    for t in range(len(frames) - 1):
        path = os.path.join(obs_dir, FLOW_NAME % t)
        if not os.path.exists(path):
            raise TruncatedPayloadError(
                f"observation directory {obs_dir} is missing {FLOW_NAME % t}",
                missing=len(frames) - 1 - len(flows),
            )
        flows.append(read_flow(path))
    return ObservationSet(
        frames=tuple(frames), flows=tuple(flows), camera=camera, frame_dt=frame_dt
    )


def _init_field(args, scene):
    spec = args.init
    if spec == "manual":
        return manual_init(scene)
    if spec == "mllm":
        return mllm_init(args.mllm_endpoint, InitRequest.from_scene(scene))
    if spec.startswith("file:"):
        return read_material_field(spec[len("file:"):])
    raise UsageError(
        f"--init must be 'manual', 'mllm', or 'file:PATH', got {spec!r}"
    )


def _flows_for_field(particles, field, config, camera, n_transitions):
    """Per-transition flows of a field's simulation, or None when unstable."""
    try:
        snaps = simulate_particles(particles, field, config, n_transitions)
    except InstabilityError:
        return None
    return [particle_flow(a, b, camera) for a, b in zip(snaps[:-1], snaps[1:])]


def _epe_per_frame(observed, flows):
    if flows is None:
        return [math.inf] * observed.n_transitions
    return [float(epe(obs, sim)) for obs, sim in zip(observed.flows, flows)]


def _write_report(path, final_field, history, re_value, epe_init, epe_final):
    """Report rows, in order: objects, loss_init, loss_final, iterations,
    re (only when ground truth was available), epe_init_mean,
    epe_final_mean, then one 'epe_NNNN = <init> <final>' row per frame
    transition."""
    lines = ["# identification report"]
    lines.append("objects = " + " ".join(str(o) for o in final_field.object_ids()))
    lines.append(f"loss_init = {history[0].loss!r}")
    best = min(entry.loss for entry in history)
    lines.append(f"loss_final = {best!r}")
    lines.append(f"iterations = {history[-1].iteration}")
    if re_value is not None:
        lines.append(f"re = {re_value!r}")
    mean_init = sum(epe_init) / len(epe_init)
    mean_final = sum(epe_final) / len(epe_final)
    lines.append(f"epe_init_mean = {mean_init!r}")
    lines.append(f"epe_final_mean = {mean_final!r}")
    for t, (a, b) in enumerate(zip(epe_init, epe_final)):
        lines.append(f"epe_{t:04d} = {a!r} {b!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def cmd_identify(args):
    scene = _effective_scene(args)
    observed = _read_observations(args.obs, scene.camera, _frame_dt(scene.sim))
    init_field = _init_field(args, scene)
    opts = OptimizeOptions(
        lambda_flow=args.lambda_flow,
        max_iters=args.iters,
        learning_rate=args.lr,
    )
    final_field, history = optimize(observed, scene, scene.sim, init_field, opts)

    particles = scene.sample_particles()
    camera = scene.camera
    n_t = observed.n_transitions
    epe_init = _epe_per_frame(
        observed, _flows_for_field(particles, init_field, scene.sim, camera, n_t)
    )
    epe_final = _epe_per_frame(
        observed, _flows_for_field(particles, final_field, scene.sim, camera, n_t)
    )
    truth_path = os.path.join(args.obs, TRUTH_NAME)
    re_value = None
    if os.path.exists(truth_path):
        truth = read_material_field(truth_path)
        re_value = field_relative_error(final_field, truth)

    os.makedirs(args.out, exist_ok=True)
    write_material_field(os.path.join(args.out, FINAL_FIELD_NAME), final_field)
    write_history(os.path.join(args.out, HISTORY_NAME), history)
    _write_report(
        os.path.join(args.out, REPORT_NAME),
        final_field, history, re_value, epe_init, epe_final,
    )
    best = min(entry.loss for entry in history)
    summary = (
        f"identified {len(final_field.unfrozen_ids())} object(s) in "
        f"{history[-1].iteration} iterations; loss {history[0].loss:.6g} -> {best:.6g}"
    )
    if re_value is not None:
        summary += f"; re {re_value:.4f}"
    print(summary)
    return 0


def cmd_simulate(args):
    scene = _effective_scene(args)
    field = scene.material_field()
    particles = scene.sample_particles()
    snapshots = simulate_particles(particles, field, scene.sim, args.frames)
    os.makedirs(args.out, exist_ok=True)
    for t, snap in enumerate(snapshots):
        write_mpms(os.path.join(args.out, TRAJ_NAME % t), snap)
    print(f"wrote {len(snapshots)} trajectory files to {args.out}")
    return 0


def cmd_render(args):
    scene = _effective_scene(args)
    field = scene.material_field()
    particles = scene.sample_particles()
    snapshots = simulate_particles(particles, field, scene.sim, args.frames)
    os.makedirs(args.out, exist_ok=True)
    for t, snap in enumerate(snapshots):
        write_image(
            os.path.join(args.out, FRAME_NAME % t),
            splat_render(snap, scene.camera),
        )
    print(f"wrote {len(snapshots)} frames to {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="elastident",
        description="Elastic material identification from rendered observations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, frames=False):
        p.add_argument("--scene", required=True, help="scene file path")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the scene's sampling seed")
        p.add_argument("--deterministic", action=argparse.BooleanOptionalAction,
                       default=True,
                       help="reproducible runs (default on); --no-deterministic "
                            "draws a fresh sampling seed")
        if frames:
            p.add_argument("--frames", type=int, default=30,
                           help="number of frames to simulate (default 30)")

    p = sub.add_parser("gen-observations",
                       help="simulate ground truth and write observations")
    common(p, frames=True)
    p.set_defaults(func=cmd_gen_observations)

    p = sub.add_parser("identify", help="recover materials from observations")
    common(p)
    p.add_argument("--obs", required=True, help="observation directory")
    p.add_argument("--init", default="manual",
                   help="initial field: manual | mllm | file:PATH (default manual)")
    p.add_argument("--iters", type=int, default=200,
                   help="max optimizer iterations (default 200)")
    p.add_argument("--lr", type=float, default=0.05,
                   help="Adam learning rate (default 0.05)")
    p.add_argument("--lambda", dest="lambda_flow", type=float, default=0.1,
                   help="flow-loss weight (default 0.1)")
    p.add_argument("--mllm-endpoint", default=None,
                   help="HTTP endpoint for --init mllm")
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("simulate", help="forward run, trajectories only")
    common(p, frames=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("render", help="forward run, rendered frames only")
    common(p, frames=True)
    p.set_defaults(func=cmd_render)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ElastidentError as exc:
        print(f"{exc.category}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io-error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
