"""Simulate the mini scene and render its frames.

Runs the solver on a soft block that gets a sideways kick under light
gravity, prints a per-frame motion table, writes the rendered frames as PFM
images, and dumps a coarse ASCII preview of the first and last frame so you
can see the motion without an image viewer.

    python demos/01_simulate_and_render.py
"""

from pathlib import Path

import numpy as np

from elastident import observe, simulate
from elastident.observation import splat_render, write_image
from elastident.scene import load_scene

ROOT = Path(__file__).resolve().parents[1]
OUT = ROOT / "demos" / "out" / "simulate_and_render"
N_FRAMES = 40


def ascii_preview(image, width=48):
    """Downsample an intensity image to terminal characters."""
    ramp = " .:-=+*#%@"
    h, w = image.shape
    width = min(width, w)
    rows = max(1, h * width // (2 * w))  # terminal cells are ~2x taller
    peak = float(image.max()) or 1.0
    lines = []
    for r in range(rows):
        cells = []
        for c in range(width):
            r0 = r * h // rows
            c0 = c * w // width
            block = image[
                r0 : max(r0 + 1, (r + 1) * h // rows),
                c0 : max(c0 + 1, (c + 1) * w // width),
            ]
            level = float(block.max()) / peak
            cells.append(ramp[min(int(level * (len(ramp) - 1) + 0.5), len(ramp) - 1)])
        lines.append("".join(cells))
    return "\n".join(lines)


def main():
    scene = load_scene(ROOT / "scenes" / "mini.txt")
    print(f"scene: {len(scene.objects)} object(s), grid {scene.sim.grid_n}^3, "
          f"dt {scene.sim.dt:g} s x {scene.sim.substeps_per_frame} substeps/frame")

    snapshots = simulate(scene, scene.sim, n_frames=N_FRAMES)
    print(f"simulated {len(snapshots) - 1} frames, "
          f"{snapshots[0].x.shape[0]} particles\n")

    print("frame      t (s)   mean x        mean y        mean |v| (m/s)")
    for snap in snapshots[:: max(1, N_FRAMES // 10)]:
        center = snap.x.mean(axis=0)
        speed = float(np.linalg.norm(snap.v, axis=1).mean())
        print(f"{snap.frame:5d}  {snap.t:9.4f}   {center[0]:.6f}      "
              f"{center[1]:.6f}      {speed:.4f}")

    OUT.mkdir(parents=True, exist_ok=True)
    frame_dt = scene.sim.dt * scene.sim.substeps_per_frame
    observed = observe(snapshots, scene.camera, frame_dt)
    for i, frame in enumerate(observed.frames):
        write_image(OUT / f"frame_{i:04d}.pfm", frame)
    print(f"\nwrote {len(observed.frames)} PFM frames to {OUT}")

    first = splat_render(snapshots[0], scene.camera)
    last = splat_render(snapshots[-1], scene.camera)
    print(f"\nframe 0:\n{ascii_preview(first)}")
    print(f"\nframe {N_FRAMES} (kicked right, settling onto the sticky floor):"
          f"\n{ascii_preview(last)}")


if __name__ == "__main__":
    main()
