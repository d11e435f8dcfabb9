"""Throughput benchmark: frames/s of the substep kernels, per backend.

The reference scene is a falling cloth with ~1,000 springs, ground contact,
and point-point collisions enabled, stepped at 20 substeps per 30 Hz frame
on one core. Run as ``python -m springtwin.bench`` (or ``springtwin bench``)
to compare the numba and numpy backends side by side; each backend is timed
in its own subprocess since the choice is made at import time.
"""

from __future__ import annotations

import json
import os
import subprocess
import sys
import time

import numpy as np

from .dynamics import rollout
from .model import ControlScript, PhysParams, Scenario, SystemState
from .topology import build_springs


def build_bench_scene(target_springs: int = 1000, substeps: int = 20) -> Scenario:
    """Falling cloth sized to reach at least ``target_springs`` springs."""
    spacing = 0.02
    nx = 24
    while True:
        ny = max(4, int(np.ceil(target_springs / (4 * nx))))
        xs, ys = np.meshgrid(np.arange(nx) * spacing, np.arange(ny) * spacing, indexing="ij")
        pts = np.stack([xs.ravel(), ys.ravel(), 0.2 + 0.05 * np.sin(xs.ravel() * 20)], axis=1)
        topo = build_springs(pts, spacing * 1.5, 8, 800.0)
        if topo.n_springs >= target_springs:
            break
        nx += 4
    params = PhysParams(
        k_hom=800.0, gamma=0.05, delta=0.998, restitution=0.2, friction=0.3,
        collision_dist=0.6 * spacing, node_mass=0.02,
        dt=1.0 / 30.0, substeps=substeps,
    )
    return Scenario(
        name=f"bench-{topo.n_springs}-springs",
        initial_state=SystemState.at_rest(pts),
        topology=topo,
        params=params,
        control=ControlScript(np.zeros((0, 0, 3))),
        ground_height=0.0,
    )


def measure_forward(n_frames: int = 300, target_springs: int = 1000,
                    substeps: int = 20) -> dict:
    """Simulated frames/s for the current backend (single-threaded kernels)."""
    from . import kernels

    scen = build_bench_scene(target_springs, substeps)
    rollout(scen, 5)  # warm up (JIT compile on the numba backend)
    t0 = time.perf_counter()
    rollout(scen, n_frames)
    wall = time.perf_counter() - t0
    fps = n_frames / wall
    return {
        "backend": kernels.BACKEND,
        "n_nodes": scen.initial_state.n_nodes,
        "n_springs": scen.topology.n_springs,
        "substeps": substeps,
        "frames": n_frames,
        "wall_s": wall,
        "frames_per_s": fps,
        "realtime_factor": fps / 30.0,
    }


def measure_backward_ratio(n_frames: int = 60) -> dict:
    """Wall-time ratio of one backward pass to one taped forward pass."""
    from .adjoint import backward, forward_with_tape
    from .model import ObservationFrame, ObservationSequence

    scen = build_bench_scene(1000, 10)
    states = rollout(scen, n_frames)
    ids = np.arange(scen.initial_state.n_nodes)
    frames = tuple(
        ObservationFrame(s.positions, ids, s.positions) for s in states
    )
    obs = ObservationSequence(frames, ControlScript(np.zeros((n_frames + 1, 0, 3))), 30.0)
    forward_with_tape(scen, obs)  # warm up
    t0 = time.perf_counter()
    cost, tape = forward_with_tape(scen, obs)
    t_fwd = time.perf_counter() - t0
    t0 = time.perf_counter()
    backward(tape)
    t_bwd = time.perf_counter() - t0
    return {"forward_s": t_fwd, "backward_s": t_bwd, "ratio": t_bwd / t_fwd}


def _run_in_backend(backend: str, args: list[str]) -> dict:
    env = dict(os.environ, SPRINGTWIN_BACKEND=backend)
    out = subprocess.run(
        [sys.executable, "-m", "springtwin.bench", "--json", *args],
        capture_output=True, text=True, env=env, check=True,
    )
    return json.loads(out.stdout.strip().splitlines()[-1])


def main(argv: list[str] | None = None) -> int:
    import argparse

    ap = argparse.ArgumentParser(description="springtwin kernel benchmark")
    ap.add_argument("--springs", type=int, default=1000)
    ap.add_argument("--substeps", type=int, default=20)
    ap.add_argument("--frames", type=int, default=300)
    ap.add_argument("--json", action="store_true", help="print one JSON line (current backend only)")
    ap.add_argument("--backends", default="numba,numpy", help="comma list for comparison mode")
    ns = ap.parse_args(argv)

    if ns.json:
        res = measure_forward(ns.frames, ns.springs, ns.substeps)
        print(json.dumps(res))
        return 0

    rows = []
    for backend in ns.backends.split(","):
        res = _run_in_backend(backend.strip(), [
            "--springs", str(ns.springs), "--substeps", str(ns.substeps),
            "--frames", str(ns.frames),
        ])
        rows.append(res)
        print(f"{res['backend']:>6}: {res['frames_per_s']:8.1f} frames/s "
              f"({res['realtime_factor']:.1f}x real time at 30 Hz; "
              f"{res['n_springs']} springs, {res['substeps']} substeps, "
              f"{res['n_nodes']} nodes)")
    ratio = measure_backward_ratio()
    print(f"adjoint: backward/forward wall ratio {ratio['ratio']:.2f} "
          f"(forward {ratio['forward_s']*1e3:.1f} ms, backward {ratio['backward_s']*1e3:.1f} ms)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
