"""Synthetic ground-truth oracle: scenarios with known parameters, simulated
trajectories, and partial noisy observations of them.

Stands in for real capture: the virtual depth view keeps, per pixel-sized
cell, only the node nearest the camera (a z-buffer occlusion proxy) and
perturbs it with Gaussian noise; tracks are a seeded subset of nodes with
their own noise, mimicking lifted 2D tracks. One view is the (harder)
default; pass several views for a multi-camera union.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import SimulationDiverged, rollout
from .model import (ControlScript, ObservationFrame, ObservationSequence,
                    PhysParams, Scenario, SystemState, seeded_rng, _as_points)
from .topology import ControlAttachment, attach_controls, build_springs, farthest_point_sample

SCRIPT_KINDS = ("lift", "stretch", "push", "fold")
OBJECT_KINDS = ("rope", "cloth", "box")

# RNG stream ids (keyed alongside the user seed)
_STREAM_FPS = 1
_STREAM_CLOUD = 2
_STREAM_TRACKS = 3


@dataclass(frozen=True)
class ScenarioTemplate:
    """Recipe for a synthetic object + interaction with known true physics."""

    kind: str = "rope"
    counts: tuple = (40,)            # nodes per axis: rope (n,), cloth (nx, ny), box (nx, ny, nz)
    spacing: float = 0.025           # m between lattice neighbors
    params: PhysParams = field(default_factory=lambda: PhysParams(
        k_hom=2000.0, gamma=0.05, delta=0.995, restitution=0.2, friction=0.4,
        collision_dist=0.0, topo_radius=0.055, topo_max_neighbors=4,
        ctrl_radius=0.06, ctrl_max_neighbors=4, node_mass=0.01,
        gravity=(0.0, 0.0, -9.8), dt=1.0 / 30.0, substeps=50,
    ))
    k_ctrl: float = 20000.0
    script: str = "lift"
    amplitude: float = 0.25          # m of control travel
    duration_frames: int = 60
    n_frames: int = 100              # observation frames (incl. canonical frame 0)
    fps: float = 30.0
    seed: int = 0
    stiffness_split: tuple | None = None  # (axis_fraction, k_low, k_high)
    height: float = 0.05             # initial clearance above the ground plane
    ground_height: float = 0.0


@dataclass(frozen=True)
class ViewConfig:
    """One virtual depth camera."""

    origin: tuple = (0.0, -1.2, 0.6)
    cell_size: float = 0.004         # m, z-buffer cell ("pixel") size
    noise_sigma: float = 0.002       # m, isotropic cloud noise
    track_fraction: float = 0.2
    track_noise_sigma: float = 0.005


@dataclass
class GroundTruth:
    """A generated scenario plus its exact trajectory (the oracle's secret)."""

    template: ScenarioTemplate
    scenario: Scenario
    attachments: list[ControlAttachment]
    states: list[SystemState]

    @property
    def extent(self) -> float:
        p = self.scenario.initial_state.positions
        return float(np.linalg.norm(p.max(axis=0) - p.min(axis=0)))


def _lattice(template: ScenarioTemplate) -> np.ndarray:
    s = template.spacing
    c = template.counts
    z0 = template.ground_height + template.height
    if template.kind == "rope":
        (n,) = c
        pts = np.zeros((n, 3))
        pts[:, 0] = np.arange(n) * s
        pts[:, 2] = z0
    elif template.kind == "cloth":
        nx, ny = c
        gx, gy = np.meshgrid(np.arange(nx) * s, np.arange(ny) * s, indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel(), np.full(nx * ny, z0)], axis=1)
    elif template.kind == "box":
        nx, ny, nz = c
        pts = []
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    on_shell = i in (0, nx - 1) or j in (0, ny - 1) or k in (0, nz - 1)
                    if on_shell:
                        pts.append([i * s, j * s, z0 + k * s])
        pts = np.asarray(pts, dtype=np.float64)
    else:
        raise ValueError(f"unknown object kind {template.kind!r}")
    pts[:, :2] -= pts[:, :2].mean(axis=0)  # center over the origin
    return pts


def _smoothstep(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _grasp_points(points: np.ndarray, n_hands: int, seed: int) -> np.ndarray:
    # skip the random first pick: the greedy picks are geometric extremes
    idx = farthest_point_sample(points, n_hands + 1, seed)[1:]
    return points[np.asarray(idx, dtype=np.int64)]


def _build_script(template: ScenarioTemplate, points: np.ndarray) -> ControlScript:
    T = template.n_frames
    A = template.amplitude
    ramp = _smoothstep(np.arange(T) / max(template.duration_frames, 1))
    kind = template.script
    if kind not in SCRIPT_KINDS:
        raise ValueError(f"unknown script kind {kind!r}")
    n_hands = 1 if kind in ("lift", "push") else 2
    grasp = _grasp_points(points, n_hands, template.seed * 2 + _STREAM_FPS)

    frames = np.repeat(grasp[None, :, :], T, axis=0)
    if kind == "lift":
        frames[:, 0, 2] += A * ramp
    elif kind == "push":
        frames[:, 0, 0] += A * ramp
    elif kind == "stretch":
        axis = grasp[1] - grasp[0]
        norm = np.linalg.norm(axis)
        axis = axis / norm if norm > 1e-12 else np.array([1.0, 0.0, 0.0])
        frames[:, 0, :] -= 0.5 * A * ramp[:, None] * axis
        frames[:, 1, :] += 0.5 * A * ramp[:, None] * axis
        frames[:, :, 2] += 0.25 * A * ramp[:, None]  # lift while stretching
    elif kind == "fold":
        # hand 0 arcs up and over toward hand 1; hand 1 pins its end
        toward = grasp[1] - grasp[0]
        frames[:, 0, :] += ramp[:, None] * toward * 0.8
        frames[:, 0, 2] += A * np.sin(np.pi * np.clip(ramp, 0, 1))
    return ControlScript(frames)


def generate_scenario(template: ScenarioTemplate) -> GroundTruth:
    """Build the lattice, true topology, control script, and exact trajectory."""
    points = _lattice(template)
    p = template.params
    topo = build_springs(points, p.topo_radius, p.topo_max_neighbors, p.k_hom)
    if template.stiffness_split is not None:
        frac, k_low, k_high = template.stiffness_split
        mid = points[topo.indices[:, 0], 0] * 0.5 + points[topo.indices[:, 1], 0] * 0.5
        cut = np.quantile(points[:, 0], frac)
        topo = topo.with_stiffness(np.where(mid < cut, k_low, k_high))
    script = _build_script(template, points)
    atts = attach_controls(script.frame(0), points, p.ctrl_radius,
                           p.ctrl_max_neighbors, template.k_ctrl)
    scenario = Scenario(
        name=f"{template.kind}-{template.script}-seed{template.seed}",
        initial_state=SystemState.at_rest(points),
        topology=topo,
        params=replace(p, dt=1.0 / template.fps),
        control=script,
        ground_height=template.ground_height,
    )
    try:
        states = rollout(scenario, template.n_frames - 1, attachments=atts)
    except SimulationDiverged as err:
        raise RuntimeError(
            f"true-parameter rollout diverged ({err}); the template is unstable -- "
            "reduce stiffness or use a smaller dt / more substeps"
        ) from err
    return GroundTruth(template, scenario, atts, states)


def _view_basis(direction: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ref = np.array([0.0, 0.0, 1.0]) if abs(direction[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(direction, ref)
    u /= np.linalg.norm(u)
    w = np.cross(direction, u)
    return u, w


def _visible(points: np.ndarray, view: ViewConfig, center: np.ndarray) -> np.ndarray:
    """Indices of nodes surviving the cell z-buffer for one view."""
    origin = np.asarray(view.origin, dtype=np.float64)
    d = center - origin
    d /= np.linalg.norm(d)
    u, w = _view_basis(d)
    rel = points - origin
    a = rel @ u
    b = rel @ w
    depth = rel @ d
    ca = np.floor(a / view.cell_size).astype(np.int64)
    cb = np.floor(b / view.cell_size).astype(np.int64)
    best: dict[tuple[int, int], int] = {}
    for i in range(points.shape[0]):
        key = (int(ca[i]), int(cb[i]))
        j = best.get(key, -1)
        if j < 0 or depth[i] < depth[j]:
            best[key] = i
    return np.array(sorted(best.values()), dtype=np.int64)


def observe(
    states: list[SystemState],
    control: ControlScript,
    fps: float,
    views: ViewConfig | list[ViewConfig],
    seed: int,
) -> ObservationSequence:
    """Partial, noisy observations of a trajectory.

    Per frame and view, nodes are bucketed into view-plane cells and only the
    nearest-to-camera node per cell survives; survivors get isotropic noise.
    Tracks are one seeded node subset (first view's fraction), persistent
    across frames, with their own noise.
    """
    if isinstance(views, ViewConfig):
        views = [views]
    n = states[0].n_nodes
    cloud_rng = seeded_rng(seed, _STREAM_CLOUD)
    track_rng = seeded_rng(seed, _STREAM_TRACKS)
    n_tracks = int(round(views[0].track_fraction * n))
    track_ids = np.sort(track_rng.choice(n, size=n_tracks, replace=False)) \
        if n_tracks else np.zeros(0, np.int64)
    center0 = states[0].positions.mean(axis=0)

    frames = []
    for t, st in enumerate(states):
        pos = st.positions
        clouds = []
        for view in views:
            vis = _visible(pos, view, center0)
            pts = pos[vis]
            if view.noise_sigma > 0:
                pts = pts + cloud_rng.normal(0.0, view.noise_sigma, size=pts.shape)
            clouds.append(pts)
        cloud = np.concatenate(clouds, axis=0) if clouds else np.zeros((0, 3))
        tpos = pos[track_ids]
        if views[0].track_noise_sigma > 0 and n_tracks:
            tpos = tpos + track_rng.normal(0.0, views[0].track_noise_sigma, size=tpos.shape)
        frames.append(ObservationFrame(cloud, track_ids, tpos))
    return ObservationSequence(tuple(frames), ControlScript(control.positions[: len(states)]), fps)


def split_train_test(
    obs: ObservationSequence, ratio: float
) -> tuple[ObservationSequence, ObservationSequence]:
    """Contiguous prefix of round(ratio * T) frames for training, rest for
    future-prediction evaluation."""
    if not (0 < ratio < 1):
        raise ValueError("ratio must be in (0, 1)")
    T = obs.n_frames
    if T < 2:
        raise ValueError("need at least 2 frames to split")
    n_train = int(math.floor(ratio * T + 0.5))
    n_train = min(max(n_train, 1), T - 1)
    return obs.window(0, n_train), obs.window(n_train, T)


def generalization_pair(
    template: ScenarioTemplate, source_script: str, target_script: str
) -> tuple[GroundTruth, GroundTruth]:
    """Two interactions of the same ground-truth object: identical lattice,
    topology, and physics; different control scripts."""
    if source_script == target_script:
        raise ValueError("source and target scripts must differ")
    src = generate_scenario(replace(template, script=source_script))
    tgt = generate_scenario(replace(template, script=target_script))
    return src, tgt


# --------------------------------------------------------------------------
# Named templates (CLI surface) and the ground-truth sidecar file
# --------------------------------------------------------------------------

def named_template(name: str, seed: int = 0) -> ScenarioTemplate:
    """Templates addressable as '<object>-<script>', e.g. 'rope-lift'."""
    try:
        kind, script = name.split("-", 1)
    except ValueError:
        raise ValueError(f"template name {name!r} is not of the form '<object>-<script>'")
    if script not in SCRIPT_KINDS:
        raise ValueError(f"unknown script {script!r}, expected one of {SCRIPT_KINDS}")
    base = ScenarioTemplate(seed=seed, script=script)
    if kind == "rope":
        return base
    if kind == "cloth":
        return replace(
            base, kind="cloth", counts=(12, 9), spacing=0.03,
            params=replace(base.params, topo_radius=0.065, topo_max_neighbors=6),
            amplitude=0.2, height=0.08,
        )
    if kind == "box":
        return replace(
            base, kind="box", counts=(5, 4, 3), spacing=0.03,
            params=replace(base.params, topo_radius=0.07, topo_max_neighbors=8,
                           k_hom=4000.0),
            amplitude=0.15, height=0.03,
        )
    raise ValueError(f"unknown object kind {kind!r}, expected one of {OBJECT_KINDS}")


def ground_truth_to_dict(gt: GroundTruth) -> dict:
    from . import model

    t = gt.template
    return {
        "v": model.SCHEMA_VERSION,
        "template": {
            "kind": t.kind, "counts": list(t.counts), "spacing": t.spacing,
            "script": t.script, "amplitude": t.amplitude,
            "duration_frames": t.duration_frames, "n_frames": t.n_frames,
            "fps": t.fps, "seed": t.seed,
            "stiffness_split": list(t.stiffness_split) if t.stiffness_split else None,
            "height": t.height, "ground_height": t.ground_height,
        },
        "params": model.params_to_dict(gt.scenario.params),
        "k_ctrl": t.k_ctrl,
        "stiffness": [float(k) for k in gt.scenario.topology.stiffness],
        "extent": gt.extent,
        "states": [model.state_to_dict(s) for s in gt.states],
    }
