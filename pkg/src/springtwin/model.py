"""Core domain types, scenario validation, deterministic RNG, and JSON serialization.

All vector quantities are SI (meters, seconds, newtons) and stored as float64
numpy arrays of shape (n, 3). Types are immutable value objects: arrays are
copied on construction and marked read-only, so instances can be shared freely
across threads.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import IO, Iterable, Iterator, Sequence

import numpy as np

SCHEMA_VERSION = 1


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


def _as_points(a, *, allow_empty: bool = True) -> np.ndarray:
    """Coerce to a read-only (n, 3) float64 array. Shape errors raise immediately;
    non-finite values are representable (validate_scenario reports them)."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.size == 0:
        arr = arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected (n, 3) point array, got shape {arr.shape}")
    if not allow_empty and arr.shape[0] == 0:
        raise ValueError("empty point array not allowed here")
    return _frozen(arr)


def seeded_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Deterministic random generator.

    Backed by the counter-based Philox-4x64 bit generator keyed on
    (seed, stream), so identical seeds produce identical uniform/normal draws
    on every platform and run. Distinct ``stream`` values give independent
    streams derived from one seed.
    """
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(stream)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class SystemState:
    """Positions and velocities of all mass nodes at one timestep."""

    positions: np.ndarray
    velocities: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "positions", _as_points(self.positions))
        object.__setattr__(self, "velocities", _as_points(self.velocities))

    @property
    def n_nodes(self) -> int:
        return self.positions.shape[0]

    @staticmethod
    def at_rest(positions) -> "SystemState":
        pos = _as_points(positions)
        return SystemState(pos, np.zeros_like(pos))


@dataclass(frozen=True)
class Spring:
    """One undirected spring edge; stored with i < j."""

    i: int
    j: int
    rest_length: float
    stiffness: float


@dataclass(frozen=True)
class SpringTopology:
    """Edge list with rest lengths and per-spring stiffness.

    Stored as parallel arrays (fast-kernel friendly); ``springs`` offers a
    per-edge object view.
    """

    n_nodes: int
    indices: np.ndarray      # (E, 2) int64, each row (i, j) with i < j
    rest_length: np.ndarray  # (E,) float64
    stiffness: np.ndarray    # (E,) float64

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.size == 0:
            idx = idx.reshape(0, 2)
        if idx.ndim != 2 or idx.shape[1] != 2:
            raise ValueError(f"expected (E, 2) index array, got shape {idx.shape}")
        idx = np.array(idx, copy=True)
        idx.flags.writeable = False
        object.__setattr__(self, "indices", idx)
        for name in ("rest_length", "stiffness"):
            arr = np.array(np.asarray(getattr(self, name), dtype=np.float64).reshape(-1), copy=True)
            if arr.shape[0] != idx.shape[0]:
                raise ValueError(f"{name} length {arr.shape[0]} != spring count {idx.shape[0]}")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def n_springs(self) -> int:
        return self.indices.shape[0]

    @property
    def springs(self) -> list[Spring]:
        return [
            Spring(int(i), int(j), float(r), float(k))
            for (i, j), r, k in zip(self.indices, self.rest_length, self.stiffness)
        ]

    @staticmethod
    def from_springs(n_nodes: int, springs: Iterable[Spring]) -> "SpringTopology":
        springs = list(springs)
        idx = np.array([[s.i, s.j] for s in springs], dtype=np.int64).reshape(-1, 2)
        rest = np.array([s.rest_length for s in springs], dtype=np.float64)
        stiff = np.array([s.stiffness for s in springs], dtype=np.float64)
        return SpringTopology(n_nodes, idx, rest, stiff)

    def with_stiffness(self, stiffness) -> "SpringTopology":
        return replace(self, stiffness=np.asarray(stiffness, dtype=np.float64))


@dataclass(frozen=True)
class PhysParams:
    """All scalar physics parameters.

    ``delta`` is a per-substep velocity multiplier, so its effective strength
    depends on ``substeps``; the sparse optimization stage absorbs this.
    Node masses are uniform (``node_mass``) since per-node masses are not
    observable from the data this engine consumes.
    """

    k_hom: float = 2000.0            # N/m, homogeneous stiffness (stage-1 fit)
    gamma: float = 0.1               # N*s/m, dashpot coefficient
    delta: float = 0.997             # per-substep drag multiplier, in (0, 1]
    restitution: float = 0.3         # impulse normal restitution e, in [0, 1]
    friction: float = 0.3            # impulse tangential decay mu, in [0, 1]
    collision_dist: float = 0.0      # m, point-point collision radius (0 = off)
    topo_radius: float = 0.05        # m, spring construction radius
    topo_max_neighbors: int = 8
    ctrl_radius: float = 0.05        # m, control attachment radius
    ctrl_max_neighbors: int = 6
    node_mass: float = 0.01          # kg
    gravity: np.ndarray = field(default_factory=lambda: _frozen([0.0, 0.0, -9.8]))
    dt: float = 1.0 / 30.0           # s per frame
    substeps: int = 20

    def __post_init__(self):
        g = np.asarray(self.gravity, dtype=np.float64).reshape(-1)
        if g.shape != (3,):
            raise ValueError(f"gravity must be a 3-vector, got shape {g.shape}")
        object.__setattr__(self, "gravity", _frozen(g))

    @property
    def h(self) -> float:
        """Integration substep length dt/substeps."""
        return self.dt / self.substeps


@dataclass(frozen=True)
class ControlScript:
    """Per-frame kinematic positions of all control points: (T, n_ctrl, 3)."""

    positions: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.positions, dtype=np.float64)
        if arr.ndim != 3 and arr.size == 0:
            arr = arr.reshape(0, 0, 3)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"expected (T, n_ctrl, 3) control array, got shape {arr.shape}")
        object.__setattr__(self, "positions", _frozen(arr))

    @property
    def n_frames(self) -> int:
        return self.positions.shape[0]

    @property
    def n_ctrl(self) -> int:
        return self.positions.shape[1]

    def frame(self, t: int) -> np.ndarray:
        """Control positions at frame t, clamped to the last frame."""
        if self.n_frames == 0:
            return np.zeros((self.n_ctrl, 3))
        t = min(t, self.n_frames - 1)
        return self.positions[t]

    @staticmethod
    def static(ctrl_points, n_frames: int) -> "ControlScript":
        pts = _as_points(ctrl_points)
        return ControlScript(np.repeat(pts[None, :, :], n_frames, axis=0))


@dataclass(frozen=True)
class ObservationFrame:
    """One frame of partial observation: visible cloud plus tracked nodes."""

    partial_cloud: np.ndarray    # (M, 3); may be empty (fully occluded frame)
    track_ids: np.ndarray        # (K,) int64 node indices
    track_positions: np.ndarray  # (K, 3)

    def __post_init__(self):
        object.__setattr__(self, "partial_cloud", _as_points(self.partial_cloud))
        ids = np.asarray(self.track_ids, dtype=np.int64).reshape(-1)
        ids = np.array(ids, copy=True)
        ids.flags.writeable = False
        object.__setattr__(self, "track_ids", ids)
        object.__setattr__(self, "track_positions", _as_points(self.track_positions))


@dataclass(frozen=True)
class ObservationSequence:
    """Per-frame partial clouds and tracks, aligned with a control script."""

    frames: tuple[ObservationFrame, ...]
    control: ControlScript
    fps: float

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def window(self, start: int, stop: int) -> "ObservationSequence":
        """Sub-sequence of frames [start, stop); control is sliced to match."""
        return ObservationSequence(
            self.frames[start:stop],
            ControlScript(self.control.positions[start:stop]),
            self.fps,
        )


@dataclass(frozen=True)
class Scenario:
    """A simulatable setup: canonical state, optional topology, parameters,
    control script, and the ground plane height."""

    name: str
    initial_state: SystemState
    topology: SpringTopology | None
    params: PhysParams
    control: ControlScript
    ground_height: float = -1.0


def _check_finite(violations: list[str], arr: np.ndarray, what: str) -> None:
    if arr.size and not np.all(np.isfinite(arr)):
        violations.append(f"{what}: non-finite values")


def validate_scenario(
    scenario: Scenario, observations: ObservationSequence | None = None
) -> list[str]:
    """Collect human-readable descriptions of every violated invariant.

    Total: never raises on malformed input; an empty list means the scenario
    (and observations, when given) satisfy all type invariants.
    """
    v: list[str] = []
    state = scenario.initial_state
    n = state.n_nodes
    _check_finite(v, state.positions, "initial_state.positions")
    _check_finite(v, state.velocities, "initial_state.velocities")
    if state.velocities.shape[0] != n:
        v.append(
            f"initial_state: positions length {n} != velocities length {state.velocities.shape[0]}"
        )

    topo = scenario.topology
    if topo is not None:
        if topo.n_nodes != n:
            v.append(f"topology.n_nodes {topo.n_nodes} != initial_state node count {n}")
        seen: set[tuple[int, int]] = set()
        for s_idx in range(topo.n_springs):
            i, j = int(topo.indices[s_idx, 0]), int(topo.indices[s_idx, 1])
            if i == j:
                v.append(f"spring {s_idx}: self-loop")
                continue
            if not (i < j):
                v.append(f"spring {s_idx}: indices not ordered i < j ({i}, {j})")
            if not (0 <= i < topo.n_nodes and 0 <= j < topo.n_nodes):
                v.append(f"spring {s_idx}: index out of range ({i}, {j})")
            key = (min(i, j), max(i, j))
            if key in seen:
                v.append(f"spring {s_idx}: duplicate edge {key}")
            seen.add(key)
            if not (topo.rest_length[s_idx] > 0):
                v.append(f"spring {s_idx}: rest_length must be > 0")
            if not (topo.stiffness[s_idx] > 0):
                v.append(f"spring {s_idx}: stiffness must be > 0")

    p = scenario.params
    for name, cond in [
        ("k_hom", p.k_hom > 0),
        ("gamma", p.gamma >= 0),
        ("delta", 0 < p.delta <= 1),
        ("restitution", 0 <= p.restitution <= 1),
        ("friction", 0 <= p.friction <= 1),
        ("collision_dist", p.collision_dist >= 0),
        ("topo_radius", p.topo_radius > 0),
        ("topo_max_neighbors", p.topo_max_neighbors >= 1),
        ("ctrl_radius", p.ctrl_radius > 0),
        ("ctrl_max_neighbors", p.ctrl_max_neighbors >= 1),
        ("node_mass", p.node_mass > 0),
        ("dt", p.dt > 0),
        ("substeps", p.substeps >= 1),
    ]:
        if not cond:
            v.append(f"params.{name}: out of range")
    _check_finite(v, p.gravity, "params.gravity")
    if not math.isfinite(scenario.ground_height):
        v.append("ground_height: non-finite")
    _check_finite(v, scenario.control.positions, "control.positions")

    if observations is not None:
        if observations.n_frames != observations.control.n_frames:
            v.append(
                f"observations: frames length {observations.n_frames} != "
                f"control frames length {observations.control.n_frames}"
            )
        if not (observations.fps > 0):
            v.append("observations.fps: must be > 0")
        for t, fr in enumerate(observations.frames):
            if fr.track_ids.shape[0] != fr.track_positions.shape[0]:
                v.append(
                    f"observation frame {t}: track_ids length {fr.track_ids.shape[0]} != "
                    f"track_positions length {fr.track_positions.shape[0]}"
                )
            if fr.track_ids.size and (fr.track_ids.min() < 0 or fr.track_ids.max() >= n):
                v.append(f"observation frame {t}: track id out of node range")
            _check_finite(v, fr.partial_cloud, f"observation frame {t}: partial_cloud")
            _check_finite(v, fr.track_positions, f"observation frame {t}: track_positions")
    return v


# --------------------------------------------------------------------------
# JSON schema (versioned with a "v" field; vectors are [x, y, z] triples)
# --------------------------------------------------------------------------

def _points_to_list(a: np.ndarray) -> list[list[float]]:
    return [[float(x), float(y), float(z)] for x, y, z in a]


def state_to_dict(s: SystemState) -> dict:
    return {
        "positions": _points_to_list(s.positions),
        "velocities": _points_to_list(s.velocities),
    }


def state_from_dict(d: dict) -> SystemState:
    return SystemState(d["positions"], d["velocities"])


def topology_to_dict(t: SpringTopology) -> dict:
    return {
        "n_nodes": int(t.n_nodes),
        "springs": [
            {"i": int(i), "j": int(j), "rest_length": float(r), "stiffness": float(k)}
            for (i, j), r, k in zip(t.indices, t.rest_length, t.stiffness)
        ],
    }


def topology_from_dict(d: dict) -> SpringTopology:
    springs = [
        Spring(int(s["i"]), int(s["j"]), float(s["rest_length"]), float(s["stiffness"]))
        for s in d["springs"]
    ]
    return SpringTopology.from_springs(int(d["n_nodes"]), springs)


def params_to_dict(p: PhysParams) -> dict:
    return {
        "k_hom": p.k_hom,
        "gamma": p.gamma,
        "delta": p.delta,
        "restitution": p.restitution,
        "friction": p.friction,
        "collision_dist": p.collision_dist,
        "topo_radius": p.topo_radius,
        "topo_max_neighbors": int(p.topo_max_neighbors),
        "ctrl_radius": p.ctrl_radius,
        "ctrl_max_neighbors": int(p.ctrl_max_neighbors),
        "node_mass": p.node_mass,
        "gravity": [float(x) for x in p.gravity],
        "dt": p.dt,
        "substeps": int(p.substeps),
    }


def params_from_dict(d: dict) -> PhysParams:
    return PhysParams(**d)


def control_to_dict(c: ControlScript) -> dict:
    return {
        "n_ctrl": int(c.n_ctrl),
        "frames": [_points_to_list(f) for f in c.positions],
    }


def control_from_dict(d: dict) -> ControlScript:
    frames = d["frames"]
    n_ctrl = int(d["n_ctrl"])
    arr = np.asarray(frames, dtype=np.float64).reshape(len(frames), n_ctrl, 3)
    return ControlScript(arr)


def scenario_to_dict(s: Scenario) -> dict:
    return {
        "v": SCHEMA_VERSION,
        "name": s.name,
        "initial_state": state_to_dict(s.initial_state),
        "topology": None if s.topology is None else topology_to_dict(s.topology),
        "params": params_to_dict(s.params),
        "control": control_to_dict(s.control),
        "ground_height": float(s.ground_height),
    }


def scenario_from_dict(d: dict) -> Scenario:
    return Scenario(
        name=d["name"],
        initial_state=state_from_dict(d["initial_state"]),
        topology=None if d.get("topology") is None else topology_from_dict(d["topology"]),
        params=params_from_dict(d["params"]),
        control=control_from_dict(d["control"]),
        ground_height=float(d["ground_height"]),
    )


def observations_to_dict(o: ObservationSequence) -> dict:
    return {
        "v": SCHEMA_VERSION,
        "fps": float(o.fps),
        "frames": [
            {
                "partial_cloud": _points_to_list(f.partial_cloud),
                "track_ids": [int(i) for i in f.track_ids],
                "track_positions": _points_to_list(f.track_positions),
            }
            for f in o.frames
        ],
        "control": control_to_dict(o.control),
    }


def observations_from_dict(d: dict) -> ObservationSequence:
    frames = tuple(
        ObservationFrame(f["partial_cloud"], f["track_ids"], f["track_positions"])
        for f in d["frames"]
    )
    return ObservationSequence(frames, control_from_dict(d["control"]), float(d["fps"]))


def save_json(obj: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1) + "\n")


def load_json(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def write_trajectory(
    fh: IO[str],
    states: Sequence[SystemState],
    control: ControlScript | None = None,
) -> None:
    """JSON-lines trajectory: one frame object per line."""
    for t, s in enumerate(states):
        rec = {
            "positions": _points_to_list(s.positions),
            "velocities": _points_to_list(s.velocities),
            "control": _points_to_list(control.frame(t)) if control is not None else [],
        }
        fh.write(json.dumps(rec) + "\n")


def read_trajectory(fh: IO[str]) -> Iterator[tuple[SystemState, np.ndarray]]:
    for line in fh:
        line = line.strip()
        if not line:
            continue
        rec = json.loads(line)
        yield (
            SystemState(rec["positions"], rec["velocities"]),
            _as_points(rec.get("control", [])),
        )
