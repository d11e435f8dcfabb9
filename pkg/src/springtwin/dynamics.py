"""Forward simulation: force accumulation, impulse collisions, and the
damped velocity-then-position update.

Velocities update before positions and positions advance with the updated
velocities; collision impulses act between the two so they see post-damping
velocities and ground penetration is corrected within the substep. Control
points are kinematic: control springs pull object nodes but receive no
reaction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .model import ControlScript, PhysParams, Scenario, SpringTopology, SystemState
from .topology import ControlAttachment, attach_controls, attachments_to_arrays

log = logging.getLogger(__name__)

DEFAULT_CTRL_STIFFNESS_FACTOR = 10.0  # k_ctrl = factor * k_hom unless given


class SimulationDiverged(RuntimeError):
    """Raised when a non-finite value appears; carries the last finite state."""

    def __init__(self, frame: int, substep: int, last_state: SystemState):
        super().__init__(f"simulation diverged at frame {frame}, substep {substep}")
        self.frame = frame
        self.substep = substep
        self.last_state = last_state


@dataclass(frozen=True)
class CollisionEvent:
    kind: str  # "point-point" or "point-ground"
    indices: tuple[int, ...]
    impulse: float  # normal impulse magnitude, N*s


@dataclass
class Workspace:
    """Reusable per-step scratch: force accumulator plus collision event log."""

    forces: np.ndarray
    collision_events: list[CollisionEvent] = field(default_factory=list)

    @staticmethod
    def for_nodes(n: int) -> "Workspace":
        return Workspace(np.zeros((n, 3), dtype=np.float64))


def _topology_arrays(topology: SpringTopology | None):
    if topology is None or topology.n_springs == 0:
        z = np.empty(0, np.int64)
        f = np.empty(0, np.float64)
        return z, z, f, f
    idx = topology.indices
    return (
        np.ascontiguousarray(idx[:, 0]),
        np.ascontiguousarray(idx[:, 1]),
        np.ascontiguousarray(topology.rest_length),
        np.ascontiguousarray(topology.stiffness),
    )


def _attachment_arrays(attachments: list[ControlAttachment] | None):
    if not attachments:
        z = np.empty(0, np.int64)
        f = np.empty(0, np.float64)
        return z, z, f, f
    return attachments_to_arrays(attachments)


def accumulate_forces(
    state: SystemState,
    topology: SpringTopology | None,
    attachments: list[ControlAttachment] | None,
    ctrl_positions,
    params: PhysParams,
    out: Workspace,
) -> None:
    """Fill ``out.forces`` with spring, dashpot, control-spring, and gravity
    forces at the given state."""
    si, sj, rest, stiff = _topology_arrays(topology)
    aci, ani, arest, ak = _attachment_arrays(attachments)
    ctrl = np.asarray(ctrl_positions, dtype=np.float64).reshape(-1, 3)
    g = params.gravity
    degenerate = kernels.forces_into(
        out.forces, state.positions, state.velocities,
        si, sj, rest, stiff, aci, ani, arest, ak, ctrl,
        params.gamma, params.node_mass, g[0], g[1], g[2],
    )
    if degenerate:
        log.warning("%d spring(s) with coincident endpoints: spring force skipped, "
                    "dashpot still applied", degenerate)


def resolve_collisions(
    state: SystemState, params: PhysParams, ground_height: float, out: Workspace
) -> SystemState:
    """Apply impulse collision handling once and return the updated state.

    Point-point pairs (closer than ``collision_dist`` and approaching) get
    momentum-conserving impulses; nodes at or below the ground plane moving
    downward bounce with restitution and are clamped onto the plane. Events
    land in ``out.collision_events``.
    """
    x = state.positions.copy()
    v = state.velocities.copy()
    n = x.shape[0]
    rest_thresh = 3.0 * params.h * float(np.linalg.norm(params.gravity))
    cap = 64 + 8 * n
    while True:
        ppi = np.zeros(cap, np.int64)
        ppj = np.zeros(cap, np.int64)
        ppn = np.zeros((cap, 3), np.float64)
        ppv = np.zeros((cap, 3), np.float64)
        gnode = np.zeros(cap, np.int64)
        gvpre = np.zeros((cap, 3), np.float64)
        gflag = np.zeros(cap, np.float64)
        xw = x.copy()
        vw = v.copy()
        pp_cnt, g_cnt, pp_end, g_end = kernels.collide_inplace(
            xw, vw, params.collision_dist, params.restitution, params.friction,
            ground_height, rest_thresh, ppi, ppj, ppn, ppv, 0, gnode, gvpre, gflag, 0,
        )
        if pp_end <= cap and g_end <= cap:
            break
        cap = 2 * max(pp_end, g_end)

    m = params.node_mass
    out.collision_events = []
    for w in range(pp_cnt):
        vn = abs(float(ppv[w] @ ppn[w]))
        out.collision_events.append(CollisionEvent(
            "point-point", (int(ppi[w]), int(ppj[w])),
            m * 0.5 * (1.0 + params.restitution) * vn,
        ))
    for w in range(g_cnt):
        out.collision_events.append(CollisionEvent(
            "point-ground", (int(gnode[w]),),
            m * (1.0 + params.restitution) * abs(float(gvpre[w, 2])),
        ))
    return SystemState(xw, vw)


def default_attachments(
    points,
    ctrl_points,
    params: PhysParams,
    k_ctrl: float | None = None,
) -> list[ControlAttachment]:
    """Control attachments at the canonical frame with the default stiffness
    rule (k_ctrl = 10 * k_hom) unless an explicit k_ctrl is given."""
    ctrl = np.asarray(ctrl_points, dtype=np.float64).reshape(-1, 3)
    if ctrl.shape[0] == 0:
        return []
    if k_ctrl is None:
        k_ctrl = DEFAULT_CTRL_STIFFNESS_FACTOR * params.k_hom
    return attach_controls(ctrl, points, params.ctrl_radius, params.ctrl_max_neighbors, k_ctrl)


def step(
    state: SystemState,
    topology: SpringTopology | None,
    attachments: list[ControlAttachment] | None,
    ctrl_prev,
    ctrl_next,
    params: PhysParams,
    ground_height: float,
) -> SystemState:
    """Advance one frame of ``params.substeps`` substeps; control positions
    interpolate linearly from ctrl_prev to ctrl_next across the substeps."""
    x = state.positions.copy()
    v = state.velocities.copy()
    si, sj, rest, stiff = _topology_arrays(topology)
    aci, ani, arest, ak = _attachment_arrays(attachments)
    c0 = np.asarray(ctrl_prev, dtype=np.float64).reshape(-1, 3)
    c1 = np.asarray(ctrl_next, dtype=np.float64).reshape(-1, 3)
    g = params.gravity
    bad = kernels.run_frame(
        x, v, si, sj, rest, stiff, aci, ani, arest, ak, c0, c1,
        params.substeps, params.gamma, params.delta, params.node_mass,
        g[0], g[1], g[2], params.h,
        params.collision_dist, params.restitution, params.friction, ground_height,
    )
    if bad >= 0:
        raise SimulationDiverged(0, int(bad), SystemState(x, v))
    return SystemState(x, v)


def rollout(
    scenario: Scenario,
    n_frames: int,
    attachments: list[ControlAttachment] | None = None,
    k_ctrl: float | None = None,
) -> list[SystemState]:
    """Roll the scenario forward ``n_frames`` frames; the result includes the
    initial state (length n_frames + 1). Deterministic.

    Attachments default to the canonical-frame rule; pass them explicitly to
    reuse a fitted configuration.
    """
    control = scenario.control
    if control.n_ctrl > 0 and control.n_frames < n_frames:
        raise ValueError(
            f"control script has {control.n_frames} frames, need >= {n_frames}"
        )
    if attachments is None and control.n_ctrl > 0:
        attachments = default_attachments(
            scenario.initial_state.positions, control.frame(0), scenario.params, k_ctrl
        )

    x = scenario.initial_state.positions.copy()
    v = scenario.initial_state.velocities.copy()
    si, sj, rest, stiff = _topology_arrays(scenario.topology)
    aci, ani, arest, ak = _attachment_arrays(attachments)
    p = scenario.params
    g = p.gravity
    states = [SystemState(x, v)]
    for t in range(n_frames):
        c0 = control.frame(t)
        c1 = control.frame(t + 1)
        bad = kernels.run_frame(
            x, v, si, sj, rest, stiff, aci, ani, arest, ak, c0, c1,
            p.substeps, p.gamma, p.delta, p.node_mass, g[0], g[1], g[2], p.h,
            p.collision_dist, p.restitution, p.friction, scenario.ground_height,
        )
        if bad >= 0:
            raise SimulationDiverged(t, int(bad), SystemState(x, v))
        states.append(SystemState(x, v))
    return states
