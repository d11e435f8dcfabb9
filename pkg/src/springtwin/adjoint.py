"""Reverse-mode differentiation of the trajectory cost through the rollout.

The backward pass differentiates spring, dashpot, drag, gravity, and the
integration update analytically. Discontinuous decisions made during the
forward pass — which collision pairs fired, which ground contacts clamped,
and which predicted point each observed point matched — are frozen on the
tape, so gradients are exact for the branch-frozen piecewise-smooth
surrogate. Impulse magnitudes are differentiated with respect to velocities
and (restitution, friction); the collision distance gates branch structure
and is not differentiated.

Stiffness gradients are reported in log-space (d_log_k), which keeps
positivity structural and balances gradient scales across magnitudes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .dynamics import SimulationDiverged, _attachment_arrays, _topology_arrays
from .model import ObservationSequence, Scenario, SystemState
from .objective import CostBreakdown, CostWeights, nearest_predicted, trajectory_cost
from .topology import ControlAttachment


@dataclass
class Tape:
    """Everything needed to replay the backward pass exactly.

    In full mode the per-substep snapshots live in ``x0/v0/ctrl``; in
    checkpoint mode only frame-boundary states are kept and each frame is
    re-recorded (deterministically) during the backward sweep.
    """

    n_steps: int
    substeps: int
    h: float
    checkpointed: bool
    states: list[SystemState]          # frame-boundary states, len n_steps + 1
    frame_nn: list[np.ndarray | None]  # frozen chamfer correspondences per obs frame
    x0: np.ndarray                     # (S, n, 3) or (substeps, n, 3) scratch
    v0: np.ndarray
    ctrl: np.ndarray
    ppi: np.ndarray
    ppj: np.ndarray
    ppn: np.ndarray
    ppv: np.ndarray
    pp_off: np.ndarray
    gnode: np.ndarray
    gvpre: np.ndarray
    gflag: np.ndarray
    g_off: np.ndarray
    # frozen problem definition
    spring_arrays: tuple
    att_arrays: tuple
    params: object
    ground_height: float
    control_frames: np.ndarray
    obs: ObservationSequence
    weights: CostWeights
    cost: CostBreakdown | None = None

    def __len__(self) -> int:
        return self.n_steps * self.substeps


@dataclass(frozen=True)
class ParamGradient:
    """Gradient of the trajectory cost; zero where a parameter is frozen."""

    d_log_k: np.ndarray  # per spring, wrt log-stiffness
    d_gamma: float
    d_delta: float
    d_e: float
    d_mu: float


def _grow(tape: Tape, need_pp: int, need_g: int) -> None:
    if need_pp > tape.ppi.shape[0]:
        cap = 2 * need_pp
        tape.ppi = np.zeros(cap, np.int64)
        tape.ppj = np.zeros(cap, np.int64)
        tape.ppn = np.zeros((cap, 3), np.float64)
        tape.ppv = np.zeros((cap, 3), np.float64)
    if need_g > tape.gnode.shape[0]:
        cap = 2 * need_g
        tape.gnode = np.zeros(cap, np.int64)
        tape.gvpre = np.zeros((cap, 3), np.float64)
        tape.gflag = np.zeros(cap, np.float64)


def _record_frame(tape: Tape, x, v, c0, c1, s0: int) -> None:
    """Run one frame with recording, growing event buffers on overflow."""
    p = tape.params
    g = p.gravity
    si, sj, rest, stiff = tape.spring_arrays
    aci, ani, arest, ak = tape.att_arrays
    while True:
        xw = x.copy()
        vw = v.copy()
        status, info, _, _ = kernels.run_frame_record(
            xw, vw, si, sj, rest, stiff, aci, ani, arest, ak, c0, c1,
            p.substeps, p.gamma, p.delta, p.node_mass, g[0], g[1], g[2], p.h,
            p.collision_dist, p.restitution, p.friction, tape.ground_height,
            tape.x0, tape.v0, tape.ctrl, s0,
            tape.ppi, tape.ppj, tape.ppn, tape.ppv, tape.pp_off,
            tape.gnode, tape.gvpre, tape.gflag, tape.g_off,
        )
        if status == kernels.STATUS_OVERFLOW:
            _grow(tape, int(info), int(info))
            continue
        if status == kernels.STATUS_DIVERGED:
            raise SimulationDiverged(s0 // p.substeps, int(info), SystemState(xw, vw))
        x[:] = xw
        v[:] = vw
        return


def forward_with_tape(
    scenario: Scenario,
    obs: ObservationSequence,
    weights: CostWeights = CostWeights(),
    attachments: list[ControlAttachment] | None = None,
    checkpointed: bool = False,
) -> tuple[CostBreakdown, Tape]:
    """Roll out the scenario over the observation window, recording the tape.

    The returned cost is computed by :func:`objective.trajectory_cost` on the
    recorded states, so it matches a plain rollout exactly. ``checkpointed``
    keeps memory at one frame of substep snapshots and re-records frames
    during backward.
    """
    from .dynamics import default_attachments

    if scenario.topology is None:
        raise ValueError("forward_with_tape needs a scenario with topology")
    T = obs.n_frames
    n_steps = max(T - 1, 0)
    control = obs.control
    if attachments is None and control.n_ctrl > 0:
        attachments = default_attachments(
            scenario.initial_state.positions, control.frame(0), scenario.params
        )

    p = scenario.params
    n = scenario.initial_state.n_nodes
    nc = control.n_ctrl
    S = n_steps * p.substeps
    snap = p.substeps if checkpointed else max(S, 1)
    tape = Tape(
        n_steps=n_steps,
        substeps=p.substeps,
        h=p.h,
        checkpointed=checkpointed,
        states=[],
        frame_nn=[],
        x0=np.zeros((snap, n, 3)),
        v0=np.zeros((snap, n, 3)),
        ctrl=np.zeros((snap, nc, 3)),
        ppi=np.zeros(max(1024, 16 * n), np.int64),
        ppj=np.zeros(max(1024, 16 * n), np.int64),
        ppn=np.zeros((max(1024, 16 * n), 3), np.float64),
        ppv=np.zeros((max(1024, 16 * n), 3), np.float64),
        pp_off=np.zeros(max(S, 1) + 1, np.int64),
        gnode=np.zeros(max(1024, 16 * n), np.int64),
        gvpre=np.zeros((max(1024, 16 * n), 3), np.float64),
        gflag=np.zeros(max(1024, 16 * n), np.float64),
        g_off=np.zeros(max(S, 1) + 1, np.int64),
        spring_arrays=_topology_arrays(scenario.topology),
        att_arrays=_attachment_arrays(attachments),
        params=p,
        ground_height=scenario.ground_height,
        control_frames=control.positions.copy() if control.n_frames else np.zeros((0, nc, 3)),
        obs=obs,
        weights=weights,
    )

    x = scenario.initial_state.positions.copy()
    v = scenario.initial_state.velocities.copy()
    tape.states.append(SystemState(x, v))
    si, sj, rest, stiff = tape.spring_arrays
    aci, ani, arest, ak = tape.att_arrays
    g = p.gravity
    for t in range(n_steps):
        c0 = control.frame(t)
        c1 = control.frame(t + 1)
        if checkpointed:
            bad = kernels.run_frame(
                x, v, si, sj, rest, stiff, aci, ani, arest, ak, c0, c1,
                p.substeps, p.gamma, p.delta, p.node_mass, g[0], g[1], g[2], p.h,
                p.collision_dist, p.restitution, p.friction, scenario.ground_height,
            )
            if bad >= 0:
                raise SimulationDiverged(t, int(bad), SystemState(x, v))
        else:
            _record_frame(tape, x, v, c0, c1, t * p.substeps)
        tape.states.append(SystemState(x, v))

    for t in range(T):
        fr = obs.frames[t]
        if fr.partial_cloud.shape[0]:
            tape.frame_nn.append(nearest_predicted(fr.partial_cloud, tape.states[t].positions))
        else:
            tape.frame_nn.append(None)

    cost = trajectory_cost(tape.states, obs, weights)
    tape.cost = cost
    return cost, tape


def _cost_grad_frame(tape: Tape, t: int, xbar: np.ndarray) -> None:
    """Add d(cost)/d(positions at frame t) using the frozen correspondences."""
    T = tape.obs.n_frames
    fr = tape.obs.frames[t]
    pos = tape.states[t].positions
    nn = tape.frame_nn[t]
    if nn is not None and nn.shape[0]:
        d = pos[nn] - fr.partial_cloud
        dist = np.sqrt(np.einsum("ij,ij->i", d, d))
        ok = dist > 1e-12
        scale = tape.weights.w_cd / (T * nn.shape[0])
        contrib = np.where(ok, scale / np.where(ok, dist, 1.0), 0.0)[:, None] * d
        np.add.at(xbar, nn, contrib)
    ids = fr.track_ids
    if ids.shape[0]:
        d = pos[ids] - fr.track_positions
        np.add.at(xbar, ids, (2.0 * tape.weights.w_track / (T * ids.shape[0])) * d)


def backward(tape: Tape) -> ParamGradient:
    """Exact reverse-mode gradient of the tape-frozen objective."""
    p = tape.params
    si, sj, rest, stiff = tape.spring_arrays
    aci, ani, arest, ak = tape.att_arrays
    n = tape.states[0].n_nodes if tape.states else 0
    E = si.shape[0]
    dlogk = np.zeros(E)
    dscal = np.zeros(4)  # d_gamma, d_delta, d_e, d_mu
    xbar = np.zeros((n, 3))
    vbar = np.zeros((n, 3))
    g = p.gravity
    T = tape.obs.n_frames

    for t in range(T - 1, 0, -1):
        _cost_grad_frame(tape, t, xbar)
        s_lo_global = (t - 1) * tape.substeps
        if tape.checkpointed:
            # re-record frame t-1 into the one-frame scratch, offsets rebased to 0
            x = tape.states[t - 1].positions.copy()
            v = tape.states[t - 1].velocities.copy()
            c0 = tape.control_frames[min(t - 1, tape.control_frames.shape[0] - 1)] \
                if tape.control_frames.shape[0] else np.zeros((0, 3))
            c1 = tape.control_frames[min(t, tape.control_frames.shape[0] - 1)] \
                if tape.control_frames.shape[0] else np.zeros((0, 3))
            tape.pp_off[0] = 0
            tape.g_off[0] = 0
            _record_frame(tape, x, v, c0, c1, 0)
            s_lo, s_hi = 0, tape.substeps
        else:
            s_lo, s_hi = s_lo_global, s_lo_global + tape.substeps
        kernels.backward_frame(
            xbar, vbar, dlogk, dscal,
            tape.x0, tape.v0, tape.ctrl, s_lo, s_hi,
            tape.ppi, tape.ppj, tape.ppn, tape.ppv, tape.pp_off,
            tape.gnode, tape.gvpre, tape.gflag, tape.g_off,
            si, sj, rest, stiff, aci, ani, arest, ak,
            p.gamma, p.delta, p.node_mass, p.restitution, p.friction,
            g[0], g[1], g[2], p.h,
        )
    # frame 0 cost depends only on the fixed canonical state: no parameter flow

    return ParamGradient(
        d_log_k=dlogk,
        d_gamma=float(dscal[0]),
        d_delta=float(dscal[1]),
        d_e=float(dscal[2]),
        d_mu=float(dscal[3]),
    )
