import dataclasses

import numpy as np
import pytest

from springtwin.model import (ControlScript, ObservationFrame, ObservationSequence,
                              PhysParams, Scenario, SystemState, seeded_rng)
from springtwin.topology import attach_controls, build_springs


def chain_points(n: int, spacing: float = 0.1, z: float = 1.0) -> np.ndarray:
    pts = np.zeros((n, 3))
    pts[:, 0] = np.arange(n) * spacing
    pts[:, 2] = z
    return pts


def random_system(seed: int, n_nodes: int = 10, n_steps: int = 12, substeps: int = 10,
                  gravity=(0, 0, -2.0), with_control: bool = True):
    """A small stable spring system plus a target-driven observation sequence.

    The observations come from a rollout with perturbed stiffness, so the
    cost is smooth and non-zero and all gradients are informative.
    """
    from springtwin import dynamics

    rng = seeded_rng(seed)
    pts = np.cumsum(rng.uniform(0.05, 0.12, size=(n_nodes, 3)) * np.array([1, 0.25, 0.25]), axis=0)
    pts[:, 2] += 1.0
    topo = build_springs(pts, 0.4, 3, 200.0)
    topo = topo.with_stiffness(np.exp(rng.uniform(np.log(50), np.log(300), topo.n_springs)))
    params = PhysParams(
        gamma=float(rng.uniform(0.02, 0.2)), delta=float(rng.uniform(0.95, 0.999)),
        dt=1 / 30, substeps=substeps, node_mass=0.05, gravity=gravity,
        collision_dist=0.0, ctrl_radius=0.5, ctrl_max_neighbors=2,
    )
    T = n_steps + 1
    if with_control:
        ctrl0 = pts[0:1] + np.array([[0.0, 0.0, 0.05]])
        drift = np.cumsum(rng.uniform(-0.01, 0.012, size=(T, 1, 3)), axis=0)
        script = ControlScript(ctrl0[None, :, :] + drift)
        atts = attach_controls(ctrl0, pts, 0.5, 2, 1000.0)
    else:
        script = ControlScript(np.zeros((T, 0, 3)))
        atts = []
    scen = Scenario("rand", SystemState.at_rest(pts), topo, params, script, ground_height=-50.0)

    target = dataclasses.replace(scen, topology=topo.with_stiffness(topo.stiffness * 1.35))
    tstates = dynamics.rollout(target, n_steps, attachments=atts)
    ids = np.arange(n_nodes)
    frames = tuple(
        ObservationFrame(tstates[t].positions + 0.001, ids, tstates[t].positions)
        for t in range(T)
    )
    obs = ObservationSequence(frames, script, 30.0)
    return scen, obs, atts


@pytest.fixture(scope="session")
def rope_lift_bundle():
    """Shared default-noise rope-lift ground truth + observations (seed 7)."""
    from springtwin.synth import ViewConfig, generate_scenario, named_template, observe

    template = named_template("rope-lift", seed=7)
    gt = generate_scenario(template)
    obs = observe(gt.states, gt.scenario.control, template.fps, ViewConfig(), seed=7)
    return gt, obs
