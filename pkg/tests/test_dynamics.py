import dataclasses

import numpy as np
import pytest

from springtwin import dynamics
from springtwin.dynamics import (SimulationDiverged, Workspace, accumulate_forces,
                                 resolve_collisions, rollout, step)
from springtwin.model import (ControlScript, PhysParams, Scenario, Spring,
                              SpringTopology, SystemState, seeded_rng)
from springtwin.topology import attach_controls, build_springs

NO_CTRL = np.zeros((0, 3))


def params(**kw) -> PhysParams:
    base = dict(gamma=0.0, delta=1.0, dt=0.01, substeps=1, gravity=(0, 0, 0),
                collision_dist=0.0, node_mass=0.01)
    base.update(kw)
    return PhysParams(**base)


class TestForces:
    def test_rest_state_is_force_free(self):
        topo = SpringTopology.from_springs(2, [Spring(0, 1, 1.0, 10.0)])
        st = SystemState.at_rest([[0, 0, 0], [1, 0, 0]])
        ws = Workspace.for_nodes(2)
        accumulate_forces(st, topo, [], NO_CTRL, params(gamma=0.5), ws)
        assert np.all(ws.forces == 0)

    def test_stretched_spring_hand_value(self):
        # k=10, rest=1, length 2 -> pull of magnitude 10 along the axis
        topo = SpringTopology.from_springs(2, [Spring(0, 1, 1.0, 10.0)])
        st = SystemState.at_rest([[0, 0, 0], [2, 0, 0]])
        ws = Workspace.for_nodes(2)
        accumulate_forces(st, topo, [], NO_CTRL, params(), ws)
        assert np.allclose(ws.forces[0], [10, 0, 0], atol=1e-13)
        assert np.allclose(ws.forces[1], [-10, 0, 0], atol=1e-13)

    def test_gravity_only(self):
        st = SystemState.at_rest([[0, 0, 0]])
        ws = Workspace.for_nodes(1)
        accumulate_forces(st, None, [], NO_CTRL, params(gravity=(0, 0, -9.8)), ws)
        assert np.allclose(ws.forces[0], [0, 0, -0.098], rtol=1e-14)

    def test_dashpot_full_relative_velocity(self):
        # damping acts on the whole velocity difference, not its axial part
        topo = SpringTopology.from_springs(2, [Spring(0, 1, 1.0, 10.0)])
        st = SystemState([[0, 0, 0], [1, 0, 0]], [[0, 1.0, 0], [0, -1.0, 0]])
        ws = Workspace.for_nodes(2)
        accumulate_forces(st, topo, [], NO_CTRL, params(gamma=0.25), ws)
        assert np.allclose(ws.forces[0], [0, -0.5, 0], atol=1e-15)
        assert np.allclose(ws.forces[1], [0, 0.5, 0], atol=1e-15)

    def test_coincident_endpoints_skip_spring_keep_dashpot(self, caplog):
        topo = SpringTopology.from_springs(2, [Spring(0, 1, 1.0, 10.0)])
        st = SystemState([[0, 0, 0], [0, 0, 0]], [[0, 0, 0], [0, 0, 1.0]])
        ws = Workspace.for_nodes(2)
        with caplog.at_level("WARNING"):
            accumulate_forces(st, topo, [], NO_CTRL, params(gamma=0.5), ws)
        assert np.allclose(ws.forces[0], [0, 0, 0.5])  # dashpot only
        assert any("coincident" in r.message for r in caplog.records)

    def test_control_spring_one_sided(self):
        atts = attach_controls([[0, 0, 1.0]], [[0, 0, 0]], 2.0, 1, 5.0)
        st = SystemState.at_rest([[0, 0, 0]])
        ws = Workspace.for_nodes(1)
        # rest length 1, control moved up to 2 -> pull of 5 * (2-1) upward
        accumulate_forces(st, None, atts, [[0, 0, 2.0]], params(), ws)
        assert np.allclose(ws.forces[0], [0, 0, 5.0], rtol=1e-14)


class TestCollisions:
    def test_head_on_elastic_exchange(self):
        p = params(collision_dist=0.1, restitution=1.0, friction=0.0)
        st = SystemState([[0, 0, 0], [0.05, 0, 0]], [[1, 0, 0], [-1, 0, 0]])
        ws = Workspace.for_nodes(2)
        out = resolve_collisions(st, p, -10.0, ws)
        assert np.allclose(out.velocities, [[-1, 0, 0], [1, 0, 0]], atol=1e-14)
        assert len(ws.collision_events) == 1
        assert ws.collision_events[0].kind == "point-point"

    def test_ground_restitution(self):
        p = params(restitution=0.5, friction=0.0)
        st = SystemState([[0, 0, -0.01]], [[0, 0, -2.0]])
        out = resolve_collisions(st, p, 0.0, Workspace.for_nodes(1))
        assert np.allclose(out.velocities[0], [0, 0, 1.0], rtol=1e-14)
        assert out.positions[0, 2] == 0.0

    def test_separating_pair_untouched(self):
        p = params(collision_dist=0.1, restitution=1.0)
        st = SystemState([[0, 0, 0], [0.05, 0, 0]], [[-1, 0, 0], [1, 0, 0]])
        out = resolve_collisions(st, p, -10.0, Workspace.for_nodes(2))
        assert np.array_equal(out.velocities, st.velocities)

    def test_ground_friction_scales_tangent(self):
        p = params(restitution=0.0, friction=0.25)
        st = SystemState([[0, 0, 0.0]], [[2.0, -1.0, -1.0]])
        out = resolve_collisions(st, p, 0.0, Workspace.for_nodes(1))
        assert np.allclose(out.velocities[0], [1.5, -0.75, 0.0], rtol=1e-14)

    def test_hash_matches_pairwise_oracle(self):
        # exact brute-force oracle, same sequential (i, j) application order
        def oracle(x, v, d_coll, e, mu, ground):
            x = x.copy()
            v = v.copy()
            n = len(x)
            for i in range(n):
                for j in range(i + 1, n):
                    d = x[i] - x[j]
                    L = float(np.sqrt(d @ d))
                    if 1e-12 <= L < d_coll:
                        nrm = d / L
                        rv = v[i] - v[j]
                        vn = float(rv @ nrm)
                        if vn < 0:
                            dv = 0.5 * (1 + e) * vn * nrm + 0.5 * mu * (rv - vn * nrm)
                            v[i] -= dv
                            v[j] += dv
            for i in range(n):
                if x[i, 2] <= ground and v[i, 2] < 0:
                    v[i, 0] *= 1 - mu
                    v[i, 1] *= 1 - mu
                    v[i, 2] *= -e
                    x[i, 2] = ground
            return x, v

        rng = seeded_rng(77)
        for trial in range(10):
            n = 40
            x = rng.uniform(0, 0.2, (n, 3))  # dense cluster, many contacts
            v = rng.standard_normal((n, 3))
            p = params(collision_dist=0.05, restitution=0.6, friction=0.3)
            st = SystemState(x, v)
            out = resolve_collisions(st, p, 0.05, Workspace.for_nodes(n))
            ox, ov = oracle(x, v, 0.05, 0.6, 0.3, 0.05)
            assert np.allclose(out.positions, ox, rtol=0, atol=1e-14)
            assert np.allclose(out.velocities, ov, rtol=1e-12, atol=1e-14)

    def test_point_point_preserves_momentum(self):
        rng = seeded_rng(5)
        x = rng.uniform(0, 0.1, (20, 3))
        v = rng.standard_normal((20, 3))
        p = params(collision_dist=0.06, restitution=0.7, friction=0.4)
        out = resolve_collisions(SystemState(x, v), p, -10.0, Workspace.for_nodes(20))
        assert np.allclose(out.velocities.sum(axis=0), v.sum(axis=0), atol=1e-12)


class TestStep:
    def test_free_fall_hand_values(self):
        p = params(gravity=(0, 0, -9.8))
        out = step(SystemState.at_rest([[0, 0, 1]]), None, [], NO_CTRL, NO_CTRL, p, -10)
        assert np.allclose(out.velocities[0], [0, 0, -0.098], rtol=1e-14)
        assert np.allclose(out.positions[0], [0, 0, 1 - 0.00098], rtol=1e-14)

    def test_force_free_uniform_motion(self):
        p = params(dt=0.25, substeps=5)
        out = step(SystemState([[0, 0, 0]], [[1, 0, 0]]), None, [], NO_CTRL, NO_CTRL, p, -10)
        assert np.allclose(out.positions[0], [0.25, 0, 0], rtol=1e-13)
        assert np.allclose(out.velocities[0], [1, 0, 0])

    def test_drag_multiplier(self):
        p = params(delta=0.5)
        out = step(SystemState([[0, 0, 0]], [[1, 0, 0]]), None, [], NO_CTRL, NO_CTRL, p, -10)
        assert np.allclose(out.velocities[0], [0.5, 0, 0])

    def test_matches_composition_of_public_ops(self):
        # one substep == accumulate_forces; damped v update; collide; advance x
        rng = seeded_rng(21)
        pts = rng.uniform(0, 0.5, (15, 3))
        topo = build_springs(pts, 0.3, 3, 120.0)
        p = params(gamma=0.05, delta=0.97, substeps=1, dt=0.004,
                   collision_dist=0.04, restitution=0.4, friction=0.2,
                   gravity=(0, 0, -9.8))
        st = SystemState(pts, 0.5 * rng.standard_normal((15, 3)))
        stepped = step(st, topo, [], NO_CTRL, NO_CTRL, p, 0.0)

        ws = Workspace.for_nodes(15)
        accumulate_forces(st, topo, [], NO_CTRL, p, ws)
        v1 = p.delta * (st.velocities + p.h * ws.forces / p.node_mass)
        collided = resolve_collisions(SystemState(st.positions, v1), p, 0.0,
                                      Workspace.for_nodes(15))
        assert np.array_equal(stepped.velocities, collided.velocities)
        assert np.array_equal(stepped.positions,
                              collided.positions + p.h * collided.velocities)


class TestRollout:
    def test_zero_frames(self):
        scen = Scenario("z", SystemState.at_rest([[0, 0, 0], [1, 0, 0]]), None,
                        params(), ControlScript(np.zeros((1, 0, 3))))
        states = rollout(scen, 0)
        assert len(states) == 1
        assert np.array_equal(states[0].positions, scen.initial_state.positions)

    def test_determinism_bitwise(self, rope_lift_bundle):
        gt, _ = rope_lift_bundle
        a = rollout(gt.scenario, 30, attachments=gt.attachments)
        b = rollout(gt.scenario, 30, attachments=gt.attachments)
        for sa, sb in zip(a, b):
            assert np.array_equal(sa.positions, sb.positions)
            assert np.array_equal(sa.velocities, sb.velocities)

    def test_stiff_hanging_rope_stays_near_rest_length(self):
        n = 20
        pts = np.zeros((n, 3))
        pts[:, 0] = np.arange(n) * 0.05
        pts[:, 2] = 1.0
        topo = build_springs(pts, 0.06, 2, 5000.0)
        p = params(gamma=0.2, delta=0.995, dt=1 / 30, substeps=100,
                   gravity=(0, 0, -9.8))
        atts = attach_controls(pts[:1], pts, 0.01, 1, 50000.0)
        scen = Scenario("rope", SystemState.at_rest(pts), topo, p,
                        ControlScript.static(pts[:1], 101), ground_height=-10.0)
        states = rollout(scen, 100, attachments=atts)
        for s in states:
            lengths = np.linalg.norm(
                s.positions[topo.indices[:, 1]] - s.positions[topo.indices[:, 0]], axis=1)
            assert np.all(np.abs(lengths / topo.rest_length - 1) < 0.10)

    def test_divergence_reports_location_and_last_state(self):
        topo = SpringTopology.from_springs(2, [Spring(0, 1, 0.5, 1e9)])
        scen = Scenario("boom", SystemState.at_rest([[0, 0, 0], [1, 0, 0]]), topo,
                        params(dt=0.1, substeps=4), ControlScript(np.zeros((10, 0, 3))))
        with pytest.raises(SimulationDiverged) as exc:
            rollout(scen, 9)
        assert np.all(np.isfinite(exc.value.last_state.positions))
        assert exc.value.substep >= 0


def spring_energy(state: SystemState, topo) -> float:
    d = state.positions[topo.indices[:, 1]] - state.positions[topo.indices[:, 0]]
    L = np.linalg.norm(d, axis=1)
    return float(np.sum(0.5 * topo.stiffness * (L - topo.rest_length) ** 2))


class TestConservation:
    def test_momentum_conserved_without_contacts(self):
        rng = seeded_rng(31)
        pts = rng.uniform(0, 1, (12, 3)) + [0, 0, 50]
        topo = build_springs(pts, 0.5, 4, 300.0)
        p = params(gamma=0.3, delta=1.0, dt=1 / 30, substeps=10, node_mass=0.02,
                   gravity=(0, 0, 0))
        st = SystemState(pts, 0.2 * rng.standard_normal((12, 3)))
        drifts = []
        for _ in range(1000):
            prev = p.node_mass * st.velocities.sum(axis=0)
            st = step(st, topo, [], NO_CTRL, NO_CTRL, p, -1000.0)
            cur = p.node_mass * st.velocities.sum(axis=0)
            drifts.append(np.abs(cur - prev).max())
        assert max(drifts) < 1e-10

    def test_energy_non_increasing_under_dissipation(self):
        for seed in range(10):
            rng = seeded_rng(seed + 100)
            n = 10
            pts = rng.uniform(0, 0.5, (n, 3)) + [0, 0, 50]
            topo = build_springs(pts, 0.35, 3, float(rng.uniform(50, 300)))
            p = params(
                gamma=float(rng.uniform(0.01, 0.3)),
                delta=float(rng.uniform(0.90, 0.98)),
                dt=1 / 30, substeps=20, node_mass=0.05, gravity=(0, 0, 0),
                collision_dist=0.03, restitution=float(rng.uniform(0, 1)),
                friction=float(rng.uniform(0, 1)),
            )
            st = SystemState(pts, 0.5 * rng.standard_normal((n, 3)))
            e0 = 0.5 * p.node_mass * np.sum(st.velocities**2) + spring_energy(st, topo)
            e_prev = e0
            for _ in range(50):
                st = step(st, topo, [], NO_CTRL, NO_CTRL, p, -1000.0)
                e = 0.5 * p.node_mass * np.sum(st.velocities**2) + spring_energy(st, topo)
                # 1e-9 relative per step, floored at roundoff scale of e0
                assert e <= e_prev * (1 + 1e-9) + 1e-15 * e0
                e_prev = e
