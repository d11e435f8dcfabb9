"""Hierarchical sparse-to-dense inverse fitting.

Stage 1 searches the non-differentiable and global parameters (topology
radii/neighbor caps, homogeneous stiffness, damping, collision and control
parameters) with CMA-ES, which sidesteps differentiability entirely. Stage 2
refines per-spring stiffness and the continuous collision parameters with
adjoint gradients and an adaptive first-order update, guarded so its result
never scores worse on the training window than its stage-1 input.
"""

from __future__ import annotations

import copy
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import model
from .adjoint import backward, forward_with_tape
from .dynamics import SimulationDiverged, rollout
from .model import (ControlScript, ObservationSequence, PhysParams, Scenario,
                    SpringTopology, SystemState, seeded_rng)
from .objective import CostBreakdown, CostWeights, trajectory_cost
from .topology import (AttachmentError, ControlAttachment, attach_controls,
                       build_springs)

BAD_FITNESS = 1e12  # assigned to non-finite / diverged candidates
BOUND_PENALTY = 1e6


# --------------------------------------------------------------------------
# CMA-ES
# --------------------------------------------------------------------------

@dataclass
class CmaState:
    mean: np.ndarray
    sigma: float
    C: np.ndarray
    p_sigma: np.ndarray
    p_c: np.ndarray
    generation: int
    lam: int


@dataclass(frozen=True)
class CmaGeneration:
    generation: int
    best_fitness: float
    mean_fitness: float
    sigma: float
    selected: tuple[int, ...]  # parent candidate indices, rank order


def cma_es(
    objective,
    init,
    bounds,
    budget: int,
    seed: int,
    lam: int | None = None,
    sigma0: float | None = None,
    workers: int = 1,
):
    """(mu/mu_w, lambda)-CMA-ES with standard published hyperparameters.

    ``bounds`` is (lo, hi) arrays; candidates are clamped into the box before
    evaluation and penalized proportionally to their squared violation.
    Non-finite objective values get a large finite penalty (search-time
    blow-ups are expected, not fatal). Deterministic for a fixed seed;
    returns (best vector, best value, per-generation history).
    """
    x0 = np.asarray(init, dtype=np.float64).copy()
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    n = x0.shape[0]
    if lam is None:
        lam = 4 + int(3 * math.log(n))
    mu = lam // 2
    w = np.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    w /= w.sum()
    mu_eff = 1.0 / np.sum(w**2)
    c_sigma = (mu_eff + 2) / (n + mu_eff + 5)
    d_sigma = 1 + 2 * max(0.0, math.sqrt((mu_eff - 1) / (n + 1)) - 1) + c_sigma
    c_c = (4 + mu_eff / n) / (n + 4 + 2 * mu_eff / n)
    c_1 = 2 / ((n + 1.3) ** 2 + mu_eff)
    c_mu = min(1 - c_1, 2 * (mu_eff - 2 + 1 / mu_eff) / ((n + 2) ** 2 + mu_eff))
    chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))

    rng = seeded_rng(seed)
    st = CmaState(
        mean=x0,
        sigma=float(sigma0) if sigma0 is not None else 0.3 * float(np.max(hi - lo)),
        C=np.eye(n),
        p_sigma=np.zeros(n),
        p_c=np.zeros(n),
        generation=0,
        lam=lam,
    )

    def eval_one(xc: np.ndarray) -> float:
        xe = np.clip(xc, lo, hi)
        f = objective(xe)
        if not np.isfinite(f):
            f = BAD_FITNESS
        return float(f) + BOUND_PENALTY * float(np.sum((xc - xe) ** 2))

    best_x = np.clip(x0, lo, hi)
    best_f = math.inf
    history: list[CmaGeneration] = []
    n_gen = max(1, budget // lam)

    for g in range(n_gen):
        C = (st.C + st.C.T) / 2
        evals, B = np.linalg.eigh(C)
        D = np.sqrt(np.maximum(evals, 1e-20))
        inv_sqrt_C = (B / D) @ B.T
        z = rng.standard_normal((lam, n))
        y = z @ (B * D).T
        xs = st.mean + st.sigma * y

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                fs = np.array(list(pool.map(eval_one, xs)))
        else:
            fs = np.array([eval_one(xc) for xc in xs])

        idx = np.argsort(fs, kind="stable")
        sel = idx[:mu]
        gb = int(idx[0])
        if fs[gb] < best_f:
            best_f = float(fs[gb])
            best_x = np.clip(xs[gb], lo, hi)

        y_w = w @ y[sel]
        st.mean = st.mean + st.sigma * y_w
        st.p_sigma = (1 - c_sigma) * st.p_sigma + math.sqrt(
            c_sigma * (2 - c_sigma) * mu_eff
        ) * (inv_sqrt_C @ y_w)
        norm_ps = float(np.linalg.norm(st.p_sigma))
        h_sig = norm_ps / math.sqrt(1 - (1 - c_sigma) ** (2 * (g + 1))) < (
            1.4 + 2 / (n + 1)
        ) * chi_n
        st.p_c = (1 - c_c) * st.p_c + (
            math.sqrt(c_c * (2 - c_c) * mu_eff) * y_w if h_sig else 0.0
        )
        rank_mu = (y[sel] * w[:, None]).T @ y[sel]
        st.C = (
            (1 - c_1 - c_mu) * st.C
            + c_1 * (np.outer(st.p_c, st.p_c) + (0.0 if h_sig else c_c * (2 - c_c)) * st.C)
            + c_mu * rank_mu
        )
        st.sigma *= math.exp(c_sigma / d_sigma * (norm_ps / chi_n - 1))
        st.generation = g + 1
        history.append(CmaGeneration(
            generation=g,
            best_fitness=float(fs[gb]),
            mean_fitness=float(np.mean(fs)),
            sigma=st.sigma,
            selected=tuple(int(i) for i in sel),
        ))
    return best_x, best_f, history


# --------------------------------------------------------------------------
# Sparse (stage-1) parameter vector
# --------------------------------------------------------------------------

SPARSE_FIELDS = (
    "log_k_hom", "log_gamma", "logit_delta", "e", "mu", "d_coll",
    "topo_radius", "n_topo", "ctrl_radius", "n_ctrl", "log_k_ctrl",
)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _logit(p: float) -> float:
    return math.log(p / (1 - p))


def _expit(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


@dataclass(frozen=True)
class SparseParamVector:
    """Decoded stage-1 candidate (integers rounded half-up at evaluation)."""

    k_hom: float
    gamma: float
    delta: float
    e: float
    mu: float
    d_coll: float
    topo_radius: float
    n_topo: int
    ctrl_radius: float
    n_ctrl: int
    k_ctrl: float

    @staticmethod
    def decode(theta: np.ndarray) -> "SparseParamVector":
        return SparseParamVector(
            k_hom=math.exp(theta[0]),
            gamma=math.exp(theta[1]),
            delta=_expit(theta[2]),
            e=float(theta[3]),
            mu=float(theta[4]),
            d_coll=float(theta[5]),
            topo_radius=float(theta[6]),
            n_topo=max(1, _round_half_up(theta[7])),
            ctrl_radius=float(theta[8]),
            n_ctrl=max(1, _round_half_up(theta[9])),
            k_ctrl=math.exp(theta[10]),
        )


def default_sparse_bounds(points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(lo, hi, init) for the stage-1 search, scaled by the point spacing."""
    from scipy.spatial import cKDTree

    pts = np.asarray(points, dtype=np.float64)
    d_nn = float(np.median(cKDTree(pts).query(pts, k=2)[0][:, 1])) if len(pts) > 1 else 0.05
    lo = np.array([
        math.log(10.0),      # log_k_hom
        math.log(1e-4),      # log_gamma
        _logit(0.85),        # logit_delta
        0.0,                 # e
        0.0,                 # mu
        0.0,                 # d_coll
        1.05 * d_nn,         # topo_radius
        1.0,                 # n_topo
        0.8 * d_nn,          # ctrl_radius
        1.0,                 # n_ctrl
        math.log(100.0),     # log_k_ctrl
    ])
    hi = np.array([
        math.log(1e5),
        math.log(2.0),
        _logit(0.999999),
        1.0,
        1.0,
        1.5 * d_nn,
        4.0 * d_nn,
        12.0,
        6.0 * d_nn,
        8.0,
        math.log(1e6),
    ])
    init = np.array([
        math.log(1000.0), math.log(0.05), _logit(0.995), 0.3, 0.3, 0.0,
        2.0 * d_nn, 6.0, 2.5 * d_nn, 4.0, math.log(10_000.0),
    ])
    return lo, hi, init


# --------------------------------------------------------------------------
# Configuration and results
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class OptimizeConfig:
    """Everything the fitting pipeline needs beyond the observations."""

    seed: int = 0
    ablation: str = "full"  # full | zero-order-only | first-order-only
    train_ratio: float = 0.7
    # simulation context (not searched)
    node_mass: float = 0.01
    substeps: int = 50
    gravity: tuple = (0.0, 0.0, -9.8)
    ground_height: float = -1.0
    # stage 1
    stage1_generations: int = 30
    lam: int | None = None
    workers: int = 1
    bounds_override: dict = field(default_factory=dict)
    # stage 2
    stage2_iters: int = 200
    lr: float = 1e-2
    grad_clip: float = 1e4  # global-norm clip; contact-rich tapes can explode
    weights: CostWeights = CostWeights()

    def to_dict(self) -> dict:
        d = {
            "seed": self.seed, "ablation": self.ablation, "train_ratio": self.train_ratio,
            "node_mass": self.node_mass, "substeps": self.substeps,
            "gravity": list(self.gravity), "ground_height": self.ground_height,
            "stage1_generations": self.stage1_generations, "lam": self.lam,
            "workers": self.workers, "bounds_override": dict(self.bounds_override),
            "stage2_iters": self.stage2_iters, "lr": self.lr,
            "weights": [self.weights.w_cd, self.weights.w_track],
        }
        return d

    @staticmethod
    def from_dict(d: dict) -> "OptimizeConfig":
        d = dict(d)
        d["gravity"] = tuple(d.get("gravity", (0, 0, -9.8)))
        w = d.pop("weights", [1.0, 1.0])
        return OptimizeConfig(**d, weights=CostWeights(*w))


@dataclass
class StageResult:
    params: PhysParams
    topology: SpringTopology
    attachments: list[ControlAttachment]
    k_ctrl: float
    cost: CostBreakdown
    history: list


def _params_from_sparse(sp: SparseParamVector, config: OptimizeConfig, fps: float) -> PhysParams:
    return PhysParams(
        k_hom=sp.k_hom, gamma=sp.gamma, delta=sp.delta,
        restitution=sp.e, friction=sp.mu, collision_dist=sp.d_coll,
        topo_radius=sp.topo_radius, topo_max_neighbors=sp.n_topo,
        ctrl_radius=sp.ctrl_radius, ctrl_max_neighbors=sp.n_ctrl,
        node_mass=config.node_mass, gravity=config.gravity,
        dt=1.0 / fps, substeps=config.substeps,
    )


def _build_candidate(
    sp: SparseParamVector, points: np.ndarray, obs: ObservationSequence, config: OptimizeConfig
) -> tuple[Scenario, list[ControlAttachment]]:
    params = _params_from_sparse(sp, config, obs.fps)
    topo = build_springs(points, sp.topo_radius, sp.n_topo, sp.k_hom)
    atts: list[ControlAttachment] = []
    if obs.control.n_ctrl > 0:
        atts = attach_controls(obs.control.frame(0), points, sp.ctrl_radius, sp.n_ctrl, sp.k_ctrl)
    scen = Scenario(
        name="candidate",
        initial_state=SystemState.at_rest(points),
        topology=topo,
        params=params,
        control=obs.control,
        ground_height=config.ground_height,
    )
    return scen, atts


def optimize_sparse(
    obs: ObservationSequence, canonical_points, config: OptimizeConfig
) -> StageResult:
    """Stage 1: CMA-ES over the sparse/non-differentiable parameter vector.

    Each candidate is decoded (integers rounded), used to rebuild the spring
    graph and control attachments, rolled out over the training window, and
    scored by the trajectory cost. Returns the rebuilt best configuration.
    """
    points = np.asarray(canonical_points, dtype=np.float64)
    lo, hi, init = default_sparse_bounds(points)
    for name, (vlo, vhi) in config.bounds_override.items():
        i = SPARSE_FIELDS.index(name)
        lo[i], hi[i] = vlo, vhi
        init[i] = 0.5 * (vlo + vhi)

    # normalized search space keeps CMA's isotropic init sensible
    width = hi - lo

    def objective(u: np.ndarray) -> float:
        theta = lo + u * width
        sp = SparseParamVector.decode(theta)
        try:
            scen, atts = _build_candidate(sp, points, obs, config)
            states = rollout(scen, obs.n_frames - 1, attachments=atts)
        except (SimulationDiverged, AttachmentError):
            return BAD_FITNESS
        return trajectory_cost(states, obs, config.weights).total

    u0 = (init - lo) / width
    lam = config.lam or (4 + int(3 * math.log(len(SPARSE_FIELDS))))
    budget = config.stage1_generations * lam
    best_u, best_f, history = cma_es(
        objective, u0, (np.zeros_like(u0), np.ones_like(u0)), budget,
        seed=config.seed, lam=lam, sigma0=0.3, workers=config.workers,
    )
    if best_f >= BAD_FITNESS:
        raise RuntimeError(
            f"all stage-1 candidates diverged over {budget} evaluations; "
            "check units/scales of the observations"
        )
    sp = SparseParamVector.decode(lo + best_u * width)
    scen, atts = _build_candidate(sp, points, obs, config)
    states = rollout(scen, obs.n_frames - 1, attachments=atts)
    cost = trajectory_cost(states, obs, config.weights)
    return StageResult(scen.params, scen.topology, atts, sp.k_ctrl, cost, history)


def optimize_dense(
    stage1: StageResult,
    obs: ObservationSequence,
    canonical_points,
    config: OptimizeConfig,
) -> StageResult:
    """Stage 2: adjoint-driven refinement of per-spring stiffness and the
    continuous collision/damping parameters.

    Adam-style per-coordinate updates on [log k_e..., log gamma, delta, e, mu]
    (collision distance gates branch structure and stays frozen). Monotone:
    the best-seen training cost is tracked and returned, so the result never
    scores above the stage-1 configuration.
    """
    points = np.asarray(canonical_points, dtype=np.float64)
    topo = stage1.topology
    E = topo.n_springs
    theta = np.concatenate([
        np.log(topo.stiffness),
        [math.log(max(stage1.params.gamma, 1e-12)),
         stage1.params.delta, stage1.params.restitution, stage1.params.friction],
    ])
    lo_s = np.array([math.log(1e-6), 1e-4, 0.0, 0.0])
    hi_s = np.array([math.log(10.0), 1.0, 1.0, 1.0])

    def build(theta_v: np.ndarray) -> tuple[Scenario, PhysParams, SpringTopology]:
        stiff = np.exp(theta_v[:E])
        params = replace(
            stage1.params,
            gamma=math.exp(theta_v[E]),
            delta=float(theta_v[E + 1]),
            restitution=float(theta_v[E + 2]),
            friction=float(theta_v[E + 3]),
        )
        t = topo.with_stiffness(stiff)
        scen = Scenario("dense", SystemState.at_rest(points), t, params, obs.control,
                        config.ground_height)
        return scen, params, t

    best_theta = theta.copy()
    best_cost = stage1.cost
    curve = [stage1.cost.total]
    best_curve = [stage1.cost.total]
    lr = config.lr
    b1, b2, eps = 0.9, 0.999, 1e-8
    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    rejects = 0
    adam_t = 0
    milestone = stage1.cost.total
    stall_tol = 1e-4 * max(stage1.cost.total, 1e-12)
    evals_since_improve = 0

    def restart_from_best(shrink: float) -> None:
        nonlocal theta, m1, m2, lr, adam_t
        lr *= shrink
        theta = best_theta.copy()
        m1 = np.zeros_like(theta)
        m2 = np.zeros_like(theta)
        adam_t = 0

    for it in range(config.stage2_iters):
        scen, _, _ = build(theta)
        try:
            cost, tape = forward_with_tape(scen, obs, config.weights, attachments=stage1.attachments)
        except SimulationDiverged:
            cost = None
        if cost is None or not math.isfinite(cost.total):
            rejects += 1
            if rejects > 5:
                break
            restart_from_best(0.5)
            continue
        curve.append(cost.total)
        if cost.total < best_cost.total:
            best_cost = cost
            best_theta = theta.copy()
        best_curve.append(best_cost.total)
        if cost.total < milestone - stall_tol:
            milestone = cost.total
            evals_since_improve = 0
        else:
            evals_since_improve += 1
        if evals_since_improve >= 10:
            # anneal: resume from the best point with halved step size; stop
            # once the step size is too small to matter
            if lr < 0.05 * config.lr:
                break
            restart_from_best(0.5)
            evals_since_improve = 0
            continue
        grad = backward(tape)
        g = np.concatenate([
            grad.d_log_k,
            [grad.d_gamma * math.exp(theta[E]),  # chain rule into log-gamma
             grad.d_delta, grad.d_e, grad.d_mu],
        ])
        if not np.all(np.isfinite(g)):
            rejects += 1
            if rejects > 5:
                break
            restart_from_best(0.5)
            continue
        gn = float(np.linalg.norm(g))
        if gn > config.grad_clip:
            g *= config.grad_clip / gn
        adam_t += 1
        m1 = b1 * m1 + (1 - b1) * g
        m2 = b2 * m2 + (1 - b2) * g * g
        mh = m1 / (1 - b1 ** adam_t)
        vh = m2 / (1 - b2 ** adam_t)
        theta = theta - lr * mh / (np.sqrt(vh) + eps)
        theta[E:] = np.clip(theta[E:], lo_s, hi_s)

    scen, params, t = build(best_theta)
    return StageResult(params, t, stage1.attachments, stage1.k_ctrl, best_cost, curve)


# --------------------------------------------------------------------------
# Pipeline and the fitted-twin artifact
# --------------------------------------------------------------------------

ABLATIONS = ("full", "zero-order-only", "first-order-only")


@dataclass
class TwinArtifact:
    """The fitted bundle: canonical geometry, topology with dense stiffness,
    physical parameters, and fitting provenance."""

    canonical_points: np.ndarray
    topology: SpringTopology
    params: PhysParams
    k_ctrl: float
    ground_height: float
    train_frames: int
    report: dict

    def scenario(self, control: ControlScript, name: str = "twin",
                 initial_state: SystemState | None = None) -> Scenario:
        return Scenario(
            name=name,
            initial_state=initial_state or SystemState.at_rest(self.canonical_points),
            topology=self.topology,
            params=self.params,
            control=control,
            ground_height=self.ground_height,
        )

    def attachments(self, ctrl_points) -> list[ControlAttachment]:
        ctrl = np.asarray(ctrl_points, dtype=np.float64).reshape(-1, 3)
        if ctrl.shape[0] == 0:
            return []
        return attach_controls(
            ctrl, self.canonical_points,
            self.params.ctrl_radius, self.params.ctrl_max_neighbors, self.k_ctrl,
        )

    def resimulate(self, obs: ObservationSequence, n_frames: int | None = None) -> list[SystemState]:
        scen = self.scenario(obs.control)
        atts = self.attachments(obs.control.frame(0)) if obs.control.n_ctrl else []
        return rollout(scen, (obs.n_frames - 1) if n_frames is None else n_frames,
                       attachments=atts)

    def to_dict(self) -> dict:
        return {
            "v": model.SCHEMA_VERSION,
            "canonical_points": model._points_to_list(self.canonical_points),
            "topology": model.topology_to_dict(self.topology),
            "stiffness": [float(k) for k in self.topology.stiffness],
            "params": model.params_to_dict(self.params),
            "k_ctrl": self.k_ctrl,
            "ground_height": self.ground_height,
            "train_frames": self.train_frames,
            "report": self.report,
        }

    @staticmethod
    def from_dict(d: dict) -> "TwinArtifact":
        topo = model.topology_from_dict(d["topology"])
        stiff = np.asarray(d["stiffness"], dtype=np.float64)
        if stiff.shape[0] != topo.n_springs or not np.array_equal(stiff, topo.stiffness):
            raise ValueError("stiffness array disagrees with topology springs")
        return TwinArtifact(
            canonical_points=np.asarray(d["canonical_points"], dtype=np.float64),
            topology=topo,
            params=model.params_from_dict(d["params"]),
            k_ctrl=float(d["k_ctrl"]),
            ground_height=float(d["ground_height"]),
            train_frames=int(d["train_frames"]),
            report=d.get("report", {}),
        )

    def save(self, path) -> None:
        model.save_json(self.to_dict(), path)

    @staticmethod
    def load(path) -> "TwinArtifact":
        return TwinArtifact.from_dict(model.load_json(path))


def _default_stage1(obs: ObservationSequence, points: np.ndarray,
                    config: OptimizeConfig) -> StageResult:
    """The untuned sparse initialization used by the first-order-only ablation."""
    lo, hi, init = default_sparse_bounds(points)
    for name, (vlo, vhi) in config.bounds_override.items():
        i = SPARSE_FIELDS.index(name)
        init[i] = 0.5 * (vlo + vhi)
    sp = SparseParamVector.decode(init)
    scen, atts = _build_candidate(sp, points, obs, config)
    states = rollout(scen, obs.n_frames - 1, attachments=atts)
    cost = trajectory_cost(states, obs, config.weights)
    return StageResult(scen.params, scen.topology, atts, sp.k_ctrl, cost, [])


def run_pipeline(
    obs: ObservationSequence, canonical_points, config: OptimizeConfig
) -> TwinArtifact:
    """Fit a twin on the training window of ``obs``.

    Ablations: ``full`` runs stage 1 then stage 2; ``zero-order-only`` stops
    after stage 1; ``first-order-only`` refines the default sparse
    initialization without the CMA-ES search.
    """
    from .synth import split_train_test

    if config.ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {config.ablation!r}, expected one of {ABLATIONS}")
    points = np.asarray(canonical_points, dtype=np.float64)
    train, _ = split_train_test(obs, config.train_ratio)

    report: dict = {"seed": config.seed, "config": config.to_dict(), "stages": {}}
    if config.ablation == "first-order-only":
        stage1 = _default_stage1(train, points, config)
        report["stages"]["stage1"] = {"mode": "default-init", "cost": stage1.cost.total}
    else:
        stage1 = optimize_sparse(train, points, config)
        report["stages"]["stage1"] = {
            "mode": "cma-es",
            "cost": stage1.cost.total,
            "generations": [
                {"best": h.best_fitness, "mean": h.mean_fitness, "sigma": h.sigma}
                for h in stage1.history
            ],
        }

    if config.ablation == "zero-order-only":
        final = stage1
    else:
        final = optimize_dense(stage1, train, points, config)
        report["stages"]["stage2"] = {"cost": final.cost.total, "curve": list(final.history)}
    report["final_cost"] = final.cost.total

    return TwinArtifact(
        canonical_points=points,
        topology=final.topology,
        params=final.params,
        k_ctrl=final.k_ctrl,
        ground_height=config.ground_height,
        train_frames=train.n_frames,
        report=report,
    )
