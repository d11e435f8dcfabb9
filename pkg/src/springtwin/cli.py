"""Command-line entry points.

    springtwin synth     generate a synthetic scenario + observation bundle
    springtwin simulate  roll a scenario or fitted twin forward, write JSONL
    springtwin optimize  fit a twin from observations (two-stage, ablations)
    springtwin eval      CD / track-error report for resim, future, or
                         generalization windows
    springtwin plan      shooting planner over a fitted twin
    springtwin serve     real-time interactive simulation service
    springtwin bench     kernel throughput comparison (numba vs numpy)

All stochastic commands take --seed. Artifacts go under --out.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import model, synth
from .dynamics import rollout
from .model import ControlScript, Scenario, SystemState
from .objective import evaluate_window
from .optimize import ABLATIONS, OptimizeConfig, TwinArtifact, run_pipeline

log = logging.getLogger(__name__)


def _die(message: str, code: int = 1) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _load_or_die(path: Path, loader):
    if not path.exists():
        raise FileNotFoundError(path)
    return loader(path)


def _bundle_paths(data_dir: Path) -> tuple[Path, Path, Path]:
    return (data_dir / "scenario.json", data_dir / "observations.json",
            data_dir / "ground_truth.json")


def cmd_synth(ns: argparse.Namespace) -> int:
    template = synth.named_template(ns.template, seed=ns.seed)
    if ns.frames:
        template = dataclasses.replace(template, n_frames=ns.frames)
    if ns.het:
        lo, hi = (float(x) for x in ns.het.split(","))
        template = dataclasses.replace(template, stiffness_split=(0.5, lo, hi))
    gt = synth.generate_scenario(template)
    views = [synth.ViewConfig(noise_sigma=ns.noise, track_noise_sigma=ns.track_noise,
                              track_fraction=ns.track_fraction)]
    if ns.views == 3:
        views = [
            dataclasses.replace(views[0], origin=o)
            for o in ((0.0, -1.2, 0.6), (1.0, 0.8, 0.7), (-1.0, 0.8, 0.7))
        ]
    obs = synth.observe(gt.states, gt.scenario.control, template.fps, views, seed=ns.seed)

    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    scen_path, obs_path, gt_path = _bundle_paths(out)
    model.save_json(model.scenario_to_dict(gt.scenario), scen_path)
    model.save_json(model.observations_to_dict(obs), obs_path)
    model.save_json(synth.ground_truth_to_dict(gt), gt_path)
    print(f"wrote {scen_path}, {obs_path}, {gt_path}")
    return 0


def cmd_simulate(ns: argparse.Namespace) -> int:
    if ns.twin:
        twin = _load_or_die(Path(ns.twin), TwinArtifact.load)
        _, obs_path, _ = _bundle_paths(Path(ns.data))
        obs = model.observations_from_dict(_load_or_die(obs_path, model.load_json))
        n_frames = ns.frames or obs.n_frames - 1
        states = twin.resimulate(obs, n_frames)
        control = obs.control
    else:
        scen = model.scenario_from_dict(_load_or_die(Path(ns.scenario), model.load_json))
        n_frames = ns.frames or scen.control.n_frames - 1
        states = rollout(scen, n_frames)
        control = scen.control
    with open(ns.out, "w") as fh:
        model.write_trajectory(fh, states, control)
    print(f"wrote {len(states)} frames to {ns.out}")
    return 0


def _config_from_args(ns: argparse.Namespace, ground_height: float) -> OptimizeConfig:
    ablation = ns.ablation
    if ns.stage != "full":
        ablation = {"sparse": "zero-order-only", "dense": "first-order-only"}[ns.stage]
    return OptimizeConfig(
        seed=ns.seed,
        ablation=ablation,
        train_ratio=ns.train_ratio,
        ground_height=ground_height,
        substeps=ns.substeps,
        stage1_generations=ns.generations,
        stage2_iters=ns.iters,
        lr=ns.lr,
        workers=ns.workers,
    )


def cmd_optimize(ns: argparse.Namespace) -> int:
    scen_path, obs_path, _ = _bundle_paths(Path(ns.data))
    scen = model.scenario_from_dict(_load_or_die(scen_path, model.load_json))
    obs = model.observations_from_dict(_load_or_die(obs_path, model.load_json))
    config = _config_from_args(ns, scen.ground_height)
    twin = run_pipeline(obs, scen.initial_state.positions, config)
    twin.save(ns.out)
    print(f"wrote {ns.out} (ablation={config.ablation}, "
          f"final training cost {twin.report['final_cost']:.6g})")
    return 0


def cmd_eval(ns: argparse.Namespace) -> int:
    twin = _load_or_die(Path(ns.twin), TwinArtifact.load)
    _, obs_path, _ = _bundle_paths(Path(ns.data))
    obs = model.observations_from_dict(_load_or_die(obs_path, model.load_json))
    reports = []
    if ns.window in ("resim", "future"):
        states = twin.resimulate(obs)
        if ns.window == "resim":
            reports.append(evaluate_window(states, obs, 0, twin.train_frames, "resim"))
        else:
            reports.append(evaluate_window(states, obs, twin.train_frames, obs.n_frames, "future"))
    else:  # generalization: twin fit elsewhere, applied to this whole sequence
        if not ns.target_data:
            return _die("--window generalization requires --target-data")
        _, tgt_obs_path, _ = _bundle_paths(Path(ns.target_data))
        tgt = model.observations_from_dict(_load_or_die(tgt_obs_path, model.load_json))
        states = twin.resimulate(tgt)
        reports.append(evaluate_window(states, tgt, 0, tgt.n_frames, "generalization"))
    payload = {"v": 1, "twin": str(ns.twin), "windows": [r.to_dict() for r in reports]}
    if ns.out:
        model.save_json(payload, ns.out)
    for r in reports:
        print(f"{r.window}: frames [{r.frame_start}, {r.frame_stop}) "
              f"mean CD {r.mean_cd:.6f} m, track error {r.track_rmse:.6f} m")
    return 0


def cmd_plan(ns: argparse.Namespace) -> int:
    from .planner import PlanTask, plan_shooting

    twin = _load_or_die(Path(ns.twin), TwinArtifact.load)
    _, obs_path, _ = _bundle_paths(Path(ns.data))
    obs = model.observations_from_dict(_load_or_die(obs_path, model.load_json))
    ids = [int(x) for x in ns.node]
    goals = np.array([[float(v) for v in g.split(",")] for g in ns.goal])
    if len(ids) != len(goals):
        return _die("--node and --goal counts must match", 2)
    task = PlanTask(
        twin=twin,
        initial_state=SystemState.at_rest(twin.canonical_points),
        ctrl_start=obs.control.frame(0),
        target_ids=np.array(ids),
        target_positions=goals,
        horizon=ns.horizon,
        max_step=ns.max_step,
    )
    script, cost, curve = plan_shooting(
        task, n_samples=ns.samples, n_elites=ns.elites, n_iters=ns.iters,
        seed=ns.seed, workers=ns.workers,
    )
    model.save_json({
        "v": 1, "control": model.control_to_dict(script),
        "terminal_cost": cost, "curve": curve,
    }, ns.out)
    print(f"wrote {ns.out} (terminal cost {cost:.6g})")
    return 0


def cmd_serve(ns: argparse.Namespace) -> int:
    from .service import create_app, serve

    if ns.twin:
        twin = _load_or_die(Path(ns.twin), TwinArtifact.load)
        _, obs_path, _ = _bundle_paths(Path(ns.data))
        obs = model.observations_from_dict(_load_or_die(obs_path, model.load_json))
        ctrl0 = obs.control.frame(0)
        scen = twin.scenario(ControlScript.static(ctrl0, 2), name="serve")
        atts = twin.attachments(ctrl0)
    else:
        scen = model.scenario_from_dict(_load_or_die(Path(ns.scenario), model.load_json))
        scen = dataclasses.replace(
            scen, control=ControlScript.static(scen.control.frame(0), 2))
        atts = None
    skin = binding = None
    if ns.skin:
        from .skinning import bind_skin, make_skin_particles

        skin = make_skin_particles(scen.initial_state.positions, 3, 0.01, ns.seed)
        binding = bind_skin(skin, scen.initial_state.positions, k=4)
    static_dir = ns.static if ns.static and Path(ns.static).is_dir() else None
    app = create_app(scen, attachments=atts, tick_rate=ns.tick_rate,
                     skin=skin, skin_binding=binding, static_dir=static_dir)
    print(f"serving on http://{ns.host}:{ns.port} (ws at /ws)")
    serve(app, ns.port, ns.host)
    return 0


def cmd_bench(ns: argparse.Namespace) -> int:
    from . import bench

    args = ["--springs", str(ns.springs), "--substeps", str(ns.substeps),
            "--frames", str(ns.frames)]
    return bench.main(args)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="springtwin", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic observation bundle")
    p.add_argument("--template", required=True,
                   help="'<object>-<script>', e.g. rope-lift, cloth-fold, box-push")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.002)
    p.add_argument("--track-noise", type=float, default=0.005)
    p.add_argument("--track-fraction", type=float, default=0.2)
    p.add_argument("--views", type=int, choices=(1, 3), default=1)
    p.add_argument("--het", default="", help="'K_LOW,K_HIGH' heterogeneous stiffness halves")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("simulate", help="roll out a scenario or twin to JSON lines")
    p.add_argument("--scenario", help="scenario.json path")
    p.add_argument("--twin", help="fitted twin artifact (needs --data for controls)")
    p.add_argument("--data", help="bundle directory (for --twin)")
    p.add_argument("--frames", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("optimize", help="fit a twin from an observation bundle")
    p.add_argument("--data", required=True, help="directory from 'synth'")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stage", choices=("sparse", "dense", "full"), default="full")
    p.add_argument("--ablation", choices=ABLATIONS, default="full")
    p.add_argument("--train-ratio", type=float, default=0.7)
    p.add_argument("--generations", type=int, default=30)
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--substeps", type=int, default=50)
    p.add_argument("--workers", type=int, default=4)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("eval", help="CD / track-error report")
    p.add_argument("--twin", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--window", choices=("resim", "future", "generalization"),
                   default="resim")
    p.add_argument("--target-data", help="bundle of the unseen interaction")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plan", help="shooting planner over a fitted twin")
    p.add_argument("--twin", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--node", action="append", required=True, help="target node index")
    p.add_argument("--goal", action="append", required=True, help="x,y,z target position")
    p.add_argument("--horizon", type=int, default=30)
    p.add_argument("--max-step", type=float, default=0.01)
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--elites", type=int, default=8)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("serve", help="real-time interactive simulation service")
    p.add_argument("--scenario", help="serve a raw scenario")
    p.add_argument("--twin", help="serve a fitted twin (needs --data)")
    p.add_argument("--data", help="bundle directory for control start positions")
    p.add_argument("--port", type=int, default=8722)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--tick-rate", type=float, default=30.0)
    p.add_argument("--skin", action="store_true", help="attach skin particles")
    p.add_argument("--static", default="frontend/dist", help="browser client bundle dir")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("bench", help="kernel throughput, numba vs numpy")
    p.add_argument("--springs", type=int, default=1000)
    p.add_argument("--substeps", type=int, default=20)
    p.add_argument("--frames", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="[%(levelname)s] %(message)s")
    ns = build_parser().parse_args(argv)
    try:
        return ns.func(ns)
    except FileNotFoundError as err:
        return _die(f"missing file: {err}")
    except (ValueError, RuntimeError) as err:
        return _die(str(err))


if __name__ == "__main__":
    raise SystemExit(main())
