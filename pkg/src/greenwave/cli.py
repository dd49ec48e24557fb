"""Command-line front end.

Subcommands:
    scenario   emit a scenario document (built-in generator or passthrough)
    train      train agents over seeds; writes curves, checkpoints, results
    eval       deterministic evaluation of checkpoints; optional trace CSV
    plotdata   per-route progress dataset and SVG from a trace CSV

Exit codes: 0 success, 1 runtime failure, 2 usage error. The environment
variable GREENWAVE_THREADS caps per-seed training parallelism.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import multiprocessing
import os
import sys
from pathlib import Path

import numpy as np

from . import agentppo, envorch, rewardmetrics
from .agentppo import PPOConfig, PROFILES
from .netmodel import (DemandLevel, ScenarioConfig, build_single_intersection,
                       load_scenario, scenario_document)
from .observe import Tier

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"
ADVICE_SENTINEL = -1.0

TRACE_HEADER = ["time_s", "vehicle_id", "route_id", "lane_id", "pos_m",
                "route_progress_norm", "speed_mps", "advice_norm", "tl_phase"]


class CliError(RuntimeError):
    pass


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


class TraceWriter:
    """Per-step trace emission hook; rows sorted by (time, vehicle id)."""

    def __init__(self, fh, scenario: ScenarioConfig):
        self.writer = csv.writer(fh)
        self.writer.writerow(TRACE_HEADER)
        net = scenario.network
        self.route_total = {rid: sum(net.lanes[lid].length for lid in r.lanes)
                            for rid, r in net.routes.items()}
        self.route_offsets = {}
        for rid, route in net.routes.items():
            offsets, acc = [], 0.0
            for lid in route.lanes:
                offsets.append(acc)
                acc += net.lanes[lid].length
            self.route_offsets[rid] = offsets

    def __call__(self, state) -> None:
        t = state.time
        lanes = state.scenario.network.lanes
        for vid in sorted(state.vehicles):
            vehicle = state.vehicles[vid]
            rid = vehicle.route.id
            lane_id = vehicle.lane_id()
            progress = (self.route_offsets[rid][vehicle.lane_index]
                        + vehicle.pos) / self.route_total[rid]
            if vehicle.advice is None:
                advice_norm = ADVICE_SENTINEL
            else:
                advice_norm = vehicle.advice / lanes[lane_id].speed_limit
            ctrl = state.lane_controller.get(lane_id)
            phase = ctrl.current_phase if ctrl is not None else -1
            self.writer.writerow([
                _fmt(t), vid, rid, lane_id, _fmt(vehicle.pos),
                _fmt(min(progress, 1.0)), _fmt(vehicle.speed),
                _fmt(advice_norm), phase,
            ])


def _load_scenario_from_args(args) -> tuple[ScenarioConfig, dict]:
    if getattr(args, "scenario", None):
        path = Path(args.scenario)
        if not path.exists():
            raise CliError(f"scenario file not found: {path}")
        text = path.read_text()
        config = load_scenario(text)
        source = {"path": str(path),
                  "sha256": hashlib.sha256(text.encode()).hexdigest()}
    else:
        config = build_single_intersection(DemandLevel(args.demand))
        source = {"builtin": args.builtin, "demand": args.demand}
    return config, source


def _add_scenario_args(parser, demand_required=False) -> None:
    parser.add_argument("--scenario", help="path to a scenario document")
    parser.add_argument("--builtin", default="single-intersection",
                        choices=["single-intersection"])
    parser.add_argument("--demand", default=None if demand_required else "high",
                        required=demand_required,
                        choices=[level.value for level in DemandLevel])


def _build_ppo_config(profile: str, episodes: int | None) -> PPOConfig:
    factory = PROFILES[profile]
    overrides = {} if episodes is None else {"episodes": episodes}
    return factory(**overrides)


# ---------------------------------------------------------------------------
# scenario

def cmd_scenario(args) -> int:
    config, _source = _load_scenario_from_args(args)
    document = scenario_document(config)
    if args.out:
        Path(args.out).write_text(document)
    else:
        sys.stdout.write(document)
    return 0


# ---------------------------------------------------------------------------
# train

def _train_one_seed(payload):
    scenario, tier, config, seed = payload
    return envorch._train_single(scenario, tier, config, seed,
                                 progress=_progress_line)


def _progress_line(seed, episode, row):
    if episode % 50 == 0:
        print(f"[seed {seed}] episode {episode}: "
              f"mean_delay={row['mean_delay']:.2f}s", file=sys.stderr)


def _worker_count(n_seeds: int) -> int:
    env_cap = os.environ.get("GREENWAVE_THREADS")
    cap = int(env_cap) if env_cap else (os.cpu_count() or 1)
    return max(1, min(n_seeds, cap))


def cmd_train(args) -> int:
    manifest = _resolve_manifest(args, command="train")
    out = Path(manifest["out"])
    out.mkdir(parents=True, exist_ok=True)
    scenario, _ = _scenario_from_manifest(manifest)
    tier = Tier(manifest["tier"])
    config = _build_ppo_config(manifest["profile"], manifest["episodes"])
    seeds = manifest["seeds"]
    manifest["config_hash"] = envorch.run_config_hash(scenario, tier, config)
    _write_manifest(out / MANIFEST_NAME, manifest)

    payloads = [(scenario, tier, config, seed) for seed in seeds]
    workers = _worker_count(len(seeds))
    if workers > 1:
        ctx = multiprocessing.get_context("spawn")
        with ctx.Pool(processes=workers) as pool:
            results = pool.map(_train_one_seed, payloads)
    else:
        results = [_train_one_seed(p) for p in payloads]

    for seed, result in zip(seeds, results):
        seed_dir = out / f"seed_{seed}"
        seed_dir.mkdir(exist_ok=True)
        _write_curve(seed_dir / "learning_curve.csv", result.curve)
        for agent_id, params in result.best_checkpoints.items():
            meta = {
                "agent_id": agent_id,
                "tier": tier.value,
                "config_hash": result.config_hash,
                "seed": seed,
                "best_episode": result.summary.best_episode_index,
            }
            agentppo.save_checkpoint(
                seed_dir / _checkpoint_name(agent_id), params, meta)

    _write_results_table(out / "results.csv", manifest, tier,
                         [r.summary for r in results])
    mean, std = rewardmetrics.aggregate([r.summary for r in results]) \
        if len(results) > 1 else (results[0].summary.best_episode_delay, 0.0)
    print(f"{tier.value}: best-episode delay {mean:.2f} +- {std:.2f} s "
          f"over {len(seeds)} seed(s); outputs in {out}")
    return 0


def _checkpoint_name(agent_id: str) -> str:
    return "checkpoint_" + agent_id.replace("/", "_") + ".npz"


def _write_curve(path: Path, curve: list[dict]) -> None:
    header = list(curve[0].keys())
    _write_csv(path, header, [[row[k] for k in header] for row in curve])


def _write_results_table(path: Path, manifest: dict, tier: Tier,
                         summaries: list[rewardmetrics.RunSummary]) -> None:
    def agg(runs):
        if len(runs) > 1:
            return rewardmetrics.aggregate(runs)
        return runs[0].best_episode_delay, 0.0

    completed_variant = [
        rewardmetrics.RunSummary(seed=s.seed,
                                 episode_delays=s.episode_delays_completed)
        for s in summaries
    ]
    mean, std = agg(summaries)
    mean_c, std_c = agg(completed_variant)
    scenario_name = manifest["scenario"].get("path") or \
        f"{manifest['scenario']['builtin']}:{manifest['scenario']['demand']}"
    header = ["scenario", "tier", "mean_best_delay", "std_best_delay",
              "mean_best_delay_completed", "std_best_delay_completed"]
    row = [scenario_name, tier.value, mean, std, mean_c, std_c]
    for summary in summaries:
        header.append(f"seed_{summary.seed}_best")
        row.append(summary.best_episode_delay)
    _write_csv(path, header, [row])


def _resolve_manifest(args, command: str) -> dict:
    if getattr(args, "manifest", None):
        manifest = json.loads(Path(args.manifest).read_text())
        if manifest.get("manifest_version") != MANIFEST_VERSION:
            raise CliError("unsupported manifest version")
        if manifest.get("command") != command:
            raise CliError(
                f"manifest is for {manifest.get('command')!r}, not {command!r}")
        if getattr(args, "out", None):
            manifest["out"] = args.out
        return manifest
    if not args.out:
        raise CliError("--out is required (or pass --manifest)")
    _, source = _load_scenario_from_args(args)
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "command": command,
        "scenario": source,
        "tier": args.tier,
        "out": args.out,
        "profile": args.profile,
        "episodes": args.episodes,
    }
    if command == "train":
        manifest["seeds"] = list(range(args.seeds))
    else:
        if not args.checkpoint:
            raise CliError("--checkpoint is required (or pass --manifest)")
        manifest["seeds"] = [args.seed]
        manifest["episodes_eval"] = args.episodes_eval
        manifest["checkpoint"] = args.checkpoint
        manifest["trace"] = bool(args.trace)
        manifest["episodes"] = None
    return manifest


def _scenario_from_manifest(manifest: dict) -> tuple[ScenarioConfig, dict]:
    source = manifest["scenario"]
    if "path" in source and source["path"]:
        text = Path(source["path"]).read_text()
        digest = hashlib.sha256(text.encode()).hexdigest()
        if digest != source.get("sha256"):
            raise CliError("scenario file changed since manifest was written")
        return load_scenario(text), source
    return build_single_intersection(DemandLevel(source["demand"])), source


def _write_manifest(path: Path, manifest: dict) -> None:
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# eval

def cmd_eval(args) -> int:
    manifest = _resolve_manifest(args, command="eval")
    out = Path(manifest["out"])
    out.mkdir(parents=True, exist_ok=True)
    scenario, _ = _scenario_from_manifest(manifest)
    tier = Tier(manifest["tier"])
    config = _build_ppo_config(manifest["profile"], manifest["episodes"])
    manifest["config_hash"] = envorch.run_config_hash(scenario, tier, config)
    _write_manifest(out / MANIFEST_NAME, manifest)

    ckpt_dir = Path(manifest["checkpoint"])
    if not ckpt_dir.exists():
        raise CliError(f"checkpoint directory not found: {ckpt_dir}")
    env = envorch.TrafficEnv(scenario, tier)
    checkpoints = {}
    for spec in env.agent_specs:
        path = ckpt_dir / _checkpoint_name(spec.id)
        if not path.exists():
            raise CliError(f"missing checkpoint: {path}")
        checkpoints[spec.id] = agentppo.load_checkpoint(path)

    trace_fh = None
    trace_hook = None
    if manifest.get("trace"):
        trace_fh = open(out / "trace.csv", "w", newline="")
        trace_hook = TraceWriter(trace_fh, scenario)
    try:
        results = envorch.evaluate(
            scenario, tier, checkpoints, config,
            episodes=manifest["episodes_eval"], seed=manifest["seeds"][0],
            trace_hook=trace_hook)
    except envorch.CheckpointMismatchError as exc:
        raise CliError(str(exc)) from exc
    finally:
        if trace_fh is not None:
            trace_fh.close()

    rows = [[i, r.mean_delay, r.mean_delay_completed,
             sum(1 for t in r.trips if not t.censored),
             sum(1 for t in r.trips if t.censored)]
            for i, r in enumerate(results)]
    _write_csv(out / "eval_results.csv",
               ["episode", "mean_delay", "mean_delay_completed",
                "completed_trips", "censored_trips"], rows)
    mean = sum(r.mean_delay for r in results) / len(results)
    print(f"eval {tier.value}: mean delay {mean:.2f} s over "
          f"{len(results)} episode(s); outputs in {out}")
    return 0


# ---------------------------------------------------------------------------
# plotdata

def cmd_plotdata(args) -> int:
    trace_path = Path(args.trace)
    if not trace_path.exists():
        raise CliError(f"trace file not found: {trace_path}")
    scenario, _ = _load_scenario_from_args(args)
    net = scenario.network
    if args.lane not in net.lanes:
        raise CliError(f"unknown lane id: {args.lane}")
    route = next((r for r in net.routes.values() if args.lane in r.lanes), None)
    if route is None:
        raise CliError(f"lane {args.lane} is not on any route")
    lane_end = 0.0
    for lid in route.lanes:
        lane_end += net.lanes[lid].length
        if lid == args.lane:
            break
    total = sum(net.lanes[lid].length for lid in route.lanes)
    stopline_progress = lane_end / total

    rows = []
    with open(trace_path, newline="") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            if rec["route_id"] != route.id:
                continue
            rows.append((int(rec["vehicle_id"]), float(rec["time_s"]),
                         float(rec["route_progress_norm"]),
                         float(rec["advice_norm"])))
    rows.sort(key=lambda item: (item[0], item[1]))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "route_progress.csv",
               ["vehicle_id", "time_s", "route_progress_norm", "advice_norm"],
               [list(r) for r in rows])
    t_max = max((r[1] for r in rows), default=scenario.episode_length)
    _write_progress_svg(out / "route_progress.svg", rows, stopline_progress,
                        t_max, route.id)
    print(f"plotdata: {len(rows)} samples for route {route.id}; "
          f"outputs in {out}")
    return 0


def _advice_color(advice_norm: float) -> str:
    if advice_norm < 0:
        return "#666666"
    # High advice (no slowdown) renders teal, strong slowdown renders red.
    frac = min(max((1.0 - advice_norm) / 0.8, 0.0), 1.0)
    lo = (42, 157, 143)
    hi = (231, 111, 81)
    rgb = tuple(round(a + (b - a) * frac) for a, b in zip(lo, hi))
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def _write_progress_svg(path: Path, rows, stopline_progress: float,
                        t_max: float, route_id: str) -> None:
    width, height, margin = 1000, 500, 45
    t_max = max(t_max, 1.0)

    def sx(t):
        return margin + (width - 2 * margin) * t / t_max

    def sy(p):
        return height - margin - (height - 2 * margin) * p

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<text x="{width // 2}" y="{height - 8}" text-anchor="middle" '
        f'font-size="14">time (s), route {route_id}</text>',
        f'<text x="14" y="{height // 2}" text-anchor="middle" font-size="14" '
        f'transform="rotate(-90 14 {height // 2})">route progress</text>',
        f'<line x1="{margin}" y1="{sy(stopline_progress):.1f}" '
        f'x2="{width - margin}" y2="{sy(stopline_progress):.1f}" '
        f'stroke="black" stroke-dasharray="6,4"/>',
    ]
    # One polyline per run of constant advice per vehicle.
    by_vehicle: dict[int, list] = {}
    for vid, t, progress, advice in rows:
        by_vehicle.setdefault(vid, []).append((t, progress, advice))
    for vid, points in by_vehicle.items():
        run: list[tuple[float, float]] = []
        run_color = None
        for t, progress, advice in points:
            color = _advice_color(advice)
            if run_color is None:
                run_color = color
            if color != run_color:
                run.append((t, progress))
                _flush_polyline(parts, run, run_color, sx, sy)
                run = [(t, progress)]
                run_color = color
            else:
                run.append((t, progress))
        _flush_polyline(parts, run, run_color, sx, sy)
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")


def _flush_polyline(parts, run, color, sx, sy) -> None:
    if len(run) < 2 or color is None:
        return
    coords = " ".join(f"{sx(t):.1f},{sy(p):.1f}" for t, p in run)
    parts.append(f'<polyline points="{coords}" fill="none" '
                 f'stroke="{color}" stroke-width="1.2"/>')


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="greenwave",
        description="Signalized-intersection simulator with joint RL control "
                    "of traffic lights and speed advice.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_scn = sub.add_parser("scenario", help="emit a scenario document")
    _add_scenario_args(p_scn)
    p_scn.add_argument("--out", help="output path (default: stdout)")
    p_scn.set_defaults(func=cmd_scenario)

    p_train = sub.add_parser("train", help="train agents")
    _add_scenario_args(p_train)
    p_train.add_argument("--tier", default=Tier.TLC.value,
                         choices=[t.value for t in Tier])
    p_train.add_argument("--seeds", type=int, default=5,
                         help="number of training seeds (0..N-1)")
    p_train.add_argument("--episodes", type=int, default=None,
                         help="override the profile's episode count")
    p_train.add_argument("--profile", default="desk", choices=sorted(PROFILES))
    p_train.add_argument("--out", help="output directory")
    p_train.add_argument("--manifest", help="re-run from a persisted manifest")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate checkpoints")
    _add_scenario_args(p_eval)
    p_eval.add_argument("--tier", default=Tier.TLC.value,
                        choices=[t.value for t in Tier])
    p_eval.add_argument("--checkpoint", help="directory holding checkpoints")
    p_eval.add_argument("--episodes-eval", type=int, default=1,
                        help="number of evaluation episodes")
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--profile", default="desk", choices=sorted(PROFILES))
    p_eval.add_argument("--trace", action="store_true",
                        help="write a per-step trace CSV")
    p_eval.add_argument("--out", help="output directory")
    p_eval.add_argument("--manifest", help="re-run from a persisted manifest")
    p_eval.set_defaults(func=cmd_eval)

    p_plot = sub.add_parser("plotdata", help="route-progress dataset and SVG")
    _add_scenario_args(p_plot)
    p_plot.add_argument("--trace", required=True, help="trace CSV from eval")
    p_plot.add_argument("--lane", required=True,
                        help="afferent lane selecting the route to plot")
    p_plot.add_argument("--out", required=True, help="output directory")
    p_plot.set_defaults(func=cmd_plotdata)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, envorch.TrainError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
