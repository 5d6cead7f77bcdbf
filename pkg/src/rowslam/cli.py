"""Command-line front end: simulate, run, evaluate, benchmark."""

from __future__ import annotations

import argparse
import datetime
import json
import logging
import sys
from pathlib import Path
from typing import Optional

from .errors import RowSlamError
from .evaluation import benchmark, evaluate_map, reports_to_csv, truth_from_log, write_reports_csv
from .mapping import SemanticMap
from .pipeline import RunConfig, run_pipeline
from .simulator import GroundTruth, SimulationSpec, read_log, simulate, write_log

log = logging.getLogger("rowslam")


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def _read_json(path, what: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{what} {p} is not valid JSON: {exc}") from exc


def load_config(path, seed: Optional[int] = None) -> RunConfig:
    cfg = RunConfig.from_dict(_read_json(path, "config file")) if path else RunConfig()
    return cfg.replace(seed=seed) if seed is not None else cfg


def default_scene_path(log_path) -> Path:
    p = Path(log_path)
    return p.with_name(p.stem + ".scene.json")


def cmd_simulate(spec_file, out_log, seed: int = 0, scene_out=None, timestamp: bool = True) -> int:
    spec = SimulationSpec.from_dict(_read_json(spec_file, "spec file")) if spec_file else SimulationSpec()
    truth, obs = simulate(spec, seed)
    header = dict(obs.header)
    if timestamp:
        header["generated_at"] = _now()
    write_log(obs.frames, out_log, header)
    scene_path = Path(scene_out) if scene_out else default_scene_path(out_log)
    truth.save(scene_path)
    print(f"wrote {len(obs)} frames and {truth.stalk_count} stalks to {out_log} (scene: {scene_path})")
    return 0


def cmd_run(log_path, config_file, out_map, seed: Optional[int] = None, timestamp: bool = True) -> int:
    cfg = load_config(config_file, seed)
    obs = read_log(log_path)
    result = run_pipeline(obs, cfg, method=cfg.plane_source)
    extra = {"config": cfg.to_dict(), "dropped_frames": len({f for f, _, _ in result.dropped})}
    if timestamp:
        extra["generated_at"] = _now()
    result.map.save(out_map, extra)
    print(f"wrote {len(result.map.landmarks)} landmarks from {len(obs)} frames to {out_map} "
          f"({extra['dropped_frames']} frames dropped)")
    return 0


def cmd_evaluate(map_path, scene_path, log_path, out_csv) -> int:
    smap = SemanticMap.load(map_path)
    truth = GroundTruth.load(scene_path)
    obs = read_log(log_path)
    log_seed = obs.header.get("seed")
    if log_seed is not None and log_seed != truth.seed:
        print(f"warning: scene seed {truth.seed} does not match log seed {log_seed}", file=sys.stderr)
    report = evaluate_map(smap, truth, obs)
    write_reports_csv([report], out_csv)
    print(f"epsilon1 = {report.epsilon1_cm:.4f} cm, epsilon2 = {report.epsilon2_px:.4f} px "
          f"({report.matched_landmarks} matched, {report.unmatched_truth} unmatched)")
    return 0


def cmd_benchmark(log_path, out_csv, scene_path=None, config_file=None, seed: Optional[int] = None) -> int:
    obs = read_log(log_path)
    truth = GroundTruth.load(scene_path) if scene_path else truth_from_log(obs)
    reports = benchmark(obs, truth=truth, base=load_config(config_file, seed))
    write_reports_csv(reports, out_csv)
    sys.stdout.write(reports_to_csv(reports))
    for r in reports:
        if r.failed:
            print(f"warning: method {r.method_name} failed: {r.error}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rowslam", description="Corn-row semantic mapping toolkit.")
    p.add_argument("--print-default-config", action="store_true",
                   help="print the default run configuration as JSON and exit")
    p.add_argument("-v", "--verbose", action="count", default=0, help="log per-frame failures")
    sub = p.add_subparsers(dest="command")

    s = sub.add_parser("simulate", help="generate a synthetic observation log and its scene truth")
    s.add_argument("spec_file", nargs="?", help="simulation spec JSON (defaults if omitted)")
    s.add_argument("--out", required=True, help="observation log (JSON Lines)")
    s.add_argument("--scene", help="scene truth JSON (default: <log stem>.scene.json)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--no-timestamp", action="store_true")
    s.add_argument("--print-default-spec", action="store_true", help="print the default spec and exit")

    r = sub.add_parser("run", help="build a semantic map from a log")
    r.add_argument("log")
    r.add_argument("--config", help="run configuration JSON")
    r.add_argument("--out", required=True, help="semantic map JSON")
    r.add_argument("--seed", type=int)
    r.add_argument("--no-timestamp", action="store_true")

    e = sub.add_parser("evaluate", help="score a map against scene truth")
    e.add_argument("map")
    e.add_argument("scene")
    e.add_argument("log")
    e.add_argument("--out", required=True, help="metric CSV")

    b = sub.add_parser("benchmark", help="run every method analog and write the comparison CSV")
    b.add_argument("log")
    b.add_argument("--scene", help="scene truth JSON (regenerated from the log header if omitted)")
    b.add_argument("--config", help="base run configuration JSON")
    b.add_argument("--seed", type=int)
    b.add_argument("--out", required=True, help="comparison CSV")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if args.print_default_config:
        print(json.dumps(RunConfig().to_dict(), indent=2))
        return 0
    if args.command is None:
        parser.print_help(sys.stderr)
        return 2
    try:
        if args.command == "simulate":
            if args.print_default_spec:
                print(json.dumps(SimulationSpec().to_dict(), indent=2))
                return 0
            return cmd_simulate(args.spec_file, args.out, args.seed, args.scene, not args.no_timestamp)
        if args.command == "run":
            return cmd_run(args.log, args.config, args.out, args.seed, not args.no_timestamp)
        if args.command == "evaluate":
            return cmd_evaluate(args.map, args.scene, args.log, args.out)
        return cmd_benchmark(args.log, args.out, args.scene, args.config, args.seed)
    except (RowSlamError, OSError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
