"""Command-line front-end: run a scenario, compare architectures, train a model."""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

from .detector import DegenerateFeature, DetectorModel, EmptyDump, train_zscore
from .flowpipe import FLOW_DUMP_HEADER, FeatureVector
from .scenario import ScenarioParseError, load_scenario
from .simulation import RunResult, run_scenario

OUT_ENV = "MECGUARD_OUT"
DEFAULT_OUT = "runs"

EXIT_OK = 0
EXIT_SCENARIO = 2
EXIT_TRAIN = 3


def bundled_scenarios_dir() -> Path:
    return Path(__file__).parent / "scenarios"


def resolve_scenario(name: str) -> Path:
    """Accept a path, or the bare name of a bundled scenario."""
    path = Path(name)
    if path.exists():
        return path
    bundled = bundled_scenarios_dir() / (name if name.endswith(".scenario") else f"{name}.scenario")
    return bundled if bundled.exists() else path


def out_root(flag: str | None) -> Path:
    if flag:
        return Path(flag)
    return Path(os.environ.get(OUT_ENV, DEFAULT_OUT))


def write_run(result: RunResult, directory: Path, dump_flows: bool = False,
              dump_features: bool = False) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "events.log").write_text(result.log.text())
    (directory / "metrics.json").write_text(json.dumps(result.metrics, indent=2) + "\n")
    if dump_flows:
        lines = [FLOW_DUMP_HEADER] + [r.dump_line() for r in result.sim.flows.sealed]
        (directory / "flows.txt").write_text("\n".join(lines) + "\n")
    if dump_features:
        with open(directory / "features.jsonl", "w") as fh:
            for fv in result.features:
                fh.write(json.dumps(fv.to_dict(), sort_keys=True) + "\n")
    return directory


def read_features(path: str | Path) -> list[FeatureVector]:
    vectors = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                vectors.append(FeatureVector.from_dict(json.loads(line)))
    return vectors


def comparison(proposed: RunResult, baseline: RunResult) -> dict:
    def arm(r: RunResult) -> dict:
        m = r.metrics
        return {
            "legit_service_availability": m["legit_service_availability"],
            "vm1_crash_count": m["vm1_crash_count"],
            "outages_s": {vm: s["outages_s"] for vm, s in m["vms"].items() if s["outages_s"]},
            "protocol_complete": m["protocol_complete"],
            "digest": r.digest,
        }
    return {"scenario": proposed.scenario, "seed": proposed.seed,
            "proposed": arm(proposed), "baseline": arm(baseline)}


def _summary_line(result: RunResult) -> str:
    m = result.metrics
    avail = m["legit_service_availability"]
    avail_s = "n/a" if avail is None else f"{avail:.4f}"
    return (f"{result.scenario} seed={result.seed} baseline={int(result.baseline)} "
            f"availability={avail_s} vm1_crashes={m['vm1_crash_count']} "
            f"runs_complete={m['protocol_complete']} runs_failed={m['protocol_failed']}")


def cmd_run(args: argparse.Namespace) -> int:
    scenario = load_scenario(resolve_scenario(args.scenario))
    model = DetectorModel.load(args.model) if args.model else None
    result = run_scenario(scenario, seed=args.seed, baseline=args.baseline or None,
                          model=model, keep_features=args.dump_features)
    arm = "baseline" if result.baseline else "proposed"
    directory = out_root(args.out) / f"{scenario.name}-{result.seed}-{arm}"
    write_run(result, directory, args.dump_flows, args.dump_features)
    print(_summary_line(result))
    print(f"wrote {directory}")
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    scenario = load_scenario(resolve_scenario(args.scenario))
    model = DetectorModel.load(args.model) if args.model else None
    with ThreadPoolExecutor(max_workers=2) as pool:
        arms = [pool.submit(run_scenario, scenario, seed=args.seed, baseline=b, model=model)
                for b in (False, True)]
        proposed, baseline = (f.result() for f in arms)
    report = comparison(proposed, baseline)
    root = out_root(args.out)
    write_run(proposed, root / f"{scenario.name}-{proposed.seed}-proposed")
    write_run(baseline, root / f"{scenario.name}-{baseline.seed}-baseline")
    path = root / f"{scenario.name}-{proposed.seed}-compare.json"
    path.write_text(json.dumps(report, indent=2) + "\n")
    print(_summary_line(proposed))
    print(_summary_line(baseline))
    print(f"wrote {path}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    version = 1
    if args.previous:
        version = DetectorModel.load(args.previous).version + 1
    try:
        model = train_zscore(read_features(args.dump), version, args.z_threshold)
    except (EmptyDump, DegenerateFeature) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    model.save(args.output)
    print(f"wrote model version {model.version} to {args.output}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mecguard", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario")
    run.add_argument("scenario", help="scenario file or bundled scenario name")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--out", default=None, help=f"output root (default ${OUT_ENV} or ./runs)")
    run.add_argument("--dump-flows", action="store_true", help="also write flows.txt")
    run.add_argument("--dump-features", action="store_true", help="also write features.jsonl")
    run.add_argument("--baseline", action="store_true", help="DPI on the services VM")
    run.add_argument("--model", default=None, help="detector model file overriding the scenario")
    run.set_defaults(func=cmd_run)

    compare = sub.add_parser("compare", help="run proposed and baseline with the same seed")
    compare.add_argument("scenario")
    compare.add_argument("--seed", type=int, default=None)
    compare.add_argument("--out", default=None)
    compare.add_argument("--model", default=None)
    compare.set_defaults(func=cmd_compare)

    train = sub.add_parser("train", help="fit a z-score model from a clean feature dump")
    train.add_argument("dump", help="features.jsonl written by run --dump-features")
    train.add_argument("-o", "--output", required=True)
    train.add_argument("--previous", default=None, help="model being replaced")
    train.add_argument("--z-threshold", type=float, default=3.0)
    train.set_defaults(func=cmd_train)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ScenarioParseError as exc:
        print(f"error: scenario: {exc}", file=sys.stderr)
        return EXIT_SCENARIO


if __name__ == "__main__":
    sys.exit(main())
