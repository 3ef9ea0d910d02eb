"""Command line entry point: ``caesar-sim run`` and ``caesar-sim compare``.

An experiment file is JSON mirroring :class:`~caesar_sim.sim.SimConfig`
field for field, plus ``out`` (output directory) and ``seeds`` (list of
master seeds). Each seed writes ``<out>/seed_<N>/metrics.csv``,
``participants.csv`` and ``summary.json``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Any, Optional

from .datagen import PartitionSpec, SynthSpec
from .learner import LrSchedule, ModelSpec
from .sim import LinkProfile, ProfileRanges, RoundMetrics, SimConfig, run_experiment

log = logging.getLogger("caesar_sim")

CSV_HEADER = ["round", "accuracy", "round_time_s", "cum_time_s", "round_traffic_bits", "cum_traffic_bits", "avg_wait_s"]
PARTICIPANT_HEADER = ["round", "device_id", "download_ratio", "upload_ratio", "batch_size", "round_time_s"]

_NESTED = {"model": ModelSpec, "data": SynthSpec, "partition": PartitionSpec, "lr": LrSchedule}
_TUPLE_FIELDS = {"hidden_dims", "cac_range", "per_sample_time", "bandwidth"}
_FILE_ONLY = {"out": "runs", "seeds": [0]}


class ConfigError(ValueError):
    pass


def _required(cls) -> set[str]:
    return {
        f.name
        for f in dataclasses.fields(cls)
        if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING
    }


def _check_keys(doc: dict, cls, prefix: str, optional: set[str] = frozenset(), extra: set[str] = frozenset()):
    if not isinstance(doc, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object")
    known = {f.name for f in dataclasses.fields(cls)} | set(extra)
    for key in doc:
        if key not in known:
            raise ConfigError(f"unknown key {prefix}{key!r}")
    for key in sorted(_required(cls) - optional):
        if key not in doc:
            raise ConfigError(f"missing required key {prefix}{key!r}")


def _build(cls, doc: dict, prefix: str, optional: set[str] = frozenset()):
    _check_keys(doc, cls, prefix, optional)
    kwargs = {k: tuple(v) if k in _TUPLE_FIELDS else v for k, v in doc.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {exc}") from exc


def _build_profiles(doc):
    if isinstance(doc, list):
        return tuple(_build(LinkProfile, row, f"profiles[{i}].") for i, row in enumerate(doc))
    return _build(ProfileRanges, doc, "profiles.")


def parse_config(doc: dict, seed: Optional[int] = None, strategy: Optional[str] = None) -> SimConfig:
    """Validate an experiment document and build a :class:`SimConfig` for one seed."""
    _check_keys(doc, SimConfig, "", optional={"seed"}, extra=set(_FILE_ONLY))
    doc = {k: v for k, v in doc.items() if k not in _FILE_ONLY}
    if strategy is not None:
        doc["strategy"] = strategy
    if seed is not None:
        doc["seed"] = seed
    run_seed = doc.get("seed", 0)
    kwargs: dict[str, Any] = dict(doc)
    for key, cls in _NESTED.items():
        if key not in doc:
            continue
        sub = dict(doc[key]) if isinstance(doc[key], dict) else doc[key]
        if key in ("data", "partition") and isinstance(sub, dict):
            sub.setdefault("seed", run_seed)
        if key == "partition" and isinstance(sub, dict):
            sub.setdefault("min_per_device", 2 * doc.get("b_max", 32))
        kwargs[key] = _build(cls, sub, f"{key}.")
    if "profiles" in doc:
        kwargs["profiles"] = _build_profiles(doc["profiles"])
    if "cac_range" in doc:
        kwargs["cac_range"] = tuple(doc["cac_range"])
    try:
        return SimConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def config_to_dict(config: SimConfig) -> dict:
    def plain(v):
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        return v

    return plain(dataclasses.asdict(config))


def write_metrics_csv(history: list[RoundMetrics], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for m in history:
            writer.writerow(
                [
                    m.round,
                    repr(float(m.accuracy)),
                    repr(float(m.round_time)),
                    repr(float(m.cum_time)),
                    m.round_traffic_bits,
                    m.cum_traffic_bits,
                    repr(float(m.avg_wait)),
                ]
            )


def write_participants_csv(history: list[RoundMetrics], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PARTICIPANT_HEADER)
        for m in history:
            for p in m.participants:
                writer.writerow(
                    [m.round, p.id, repr(float(p.download_ratio)), repr(float(p.upload_ratio)), p.batch_size, repr(float(p.round_time))]
                )


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [
            {k: (int(v) if k in ("round", "round_traffic_bits", "cum_traffic_bits") else float(v)) for k, v in row.items()}
            for row in reader
        ]


def summarize(config: SimConfig, history: list[RoundMetrics]) -> dict:
    last = history[-1]
    return {
        "strategy": config.strategy,
        "seed": config.seed,
        "rounds": len(history),
        "final_accuracy": last.accuracy,
        "best_accuracy": max(m.accuracy for m in history),
        "cum_traffic_bits": last.cum_traffic_bits,
        "cum_download_bits": last.cum_download_bits,
        "cum_upload_bits": last.cum_upload_bits,
        "cum_time_s": last.cum_time,
        "mean_wait_s": sum(m.avg_wait for m in history) / len(history),
        "config": config_to_dict(config),
    }


def run_one(config: SimConfig, run_dir: Path, threads: Optional[int] = None) -> dict:
    history = run_experiment(config, threads=threads)
    run_dir.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(history, run_dir / "metrics.csv")
    write_participants_csv(history, run_dir / "participants.csv")
    summary = summarize(config, history)
    with open(run_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def cmd_run(args) -> int:
    try:
        with open(args.config) as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict):
            raise ConfigError("experiment file must hold a JSON object")
        seeds = [args.seed] if args.seed is not None else doc.get("seeds", _FILE_ONLY["seeds"])
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
            raise ConfigError("'seeds' must be a non-empty list of integers")
        configs = [parse_config(doc, seed=s, strategy=args.strategy) for s in seeds]
        out = Path(args.out if args.out is not None else doc.get("out", _FILE_ONLY["out"]))
    except (OSError, json.JSONDecodeError, ConfigError) as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return 1
    try:
        for config in configs:
            summary = run_one(config, out / f"seed_{config.seed}")
            if not args.quiet:
                print(
                    f"{config.strategy} seed={config.seed} rounds={summary['rounds']} "
                    f"acc={summary['final_accuracy']:.4f} traffic={summary['cum_traffic_bits']} bits "
                    f"time={summary['cum_time_s']:.2f} s"
                )
    except Exception as exc:  # noqa: BLE001 - any failure mid-run maps to exit 2
        log.exception("run failed")
        print(f"error: run failed: {exc}", file=sys.stderr)
        return 2
    return 0


def reach_target(rows: list[dict], target: float) -> dict:
    for i, row in enumerate(rows):
        if row["accuracy"] >= target:
            waits = [r["avg_wait_s"] for r in rows[: i + 1]]
            return {
                "round": row["round"],
                "cum_traffic_bits": row["cum_traffic_bits"],
                "cum_time_s": row["cum_time_s"],
                "mean_wait_s": sum(waits) / len(waits),
            }
    return {
        "round": None,
        "cum_traffic_bits": None,
        "cum_time_s": None,
        "mean_wait_s": sum(r["avg_wait_s"] for r in rows) / len(rows) if rows else None,
    }


def cmd_compare(args) -> int:
    results = []
    for run in args.runs:
        run_dir = Path(run)
        metrics = run_dir / "metrics.csv"
        if not metrics.is_file():
            print(f"error: {run_dir} has no metrics.csv", file=sys.stderr)
            return 1
        try:
            rows = read_metrics_csv(metrics)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        strategy = seed = None
        if (run_dir / "summary.json").is_file():
            with open(run_dir / "summary.json") as fh:
                summary = json.load(fh)
            strategy, seed = summary.get("strategy"), summary.get("seed")
        results.append({"run": str(run_dir), "strategy": strategy, "seed": seed, **reach_target(rows, args.target_acc)})

    header = f"{'run':<32} {'strategy':<8} {'round':>9} {'traffic_bits':>14} {'traffic_MB':>11} {'time_s':>10} {'wait_s':>8}"
    print(f"target accuracy {args.target_acc}")
    print(header)
    for r in results:
        if r["round"] is None:
            cells = f"{'unreached':>9} {'-':>14} {'-':>11} {'-':>10}"
        else:
            cells = (
                f"{r['round']:>9} {r['cum_traffic_bits']:>14} {r['cum_traffic_bits'] / 8e6:>11.3f} "
                f"{r['cum_time_s']:>10.2f}"
            )
        wait = "-" if r["mean_wait_s"] is None else f"{r['mean_wait_s']:.3f}"
        print(f"{r['run'][-32:]:<32} {str(r['strategy']):<8} {cells} {wait:>8}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"target_acc": args.target_acc, "runs": results}, fh, indent=2)
            fh.write("\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="caesar-sim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment file")
    run.add_argument("--config", required=True, help="experiment JSON file")
    run.add_argument("--strategy", choices=["caesar", "fedavg", "fic", "cac"], help="override the strategy")
    run.add_argument("--seed", type=int, help="run this single seed instead of the file's seed list")
    run.add_argument("--out", help="output directory (overrides the file's 'out')")
    run.add_argument("--quiet", action="store_true")
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="time/traffic to a target accuracy across runs")
    cmp_.add_argument("--runs", nargs="+", required=True, help="run directories holding metrics.csv")
    cmp_.add_argument("--target-acc", type=float, required=True)
    cmp_.add_argument("--json", help="also write the comparison as JSON here")
    cmp_.set_defaults(func=cmd_compare)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if getattr(args, "quiet", False) else logging.INFO)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
