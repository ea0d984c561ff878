"""Command-line entry point: ``mfcl run | inspect | partition-stats``.

Output layout of ``run`` (under the resolved output directory)::

    run_spec.json          resolved config, data source, seeds
    data_manifest.json     blob manifest or IDX paths
    seed_<s>/report.json   per-seed report (see mfcl.metrics)
    seed_<s>/accuracy.csv
    seed_<s>/timing.json   wallclock per phase (not part of the report)
    seed_<s>/rounds.jsonl  one line per round
    seed_<s>/model.npz     final classifier checkpoint
    seed_<s>/generator.npz final generator checkpoint (mfcl only)
    summary.json           mean and std of the metrics across seeds
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from .config import ConfigError, RunSpec, parse_config
from .federation import build_stream, run_experiment
from .metrics import export_report
from .models import CheckpointError, read_checkpoint, load_checkpoint, save_checkpoint

log = logging.getLogger("mfcl")


class PhaseError(RuntimeError):
    def __init__(self, phase, exc):
        super().__init__(f"{phase}: {exc}")
        self.phase = phase


def _phase(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as exc:  # noqa: BLE001 - reported with the phase name
        raise PhaseError(name, exc) from exc


def load_data(spec: RunSpec):
    src = spec.data
    if src.source == "blobs":
        return data_mod.blobs_from_spec(src.blobs)
    p = src.idx_paths
    return (data_mod.load_idx(p["train_images"], p["train_labels"], "train"),
            data_mod.load_idx(p["test_images"], p["test_labels"], "test"))


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def summarize(reports) -> dict:
    accs = [r.average_accuracy for r in reports]
    out = {"seeds": [r.seed for r in reports],
           "average_accuracy": {"mean": float(np.mean(accs)), "std": float(np.std(accs)),
                                "values": accs}}
    forg = [r.average_forgetting for r in reports]
    if all(f is not None for f in forg):
        out["average_forgetting"] = {"mean": float(np.mean(forg)), "std": float(np.std(forg)),
                                     "values": forg}
    return out


def run(spec: RunSpec) -> dict:
    """Execute every seed of ``spec`` and write the output directory.
    Returns the summary dict."""
    out = spec.out_dir
    _phase("output", out.mkdir, parents=True, exist_ok=True)
    _phase("output", _write_json, out / "run_spec.json", spec.to_dict())
    _phase("output", _write_json, out / "data_manifest.json", spec.data.to_dict())
    train, test = _phase("data loading", load_data, spec)
    reports = []
    for seed in spec.seeds:
        seed_dir = out / f"seed_{seed}"
        _phase("output", seed_dir.mkdir, exist_ok=True)
        with open(seed_dir / "rounds.jsonl", "w") as fh:
            def round_log(entry, fh=fh):
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
            log.info("seed %d: %s", seed, spec.config.baseline)
            report, state = _phase(f"experiment (seed {seed})", run_experiment, spec.config,
                                   train, test, seed, round_log, True)
        _phase("report export", export_report, report, seed_dir)
        _phase("checkpoint export", save_checkpoint, state.model, seed_dir / "model.npz")
        if state.frozen_generator is not None:
            _phase("checkpoint export", save_checkpoint, state.frozen_generator,
                   seed_dir / "generator.npz")
        reports.append(report)
    summary = summarize(reports)
    _phase("output", _write_json, out / "summary.json", summary)
    return summary


def inspect_checkpoint(path) -> str:
    meta, arrays = read_checkpoint(path)
    model = load_checkpoint(path)
    lines = [f"checkpoint: {path}", f"format version: {meta['format_version']}",
             f"kind: {meta['kind']}", f"arch: {json.dumps(meta['arch'], sort_keys=True)}"]
    if meta["kind"] == "classifier":
        lines.append(f"q: {meta['q']}")
        lines.append("class ranges: " + ", ".join(f"[{a}, {b})" for a, b in meta["class_ranges"]))
        nets = [("features", model.features_net), ("head", model.head)]
    else:
        nets = [("generator", model.net)]
    lines.append("layers:")
    for prefix, net in nets:
        for i, layer in enumerate(net.layers):
            n = sum(p.size for p in layer.params.values())
            lines.append(f"  {prefix}.{i:<3d} {layer!r:<60s} params={n}")
    lines.append(f"total parameters: {model.num_parameters()}")
    bn = [(k, v) for k, v in arrays.items() if k.endswith("running_mean") or k.endswith("running_var")]
    if bn:
        lines.append("batchnorm statistics:")
        for k, v in sorted(bn):
            lines.append(f"  {k:<40s} n={v.size:<5d} mean={v.mean():+.4f} "
                         f"min={v.min():+.4f} max={v.max():+.4f}")
    return "\n".join(lines)


def partition_stats(spec: RunSpec) -> dict:
    """Per-task, per-client label histograms (task-local class order)."""
    train, test = load_data(spec)
    out = {}
    seed = spec.seeds[0]
    stream, partitions = build_stream(spec.config, train, test, seed)
    for task in stream:
        lo, hi = task.label_range
        rows = []
        for c, idx in enumerate(partitions[task.index]):
            counts = np.bincount(stream.train.labels[idx] - lo, minlength=hi - lo)
            rows.append([int(v) for v in counts])
        out[f"task_{task.index}"] = {"classes": [int(k) for k in task.classes],
                                     "label_range": [lo, hi], "clients": rows}
    return {"seed": seed, "tasks": out}


def _format_stats(stats: dict) -> str:
    lines = [f"partition seed {stats['seed']}"]
    for name, t in stats["tasks"].items():
        lo, hi = t["label_range"]
        lines.append(f"{name}: labels {lo}..{hi - 1}")
        lines.append("  client " + " ".join(f"{k:>5d}" for k in range(lo, hi)) + "   total")
        for c, row in enumerate(t["clients"]):
            lines.append(f"  {c:>6d} " + " ".join(f"{v:>5d}" for v in row) + f"   {sum(row):>5d}")
    return "\n".join(lines)


def _seed_list(text):
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed list must be comma-separated integers: {text!r}")
    if not seeds:
        raise argparse.ArgumentTypeError("seed list is empty")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfcl", description="Federated class-incremental learning with generative replay.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run experiments for every seed")
    p.add_argument("--config", type=Path)
    p.add_argument("--seed-list", type=_seed_list)
    p.add_argument("--baseline", choices=["mfcl", "fedavg", "oracle"])
    p.add_argument("--out", type=Path)
    p.add_argument("--clients", type=int, help="total number of clients N")
    p.add_argument("--per-round-eval", action="store_true", default=None)

    p = sub.add_parser("inspect", help="summarize a checkpoint file")
    p.add_argument("checkpoint", type=Path)

    p = sub.add_parser("partition-stats", help="per-client class histograms")
    p.add_argument("--config", type=Path)
    p.add_argument("--seed-list", type=_seed_list)
    p.add_argument("--clients", type=int)
    p.add_argument("--json", action="store_true", help="emit JSON instead of a table")
    return parser


def overrides_from_args(args) -> dict:
    ov = {}
    if getattr(args, "seed_list", None):
        ov["run.seeds"] = args.seed_list
    if getattr(args, "baseline", None):
        ov["federation.baseline"] = args.baseline
    if getattr(args, "out", None):
        ov["run.out"] = str(args.out)
    if getattr(args, "clients", None) is not None:
        ov["federation.num_clients"] = args.clients
    if getattr(args, "per_round_eval", None):
        ov["federation.per_round_eval"] = True
    return ov


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "inspect":
            print(inspect_checkpoint(args.checkpoint))
            return 0
        spec = parse_config(args.config, overrides_from_args(args))
        if args.command == "partition-stats":
            stats = partition_stats(spec)
            print(json.dumps(stats, indent=2) if args.json else _format_stats(stats))
            return 0
        summary = run(spec)
    except ConfigError as exc:
        print(f"mfcl: config error: {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"mfcl: checkpoint error: {exc}", file=sys.stderr)
        return 3
    except PhaseError as exc:
        print(f"mfcl: failed during {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"mfcl: error: {exc}", file=sys.stderr)
        return 1
    acc = summary["average_accuracy"]
    line = f"average accuracy {acc['mean']:.4f} +/- {acc['std']:.4f}"
    if "average_forgetting" in summary:
        f = summary["average_forgetting"]
        line += f", average forgetting {f['mean']:.4f} +/- {f['std']:.4f}"
    print(f"{line} ({len(summary['seeds'])} seeds) -> {spec.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
