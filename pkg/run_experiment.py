"""
StoX-Net experiment runner
Usage:
    python3 run_experiment.py train --config configs/mnist_stox_cnn.json
    python3 run_experiment.py eval --config configs/mnist_stox_cnn.json --sweep n_samples=1,4,8
    python3 run_experiment.py sensitivity --config configs/mnist_stox_cnn.json
    python3 run_experiment.py hwreport --config configs/resnet20_hw.json --model resnet20
"""

import argparse
import dataclasses
import itertools
import json
import logging
import re
import sys
from pathlib import Path

from stoxnet import settings
from stoxnet.crossbar import Diagnostics, partial_sum_histogram, write_histogram_csv
from stoxnet.datasets import load_dataset
from stoxnet.errors import ConfigError, StoxError
from stoxnet.experiment import ExperimentConfig, load_config, parse_value
from stoxnet.hwmodel import (
    CostDatabase,
    compare_variants,
    improvement,
    network_cost,
    select_variants,
    standard_variants,
    write_report_csv,
)
from stoxnet.models import SHAPE_TABLES, build_graph, layer_shapes
from stoxnet.reports import write_csv, write_manifest
from stoxnet.sensitivity import (
    SamplingSchedule,
    build_schedule,
    layer_conversion_counts,
    layer_scores,
    sensitivity_scan,
    write_sensitivity_csv,
)
from stoxnet.training import evaluate, load_checkpoint, override_specs, train

logger = logging.getLogger("run_experiment")

# ─── CONFIG ───────────────────────────────────────
SWEEP_KEYS = ("n_samples", "alpha", "mode")
DEFAULT_VARIANTS = ("HPFA", "SFA", "StoX-1", "StoX-4", "StoX-8", "StoX-1-HPF")


def output_dir(args, config: ExperimentConfig) -> Path:
    if args.out:
        out = Path(args.out)
    elif config.output_dir:
        out = Path(config.output_dir)
    else:
        stem = Path(args.config).stem if args.config else "default"
        out = Path(settings.OUTPUT_DIR) / stem
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_data(config: ExperimentConfig):
    return load_dataset(
        config.train.dataset, config.data_dir, config.train.train_limit, config.train.test_limit
    )


def cmd_train(args, config: ExperimentConfig) -> int:
    out = output_dir(args, config)
    data = load_data(config)
    graph = build_graph(
        config.model.architecture, config.model.input_shape or data.input_shape,
        config.quant, config.layer_overrides, seed=config.seed,
    )
    result = train(graph, config.train, data, out)
    write_manifest(out, "train", config, ["metrics.csv", "checkpoint.npz"],
                   {"optimizer": config.train.optimizer, "lr_schedule": config.train.lr_schedule})
    print(f"Final test accuracy: {result.final_test_accuracy:.4f}")
    print(f"Metrics: {out / 'metrics.csv'}")
    print(f"Checkpoint: {result.checkpoint}")
    return 0


def parse_sweep(items) -> list[dict]:
    """['n_samples=1,4,8', 'mode=stochastic,expectation'] -> cartesian product of overrides."""
    axes = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"sweep must look like key=v1,v2, got {item!r}")
        key, values = item.split("=", 1)
        key = key.strip()
        if key not in SWEEP_KEYS:
            raise ConfigError(f"cannot sweep '{key}', choose from {SWEEP_KEYS}")
        axes[key] = [parse_value(v.strip()) for v in values.split(",") if v.strip()]
    if not axes:
        return [{}]
    keys = list(axes)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(axes[k] for k in keys))]


def cmd_eval(args, config: ExperimentConfig) -> int:
    out = output_dir(args, config)
    checkpoint = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.npz"
    graph, _ = load_checkpoint(checkpoint, architecture=config.model.architecture)
    data = load_data(config)
    images = data.test_x.astype(config.train.dtype, copy=False)
    original = {layer.name: layer.spec for layer in graph.stox_layers()}
    diagnostics = Diagnostics() if args.diagnostics else None

    rows = []
    for combo in parse_sweep(args.sweep):
        for layer in graph.stox_layers():
            layer.set_spec(original[layer.name])
        if combo:
            override_specs(graph, **combo)
        loss, acc = evaluate(graph, images, data.test_y, config.train.eval_batch_size, seed=config.seed,
                             diagnostics=diagnostics)
        row = {k: combo.get(k, "checkpoint") for k in SWEEP_KEYS}
        row.update(loss=float(loss), accuracy=float(acc))
        rows.append(row)
        print(f"{combo or 'checkpoint settings'}: accuracy {acc:.4f}")

    outputs = ["eval.csv"]
    write_csv(out / "eval.csv", [*SWEEP_KEYS, "loss", "accuracy"], rows)
    extra = {"checkpoint": str(checkpoint)}
    if diagnostics is not None:
        write_histogram_csv(out / "partial_sums.csv", partial_sum_histogram(diagnostics))
        outputs.append("partial_sums.csv")
        hist = diagnostics.combined()
        extra["partial_sums"] = {"mean": hist.mean(), "std": hist.std(), "kurtosis": hist.kurtosis(),
                                 "activity": hist.activity}
        print(f"Partial sums: std {hist.std():.4f}  kurtosis {hist.kurtosis():.3f}  activity {hist.activity:.3f}")
    write_manifest(out, "eval", config, outputs, extra)
    print(f"Results: {out / 'eval.csv'}")
    return 0


def cmd_sensitivity(args, config: ExperimentConfig) -> int:
    out = output_dir(args, config)
    checkpoint = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.npz"
    graph, _ = load_checkpoint(checkpoint, architecture=config.model.architecture)
    data = load_data(config)
    sens = config.sensitivity
    magnitudes = args.magnitudes if args.magnitudes is not None else sens.magnitudes
    budget = args.budget if args.budget is not None else sens.budget
    images = data.test_x[: sens.eval_size].astype(config.train.dtype, copy=False)
    labels = data.test_y[: sens.eval_size]

    results = sensitivity_scan(graph, magnitudes, images, labels, trials=sens.trials, seed=config.seed,
                               batch_size=config.train.eval_batch_size)
    write_sensitivity_csv(out / "sensitivity.csv", results)
    scores = layer_scores(results)
    schedule = build_schedule(scores, layer_conversion_counts(graph), budget)
    schedule.save(out / "schedule.json")
    write_manifest(out, "sensitivity", config, ["sensitivity.csv", "schedule.json"],
                   {"checkpoint": str(checkpoint), "budget": budget})

    print("Layer ranking (mean accuracy drop):")
    for name, score in sorted(scores.items(), key=lambda kv: -kv[1]):
        print(f"  {name:<10} {score:.4f}  samples {schedule.samples[name]}")
    print(f"Schedule: {out / 'schedule.json'} ({schedule.relative_conversions:.3f}x conversions)")
    return 0


def measured_activity(manifest_path) -> float:
    """Input bit activity recorded by `eval --diagnostics`."""
    try:
        manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
        activity = float(manifest["partial_sums"]["activity"])
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot read input activity from {manifest_path}: {e}") from None
    except (KeyError, TypeError):
        raise ConfigError(f"{manifest_path} has no partial-sum statistics; rerun eval with --diagnostics") from None
    logger.info("input activity %.4f from %s", activity, manifest_path)
    return activity


def cmd_hwreport(args, config: ExperimentConfig) -> int:
    out = output_dir(args, config)
    if args.model == "config":
        graph = build_graph(config.model.architecture, config.input_shape, config.quant,
                            config.layer_overrides, seed=config.seed)
        shapes = layer_shapes(graph)
        spec = {layer.name: layer.spec for layer in graph.stox_layers()}
    else:
        shapes = SHAPE_TABLES[args.model]()
        spec = config.quant

    schedule = SamplingSchedule.load(args.schedule).samples if args.schedule else None
    names = [v.strip() for v in args.variants.split(",")] if args.variants else list(DEFAULT_VARIANTS)
    if schedule is not None and "Mix" not in names:
        names.append("Mix")
    parsed = [m for m in (re.fullmatch(r"StoX-(\d+)(-HPF)?", n) for n in names) if m]
    samples = sorted({int(m[1]) for m in parsed if not m[2]})
    hpf_samples = sorted({int(m[1]) for m in parsed if m[2]})
    arch = config.arch
    if args.activity_from:
        arch = dataclasses.replace(arch, input_activity=measured_activity(args.activity_from))
    variants = select_variants(standard_variants(shapes, arch, samples, schedule, hpf_samples=hpf_samples), names)

    costs = CostDatabase.load(args.database) if args.database else CostDatabase.default()
    results, rows = compare_variants(shapes, spec, variants, costs)
    write_report_csv(out / "hwreport.csv", rows)
    write_manifest(out, "hwreport", config, ["hwreport.csv"],
                   {"model": args.model, "variants": names, "input_activity": arch.input_activity})

    reference = network_cost(shapes, spec, standard_variants(shapes, arch, ())[0], costs)
    for net in results:
        gains = improvement(reference, net)
        print(f"{net.variant:<10} vs HPFA: energy {gains['energy_pj']:.1f}x  latency {gains['latency_ns']:.1f}x  "
              f"area {gains['area_um2']:.1f}x  EDP {gains['edp']:.1f}x")
    print(f"Report: {out / 'hwreport.csv'}")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sensitivity": cmd_sensitivity, "hwreport": cmd_hwreport}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="StoX-Net crossbar simulator and training runner")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment JSON file")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, e.g. train.epochs=3 (repeatable)")
    common.add_argument("--log-level", default=None, help="logging level (default from STOX_LOG_LEVEL)")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a model and write metrics + checkpoint")

    p_eval = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint, optionally over a sweep")
    p_eval.add_argument("--checkpoint", help="checkpoint path (default <out>/checkpoint.npz)")
    p_eval.add_argument("--sweep", action="append", metavar="KEY=V1,V2",
                        help=f"override grid over {', '.join(SWEEP_KEYS)} (repeatable)")
    p_eval.add_argument("--diagnostics", action="store_true", help="also export the partial-sum histogram")

    p_sens = sub.add_parser("sensitivity", parents=[common], help="layer sensitivity scan and sampling schedule")
    p_sens.add_argument("--checkpoint", help="checkpoint path (default <out>/checkpoint.npz)")
    p_sens.add_argument("--magnitudes", type=float, nargs="+", help="relative perturbation magnitudes")
    p_sens.add_argument("--budget", type=float, help="relative conversion budget for the schedule")

    p_hw = sub.add_parser("hwreport", parents=[common], help="energy / latency / area comparison table")
    p_hw.add_argument("--model", choices=[*SHAPE_TABLES, "config"], default="resnet20")
    p_hw.add_argument("--schedule", help="sampling schedule JSON for the Mix variant")
    p_hw.add_argument("--variants", help=f"comma-separated variants (default {','.join(DEFAULT_VARIANTS)})")
    p_hw.add_argument("--database", help="component cost database JSON")
    p_hw.add_argument("--activity-from", metavar="MANIFEST",
                      help="eval manifest.json written with --diagnostics; its measured input "
                           "activity replaces arch.input_activity")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    settings.configure_logging(args.log_level)
    try:
        config = load_config(args.config, args.override, args.seed)
        return COMMANDS[args.command](args, config)
    except StoxError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
