"""
Command-line entry points: run, compare, sweep and bench.

Exit codes: 0 on success, 2 for usage and configuration problems, 1 for
everything that fails while running.
"""
import argparse
import logging
import math
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd
from pydantic import ValidationError

from src.analysis import (cfi_trajectory, diff_summary, export_map_csv, export_map_pgm, norm_proportions,
                          overhead_bench, pair_diff_maps, within_layer_diff)
from src.artifacts import ArtifactWriter, latent_bytes
from src.config_manager import ConfigManager, config_hash, configure_logging, dump_config
from src.config_schema import SCHEMA_VERSION, Config, Strategy
from src.errors import EXIT_OK, UsageError, classify_error
from src.invariants import TraceValidator, default_rules
from src.metrics import MetricsManager
from src.pipeline import RunResult, RunSpec, run, run_many
from src.trace import FLOAT_FORMAT, dumps_trace, timings_frame, trace_hash

logger = logging.getLogger(__name__)

STRATEGY_NAMES = [s.value for s in Strategy]


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _name_list(text: str) -> List[str]:
    return [v.strip() for v in text.split(',') if v.strip()]


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so every failure goes through classify_error."""

    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', default=None, help='YAML config file (default: config/config.yaml)')
    common.add_argument('--profile', default=None, help='Merge config.<profile>.yaml over the main file')
    common.add_argument('--seed', type=int, default=None)
    common.add_argument('--tau', type=float, default=None, help='Enhance temperature')
    common.add_argument('--no-clip', action='store_true', help='Disable the CFI_enhanced floor at 1')
    common.add_argument('--strategy', choices=STRATEGY_NAMES, default=None)
    common.add_argument('--layers', type=_int_list, default=None, help='Enhanced layers, e.g. 0,2')
    common.add_argument('--layout', choices=['temporal', 'full_3d', 'hybrid'], default=None)
    common.add_argument('--steps', type=int, default=None)
    common.add_argument('--frames', type=int, default=None)
    common.add_argument('--out', default=None, help='Output directory')

    parser = _Parser(prog='enhance-a-video', description='Training-free temporal attention enhancement for a toy video DiT')
    sub = parser.add_subparsers(dest='command', parser_class=_Parser)
    sub.required = True

    sub.add_parser('run', parents=[common], help='Run one denoising trajectory and write its trace')

    compare = sub.add_parser('compare', parents=[common], help='Compare enhancement strategies on one seed')
    compare.add_argument('--strategies', type=_name_list, required=True,
                         help=f"Comma-separated, first is the reference ({', '.join(STRATEGY_NAMES)})")

    sweep = sub.add_parser('sweep', parents=[common], help='Sweep the enhance temperature on one seed')
    sweep.add_argument('--taus', type=_float_list, nargs='+', required=True,
                       help='Tau values, space- or comma-separated (-2 0 1 or -2,0,1)')

    bench = sub.add_parser('bench', parents=[common], help='Median runtime of baseline vs enhanced runs')
    bench.add_argument('--repetitions', type=int, default=None)
    return parser


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    """Dotted config keys for every flag the user actually set."""
    mapping = {
        'seed': 'run.seed',
        'steps': 'run.steps',
        'frames': 'run.frames',
        'layout': 'run.layout',
        'tau': 'enhance.tau',
        'strategy': 'enhance.strategy',
        'layers': 'enhance.layers',
        'out': 'output.out_dir',
    }
    overrides = {key: getattr(args, flag) for flag, key in mapping.items() if getattr(args, flag, None) is not None}
    if getattr(args, 'no_clip', False):
        overrides['enhance.clip_enabled'] = False
    return overrides


def load(args: argparse.Namespace, extra: Optional[Dict[str, Any]] = None) -> Config:
    overrides = overrides_from_args(args)
    overrides.update(extra or {})
    ConfigManager.reset()
    config = ConfigManager().load_config(args.config, profile=args.profile, overrides=overrides)
    configure_logging(config)
    config.ensure_directories()
    return config


def _metrics(config: Config) -> MetricsManager:
    metrics = MetricsManager()
    if config.metrics.enable_metrics:
        metrics.serve(config.metrics.port)
    return metrics


def _member(spec: RunSpec, **changes) -> RunSpec:
    try:
        return spec.with_enhance(**changes)
    except ValidationError as e:
        raise UsageError(f"invalid enhancement {changes}: {e.errors()[0]['msg']}")


def _write_trajectories(writer: ArtifactWriter, name: str, result: RunResult) -> pd.DataFrame:
    records = result.trace.records
    layers = sorted({r.layer for r in records})
    frames = []
    for layer in layers:
        frame = cfi_trajectory(records, layer)
        frame.insert(0, 'layer', layer)
        frames.append(frame)
    trajectory = pd.concat(frames, ignore_index=True)
    writer.write_text(name, trajectory.to_csv(index=False, float_format=FLOAT_FORMAT))
    return trajectory


def _write_attention_maps(writer: ArtifactWriter, records) -> int:
    """Mean F x F attention map per (step, layer) under maps/; records without a snapshot are skipped."""
    written = 0
    for record in records:
        if record.attention_snapshot is None:
            continue
        stem = f"maps/step{record.step:03d}_layer{record.layer:02d}"
        export_map_csv(record.attention_snapshot, writer.path(f"{stem}.csv"))
        export_map_pgm(record.attention_snapshot, writer.path(f"{stem}.pgm"))
        for suffix in ('.csv', '.pgm', '.json'):
            writer.register(f"{stem}{suffix}")
        written += 1
    return written


def cmd_run(args: argparse.Namespace) -> int:
    config = load(args)
    spec = RunSpec.from_config(config)
    result = run(spec, metrics=_metrics(config))
    records = result.trace.records
    TraceValidator(default_rules(spec.enhance.clip_enabled)).validate(records)

    writer = ArtifactWriter(config.output.out_dir)
    trace_text = dumps_trace(records)
    writer.write_text('trace.jsonl', trace_text)
    writer.write_text('timings.csv', timings_frame(records).to_csv(index=False, float_format=FLOAT_FORMAT))
    writer.write_bytes('latent.npy', latent_bytes(result.latent.data))
    dump_config(config, writer.path('config.yaml'))
    writer.register('config.yaml')

    proportions = norm_proportions(records)
    writer.write_text('norm_proportions.csv', proportions.frame.to_csv(index=False, float_format=FLOAT_FORMAT))
    maps = _write_attention_maps(writer, records)

    writer.write_manifest('run', spec.seed, SCHEMA_VERSION, config_hash(config), extra={
        'strategy': Strategy(spec.enhance.strategy).value,
        'tau': spec.enhance.tau,
        'clip_enabled': spec.enhance.clip_enabled,
        'trace_hash': trace_hash(records),
        'records': len(records),
        'norm_proportions_excluded': proportions.undefined,
        'attention_maps': maps,
    })
    print(f"✓ run: {len(records)} records in {result.duration:.3f}s -> {config.output.out_dir}")
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    strategies = args.strategies
    if len(strategies) < 2:
        raise UsageError(f"compare needs at least 2 strategies, got {strategies}")
    unknown = [s for s in strategies if s not in STRATEGY_NAMES]
    if unknown:
        raise UsageError(f"unknown strategies {unknown}; choose from {STRATEGY_NAMES}")

    config = load(args, {'trace.snapshots': True})
    spec = RunSpec.from_config(config)
    members = [_member(spec, strategy=Strategy(name)) for name in strategies]
    results = run_many(members, config.performance.max_parallel_runs, metrics=_metrics(config))

    writer = ArtifactWriter(config.output.out_dir)
    labels = [f"{i}_{name}" for i, name in enumerate(strategies)]
    base_label, base = labels[0], results[0]

    summaries = []
    for label, result in zip(labels, results):
        _write_trajectories(writer, f"trajectory_{label}.csv", result)
        within = [within_layer_diff(r) for r in result.trace.records]
        writer.write_text(f"within_layer_{label}.csv",
                          diff_summary(within, strategy=label).to_csv(index=False, float_format=FLOAT_FORMAT))
        if result is base:
            continue
        diffs = pair_diff_maps(base.trace.records, result.trace.records)
        for d in diffs:
            stem = f"diffs/{label}_vs_{base_label}/step{d.step:03d}_layer{d.layer:02d}"
            export_map_csv(d.values, writer.path(f"{stem}.csv"))
            export_map_pgm(d.values, writer.path(f"{stem}.pgm"))
        summaries.append(diff_summary(diffs, base=base_label, variant=label))

    summary = pd.concat(summaries, ignore_index=True)
    writer.write_text('summary.csv', summary.to_csv(index=False, float_format=FLOAT_FORMAT))
    writer.write_manifest('compare', spec.seed, SCHEMA_VERSION, config_hash(config), extra={
        'strategies': strategies,
        'trace_hashes': {label: trace_hash(r.trace.records) for label, r in zip(labels, results)},
    })
    print(f"✓ compare: {len(strategies)} strategies, {len(summary)} summary rows -> {config.output.out_dir}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    taus = [tau for group in args.taus for tau in group]
    if not taus:
        raise UsageError("sweep needs at least one tau")
    bad = [t for t in taus if not math.isfinite(t)]
    if bad:
        raise UsageError(f"tau values must be finite, got {bad}")

    config = load(args)
    spec = RunSpec.from_config(config)
    members = [_member(spec, tau=tau) for tau in taus]
    results = run_many(members, config.performance.max_parallel_runs, metrics=_metrics(config))

    writer = ArtifactWriter(config.output.out_dir)
    consolidated = []
    for index, (tau, result) in enumerate(zip(taus, results)):
        trajectory = _write_trajectories(writer, f"trajectory_{index:02d}_tau{tau:g}.csv", result)
        trajectory.insert(0, 'tau', tau)
        consolidated.append(trajectory)
    sweep = pd.concat(consolidated, ignore_index=True)
    writer.write_text('sweep.csv', sweep.to_csv(index=False, float_format=FLOAT_FORMAT))
    writer.write_manifest('sweep', spec.seed, SCHEMA_VERSION, config_hash(config), extra={
        'taus': taus,
        'strategy': Strategy(spec.enhance.strategy).value,
    })
    print(f"✓ sweep: {len(taus)} tau values -> {config.output.out_dir}")
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    config = load(args)
    repetitions = args.repetitions if args.repetitions is not None else config.performance.bench_repetitions
    if repetitions < 3:
        raise UsageError(f"bench needs at least 3 repetitions, got {repetitions}")
    spec = RunSpec.from_config(config)
    enhanced = Strategy(spec.enhance.strategy)
    if enhanced == Strategy.BASELINE:
        enhanced = Strategy.ENHANCE_BLOCK

    report = overhead_bench(spec, repetitions=repetitions, baseline=Strategy.BASELINE, enhanced=enhanced)
    writer = ArtifactWriter(config.output.out_dir)
    table = report.format_table()
    writer.write_text('bench.txt', table + "\n")
    frame = report.to_frame()
    frame['overhead_fraction'] = report.overhead_fraction
    writer.write_text('bench.csv', frame.to_csv(index=False, float_format=FLOAT_FORMAT))
    writer.write_manifest('bench', spec.seed, SCHEMA_VERSION, config_hash(config), extra={
        'repetitions': repetitions,
    })
    print(table)
    return EXIT_OK


COMMANDS = {
    'run': cmd_run,
    'compare': cmd_compare,
    'sweep': cmd_sweep,
    'bench': cmd_bench,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except Exception as e:
        diagnosis = classify_error(e)
        logger.debug("command failed", exc_info=True)
        print(f"✗ {diagnosis.category.value} error: {diagnosis.message}", file=sys.stderr)
        for detail in diagnosis.details:
            print(f"  - {detail}", file=sys.stderr)
        return diagnosis.exit_code
