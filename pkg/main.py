#!/usr/bin/env python3
"""
PanoColor - Main Entry Point
Command-line interface: colorize, optimize, simulate and evaluate
"""

import argparse
import logging
import sys
from pathlib import Path

from dotenv import load_dotenv

from bench import (
    evaluate_poses,
    mean_pose_error,
    perturb_poses,
    run_ablation,
    scene_from_config,
    summarize_errors,
    write_ablation_csv,
    write_pose_errors_csv,
)
from config import PipelineConfig
from errors import EXIT_CONFIG, EXIT_IO, EXIT_PIPELINE, ConfigError, PanoColorError
from pipeline import ColorizationPipeline, load_dataset, package_versions, write_dataset
from pointcloud import load_trajectory
from utils import WarningCounter, setup_logging

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='panocolor',
        description="Panorama-based LiDAR point cloud colorization with co-visibility pose optimization")
    parser.add_argument('--version', action='version', version='\n'.join(package_versions()))

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', '-c', help="configuration file (section.key = value lines)")
    common.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help="override one configuration key, e.g. --set optimizer.max_outer=20")
    common.add_argument('--threads', type=int, help="worker threads (0 = all cores, 1 = deterministic)")
    common.add_argument('--output', '-o', help="output directory")
    common.add_argument('--verbose', '-v', action='count', default=0, help="-v for info, -vv for debug")
    common.add_argument('--log-file', help="also write the log to this file")

    commands = parser.add_subparsers(dest='command', required=True)

    colorize = commands.add_parser('colorize', parents=[common],
                                   help="optimize keyframe poses and write the colored cloud")
    colorize.add_argument('dataset', nargs='?', help="dataset directory (overrides paths.dataset)")

    optimize = commands.add_parser('optimize', parents=[common],
                                   help="optimize keyframe poses without writing colored clouds")
    optimize.add_argument('dataset', nargs='?', help="dataset directory (overrides paths.dataset)")

    simulate = commands.add_parser('simulate', parents=[common],
                                   help="write a synthetic textured-sphere dataset with perturbed poses")
    simulate.add_argument('directory', help="where to write the dataset")
    simulate.add_argument('--seed', type=int, help="random seed (overrides run.seed)")

    evaluate = commands.add_parser('evaluate', parents=[common],
                                   help="pose error of an estimate against ground truth, or the ablation")
    evaluate.add_argument('--estimate', help="optimized trajectory (overrides paths.estimate)")
    evaluate.add_argument('--ground-truth', help="ground-truth trajectory (overrides paths.ground_truth)")
    evaluate.add_argument('--ablation', action='store_true', help="run the co-visibility ablation")

    config_cmd = commands.add_parser('config', parents=[common],
                                     help="print the resolved configuration with descriptions")
    config_cmd.set_defaults(dataset=None)
    return parser


def load_config(args) -> PipelineConfig:
    overrides = list(args.overrides)
    if getattr(args, 'dataset', None):
        overrides.append(f"paths.dataset={args.dataset}")
    if args.output:
        overrides.append(f"paths.output={args.output}")
    if args.threads is not None:
        overrides.append(f"run.threads={args.threads}")
    if getattr(args, 'seed', None) is not None:
        overrides.append(f"run.seed={args.seed}")
    if getattr(args, 'estimate', None):
        overrides.append(f"paths.estimate={args.estimate}")
    if getattr(args, 'ground_truth', None):
        overrides.append(f"paths.ground_truth={args.ground_truth}")
    if getattr(args, 'ablation', False):
        overrides.append("bench.ablation=true")
    return PipelineConfig.load(args.config, overrides)


def cmd_colorize(config: PipelineConfig, colorize=True) -> int:
    dataset = load_dataset(config)
    pipeline = ColorizationPipeline(config)
    result = pipeline.run(dataset, config.paths.output, colorize=colorize)
    print(f"Keyframes: {len(result.keyframes)}  time offset: {result.time_offset:+.4f}s")
    print(f"Final loss: {result.report.trace(0)[-1]:.6g}  frozen frames: {len(result.report.frozen)}")
    for path in result.outputs:
        print(f"  wrote {path}")
    return 0


def cmd_optimize(config: PipelineConfig) -> int:
    return cmd_colorize(config, colorize=False)


def cmd_simulate(config: PipelineConfig, directory) -> int:
    bench = config.bench
    seed = config.run.seed
    scene = scene_from_config(config, seed=seed)
    perturbed = perturb_poses(scene.poses, bench.rot_deg, bench.trans_cm, seed=seed + 1)
    initial = mean_pose_error(perturbed, scene.poses)
    manifest = [f"# {line}" for line in package_versions()]
    manifest.append(f"# initial error {initial.rotation_deg:.4f} deg, {initial.translation_cm:.4f} cm")
    manifest += config.with_overrides(paths__dataset=str(directory)).to_lines()
    write_dataset(scene, directory, lio_poses=perturbed, manifest_lines=manifest)
    print(f"Wrote {len(scene.images)} panoramas and {len(scene.cloud)} points to {directory}")
    return 0


def cmd_evaluate(config: PipelineConfig) -> int:
    output = Path(config.paths.output)
    output.mkdir(parents=True, exist_ok=True)
    paths = config.resolve_paths()

    if paths.estimate:
        if not paths.ground_truth:
            raise ConfigError("paths.ground_truth is not set (set it or paths.dataset)")
        estimate = load_trajectory(paths.estimate)
        truth = load_trajectory(paths.ground_truth)
        references = [truth.interpolate(t).inverse() for t in estimate.timestamps]
        errors = evaluate_poses(estimate.extrinsics(), references, config.bench.align)
        write_pose_errors_csv(errors, output / 'pose_errors.csv', estimate.timestamps)
        for t, error in zip(estimate.timestamps, errors):
            print(f"  t={t:.6f}  {error.rotation_deg:.4f} deg  {error.translation_cm:.4f} cm")
        mean = summarize_errors(errors)
        print(f"Mean pose error: {mean.rotation_deg:.4f} deg, {mean.translation_cm:.4f} cm "
              f"over {len(errors)} frames")
    elif not config.bench.ablation:
        raise ConfigError("Nothing to evaluate: set paths.estimate or bench.ablation")

    if config.bench.ablation:
        rows = run_ablation(config.bench.sigmas, config, seed=config.run.seed,
                            threads=ColorizationPipeline(config).threads)
        write_ablation_csv(rows, output / 'ablation.csv')
        print(f"Wrote ablation over {len(rows)} noise levels to {output / 'ablation.csv'}")
    return 0


def main(argv=None) -> int:
    """Main entry point"""
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose, args.log_file)

    try:
        config = load_config(args)
        logger.info(f"Running {args.command}")
        with WarningCounter() as warnings:
            if args.command == 'colorize':
                code = cmd_colorize(config)
            elif args.command == 'optimize':
                code = cmd_optimize(config)
            elif args.command == 'simulate':
                code = cmd_simulate(config, args.directory)
            elif args.command == 'evaluate':
                code = cmd_evaluate(config)
            else:
                print('\n'.join(config.to_lines(with_help=True)))
                code = 0
        if warnings.count:
            print(f"{warnings.count} warning(s) logged", file=sys.stderr)
        return code
    except ConfigError as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (PanoColorError, OSError) as e:
        code = e.exit_code if isinstance(e, PanoColorError) else EXIT_IO
        print(f"Error: {e}", file=sys.stderr)
        return code
    except KeyboardInterrupt:
        print("Interrupted", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    exit(main())
