#!/usr/bin/env python3
"""
Command-line entry point for the feedback-loop pose estimation pipeline.

Every subcommand accepts --seed and --out and exits with 0 only when all of
its stages succeed.
"""
import argparse
import logging
import os
import sys

from dotenv import load_dotenv
import numpy as np

from src.modules.depth_scene import SceneConfig, default_hand_geometry, load_dataset, make_dataset, object_model
from src.modules.experiment import (
    dump_images, evaluate_hand_loop, evaluate_joint_loop, load_prior, run_baseline,
    run_experiment, save_prior, write_baseline_csv,
)
from src.modules.feedback import (
    HandBundle, JointBundle, run_hand_loop, run_joint_loop, train_hand_bundle, train_joint_bundle,
)
from src.modules.networks import (
    HAND_CUBE, OBJECT_CUBE, SCENE_CUBE, TrainConfig, save_role, train_hand_updater, train_localizer,
    train_predictor_combined, train_predictor_hand, train_predictor_object, train_synthesizer, load_role,
)
from src.modules.metrics import MetricReport
from src.modules.pose_model import center_on_reference, fit_prior
from src.modules.utils import FeedbackPoseError, read_json, resolve_seed, setup_logging, write_json

# Load environment variables from .env file
load_dotenv()

logger = logging.getLogger("fbpose")

TRAIN_ROLES = ("localizer", "object-localizer", "hand-predictor", "object-predictor", "combined-predictor",
               "synthesizer", "updater", "hand-bundle", "joint-bundle")


def parse_args(argv=None):
    """
    Parse command line arguments.

    Returns:
        argparse.Namespace: The parsed arguments
    """
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, default=0, help='Random seed (FBPOSE_SEED overrides it)')
    common.add_argument('--out', type=str, required=False, help='Output file or directory')
    common.add_argument('--verbose', action='store_true', help='Log at DEBUG level')
    common.add_argument('--quiet', action='store_true', help='Hide progress bars')

    parser = argparse.ArgumentParser(description='Hand and object pose estimation with a generative feedback loop')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('gen-data', parents=[common], help='Generate a synthetic depth dataset')
    p.add_argument('--n', type=int, default=1000, help='Number of scenes')
    p.add_argument('--object', type=str, default='none',
                   help='Object model name, or "none" for hand-only scenes')
    p.add_argument('--noise', type=float, default=2.0, help='Sensor noise sigma in mm')
    p.add_argument('--workers', type=int, default=1, help='Worker processes')

    p = sub.add_parser('fit-prior', parents=[common], help='Fit the PCA hand pose prior')
    p.add_argument('--data_path', type=str, required=True, help='Training dataset directory')
    p.add_argument('--k', type=int, default=30, help='Number of prior components')

    p = sub.add_parser('train', parents=[common], help='Train one network role or a whole bundle')
    p.add_argument('role', choices=TRAIN_ROLES)
    p.add_argument('--data_path', type=str, required=True, help='Training dataset directory')
    p.add_argument('--prior', type=str, help='Prior JSON (predictor, updater, bundles)')
    p.add_argument('--predictor', type=str, help='Trained hand predictor (updater)')
    p.add_argument('--synthesizer', type=str, help='Trained synthesizer (updater)')
    p.add_argument('--object', type=str, default='small-cuboid', help='Object model for object roles')
    p.add_argument('--config', type=str, help='JSON file with TrainConfig fields')

    p = sub.add_parser('run-loop', parents=[common], help='Run the feedback loop over a test set')
    p.add_argument('--bundle', type=str, required=True, help='Bundle directory')
    p.add_argument('--data_path', type=str, required=True, help='Test dataset directory')
    p.add_argument('--joint', action='store_true', help='Run the hand-object loop')
    p.add_argument('--iters', type=int, default=2, help='Feedback iterations')
    p.add_argument('--dump', action='store_true', help='Also dump per-iteration images for every sample')

    p = sub.add_parser('baseline', parents=[common], help='Direct image-space fitting baseline')
    p.add_argument('--bundle', type=str, required=True, help='Hand bundle directory')
    p.add_argument('--data_path', type=str, required=True, help='Test dataset directory')
    p.add_argument('--pso', action='store_true', help='Use the particle swarm instead of L-BFGS-B')
    p.add_argument('--samples', type=int, default=50, help='Number of test samples')
    p.add_argument('--max_evaluations', type=int, default=200, help='Objective evaluation budget')

    p = sub.add_parser('eval', parents=[common], help='Re-check and summarize a loop report')
    p.add_argument('report', type=str, help='loop.json written by run-loop or experiment')

    p = sub.add_parser('dump-images', parents=[common], help='Dump the loop images of one sample')
    p.add_argument('--bundle', type=str, required=True, help='Bundle directory')
    p.add_argument('--data_path', type=str, required=True, help='Dataset directory')
    p.add_argument('--index', type=int, default=0, help='Position of the sample in the dataset')
    p.add_argument('--joint', action='store_true', help='Use the hand-object loop')
    p.add_argument('--iters', type=int, default=2, help='Feedback iterations')

    p = sub.add_parser('experiment', parents=[common], help='Run a configured experiment pipeline')
    p.add_argument('config', type=str, help='Experiment JSON config')
    return parser.parse_args(argv)


def _out(args, default):
    return args.out or default


def _train_config(args):
    fields = read_json(args.config) if args.config else {}
    return TrainConfig(**{**fields, "seed": args.seed, "progress": not args.quiet,
                          "log_dir": fields.get("log_dir")})


def cmd_gen_data(args):
    scene = SceneConfig(noise_sigma=args.noise, object=None if args.object == 'none' else args.object)
    make_dataset(args.n, scene, args.seed, _out(args, 'data/generated'), args.workers, progress=not args.quiet)


def cmd_fit_prior(args):
    samples, _ = load_dataset(args.data_path)
    prior = fit_prior(center_on_reference(np.stack([s.hand_pose for s in samples])), args.k)
    save_prior(_out(args, 'prior.json'), prior)


def cmd_train(args):
    samples, _ = load_dataset(args.data_path)
    cfg = _train_config(args)
    out = _out(args, f"{args.role}.w1" if not args.role.endswith('bundle') else args.role)
    if args.role in ('hand-bundle', 'joint-bundle'):
        prior = load_prior(args.prior)
        if args.role == 'hand-bundle':
            bundle, _ = train_hand_bundle(samples, prior, cfg)
        else:
            bundle, _ = train_joint_bundle(samples, object_model(args.object), prior, cfg, default_hand_geometry())
        bundle.save(out)
        return
    if args.role == 'localizer':
        result = train_localizer(samples, cfg, "hand", HAND_CUBE)
    elif args.role == 'object-localizer':
        result = train_localizer(samples, cfg, "object", SCENE_CUBE)
    elif args.role == 'hand-predictor':
        result = train_predictor_hand(samples, load_prior(args.prior), cfg)
    elif args.role == 'object-predictor':
        result = train_predictor_object(samples, object_model(args.object), cfg, OBJECT_CUBE)
    elif args.role == 'combined-predictor':
        result = train_predictor_combined(samples, object_model(args.object), cfg)
    elif args.role == 'synthesizer':
        result = train_synthesizer(samples, cfg)
    else:
        result = train_hand_updater(samples, load_role(args.predictor), load_role(args.synthesizer),
                                    load_prior(args.prior), cfg)
    save_role(out, result.model)
    logger.info(f"Saved {args.role} to {out} (final loss {result.curve[-1]:.6g})")


def cmd_run_loop(args):
    samples, _ = load_dataset(args.data_path)
    out = _out(args, 'loop_out')
    os.makedirs(out, exist_ok=True)
    if args.joint:
        bundle = JointBundle.load(args.bundle)
        E, hand = evaluate_joint_loop(samples, bundle, args.iters, default_hand_geometry(), progress=not args.quiet)
        reports = {"combined": [r.to_dict() for r in E], "hand": [r.to_dict() for r in hand]}
    else:
        bundle = HandBundle.load(args.bundle)
        reports = {"hand": [r.to_dict() for r in evaluate_hand_loop(samples, bundle, args.iters, not args.quiet)]}
    write_json(os.path.join(out, "loop.json"), reports)
    for sample in samples:
        if args.joint:
            _, _, state = run_joint_loop(sample.depth, bundle, args.iters, sample.camera)
        else:
            state = run_hand_loop(sample.depth, bundle, args.iters, sample.camera)
        write_json(os.path.join(out, f"poses_{sample.index:06d}.json"), state.to_dict())
        if args.dump:
            dump_images(state, os.path.join(out, f"images_{sample.index:06d}"))
    for entry in reports["hand"]:
        logger.info(MetricReport.from_dict(entry).summary())


def cmd_baseline(args):
    samples, _ = load_dataset(args.data_path)
    bundle = HandBundle.load(args.bundle)
    out = _out(args, 'baseline_out')
    os.makedirs(out, exist_ok=True)
    rows = run_baseline(samples[:args.samples], bundle, 'pso' if args.pso else 'lbfgsb', args.max_evaluations,
                        args.seed, os.path.join(out, "traces"))
    write_baseline_csv(os.path.join(out, "baseline.csv"), rows)
    initial = MetricReport("baseline-initial", [r["initial_error"] for r in rows])
    final = MetricReport("baseline-final", [r["final_error"] for r in rows])
    logger.info(initial.summary())
    logger.info(final.summary())


def cmd_eval(args):
    reports = read_json(args.report)
    for key, entries in sorted(reports.items()):
        for entry in entries if isinstance(entries, list) else [entries]:
            report = MetricReport.from_dict(entry)
            print(f"[{key}] {report.summary()} ({len(report.skipped)} skipped)")


def cmd_dump_images(args):
    samples, _ = load_dataset(args.data_path)
    sample = samples[args.index]
    if args.joint:
        _, _, state = run_joint_loop(sample.depth, JointBundle.load(args.bundle), args.iters, sample.camera)
    else:
        state = run_hand_loop(sample.depth, HandBundle.load(args.bundle), args.iters, sample.camera)
    written = dump_images(state, _out(args, f"images_{sample.index:06d}"))
    logger.info(f"Wrote {len(written)} files")


def cmd_experiment(args):
    out = run_experiment(args.config, args.out, progress=not args.quiet)
    logger.info(f"Experiment finished: {out}")


COMMANDS = {
    'gen-data': cmd_gen_data,
    'fit-prior': cmd_fit_prior,
    'train': cmd_train,
    'run-loop': cmd_run_loop,
    'baseline': cmd_baseline,
    'eval': cmd_eval,
    'dump-images': cmd_dump_images,
    'experiment': cmd_experiment,
}


def main(argv=None):
    args = parse_args(argv)
    setup_logging(args.verbose)
    try:
        args.seed = resolve_seed(args.seed)
        COMMANDS[args.command](args)
    except (FeedbackPoseError, OSError, ValueError) as e:
        logger.error(f"{args.command} failed: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
