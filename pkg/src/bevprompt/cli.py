# coding: utf-8
"""
Command line interface: synthetic data, 2D label derivation, yaw tuning,
toy training, evaluation, prompt-quality sweeps, fusion traces and the
prompting benchmark.

Every subcommand writes its outputs plus `<subcommand>.manifest.json` into
`--out`. Failures print a JSON error object to stderr and exit with 2
(schema/configuration), 3 (numeric) or 4 (I/O).
"""

import argparse
import json
import logging
import os
import sys
import time

import numpy as np
import torch

import bevprompt
from bevprompt.data import (read_boxes, read_calibs, read_cuboids, read_json,
                            write_boxes, write_cuboids, write_json)
from bevprompt.errors import (EXIT_IO, BEVPromptException, ConfigurationException,
                              EvaluationException)
from bevprompt.fusion import fuse_trace, trace_errors, trace_to_json
from bevprompt.geometry import perturb_calib, project_cuboid
from bevprompt.metrics import EvalConfig, breakdown, evaluate, write_pr_csv
from bevprompt.synth import (DetectorNoise, SceneConfig, gen_scenes, read_synth_dir,
                             simulate_2d_detector, simulate_3d_detector, write_synth_dir)
from bevprompt.train import (STANDARD_BENCHMARK, TrainConfig, markdown_table, prepare_data,
                             run_benchmark, sweep_prompt_quality, train_toy)
from bevprompt.utils import Config, path_sha256, seed_override
from bevprompt.yawtune import YawTuneConfig, calib_noise_robustness, tune_frames


def get_parser():
    """ Setup parser for command line arguments """
    main_parser = argparse.ArgumentParser(prog='bevprompt')

    ## shared by every subcommand
    cmd_parser = argparse.ArgumentParser(add_help=False)
    cmd_parser.add_argument('--threads', type=int, default=1,
                            help='Number of torch threads')
    cmd_parser.add_argument('--progress', action='store_true',
                            help='Show progress bars')
    cmd_parser.add_argument('--out', required=True,
                            help='Output directory')

    config_parser = argparse.ArgumentParser(add_help=False)
    config_parser.add_argument('--config', default=None,
                               help='JSON configuration, missing keys take their defaults')

    cmd_subparsers = main_parser.add_subparsers(dest='mode',
                                                help='Command-specific arguments')
    cmd_subparsers.required = True

    synth_parser = cmd_subparsers.add_parser(
        'synth-gen', help='Generate synthetic scenes and simulated detections',
        parents=[cmd_parser, config_parser])

    derive_parser = cmd_subparsers.add_parser(
        'derive-2d', help='Project 3D ground truth to 2D boxes', parents=[cmd_parser])
    derive_parser.add_argument('--gt', required=True, help='Ground-truth cuboids (JSON lines)')
    derive_parser.add_argument('--calib', required=True, help='Calibration file')

    yaw_parser = cmd_subparsers.add_parser(
        'tune-yaw', help='Refine 3D detection yaw against 2D detections',
        parents=[cmd_parser, config_parser])
    yaw_parser.add_argument('--det3d', required=True, help='3D detections (JSON lines)')
    yaw_parser.add_argument('--det2d', required=True, help='2D detections (JSON lines)')
    yaw_parser.add_argument('--calib', required=True, help='Calibration file')
    yaw_parser.add_argument('--calib-noise', type=float, default=None,
                            help='Perturb pitch and roll by up to this many radians before tuning')
    yaw_parser.add_argument('--robustness', type=float, nargs='+', default=None,
                            help='Calibration noise levels for an AOS robustness report (needs --gt)')
    yaw_parser.add_argument('--gt', default=None, help='Ground-truth cuboids for --robustness')
    yaw_parser.add_argument('--seed', type=int, default=0,
                            help='Seed of the calibration perturbation')

    train_parser = cmd_subparsers.add_parser(
        'train', help='Train the toy prompted model and the baseline',
        parents=[cmd_parser, config_parser])
    train_parser.add_argument('--data', default=None,
                              help='synth-gen output directory, generated from the config if omitted')

    eval_parser = cmd_subparsers.add_parser(
        'eval', help='Evaluate detections', parents=[cmd_parser, config_parser])
    eval_parser.add_argument('--gt', required=True, help='Ground-truth cuboids (JSON lines)')
    eval_parser.add_argument('--det3d', default=None, help='3D detections (JSON lines)')
    eval_parser.add_argument('--det2d', default=None, help='2D detections (JSON lines)')
    eval_parser.add_argument('--gt2d', default=None,
                             help='2D ground truth, projected from --gt with --calib if omitted')
    eval_parser.add_argument('--calib', default=None,
                             help='Calibration file, enables difficulty levels')
    eval_parser.add_argument('--breakdown', nargs='+', default=[],
                             choices=['occlusion', 'truncation', 'difficulty'],
                             help='Additional breakdowns')
    eval_parser.add_argument('--report', default=None,
                             help='Report JSON path, <out>/eval_report.json if omitted')
    eval_parser.add_argument('--pr-csv', nargs='?', const='', default=None, metavar='DIR',
                             help='Export the PR curve of every cell as CSV, into <out>/pr '
                                  'if no directory is given')

    sweep_parser = cmd_subparsers.add_parser(
        'sweep', help='Prompt-quality sweep over 2D detector noise',
        parents=[cmd_parser, config_parser])
    sweep_parser.add_argument('--levels', type=float, nargs='+', default=[0.0, 2.0, 5.0, 10.0],
                              help='Center/size jitter sigmas in pixels')

    trace_parser = cmd_subparsers.add_parser(
        'fuse-trace', help='Dump the per-step tensors of one fusion pass', parents=[cmd_parser])
    trace_parser.add_argument('--fixture', required=True,
                              help='Fixture with config, weights, E and I_raw')
    trace_parser.add_argument('--check', type=float, default=None,
                              help='Fail if any step deviates from the fixture by more than this')

    bench_parser = cmd_subparsers.add_parser(
        'bench', help='Prompted vs baseline benchmark', parents=[cmd_parser, config_parser])
    bench_parser.add_argument('suite', nargs='?', default='prompts', choices=['prompts'])
    bench_parser.add_argument('--seeds', type=int, nargs='+', default=[0, 1, 2])
    bench_parser.add_argument('--no-ablation', action='store_true',
                              help='Skip the ground-truth prompt runs')

    return main_parser


def timestamp():
    epoch = os.environ.get('SOURCE_DATE_EPOCH')
    seconds = int(epoch) if epoch else int(time.time())
    return time.strftime('%Y-%m-%dT%H:%M:%SZ', time.gmtime(seconds))


def write_manifest(args, config, inputs, seed):
    manifest = {'version': bevprompt.__version__,
                'subcommand': args.mode,
                'config': config,
                'inputs': {name: path_sha256(path) for name, path in inputs.items()
                           if path is not None},
                'seed': seed,
                'threads': args.threads,
                'timestamp': timestamp()}
    write_json(os.path.join(args.out, args.mode + '.manifest.json'), manifest, 'manifest')


def load_config(cls, path):
    if path is None:
        return cls()
    return cls.from_dict(read_json(path))


class SynthGenConfig(Config):
    defaults = {
        'scene': {},
        'detector': {},
        # seed of the simulated detectors, the scene seed if None
        'detector_seed': None,
    }


def synth_gen(args):
    cfg = load_config(SynthGenConfig, args.config)
    scene_cfg = SceneConfig.from_dict(cfg.scene)
    scene_cfg = scene_cfg.replace(seed=seed_override(scene_cfg.seed))
    noise = DetectorNoise.from_dict(cfg.detector)
    detector_seed = scene_cfg.seed if cfg.detector_seed is None else seed_override(cfg.detector_seed)

    scenes = gen_scenes(scene_cfg, progress=args.progress)
    dets2d = [d for s in scenes for d in simulate_2d_detector(s, noise, detector_seed)]
    dets3d = [d for s in scenes for d in simulate_3d_detector(s, noise, detector_seed)]
    write_synth_dir(args.out, scenes, dets2d, dets3d)
    logging.info('generated %d frames, %d objects', len(scenes),
                 sum(len(s.cuboids) for s in scenes))
    write_manifest(args, {'scene': scene_cfg.to_dict(), 'detector': noise.to_dict(),
                          'detector_seed': detector_seed},
                   {'config': args.config}, scene_cfg.seed)


def derive_2d(args):
    calibs = read_calibs(args.calib)
    boxes = [project_cuboid(calibs[c.frame], c) for c in read_cuboids(args.gt)]
    write_boxes(os.path.join(args.out, 'gt2d.jsonl'), boxes)
    write_manifest(args, {}, {'gt': args.gt, 'calib': args.calib}, None)


def tune_yaw(args):
    cfg = load_config(YawTuneConfig, args.config)
    seed = seed_override(args.seed)
    calibs = read_calibs(args.calib)
    cuboids = read_cuboids(args.det3d)
    boxes = read_boxes(args.det2d)

    if args.calib_noise:
        frames = sorted({c.frame for c in cuboids})
        calibs = {f: perturb_calib(calibs[f], args.calib_noise, args.calib_noise, seed + f)
                  for f in frames}
    pairs = []
    tuned = tune_frames(cuboids, boxes, calibs, cfg, pairs, progress=args.progress)
    write_cuboids(os.path.join(args.out, 'det3d_tuned.jsonl'), tuned)

    report = {'pairs': pairs, 'calib_noise': args.calib_noise}
    inputs = {'det3d': args.det3d, 'det2d': args.det2d, 'calib': args.calib,
              'config': args.config, 'gt': args.gt}
    if args.robustness:
        if args.gt is None:
            raise ConfigurationException('--robustness needs --gt')
        report['robustness'] = calib_noise_robustness(
            cuboids, boxes, read_cuboids(args.gt), read_calibs(args.calib), args.robustness,
            cfg, seed=seed)
    write_json(os.path.join(args.out, 'yaw_report.json'), report, 'yaw_report')
    write_manifest(args, cfg.to_dict(), inputs, seed)


def train(args):
    cfg = load_config(TrainConfig, args.config)
    cfg = cfg.replace(seed=seed_override(cfg.seed))
    data = None
    if args.data is not None:
        scenes, dets2d = read_synth_dir(args.data)
        data = prepare_data(cfg, scenes, dets2d or None)
    report = train_toy(cfg, data, out=args.out, progress=args.progress)
    write_json(os.path.join(args.out, 'train_report.json'), report.to_dict(), 'train_report')
    write_manifest(args, cfg.to_dict(), {'config': args.config, 'data': args.data}, cfg.seed)


def evaluate_cmd(args):
    cfg = load_config(EvalConfig, args.config)
    gts = read_cuboids(args.gt)
    calibs = read_calibs(args.calib) if args.calib else None
    dets3d = read_cuboids(args.det3d) if args.det3d else []
    dets2d = read_boxes(args.det2d) if args.det2d else None
    gts2d = None
    if dets2d is not None:
        if args.gt2d:
            gts2d = read_boxes(args.gt2d)
        elif calibs is not None:
            gts2d = [project_cuboid(calibs[g.frame], g) for g in gts]
        else:
            raise ConfigurationException('--det2d needs --gt2d or --calib')

    report = evaluate(dets3d, gts, cfg, calibs, dets2d, gts2d)
    out = {'report': report.to_dict()}
    if args.breakdown:
        out['breakdowns'] = {}
        for axis in args.breakdown:
            for name, sub in breakdown(dets3d, gts, axis, cfg, calibs).items():
                out['breakdowns'][name] = sub.to_dict()
    report_path = args.report or os.path.join(args.out, 'eval_report.json')
    os.makedirs(os.path.dirname(os.path.abspath(report_path)), exist_ok=True)
    write_json(report_path, out, 'eval_report')
    if args.pr_csv is not None:
        write_pr_csv(report, args.pr_csv or os.path.join(args.out, 'pr'))
    write_manifest(args, cfg.to_dict(),
                   {'gt': args.gt, 'det3d': args.det3d, 'det2d': args.det2d,
                    'gt2d': args.gt2d, 'calib': args.calib, 'config': args.config}, None)


def sweep(args):
    cfg = load_config(TrainConfig, args.config)
    cfg = cfg.replace(seed=seed_override(cfg.seed))
    result = sweep_prompt_quality(args.levels, cfg, progress=args.progress)
    write_json(os.path.join(args.out, 'sweep_report.json'), result, 'sweep_report')
    write_manifest(args, dict(cfg.to_dict(), levels=list(args.levels)),
                   {'config': args.config}, cfg.seed)


def trace(args):
    fixture = read_json(args.fixture, 'fuse_trace')
    result = fuse_trace(fixture)
    out = trace_to_json(result)
    if 'expected' in fixture:
        out['errors'] = trace_errors(result, fixture['expected'])
        worst = max(out['errors'].values()) if out['errors'] else 0.0
        logging.info('fuse-trace: max deviation from the fixture %.3e', worst)
        if args.check is not None and worst > args.check:
            raise EvaluationException('fuse-trace deviates by {:.3e} > {:.3e}'.format(
                worst, args.check))
    write_json(os.path.join(args.out, 'fuse_trace.json'), out, 'fuse_trace_output')
    write_manifest(args, fixture['config'], {'fixture': args.fixture}, None)


def bench(args):
    cfg = load_config(TrainConfig, args.config) if args.config \
        else TrainConfig(**STANDARD_BENCHMARK)
    seeds = list(args.seeds)
    base = seed_override(None)
    if base is not None:
        seeds = [base + k for k in range(len(seeds))]
    rows = run_benchmark(cfg, seeds, ablation=not args.no_ablation, progress=args.progress)
    table = markdown_table(rows)
    print(table)
    with open(os.path.join(args.out, 'bench.md'), 'w') as f:
        f.write(table + '\n')
    write_manifest(args, dict(cfg.to_dict(), seeds=seeds), {'config': args.config},
                   seeds[0] if seeds else None)


COMMANDS = {
    'synth-gen': synth_gen,
    'derive-2d': derive_2d,
    'tune-yaw': tune_yaw,
    'train': train,
    'eval': evaluate_cmd,
    'sweep': sweep,
    'fuse-trace': trace,
    'bench': bench,
}


def error_json(exc, code):
    return json.dumps({'error': type(exc).__name__, 'message': str(exc), 'exit_code': code},
                      sort_keys=True)


def main(argv=None):
    args = get_parser().parse_args(argv)
    logging.basicConfig(level=os.environ.get('LOGLEVEL', 'INFO'))
    np.set_printoptions(linewidth=120, precision=4, suppress=True)
    try:
        torch.set_num_threads(max(1, args.threads))
        os.makedirs(args.out, exist_ok=True)
        COMMANDS[args.mode](args)
    except BEVPromptException as e:
        logging.debug('%s failed', args.mode, exc_info=True)
        sys.stderr.write(error_json(e, e.exit_code) + '\n')
        return e.exit_code
    except OSError as e:
        sys.stderr.write(error_json(e, EXIT_IO) + '\n')
        return EXIT_IO
    return 0
