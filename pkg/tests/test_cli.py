# coding: utf-8
import json
import os

import pytest

from bevprompt.cli import get_parser, main
from bevprompt.data import read_json, validate_json

SYNTH = {'scene': {'frames': 3, 'objects_min': 2, 'objects_max': 4, 'seed': 5},
         'detector': {'yaw_sigma': 0.1, 'fp_rate': 0.2}}


def write(path, obj):
    with open(str(path), 'w') as f:
        json.dump(obj, f)
    return str(path)


def last_error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.fixture
def synth_dir(tmp_path):
    out = str(tmp_path / 'synth')
    assert main(['synth-gen', '--config', write(tmp_path / 'synth.json', SYNTH),
                 '--out', out]) == 0
    return out


def test_parser_requires_subcommand():
    with pytest.raises(SystemExit):
        get_parser().parse_args([])
    args = get_parser().parse_args(['eval', '--gt', 'gt.jsonl', '--out', 'o'])
    assert (args.mode, args.threads, args.breakdown) == ('eval', 1, [])


def test_synth_gen_writes_outputs(synth_dir):
    assert sorted(os.listdir(synth_dir)) == ['calib.json', 'det2d.jsonl', 'det3d.jsonl',
                                             'gt.jsonl', 'synth-gen.manifest.json']
    manifest = read_json(os.path.join(synth_dir, 'synth-gen.manifest.json'), 'manifest')
    assert manifest['subcommand'] == 'synth-gen'
    assert manifest['seed'] == 5
    assert set(manifest['inputs']) == {'config'}


def test_derive_and_evaluate_ground_truth(synth_dir, tmp_path):
    gt = os.path.join(synth_dir, 'gt.jsonl')
    calib = os.path.join(synth_dir, 'calib.json')
    derived = str(tmp_path / 'derived')
    assert main(['derive-2d', '--gt', gt, '--calib', calib, '--out', derived]) == 0
    gt2d = os.path.join(derived, 'gt2d.jsonl')

    out = str(tmp_path / 'eval')
    assert main(['eval', '--gt', gt, '--det3d', gt, '--det2d', gt2d, '--gt2d', gt2d,
                 '--calib', calib, '--breakdown', 'occlusion', 'difficulty', '--pr-csv',
                 '--out', out]) == 0
    result = read_json(os.path.join(out, 'eval_report.json'), 'eval_report')
    assert result['report']['map_2d'] == pytest.approx(1.0)
    overall = [c for c in result['report']['cells'] if c['difficulty'] == 'overall']
    assert all(c['ap'] == 1.0 for c in overall if c['ap'] is not None)
    assert 'occlusion_0.00-0.50' in result['breakdowns'] and 'easy' in result['breakdowns']
    assert os.path.isdir(os.path.join(out, 'pr'))


def test_eval_report_and_pr_paths(synth_dir, tmp_path):
    gt = os.path.join(synth_dir, 'gt.jsonl')
    report = str(tmp_path / 'reports' / 'run.json')
    pr_dir = str(tmp_path / 'curves')
    out = str(tmp_path / 'eval')
    assert main(['eval', '--gt', gt, '--det3d', gt, '--report', report, '--pr-csv', pr_dir,
                 '--out', out]) == 0
    result = read_json(report, 'eval_report')
    assert all(c['ap'] in (1.0, None) for c in result['report']['cells'])
    assert 'vehicle_overall_0.50.csv' in os.listdir(pr_dir)
    assert sorted(os.listdir(out)) == ['eval.manifest.json']


def test_tune_yaw(synth_dir, tmp_path):
    out = str(tmp_path / 'yaw')
    assert main(['tune-yaw', '--det3d', os.path.join(synth_dir, 'det3d.jsonl'),
                 '--det2d', os.path.join(synth_dir, 'det2d.jsonl'),
                 '--calib', os.path.join(synth_dir, 'calib.json'),
                 '--gt', os.path.join(synth_dir, 'gt.jsonl'), '--robustness', '0.0', '0.01',
                 '--out', out]) == 0
    report = read_json(os.path.join(out, 'yaw_report.json'), 'yaw_report')
    assert all(p['iou_after'] >= p['iou_before'] - 1e-12 for p in report['pairs'])
    assert [r['noise'] for r in report['robustness']] == [0.0, 0.01]
    assert os.path.exists(os.path.join(out, 'det3d_tuned.jsonl'))


def test_train_from_synth_dir(synth_dir, tmp_path):
    cfg = {'epochs': 1, 'baseline': False,
           'model': {'d_model': 4, 'c_in': 5, 'head_hidden': 4}}
    out = str(tmp_path / 'train')
    assert main(['train', '--data', synth_dir, '--config', write(tmp_path / 'train.json', cfg),
                 '--out', out]) == 0
    report = read_json(os.path.join(out, 'train_report.json'), 'train_report')
    assert len(report['history']) == 1
    assert os.path.exists(os.path.join(out, 'checkpoint', 'manifest.json'))


def test_fuse_trace_check(fixture_path, tmp_path):
    out = str(tmp_path / 'trace')
    assert main(['fuse-trace', '--fixture', fixture_path('fuse_trace_d4.json'),
                 '--check', '1e-12', '--out', out]) == 0
    result = read_json(os.path.join(out, 'fuse_trace.json'), 'fuse_trace_output')
    assert max(result['errors'].values()) < 1e-12


def test_fuse_trace_deviation_fails(fixture_path, tmp_path, capsys):
    fixture = read_json(fixture_path('fuse_trace_d4.json'))
    fixture['expected']['J']['data'][0] += 1e-6
    path = write(tmp_path / 'shifted.json', fixture)
    assert main(['fuse-trace', '--fixture', path, '--check', '1e-9',
                 '--out', str(tmp_path / 'trace')]) == 3
    assert last_error(capsys)['error'] == 'EvaluationException'


def test_schema_violation_exit_code(synth_dir, tmp_path, capsys):
    bad = str(tmp_path / 'bad.jsonl')
    with open(bad, 'w') as f:
        f.write(json.dumps({'frame': 0, 'x': 1.0, 'label': 'car'}) + '\n')
    code = main(['eval', '--gt', bad, '--out', str(tmp_path / 'eval')])
    assert code == 2
    error = last_error(capsys)
    assert error == {'error': 'SchemaException', 'message': error['message'], 'exit_code': 2}
    assert 'bad.jsonl:1' in error['message']


def test_unknown_config_key_exit_code(tmp_path, capsys):
    code = main(['synth-gen', '--config', write(tmp_path / 'c.json', {'scenes': {}}),
                 '--out', str(tmp_path / 'o')])
    assert code == 2
    assert last_error(capsys)['error'] == 'ConfigurationException'


def test_missing_file_exit_code(tmp_path, capsys):
    code = main(['eval', '--gt', str(tmp_path / 'missing.jsonl'), '--out', str(tmp_path / 'o')])
    assert code == 4
    assert last_error(capsys)['exit_code'] == 4


def test_outputs_are_reproducible(tmp_path, monkeypatch):
    monkeypatch.setenv('SOURCE_DATE_EPOCH', '1700000000')
    config = write(tmp_path / 'synth.json', SYNTH)
    outs = [str(tmp_path / name) for name in ('a', 'b')]
    for out in outs:
        assert main(['synth-gen', '--config', config, '--out', out]) == 0
    for name in sorted(os.listdir(outs[0])):
        with open(os.path.join(outs[0], name), 'rb') as fa, \
                open(os.path.join(outs[1], name), 'rb') as fb:
            assert fa.read() == fb.read(), name
    manifest = read_json(os.path.join(outs[0], 'synth-gen.manifest.json'))
    assert manifest['timestamp'] == '2023-11-14T22:13:20Z'


def test_seed_environment_override(tmp_path, monkeypatch):
    monkeypatch.setenv('BEVPROMPT_SEED', '9')
    out = str(tmp_path / 'synth')
    assert main(['synth-gen', '--config', write(tmp_path / 'synth.json', SYNTH),
                 '--out', out]) == 0
    manifest = validate_json(read_json(os.path.join(out, 'synth-gen.manifest.json')), 'manifest')
    assert manifest['seed'] == 9
    assert manifest['config']['scene']['seed'] == 9
