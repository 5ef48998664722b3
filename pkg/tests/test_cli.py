import os
import csv
import json
import shutil
import filecmp

import numpy as np
import pytest

from aenet.config import MANIFEST_FILE, STATS_FILE, POOL_INDEX_FILE, RUN_LOG_FILE, TRAIN_LOG_FILE, TRAIN_STAT_FILE, \
    MASK_SUBDIR, PROB_SUBDIR, LABEL_SUBDIR, IMAGE_SUBDIR, ANNOT_SUBDIR, MODEL_BEST, MODEL_LAST, PIXEL_SCALE
from aenet.errors import UsageError, DataError, EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC
from aenet.imaging import read_mask_png, write_mask_png, write_rgb_image
from aenet.metrics import AGGREGATE_ROW_ID
from aenet.model import load_checkpoint
from aenet.cli.__main__ import main as cli_main
from aenet.cli.common import ArgumentParser, add_common_args, add_bool_arg, parse_args, ManifestEntry, \
    SplitManifest, validate_manifest, read_manifest
from aenet.cli.synth import make_manifest
from aenet.cli.prep import read_pool_index

TRAIN_ARGS = ['--preset', 'toy', '--crop_side', '16', '--batch_size', '4', '--max_epochs', '2',
              '--halve_epoch', '1', '--poly_epoch', '2']


def run(*argv):
    return cli_main([str(a) for a in argv])


def read_log(out_dir):
    with open(os.path.join(out_dir, RUN_LOG_FILE)) as f:
        return f.read()


def read_aggregate(report_dir):
    with open(os.path.join(report_dir, 'report.csv'), newline='') as f:
        rows = {row['image_id']: row for row in csv.DictReader(f)}
    return rows[AGGREGATE_ROW_ID]


def same_tree(dir1, dir2, skip=(RUN_LOG_FILE,)):
    cmp = filecmp.dircmp(dir1, dir2)
    if cmp.left_only or cmp.right_only:
        return False
    files = [f for f in cmp.common_files if f not in skip]
    _, mismatch, errors = filecmp.cmpfiles(dir1, dir2, files, shallow=False)
    if mismatch or errors:
        return False
    return all(same_tree(os.path.join(dir1, d), os.path.join(dir2, d)) for d in cmp.common_dirs)


@pytest.fixture(scope='module')
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp('dataset')
    data_root = root / 'data'
    prep_dir = root / 'prep'
    assert run('synth', '--data_root', data_root, '--train_qty', 4, '--st_qty', 2, '--dt_qty', 2,
               '--size', 32, '--seed', 5) == EXIT_OK
    assert run('prep', '--data_root', data_root, '--out_dir', prep_dir, '--zoom_scales', 1.0) == EXIT_OK
    return str(data_root), str(prep_dir)


@pytest.fixture(scope='module')
def trained(dataset, tmp_path_factory):
    _, prep_dir = dataset
    model_dir = tmp_path_factory.mktemp('model')
    assert run('train', '--prep_dir', prep_dir, '--model_out_dir', model_dir, '--max_steps', 2, *TRAIN_ARGS) == EXIT_OK
    return str(model_dir)


def make_parser():
    parser = ArgumentParser()
    add_common_args(parser)
    parser.add_argument('--alpha', type=float, default=1.0)
    parser.add_argument('--name', type=str, default='x')
    add_bool_arg(parser, 'flag', True, 'a flag')
    return parser


def test_config_precedence(tmp_path):
    conf = tmp_path / 'conf.json'
    conf.write_text(json.dumps({'model': {'alpha': 2}, 'name': 'from_config', 'flag': False}))
    args = parse_args(make_parser(), ['--config', str(conf)])
    assert args.alpha == 2 and args.name == 'from_config' and args.flag is False

    args = parse_args(make_parser(), ['--json_conf', str(conf), '--alpha', '3', '--flag'])
    assert args.alpha == 3.0 and args.flag is True and args.name == 'from_config'

    args = parse_args(make_parser(), ['--no_flag'])
    assert args.flag is False and args.alpha == 1.0


@pytest.mark.parametrize('content', ['{"beta": 1}', '{"name": 5}', '{"alpha": "big"}', '{"a": {"x": 1}, "x": 2}',
                                     'not json'])
def test_config_errors(tmp_path, content):
    conf = tmp_path / 'conf.json'
    conf.write_text(content)
    with pytest.raises(UsageError):
        parse_args(make_parser(), ['--config', str(conf)])


def test_usage_errors():
    with pytest.raises(UsageError):
        parse_args(make_parser(), ['--alpha'])
    with pytest.raises(UsageError):
        parse_args(make_parser(), ['--config', '/nonexistent/conf.json'])
    assert run('segment') == EXIT_USAGE
    assert run() == EXIT_USAGE
    assert run('eval') == EXIT_USAGE


def test_manifest_validation():
    manifest = make_manifest(16, 8, 6)
    validate_manifest(manifest, {'train': 16, 'st': 8, 'dt': 6})
    with pytest.raises(DataError):
        validate_manifest(manifest, {'train': 30})

    entry = ManifestEntry('img1', 'breast')
    with pytest.raises(DataError):
        validate_manifest(SplitManifest(train=[entry], st=[entry], dt=[]))
    with pytest.raises(DataError):
        validate_manifest(SplitManifest(train=[entry], st=[], dt=[ManifestEntry('img2', 'breast')]))
    with pytest.raises(DataError):
        validate_manifest(SplitManifest(train=[ManifestEntry('img3', 'lung')], st=[], dt=[]))


def test_synth_and_prep_outputs(dataset):
    data_root, prep_dir = dataset
    manifest = read_manifest(os.path.join(data_root, MANIFEST_FILE))
    assert [len(manifest.train), len(manifest.st), len(manifest.dt)] == [4, 2, 2]
    assert len(os.listdir(os.path.join(data_root, IMAGE_SUBDIR))) == 8
    assert len(os.listdir(os.path.join(data_root, ANNOT_SUBDIR))) == 8

    pool = read_pool_index(os.path.join(prep_dir, POOL_INDEX_FILE))
    assert len(pool) == 24
    assert all(os.path.exists(os.path.join(prep_dir, e.image_file)) for e in pool)
    assert len(os.listdir(os.path.join(prep_dir, MASK_SUBDIR))) == 8
    with open(os.path.join(prep_dir, STATS_FILE)) as f:
        assert json.load(f)['pixel_scale'] == pytest.approx(PIXEL_SCALE)
    with open(os.path.join(prep_dir, MANIFEST_FILE)) as f:
        assert json.load(f)['data_root'] == os.path.abspath(data_root)
    assert '4 -> 24 images' in read_log(prep_dir)


def test_prep_augmentation_counts(tmp_path):
    data_root = tmp_path / 'data'
    assert run('synth', '--data_root', data_root, '--train_qty', 16, '--st_qty', 1, '--dt_qty', 1,
               '--size', 24, '--max_radius', 5) == EXIT_OK
    assert run('prep', '--data_root', data_root, '--out_dir', tmp_path / 'prep') == EXIT_OK
    log = read_log(tmp_path / 'prep')
    assert '16 -> 96 images' in log
    assert '96 -> 576 images' in log


def test_prep_is_deterministic(dataset, tmp_path):
    data_root, prep_dir = dataset
    assert run('prep', '--data_root', data_root, '--out_dir', tmp_path / 'prep2', '--zoom_scales', 1.0) == EXIT_OK
    assert same_tree(prep_dir, str(tmp_path / 'prep2'))


def test_synth_is_deterministic(tmp_path):
    for name in ['a', 'b']:
        assert run('synth', '--data_root', tmp_path / name, '--train_qty', 2, '--st_qty', 1, '--dt_qty', 1,
                   '--size', 24, '--max_radius', 5, '--seed', 9) == EXIT_OK
    assert same_tree(str(tmp_path / 'a'), str(tmp_path / 'b'))


def test_prep_missing_annotation(dataset, tmp_path):
    data_root, _ = dataset
    copy = tmp_path / 'data'
    shutil.copytree(data_root, copy)
    os.remove(copy / ANNOT_SUBDIR / 'st_0001.xml')
    assert run('prep', '--data_root', copy, '--out_dir', tmp_path / 'prep') == EXIT_DATA


def test_eval_exit_codes(dataset, tmp_path):
    _, prep_dir = dataset
    gt_dir = os.path.join(prep_dir, MASK_SUBDIR)

    assert run('eval', '--pred_dir', gt_dir, '--gt_dir', gt_dir, '--out_dir', tmp_path / 'perfect') == EXIT_OK
    agg = read_aggregate(tmp_path / 'perfect')
    assert float(agg['f1']) == 1.0 and float(agg['dice']) == 1.0 and float(agg['miou']) == 1.0

    empty = tmp_path / 'empty'
    empty.mkdir()
    assert run('eval', '--pred_dir', empty, '--gt_dir', gt_dir, '--out_dir', tmp_path / 'e') == EXIT_USAGE

    blank = tmp_path / 'blank'
    for fn in os.listdir(gt_dir):
        write_mask_png(str(blank / fn), np.ones_like(read_mask_png(os.path.join(gt_dir, fn))))
    assert run('eval', '--pred_dir', blank, '--gt_dir', gt_dir, '--out_dir', tmp_path / 'u',
               '--require', 'dice=0.5') == EXIT_NUMERIC
    assert run('eval', '--pred_dir', blank, '--gt_dir', gt_dir, '--out_dir', tmp_path / 'u',
               '--require', 'accuracy=0.1') == EXIT_OK
    assert run('eval', '--pred_dir', blank, '--gt_dir', gt_dir, '--out_dir', tmp_path / 'u',
               '--require', 'jaccard=0.1') == EXIT_USAGE

    partial = tmp_path / 'partial'
    partial.mkdir()
    shutil.copy(os.path.join(gt_dir, 'st_0000.png'), partial)
    assert run('eval', '--pred_dir', partial, '--gt_dir', gt_dir, '--out_dir', tmp_path / 'p') == EXIT_DATA
    assert run('eval', '--pred_dir', partial, '--gt_dir', gt_dir, '--out_dir', tmp_path / 'p',
               '--manifest', os.path.join(prep_dir, MANIFEST_FILE), '--split', 'st') == EXIT_DATA


def test_eval_split_and_organs(dataset, tmp_path):
    _, prep_dir = dataset
    gt_dir = os.path.join(prep_dir, MASK_SUBDIR)
    assert run('eval', '--pred_dir', gt_dir, '--gt_dir', gt_dir, '--out_dir', tmp_path,
               '--manifest', os.path.join(prep_dir, MANIFEST_FILE), '--split', 'dt', '--group_by_organ') == EXIT_OK
    with open(tmp_path / 'summary.txt') as f:
        summary = f.read()
    assert '# of images:  2' in summary
    assert 'Organ: bladder' in summary


def test_train_outputs(trained):
    for fn in [MODEL_BEST, MODEL_LAST, TRAIN_LOG_FILE, TRAIN_STAT_FILE]:
        assert os.path.exists(os.path.join(trained, fn))
    with open(os.path.join(trained, TRAIN_LOG_FILE), newline='') as f:
        rows = list(csv.DictReader(f))
    assert rows[0]['epoch'] == '0' and rows[0]['lr'] == '0.0006'
    assert rows[0]['valid_dice'] != ''
    model, optimizer, epoch, extra = load_checkpoint(os.path.join(trained, MODEL_LAST))
    assert extra['step'] == 2 and extra['batch_idx'] == 2 and epoch == 0
    assert optimizer.t == 2


def test_train_usage_errors(dataset, tmp_path):
    _, prep_dir = dataset
    args = ['train', '--prep_dir', prep_dir, '--model_out_dir', tmp_path, '--max_steps', 1]
    assert run(*args, '--preset', 'toy', '--crop_side', 20, '--max_epochs', 2, '--halve_epoch', 1,
               '--poly_epoch', 2) == EXIT_USAGE
    assert run(*args, '--preset', 'toy', '--max_epochs', 2) == EXIT_USAGE


def test_resume_is_bit_exact(dataset, tmp_path):
    _, prep_dir = dataset
    assert run('train', '--prep_dir', prep_dir, '--model_out_dir', tmp_path / 'straight', '--max_steps', 4,
               *TRAIN_ARGS) == EXIT_OK
    assert run('train', '--prep_dir', prep_dir, '--model_out_dir', tmp_path / 'first', '--max_steps', 2,
               *TRAIN_ARGS) == EXIT_OK
    assert run('train', '--prep_dir', prep_dir, '--model_out_dir', tmp_path / 'resumed', '--max_steps', 4,
               '--init_model', tmp_path / 'first' / MODEL_LAST, *TRAIN_ARGS) == EXIT_OK

    straight, opt1, _, extra1 = load_checkpoint(str(tmp_path / 'straight' / MODEL_LAST))
    resumed, opt2, _, extra2 = load_checkpoint(str(tmp_path / 'resumed' / MODEL_LAST))
    assert extra1['step'] == extra2['step'] == 4
    for (n1, p1), (n2, p2) in zip(straight.named_parameters(), resumed.named_parameters()):
        assert n1 == n2
        np.testing.assert_array_equal(p1.value, p2.value)
    for (_, b1), (_, b2) in zip(straight.named_buffers(), resumed.named_buffers()):
        np.testing.assert_array_equal(b1, b2)
    np.testing.assert_array_equal(opt1.v[n1], opt2.v[n1])


def infer_args(dataset, trained, out_dir, *extra):
    _, prep_dir = dataset
    return ['infer', '--model', os.path.join(trained, MODEL_BEST), '--out_dir', out_dir, '--split', 'st',
            '--prep_dir', prep_dir, '--patch_side', 32] + list(extra)


def test_infer_watershed_toggle(dataset, trained, tmp_path):
    assert run(*infer_args(dataset, trained, tmp_path / 'ws', '--overlay')) == EXIT_OK
    assert sorted(os.listdir(tmp_path / 'ws' / LABEL_SUBDIR)) == ['st_0000.png', 'st_0001.png']
    assert len(os.listdir(tmp_path / 'ws' / 'overlay')) == 2

    assert run(*infer_args(dataset, trained, tmp_path / 'plain', '--no_watershed')) == EXIT_OK
    assert not os.path.exists(tmp_path / 'plain' / LABEL_SUBDIR)
    assert len(os.listdir(tmp_path / 'plain' / MASK_SUBDIR)) == 2
    assert '1 passes per image' in read_log(tmp_path / 'plain')


def test_infer_multi_scale_and_determinism(dataset, trained, tmp_path):
    for name in ['a', 'b']:
        assert run(*infer_args(dataset, trained, tmp_path / name, '--multi_scale', '--norm', 'individual')) == EXIT_OK
    assert '14 passes per image' in read_log(tmp_path / 'a')
    assert same_tree(str(tmp_path / 'a'), str(tmp_path / 'b'))
    with open(tmp_path / 'a' / PROB_SUBDIR / 'st_0000.json') as f:
        assert json.load(f)['pass_qty'] == 14


def test_infer_errors(dataset, trained, tmp_path):
    _, prep_dir = dataset
    small = tmp_path / 'small'
    write_rgb_image(str(small / 'tiny.png'), np.zeros((8, 8, 3), dtype=np.uint8))
    assert run('infer', '--model', os.path.join(trained, MODEL_BEST), '--out_dir', tmp_path / 'o',
               '--images', small, '--stats', os.path.join(prep_dir, STATS_FILE)) == EXIT_DATA
    assert run('infer', '--model', os.path.join(trained, MODEL_BEST), '--out_dir', tmp_path / 'o') == EXIT_USAGE
    assert run(*infer_args(dataset, trained, tmp_path / 'o', '--marker_frac', 1.5)) == EXIT_USAGE


def read_tsv(file_name):
    with open(file_name) as f:
        return [line.rstrip('\n').split('\t') for line in f]


def test_ablate_module_table(dataset, tmp_path):
    _, prep_dir = dataset
    out_dir = tmp_path / 'ablate'
    assert run('ablate', '--table', 'modules', '--split', 'st', '--prep_dir', prep_dir, '--out_dir', out_dir,
               '--patch_side', 32, '--max_steps', 1, *TRAIN_ARGS) == EXIT_OK
    table = read_tsv(out_dir / 'ablation.tsv')
    assert table[0] == ['cam', 'sam', 'ffb', 'ws', 'f1', 'dice', 'miou']
    assert [row[:4] for row in table[1:]] == [['0', '0', '0', '0'], ['1', '0', '0', '0'], ['1', '1', '0', '0'],
                                              ['1', '1', '1', '0'], ['1', '1', '1', '1']]
    assert sorted(os.listdir(out_dir / 'models')) == ['cam0_sam0_ffb0', 'cam1_sam0_ffb0', 'cam1_sam1_ffb0',
                                                      'cam1_sam1_ffb1']

    # the all-off row equals a plain inference run of the same model
    baseline = tmp_path / 'baseline'
    assert run('infer', '--model', out_dir / 'models' / 'cam0_sam0_ffb0' / MODEL_BEST, '--out_dir', baseline,
               '--split', 'st', '--prep_dir', prep_dir, '--patch_side', 32, '--no_watershed') == EXIT_OK
    row_dir = out_dir / 'rows' / 'cam0_sam0_ffb0_ws0'
    for sub_dir in [PROB_SUBDIR, MASK_SUBDIR]:
        assert same_tree(str(row_dir / sub_dir), str(baseline / sub_dir))


def test_ablate_test_time_table(dataset, trained, tmp_path):
    _, prep_dir = dataset
    checkpoints = tmp_path / 'checkpoints.json'
    checkpoints.write_text(json.dumps({'cam1_sam1_ffb1': os.path.join(trained, MODEL_BEST)}))
    out_dir = tmp_path / 'ablate'
    assert run('ablate', '--table', 'icn_ms', '--split', 'dt', '--prep_dir', prep_dir, '--out_dir', out_dir,
               '--patch_side', 32, '--checkpoints', checkpoints) == EXIT_OK
    table = read_tsv(out_dir / 'ablation.tsv')
    assert table[0] == ['icn', 'ms', 'recall', 'precision', 'f1', 'dice']
    assert [row[:2] for row in table[1:]] == [['0', '0'], ['0', '1'], ['1', '0'], ['1', '1']]
    with open(out_dir / 'ablation.txt') as f:
        assert f.readline().split() == ['ICN', 'MS', 'Recall', 'Precision', 'F1', 'Dice']

    assert run('ablate', '--table', 'modules', '--prep_dir', prep_dir, '--out_dir', tmp_path / 'x',
               '--checkpoints', checkpoints) == EXIT_USAGE


@pytest.mark.slow
def test_toy_training_reaches_target_dice(tmp_path):
    data_root = tmp_path / 'data'
    prep_dir = tmp_path / 'prep'
    model_dir = tmp_path / 'model'
    # default synthetic set: 200 train and 25 + 25 held-out images of 64x64
    assert run('synth', '--data_root', data_root, '--seed', 1) == EXIT_OK
    assert run('prep', '--data_root', data_root, '--out_dir', prep_dir, '--zoom_scales', 1.0) == EXIT_OK
    assert run('train', '--prep_dir', prep_dir, '--model_out_dir', model_dir, '--preset', 'toy',
               '--crop_side', 48, '--batch_size', 8, '--max_steps', 500, '--init_lr', 0.002,
               '--max_epochs', 150, '--seed', 1) == EXIT_OK
    for split in ['st', 'dt']:
        pred_dir = tmp_path / f'pred_{split}'
        assert run('infer', '--model', model_dir / MODEL_BEST, '--out_dir', pred_dir, '--split', split,
                   '--prep_dir', prep_dir, '--patch_side', 64, '--no_watershed') == EXIT_OK
        assert run('eval', '--pred_dir', pred_dir / MASK_SUBDIR, '--gt_dir', prep_dir / MASK_SUBDIR,
                   '--manifest', prep_dir / MANIFEST_FILE, '--split', split, '--out_dir', tmp_path / f'eval_{split}',
                   '--require', 'dice=0.85') == EXIT_OK
