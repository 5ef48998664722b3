#!/usr/bin/env python
"""Ablation grids: module toggles (CAM, SAM, FFB, WS) and test-time options (ICN, MS).

Each row is inferred and scored on one test split. Models come from a JSON file
mapping model keys (e.g., cam1_sam0_ffb0) to checkpoints or are trained here with
the given budget. The WS row reuses the model of the row before it; test-time rows
all use the full model.
"""
import os
import sys
from collections import namedtuple

from aenet import utils
from aenet.config import STATS_FILE, MASK_SUBDIR, MODEL_BEST, SPLIT_ST, SPLIT_DT, ENCODER_VGG16, ENCODER_TOY, \
    PATCH_SIDE, MS_SCALES
from aenet.errors import UsageError, DataError
from aenet.imaging import load_stats
from aenet.inference import EnsembleConfig
from aenet.metrics import METRIC_DICT, METRIC_F1, METRIC_DICE, METRIC_MIOU, METRIC_RECALL, METRIC_PRECISION, \
    AGGREGATE_MICRO, AGGREGATE_MODES
from aenet.model import make_model_config
from aenet.watershed import WatershedConfig
from aenet.cli.common import ArgumentParser, add_common_args, parse_args, run_main, find_image, image_dir, \
    NORM_GLOBAL, NORM_INDIVIDUAL
from aenet.cli.prep import read_prepared_manifest
from aenet.cli.train import add_train_args, train_conf_from_args, run_training
from aenet.cli.infer import predict_split
from aenet.cli.evaluate import match_ids, evaluate_dirs, write_reports

TABLE_MODULES = 'modules'
TABLE_ICN_MS = 'icn_ms'
TABLES = [TABLE_MODULES, TABLE_ICN_MS]

TABLE_FILE = 'ablation.txt'
TSV_FILE = 'ablation.tsv'

AblationRow = namedtuple('AblationRow', ['cam', 'sam', 'ffb', 'ws', 'icn', 'ms'])

MODULE_ROWS = [
    AblationRow(cam=False, sam=False, ffb=False, ws=False, icn=False, ms=False),
    AblationRow(cam=True, sam=False, ffb=False, ws=False, icn=False, ms=False),
    AblationRow(cam=True, sam=True, ffb=False, ws=False, icn=False, ms=False),
    AblationRow(cam=True, sam=True, ffb=True, ws=False, icn=False, ms=False),
    AblationRow(cam=True, sam=True, ffb=True, ws=True, icn=False, ms=False),
]

TEST_TIME_ROWS = [
    AblationRow(cam=True, sam=True, ffb=True, ws=True, icn=False, ms=False),
    AblationRow(cam=True, sam=True, ffb=True, ws=True, icn=False, ms=True),
    AblationRow(cam=True, sam=True, ffb=True, ws=True, icn=True, ms=False),
    AblationRow(cam=True, sam=True, ffb=True, ws=True, icn=True, ms=True),
]

TABLE_SPECS = {
    TABLE_MODULES: (MODULE_ROWS, ['cam', 'sam', 'ffb', 'ws'], [METRIC_F1, METRIC_DICE, METRIC_MIOU]),
    TABLE_ICN_MS: (TEST_TIME_ROWS, ['icn', 'ms'], [METRIC_RECALL, METRIC_PRECISION, METRIC_F1, METRIC_DICE]),
}


def model_key(row):
    return f'cam{int(row.cam)}_sam{int(row.sam)}_ffb{int(row.ffb)}'


def row_name(row, toggles):
    return '_'.join(f'{t}{int(getattr(row, t))}' for t in toggles)


def format_table(rows, toggles, metrics, reports):
    """Aligned text table: one column per toggle (0/1) and per metric."""
    header = [t.upper() for t in toggles] + [METRIC_DICT[m] for m in metrics]
    body = [[str(int(getattr(row, t))) for t in toggles] + ['%.3f' % getattr(rep, m) for m in metrics]
            for row, rep in zip(rows, reports)]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ['  '.join(cell.rjust(w) for cell, w in zip(r, widths)) for r in [header] + body]
    return '\n'.join(lines) + '\n'


def write_tsv(file_name, rows, toggles, metrics, reports):
    with open(file_name, 'w') as f:
        f.write('\t'.join(toggles + metrics) + '\n')
        for row, rep in zip(rows, reports):
            f.write('\t'.join([str(int(getattr(row, t))) for t in toggles] +
                              ['%.6f' % getattr(rep, m) for m in metrics]) + '\n')


def get_models(rows, checkpoints, train_fn, log):
    """Map every model key of the grid to a checkpoint, training the missing ones when possible."""
    res = {}
    for row in rows:
        key = model_key(row)
        if key in res:
            continue
        if key in checkpoints:
            res[key] = checkpoints[key]
            continue
        if train_fn is None:
            raise UsageError(f'No checkpoint for the model {key} and no training budget (--max_steps)')
        log(f'Training the model {key}')
        res[key] = train_fn(row, key)
    return res


def run_ablation(table, split, prep_dir, out_dir, model_files, log, patch_side=PATCH_SIDE, batch_size=8,
                 aggregate_mode=AGGREGATE_MICRO, workers=1):
    """Infer and score every row of a table, returns the aggregate reports in the row order."""
    rows, toggles, metrics = TABLE_SPECS[table]
    manifest, data_root = read_prepared_manifest(prep_dir)
    entries = getattr(manifest, split)
    if not entries:
        raise DataError(f'The split {split} is empty')
    images = [(e.image_id, find_image(image_dir(data_root), e.image_id)) for e in entries]
    stats = load_stats(os.path.join(prep_dir, STATS_FILE))
    gt_dir = os.path.join(prep_dir, MASK_SUBDIR)

    reports = []
    for row in rows:
        name = row_name(row, toggles)
        row_dir = os.path.join(out_dir, 'rows', name)
        log(f'Row {name}: model {model_key(row)}')
        ensemble = EnsembleConfig(scales=tuple(MS_SCALES) if row.ms else (1.0,), flip=row.ms, patch_side=patch_side)
        predict_split(model_files[model_key(row)], images, row_dir, log, stats=stats,
                      norm_mode=NORM_INDIVIDUAL if row.icn else NORM_GLOBAL, ensemble=ensemble,
                      watershed=WatershedConfig() if row.ws else None, batch_size=batch_size, workers=workers)
        pred_dir = os.path.join(row_dir, MASK_SUBDIR)
        ids = match_ids(pred_dir, gt_dir, [image_id for image_id, _ in images])
        agg, _ = write_reports(row_dir, evaluate_dirs(pred_dir, gt_dir, workers, ids), aggregate_mode, name)
        reports.append(agg)

    text = format_table(rows, toggles, metrics, reports)
    with open(os.path.join(out_dir, TABLE_FILE), 'w') as f:
        f.write(text)
    write_tsv(os.path.join(out_dir, TSV_FILE), rows, toggles, metrics, reports)
    log(f'Ablation ({table}, split {split}):\n' + text)
    return reports


def main(argv=None):
    parser = ArgumentParser(description='Ablation sweeps over module toggles and test-time options')
    add_common_args(parser)
    parser.add_argument('--table', metavar='table', choices=TABLES, default=TABLE_MODULES,
                        help=f'{TABLE_MODULES}: CAM/SAM/FFB/WS rows, {TABLE_ICN_MS}: ICN/MS rows')
    parser.add_argument('--split', metavar='split', choices=[SPLIT_ST, SPLIT_DT], default=SPLIT_ST)
    parser.add_argument('--prep_dir', metavar='prepared dir', type=str, required=True)
    parser.add_argument('--out_dir', metavar='output dir', type=str, required=True)
    parser.add_argument('--checkpoints', metavar='JSON file', type=str, default=None,
                        help='a JSON dictionary: model key (e.g., cam1_sam1_ffb0) -> checkpoint')
    parser.add_argument('--preset', metavar='encoder preset', choices=[ENCODER_VGG16, ENCODER_TOY],
                        default=ENCODER_VGG16)
    parser.add_argument('--patch_side', metavar='patch side', type=int, default=PATCH_SIDE)
    parser.add_argument('--infer_batch_size', metavar='batch size', type=int, default=8)
    parser.add_argument('--aggregate', metavar='aggregation', choices=AGGREGATE_MODES, default=AGGREGATE_MICRO)
    add_train_args(parser)

    args = parse_args(parser, argv)

    checkpoints = {}
    if args.checkpoints is not None:
        try:
            checkpoints = utils.read_json(args.checkpoints)
        except (OSError, ValueError) as e:
            raise UsageError(f'Cannot read checkpoints from {args.checkpoints}: {e}')
        if not isinstance(checkpoints, dict):
            raise UsageError(f'Expected a JSON dictionary in {args.checkpoints}')

    utils.set_all_seeds(args.seed)
    log = utils.RunLog(args.out_dir)

    train_fn = None
    if args.max_steps is not None:
        train_conf = train_conf_from_args(args)

        def train_fn(row, key):
            model_dir = os.path.join(args.out_dir, 'models', key)
            model_conf = make_model_config(args.preset, use_cam=row.cam, use_sam=row.sam, use_ffb=row.ffb,
                                           seed=args.seed)
            run_training(args.prep_dir, model_dir, model_conf, train_conf, utils.RunLog(model_dir),
                         crop_side=args.crop_side, max_steps=args.max_steps, seed=args.seed)
            return os.path.join(model_dir, MODEL_BEST)

    rows = TABLE_SPECS[args.table][0]
    model_files = get_models(rows, checkpoints, train_fn, log)
    run_ablation(args.table, args.split, args.prep_dir, args.out_dir, model_files, log,
                 patch_side=args.patch_side, batch_size=args.infer_batch_size, aggregate_mode=args.aggregate,
                 workers=args.workers)


if __name__ == '__main__':
    sys.exit(run_main(main))
