#!/usr/bin/env python
"""Score predicted masks against ground-truth masks.

Writes report.csv (per-image rows and the aggregate row) and summary.txt. Exit
code 3 when a --require threshold is not met.
"""
import os
import sys

from aenet import utils
from aenet.config import SPLIT_NAMES
from aenet.errors import UsageError, DataError, UnmetThresholdError
from aenet.imaging import read_mask_png
from aenet.metrics import confusion, scores, sum_counts, aggregate, aggregate_by_group, write_report_csv, \
    format_summary, parse_requirement, check_thresholds, AGGREGATE_MICRO, AGGREGATE_MODES
from aenet.cli.common import ArgumentParser, add_common_args, parse_args, run_main, pool_map, list_images, \
    find_image, read_manifest

REPORT_FILE = 'report.csv'
SUMMARY_FILE = 'summary.txt'


def match_ids(pred_dir, gt_dir, subset=None):
    """Sorted ids present in both directories, unmatched ids on either side are a data error.

    With a subset (e.g., the ids of one split) only these ids are scored and all must be present.
    """
    pred_ids = list_images(pred_dir)
    gt_ids = list_images(gt_dir)
    if subset is not None:
        subset = sorted(subset)
        if not subset:
            raise UsageError('Empty image subset')
        missing_pred = [i for i in subset if i not in set(pred_ids)]
        missing_gt = [i for i in subset if i not in set(gt_ids)]
        if missing_pred or missing_gt:
            raise DataError(f'Unmatched identifiers: no prediction: {missing_pred} no ground truth: {missing_gt}')
        return subset
    if not pred_ids:
        raise UsageError(f'No predicted masks in {pred_dir}')
    if not gt_ids:
        raise UsageError(f'No ground-truth masks in {gt_dir}')
    only_pred = sorted(set(pred_ids) - set(gt_ids))
    only_gt = sorted(set(gt_ids) - set(pred_ids))
    if only_pred or only_gt:
        raise DataError(f'Unmatched identifiers: predictions only: {only_pred} ground truth only: {only_gt}')
    return pred_ids


def score_one(files):
    pred_file, gt_file = files
    return confusion(read_mask_png(pred_file), read_mask_png(gt_file))


def evaluate_dirs(pred_dir, gt_dir, workers=1, ids=None):
    """:return: a list of (image id, ConfusionCounts, MetricReport)"""
    if ids is None:
        ids = match_ids(pred_dir, gt_dir)
    counts = pool_map(score_one, [(find_image(pred_dir, i), find_image(gt_dir, i)) for i in ids], workers,
                      desc='eval')
    return [(image_id, c, scores(c)) for image_id, c in zip(ids, counts)]


def write_reports(out_dir, rows, mode, title=None, groups=None):
    """Write the CSV and the text summary, returns the aggregate MetricReport and the summary text."""
    counts = [c for _, c, _ in rows]
    agg = aggregate(counts, mode)
    write_report_csv(os.path.join(out_dir, REPORT_FILE), rows, agg, sum_counts(counts))
    text = format_summary(agg, len(rows), title)
    if groups is not None:
        for group, report in aggregate_by_group(counts, groups, mode).items():
            text += '\n' + format_summary(report, groups.count(group), f'Organ: {group}')
    with open(os.path.join(out_dir, SUMMARY_FILE), 'w') as f:
        f.write(text)
    return agg, text


def organ_tags(manifest_file, ids):
    manifest = read_manifest(manifest_file)
    organ = {e.image_id: e.organ for split in manifest for e in split}
    missing = [i for i in ids if i not in organ]
    if missing:
        raise DataError(f'Images missing from the manifest {manifest_file}: {missing}')
    return [organ[i] for i in ids]


def main(argv=None):
    parser = ArgumentParser(description='Pixel-level evaluation of predicted masks')
    add_common_args(parser)
    parser.add_argument('--pred_dir', metavar='predicted masks', type=str, required=True)
    parser.add_argument('--gt_dir', metavar='ground-truth masks', type=str, required=True)
    parser.add_argument('--out_dir', metavar='report dir', type=str, required=True)
    parser.add_argument('--aggregate', metavar='aggregation', choices=AGGREGATE_MODES, default=AGGREGATE_MICRO,
                        help='micro: score summed counts, macro: average per-image scores')
    parser.add_argument('--manifest', metavar='split manifest', type=str, default=None,
                        help='a manifest with organ tags (needed by --group_by_organ)')
    parser.add_argument('--split', metavar='split', choices=SPLIT_NAMES, default=None,
                        help='score only the images of this manifest split')
    parser.add_argument('--group_by_organ', action='store_true', help='add per-organ summaries')
    parser.add_argument('--require', metavar='metric=value', action='append', default=[],
                        help='a minimum score, may be repeated')
    parser.add_argument('--title', metavar='title', type=str, default=None)

    args = parse_args(parser, argv)

    try:
        requirements = [parse_requirement(r) for r in args.require]
    except ValueError as e:
        raise UsageError(str(e))
    if (args.group_by_organ or args.split is not None) and args.manifest is None:
        raise UsageError('--group_by_organ and --split require --manifest')

    log = utils.RunLog(args.out_dir)
    subset = None
    if args.split is not None:
        subset = [e.image_id for e in getattr(read_manifest(args.manifest), args.split)]
    ids = match_ids(args.pred_dir, args.gt_dir, subset)
    groups = organ_tags(args.manifest, ids) if args.group_by_organ else None
    rows = evaluate_dirs(args.pred_dir, args.gt_dir, args.workers, ids)
    agg, text = write_reports(args.out_dir, rows, args.aggregate, args.title, groups)
    utils.sync_out_streams()
    log(text)

    unmet = check_thresholds(agg, requirements)
    if unmet:
        raise UnmetThresholdError('Unmet score requirements: ' +
                                  ', '.join(f'{k} {actual:.6f} < {required:g}' for k, required, actual in unmet))


if __name__ == '__main__':
    sys.exit(run_main(main))
