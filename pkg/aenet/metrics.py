# Pixel-level evaluation: confusion counts, scores, aggregation and reports
import csv
import collections

import numpy as np

from aenet.config import CELL_CLASS
from aenet.errors import DataError, ShapeError

METRIC_ACCURACY = 'accuracy'
METRIC_RECALL = 'recall'
METRIC_PRECISION = 'precision'
METRIC_F1 = 'f1'
METRIC_MIOU = 'miou'
METRIC_DICE = 'dice'
METRIC_DICE_PAPER = 'dice_paper'

METRIC_LIST = [METRIC_ACCURACY, METRIC_RECALL, METRIC_PRECISION, METRIC_F1,
               METRIC_MIOU, METRIC_DICE, METRIC_DICE_PAPER]

METRIC_DICT = {
    METRIC_ACCURACY: 'Accuracy',
    METRIC_RECALL: 'Recall',
    METRIC_PRECISION: 'Precision',
    METRIC_F1: 'F1',
    METRIC_MIOU: 'mIoU',
    METRIC_DICE: 'Dice',
    METRIC_DICE_PAPER: 'Dice (2TP/(TP+FP+FN))',
}

HEADLINE_METRICS = [METRIC_F1, METRIC_DICE, METRIC_MIOU]

AGGREGATE_MICRO = 'micro'
AGGREGATE_MACRO = 'macro'
AGGREGATE_MODES = [AGGREGATE_MICRO, AGGREGATE_MACRO]

AGGREGATE_ROW_ID = '__aggregate__'

ConfusionCounts = collections.namedtuple('ConfusionCounts', 'tp tn fp fn')

MetricReport = collections.namedtuple('MetricReport', METRIC_LIST + ['degenerate'])


def confusion(pred, gt):
    """Tally pixels with the cell class (label 0) as positive.

    :param pred: predicted mask
    :param gt:   ground-truth mask of the same shape
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f'Prediction shape {pred.shape} differs from ground truth shape {gt.shape}')
    for name, m in (('prediction', pred), ('ground truth', gt)):
        if not np.all((m == 0) | (m == 1)):
            raise DataError(f'The {name} mask has values other than 0 and 1')
    p = pred == CELL_CLASS
    g = gt == CELL_CLASS
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size - tp - fp - fn)
    return ConfusionCounts(tp=tp, tn=tn, fp=fp, fn=fn)


def sum_counts(counts):
    tp = tn = fp = fn = 0
    for c in counts:
        tp += c.tp
        tn += c.tn
        fp += c.fp
        fn += c.fn
    return ConfusionCounts(tp=tp, tn=tn, fp=fp, fn=fn)


def scores(c):
    """Compute all scores from confusion counts.

    A ratio with a zero denominator is 0 and its name goes to ``degenerate``.
    A class absent from both prediction and ground truth does not enter the mIoU mean.
    """
    total = c.tp + c.tn + c.fp + c.fn
    if total <= 0:
        raise DataError('Cannot score empty confusion counts')
    degenerate = []

    def ratio(name, num, den):
        if den == 0:
            degenerate.append(name)
            return 0.0
        return num / den

    recall = ratio(METRIC_RECALL, c.tp, c.tp + c.fn)
    precision = ratio(METRIC_PRECISION, c.tp, c.tp + c.fp)
    f1 = ratio(METRIC_F1, 2 * precision * recall, precision + recall)

    ious = []
    for name, inter, union in (('iou_cell', c.tp, c.tp + c.fp + c.fn),
                               ('iou_background', c.tn, c.tn + c.fn + c.fp)):
        if union == 0:
            degenerate.append(name)
        else:
            ious.append(inter / union)

    return MetricReport(accuracy=(c.tp + c.tn) / total,
                        recall=recall,
                        precision=precision,
                        f1=f1,
                        miou=float(np.mean(ious)),
                        dice=ratio(METRIC_DICE, 2 * c.tp, 2 * c.tp + c.fp + c.fn),
                        dice_paper=ratio(METRIC_DICE_PAPER, 2 * c.tp, c.tp + c.fp + c.fn),
                        degenerate=tuple(degenerate))


def aggregate(counts, mode=AGGREGATE_MICRO):
    """Score a split.

    :param counts:  a list of per-image ConfusionCounts
    :param mode:    micro: score the summed counts; macro: average per-image scores
    """
    counts = list(counts)
    if not counts:
        raise DataError('Cannot aggregate an empty split')
    if mode == AGGREGATE_MICRO:
        return scores(sum_counts(counts))
    if mode != AGGREGATE_MACRO:
        raise ValueError(f'Unknown aggregation mode: {mode}, expected one of {AGGREGATE_MODES}')
    reports = [scores(c) for c in counts]
    vals = {k: float(np.mean([getattr(r, k) for r in reports])) for k in METRIC_LIST}
    degenerate = sorted({d for r in reports for d in r.degenerate})
    return MetricReport(degenerate=tuple(degenerate), **vals)


def aggregate_by_group(counts, groups, mode=AGGREGATE_MICRO):
    """Aggregate separately per group (e.g., organ): returns a dictionary sorted by the group name."""
    if len(counts) != len(groups):
        raise ValueError(f'{len(counts)} counts but {len(groups)} group tags')
    by_group = collections.defaultdict(list)
    for c, g in zip(counts, groups):
        by_group[g].append(c)
    return {g: aggregate(by_group[g], mode) for g in sorted(by_group)}


def report_row(row_id, c, report):
    return [row_id, c.tp, c.tn, c.fp, c.fn] + \
           ['%.6f' % getattr(report, k) for k in METRIC_LIST] + \
           [';'.join(report.degenerate)]


def write_report_csv(file_name, rows, agg_report, agg_counts):
    """Write per-image rows followed by the aggregate row.

    :param file_name:   output CSV file
    :param rows:        a list of (image id, ConfusionCounts, MetricReport)
    :param agg_report:  the aggregate report
    :param agg_counts:  summed counts of the split
    """
    with open(file_name, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['image_id'] + list(ConfusionCounts._fields) + METRIC_LIST + ['degenerate'])
        for row_id, c, report in rows:
            writer.writerow(report_row(row_id, c, report))
        writer.writerow(report_row(AGGREGATE_ROW_ID, agg_counts, agg_report))


def read_report_csv(file_name):
    """Read a report: returns a dictionary of metric dictionaries keyed by the image id."""
    res = {}
    with open(file_name, newline='') as f:
        for ln, row in enumerate(csv.DictReader(f), start=2):
            try:
                res[row['image_id']] = {k: float(row[k]) for k in METRIC_LIST}
            except (KeyError, ValueError):
                raise DataError(f'Invalid report line {ln} in {file_name}')
    return res


def format_summary(report, image_qty, title=None):
    """Aligned text report, one metric per line."""
    text = ''
    if title:
        text += f'{title}\n'
    text += f'# of images:  {image_qty}\n'
    maxl = max(len(METRIC_DICT[k]) for k in METRIC_LIST)
    for k in METRIC_LIST:
        name = METRIC_DICT[k] + ': ' + ' ' * (maxl - len(METRIC_DICT[k]))
        text += (name + '%f') % getattr(report, k) + '\n'
    if report.degenerate:
        text += 'Degenerate (zero denominator): ' + ', '.join(report.degenerate) + '\n'
    return text


def parse_requirement(spec):
    """Parse 'metric=value' into (metric, minimum value)."""
    name, sep, val = spec.partition('=')
    name = name.strip()
    if not sep or name not in METRIC_LIST:
        raise ValueError(f'Invalid requirement "{spec}", expected <metric>=<value> with metric in {METRIC_LIST}')
    return name, float(val)


def check_thresholds(report, requirements):
    """:return: a list of (metric, required, actual) for unmet requirements"""
    return [(k, v, getattr(report, k)) for k, v in requirements if getattr(report, k) < v]
