import numpy as np
import pytest

from aenet.errors import DataError, ShapeError
from aenet.metrics import ConfusionCounts, METRIC_LIST, METRIC_F1, METRIC_DICE, METRIC_RECALL, METRIC_PRECISION, \
    METRIC_DICE_PAPER, AGGREGATE_MICRO, AGGREGATE_MACRO, AGGREGATE_ROW_ID, confusion, sum_counts, scores, aggregate, \
    aggregate_by_group, write_report_csv, read_report_csv, format_summary, parse_requirement, check_thresholds


def enumerate_counts(pred, gt):
    tp = tn = fp = fn = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if p == 0 and g == 0:
            tp += 1
        elif p == 0:
            fp += 1
        elif g == 0:
            fn += 1
        else:
            tn += 1
    return ConfusionCounts(tp=tp, tn=tn, fp=fp, fn=fn)


def test_confusion_matches_enumeration(rng):
    for _ in range(1000):
        pred = rng.integers(0, 2, size=(16, 16))
        gt = rng.integers(0, 2, size=(16, 16))
        c = confusion(pred, gt)
        assert c == enumerate_counts(pred, gt)
        assert sum(c) == 256


def test_f1_equals_dice(rng):
    for _ in range(200):
        pred = (rng.random((16, 16)) < rng.uniform(0.05, 0.95)).astype(np.uint8)
        gt = (rng.random((16, 16)) < rng.uniform(0.05, 0.95)).astype(np.uint8)
        report = scores(confusion(pred, gt))
        if not report.degenerate:
            assert report.f1 == pytest.approx(report.dice, abs=1e-12)


def test_four_pixel_example():
    c = confusion(np.array([0, 0, 1, 1]), np.array([0, 1, 0, 1]))
    assert c == ConfusionCounts(tp=1, tn=1, fp=1, fn=1)
    report = scores(c)
    assert report.accuracy == 0.5
    assert report.recall == 0.5 and report.precision == 0.5
    assert report.f1 == pytest.approx(0.5)
    assert report.dice == pytest.approx(0.5)
    assert report.dice_paper == pytest.approx(2 / 3)
    assert report.miou == pytest.approx(1 / 3)
    assert report.degenerate == ()


def test_degenerate_scores():
    report = scores(confusion(np.ones((3, 3)), np.ones((3, 3))))
    assert report.recall == 0 and report.precision == 0 and report.f1 == 0 and report.dice == 0
    assert METRIC_RECALL in report.degenerate and METRIC_PRECISION in report.degenerate
    assert report.miou == 1.0
    assert report.accuracy == 1.0

    perfect = scores(confusion(np.zeros((2, 2)), np.zeros((2, 2))))
    assert perfect.f1 == 1.0 and perfect.dice == 1.0 and perfect.miou == 1.0

    with pytest.raises(DataError):
        scores(ConfusionCounts(0, 0, 0, 0))


def test_confusion_input_checks():
    with pytest.raises(ShapeError):
        confusion(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(DataError):
        confusion(np.full((2, 2), 255), np.zeros((2, 2)))


def test_micro_and_macro():
    a = ConfusionCounts(tp=10, tn=80, fp=0, fn=10)
    b = ConfusionCounts(tp=0, tn=90, fp=10, fn=0)
    micro = aggregate([a, b], AGGREGATE_MICRO)
    assert micro == scores(sum_counts([a, b]))
    assert micro.recall == pytest.approx(0.5)
    assert micro.precision == pytest.approx(0.5)
    macro = aggregate([a, b], AGGREGATE_MACRO)
    assert macro.recall == pytest.approx(0.25)
    assert METRIC_RECALL in macro.degenerate
    with pytest.raises(DataError):
        aggregate([])
    with pytest.raises(ValueError):
        aggregate([a], 'weighted')


def test_group_aggregation():
    a = ConfusionCounts(tp=1, tn=1, fp=1, fn=1)
    b = ConfusionCounts(tp=4, tn=0, fp=0, fn=0)
    res = aggregate_by_group([a, b, a], ['liver', 'breast', 'liver'])
    assert list(res) == ['breast', 'liver']
    assert res['breast'].f1 == 1.0
    assert res['liver'] == scores(sum_counts([a, a]))
    with pytest.raises(ValueError):
        aggregate_by_group([a], ['x', 'y'])


def test_report_csv(tmp_path):
    c1 = ConfusionCounts(tp=3, tn=5, fp=1, fn=1)
    c2 = ConfusionCounts(tp=0, tn=9, fp=1, fn=0)
    rows = [('img_a', c1, scores(c1)), ('img_b', c2, scores(c2))]
    agg = aggregate([c1, c2])
    fn = str(tmp_path / 'report.csv')
    write_report_csv(fn, rows, agg, sum_counts([c1, c2]))
    back = read_report_csv(fn)
    assert list(back) == ['img_a', 'img_b', AGGREGATE_ROW_ID]
    assert back['img_a'][METRIC_DICE] == pytest.approx(scores(c1).dice, abs=1e-6)
    assert back[AGGREGATE_ROW_ID][METRIC_F1] == pytest.approx(agg.f1, abs=1e-6)

    (tmp_path / 'bad.csv').write_text('image_id,f1\nx,abc\n')
    with pytest.raises(DataError):
        read_report_csv(str(tmp_path / 'bad.csv'))


def test_summary_text():
    report = scores(ConfusionCounts(tp=1, tn=1, fp=1, fn=1))
    text = format_summary(report, 3, title='Split st')
    lines = text.splitlines()
    assert lines[0] == 'Split st'
    assert lines[1] == '# of images:  3'
    assert len(lines) == 2 + len(METRIC_LIST)
    assert any(ln.startswith('Dice:') and ln.endswith('0.500000') for ln in lines)
    # values are aligned
    assert len({ln.index('0.') for ln in lines[2:]}) == 1


def test_requirements():
    assert parse_requirement('dice=0.8') == ('dice', 0.8)
    assert parse_requirement(' f1 =0.5') == ('f1', 0.5)
    for bad in ['dice', 'jaccard=0.5', 'dice=high']:
        with pytest.raises(ValueError):
            parse_requirement(bad)
    report = scores(ConfusionCounts(tp=1, tn=1, fp=1, fn=1))
    assert check_thresholds(report, [('dice', 0.4), ('f1', 0.5)]) == []
    unmet = check_thresholds(report, [('dice', 0.9), ('accuracy', 0.1)])
    assert unmet == [('dice', 0.9, report.dice)]


def test_swapping_prediction_and_truth_swaps_precision_and_recall(rng):
    for _ in range(200):
        pred = rng.integers(0, 2, size=(8, 8))
        gt = rng.integers(0, 2, size=(8, 8))
        forward = scores(confusion(pred, gt))
        backward = scores(confusion(gt, pred))
        assert forward.precision == backward.recall
        assert forward.recall == backward.precision
        assert forward.f1 == pytest.approx(backward.f1, abs=1e-12)


def test_all_background_is_degenerate():
    report = scores(confusion(np.ones((4, 4)), np.ones((4, 4))))
    assert report.f1 == report.dice == report.dice_paper == 0.0
    assert set(report.degenerate) == {METRIC_RECALL, METRIC_PRECISION, METRIC_F1, METRIC_DICE,
                                      METRIC_DICE_PAPER, 'iou_cell'}


def test_perfect_prediction_scores():
    mask = np.array([[0, 1], [1, 0]])
    report = scores(confusion(mask, mask))
    assert report.f1 == report.dice == report.miou == report.accuracy == 1.0
    # the 2TP/(TP+FP+FN) variant exceeds 1 on a perfect match
    assert report.dice_paper == 2.0
    assert report.degenerate == ()
