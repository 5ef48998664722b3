#!/usr/bin/env python
"""Apply a trained model to a directory of images or to a split of a prepared directory.

Writes prob/<id>.png (16-bit probabilities with a JSON sidecar), masks/<id>.png and,
with the watershed enabled, labels/<id>.png (16-bit instance ids) and optional
overlay/<id>.png boundary images.
"""
import os
import sys
from collections import namedtuple

from aenet import utils
from aenet.config import STATS_FILE, PROB_SUBDIR, MASK_SUBDIR, LABEL_SUBDIR, OVERLAY_SUBDIR, OUTPUT_STRIDE, \
    MS_SCALES, PATCH_SIDE, BIN_THRESHOLD, MARKER_FRAC, MIN_SIZE, BG_MARGIN, SPLIT_NAMES
from aenet.errors import UsageError, DataError
from aenet.imaging import read_rgb_image, load_stats, normalize_global, normalize_individual, \
    write_mask_png, write_label_png, write_rgb_image
from aenet.inference import EnsembleConfig, check_ensemble_config, ensemble_passes, make_predictor, \
    multiscale_infer, binarize, save_probability
from aenet.model import load_checkpoint
from aenet.watershed import WatershedConfig, postprocess, overlay_boundaries
from aenet.cli.common import ArgumentParser, add_common_args, add_bool_arg, parse_args, run_main, pool_map, \
    find_image, list_images, image_dir, run_config_from_args, \
    NORM_GLOBAL, NORM_INDIVIDUAL, NORM_MODES
from aenet.cli.prep import read_prepared_manifest

InferJob = namedtuple('InferJob', ['model_file', 'image_id', 'image_file', 'out_dir', 'stats', 'norm_mode',
                                   'ensemble', 'watershed', 'overlay', 'batch_size'])

# One loaded model per worker process
_model_cache = {}


def get_predictor(model_file, batch_size):
    key = (model_file, batch_size)
    if key not in _model_cache:
        model, _, _, _ = load_checkpoint(model_file)
        _model_cache.clear()
        _model_cache[key] = make_predictor(model, batch_size)
    return _model_cache[key]


def normalize(image, norm_mode, stats):
    if norm_mode == NORM_INDIVIDUAL:
        return normalize_individual(image)
    if norm_mode != NORM_GLOBAL:
        raise UsageError(f'Unknown normalization mode: {norm_mode}, expected one of {NORM_MODES}')
    if stats is None:
        raise UsageError('Global normalization needs the statistics file')
    return normalize_global(image, stats)


def infer_one(job):
    """Predict one image and write its outputs, returns the # of instances (None without the watershed)."""
    image = read_rgb_image(job.image_file)
    h, w = image.shape[:2]
    if h < OUTPUT_STRIDE or w < OUTPUT_STRIDE:
        raise DataError(f'Image {job.image_file} is {h}x{w}, both sides must be at least {OUTPUT_STRIDE}')
    predictor = get_predictor(job.model_file, job.batch_size)
    prob = multiscale_infer(normalize(image, job.norm_mode, job.stats), predictor, job.ensemble)
    save_probability(os.path.join(job.out_dir, PROB_SUBDIR, job.image_id + '.png'), prob, job.ensemble)

    if job.watershed is None:
        write_mask_png(os.path.join(job.out_dir, MASK_SUBDIR, job.image_id + '.png'),
                       binarize(prob, job.ensemble.threshold))
        return None

    mask, labels = postprocess(prob, job.watershed)
    write_mask_png(os.path.join(job.out_dir, MASK_SUBDIR, job.image_id + '.png'), mask)
    write_label_png(os.path.join(job.out_dir, LABEL_SUBDIR, job.image_id + '.png'), labels)
    if job.overlay:
        write_rgb_image(os.path.join(job.out_dir, OVERLAY_SUBDIR, job.image_id + '.png'),
                        overlay_boundaries(image, labels))
    return int(labels.max(initial=0))


def predict_split(model_file, images, out_dir, log, stats=None, norm_mode=NORM_GLOBAL,
                  ensemble=EnsembleConfig(), watershed=WatershedConfig(), overlay=False,
                  batch_size=8, workers=1):
    """Run inference over a list of (image id, image file) pairs.

    :param watershed:  WatershedConfig or None to write plain thresholded masks
    """
    check_ensemble_config(ensemble)
    if watershed is not None and watershed.threshold != ensemble.threshold:
        watershed = watershed._replace(threshold=ensemble.threshold)
    log(f'Inference: {len(images)} images, normalization {norm_mode}, '
        f'{len(ensemble_passes(ensemble))} passes per image (scales {list(ensemble.scales)}, '
        f'flip {ensemble.flip}), watershed {"on" if watershed is not None else "off"}')
    sub_dirs = [PROB_SUBDIR, MASK_SUBDIR]
    if watershed is not None:
        sub_dirs.append(LABEL_SUBDIR)
        if overlay:
            sub_dirs.append(OVERLAY_SUBDIR)
    for sub_dir in sub_dirs:
        os.makedirs(os.path.join(out_dir, sub_dir), exist_ok=True)

    jobs = [InferJob(model_file=model_file, image_id=image_id, image_file=image_file, out_dir=out_dir,
                     stats=stats, norm_mode=norm_mode, ensemble=ensemble, watershed=watershed,
                     overlay=overlay, batch_size=batch_size)
            for image_id, image_file in images]
    instance_qtys = pool_map(infer_one, jobs, workers, desc='infer')
    utils.sync_out_streams()
    if watershed is not None:
        log(f'Instances found: {sum(instance_qtys)}')
    return instance_qtys


def select_images(args):
    """:return: a list of (image id, file name) pairs"""
    if (args.images is None) == (args.split is None):
        raise UsageError('Specify exactly one of --images and --split')
    if args.images is not None:
        ids = list_images(args.images)
        if not ids:
            raise UsageError(f'No images in {args.images}')
        return [(image_id, find_image(args.images, image_id)) for image_id in ids]
    if args.prep_dir is None:
        raise UsageError('--split requires --prep_dir')
    manifest, data_root = read_prepared_manifest(args.prep_dir)
    entries = getattr(manifest, args.split)
    if not entries:
        raise UsageError(f'The split {args.split} is empty')
    return [(e.image_id, find_image(image_dir(data_root), e.image_id)) for e in entries]


def ensemble_from_args(args):
    scales = args.scales if args.scales is not None else (MS_SCALES if args.multi_scale else [1.0])
    flip = args.flip if args.flip is not None else args.multi_scale
    return EnsembleConfig(scales=tuple(scales), flip=flip, threshold=args.threshold, patch_side=args.patch_side)


def main(argv=None):
    parser = ArgumentParser(description='AENet inference')
    add_common_args(parser)
    parser.add_argument('--model', metavar='checkpoint', help='a trained model', type=str, required=True)
    parser.add_argument('--out_dir', metavar='output dir', type=str, required=True)
    parser.add_argument('--images', metavar='image dir', help='a directory of images to segment',
                        type=str, default=None)
    parser.add_argument('--prep_dir', metavar='prepared dir', help='source of the statistics and splits',
                        type=str, default=None)
    parser.add_argument('--split', metavar='split', choices=SPLIT_NAMES, default=None,
                        help='segment a split of the prepared directory')
    parser.add_argument('--stats', metavar='stats file', help='statistics file (default: <prep_dir>/stats.json)',
                        type=str, default=None)
    parser.add_argument('--norm', metavar='normalization', choices=NORM_MODES, default=NORM_GLOBAL,
                        help='global: training-set statistics, individual: per-image statistics')
    parser.add_argument('--multi_scale', action='store_true', help='multi-scale ensemble')
    parser.add_argument('--scales', metavar='scale', type=float, nargs='+', default=None,
                        help='custom ensemble scales')
    add_bool_arg(parser, 'flip', None, 'horizontal flip ensemble (default: on with --multi_scale)')
    parser.add_argument('--threshold', metavar='threshold', type=float, default=BIN_THRESHOLD)
    parser.add_argument('--patch_side', metavar='patch side', type=int, default=PATCH_SIDE)
    parser.add_argument('--batch_size', metavar='batch size', type=int, default=8)
    add_bool_arg(parser, 'watershed', True, 'marker-controlled watershed post-processing')
    parser.add_argument('--marker_frac', type=float, default=MARKER_FRAC)
    parser.add_argument('--min_size', type=int, default=MIN_SIZE)
    parser.add_argument('--bg_margin', type=float, default=float(BG_MARGIN))
    parser.add_argument('--overlay', action='store_true', help='write boundary overlays')

    args = parse_args(parser, argv)

    images = select_images(args)
    stats_file = args.stats
    if stats_file is None and args.prep_dir is not None:
        stats_file = os.path.join(args.prep_dir, STATS_FILE)
    stats = None if stats_file is None else load_stats(stats_file)
    ensemble = ensemble_from_args(args)
    try:
        check_ensemble_config(ensemble)
    except ValueError as e:
        raise UsageError(str(e))
    if not 0 < args.marker_frac < 1:
        raise UsageError(f'Marker fraction must be in (0, 1), got {args.marker_frac}')
    watershed = WatershedConfig(threshold=args.threshold, marker_frac=args.marker_frac, min_size=args.min_size,
                                bg_margin=args.bg_margin) if args.watershed else None

    utils.set_all_seeds(args.seed)
    log = utils.RunLog(args.out_dir)
    log('Run configuration:', run_config_from_args(args))
    predict_split(args.model, images, args.out_dir, log, stats=stats, norm_mode=args.norm, ensemble=ensemble,
                  watershed=watershed, overlay=args.overlay, batch_size=args.batch_size, workers=args.workers)


if __name__ == '__main__':
    sys.exit(run_main(main))
