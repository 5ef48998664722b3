#!/usr/bin/env python
"""Prepare a dataset: rasterize masks, build the augmented training pool and compute color statistics.

Output layout (under --out_dir):
    masks/<id>.png       ground-truth masks of every split (cell 255, background 0)
    pool/<pool id>.png   augmented training images, pool/<pool id>_mask.png their masks
    pool.csv             pool index
    stats.json           per-channel mean/std of the original training images
    manifest.json        the validated split manifest plus the dataset root
"""
import os
import csv
import sys
from collections import namedtuple

from aenet import utils
from aenet.config import MANIFEST_FILE, STATS_FILE, POOL_INDEX_FILE, MASK_SUBDIR, POOL_SUBDIR, \
    ANNOT_SUBDIR, ZOOM_SCALES, PIXEL_SCALE, MONUSEG_SPLIT_QTY, SPLIT_TRAIN
from aenet.errors import DataError, UsageError
from aenet.imaging import read_rgb_image, read_annotations, rasterize, augment_geometric, augment_zoom, \
    compute_stats, save_stats, write_rgb_image, write_mask_png, GEOMETRIC_TRANSFORMS
from aenet.cli.common import ArgumentParser, add_common_args, parse_args, run_main, pool_map, \
    read_manifest, validate_manifest, manifest_to_json, find_image, image_dir

POOL_FIELDS = ['pool_id', 'image_id', 'organ', 'transform', 'scale', 'image_file', 'mask_file']

PrepJob = namedtuple('PrepJob', ['data_root', 'out_dir', 'image_id', 'organ', 'is_train', 'zoom_scales'])
PoolEntry = namedtuple('PoolEntry', POOL_FIELDS)


def annotation_file(data_root, image_id):
    return os.path.join(data_root, ANNOT_SUBDIR, image_id + '.xml')


def check_annotations(data_root, manifest):
    """Every image of the manifest must have an annotation file: all missing files are listed at once."""
    missing = []
    for split in manifest:
        for e in split:
            fn = annotation_file(data_root, e.image_id)
            if not os.path.exists(fn):
                missing.append(fn)
    if missing:
        raise DataError(f'Missing {len(missing)} annotation file(s): ' + ', '.join(missing))


def pool_id(image_id, transform, scale):
    return f'{image_id}_{transform}_s{scale:g}'


def prepare_one(job):
    """Rasterize one image's mask and, for training images, write its augmented variants.

    :return: a list of PoolEntry (empty for test images), the stage-1 variant count
    """
    image = read_rgb_image(find_image(image_dir(job.data_root), job.image_id))
    mask = rasterize(read_annotations(annotation_file(job.data_root, job.image_id)), image.shape)
    write_mask_png(os.path.join(job.out_dir, MASK_SUBDIR, job.image_id + '.png'), mask)
    if not job.is_train:
        return [], 0

    stage1 = augment_geometric([(image, mask)])
    entries = []
    for item in augment_zoom(stage1, job.zoom_scales):
        pid = pool_id(job.image_id, item.transform, item.scale)
        image_file = os.path.join(POOL_SUBDIR, pid + '.png')
        mask_file = os.path.join(POOL_SUBDIR, pid + '_mask.png')
        write_rgb_image(os.path.join(job.out_dir, image_file), item.image)
        write_mask_png(os.path.join(job.out_dir, mask_file), item.mask)
        entries.append(PoolEntry(pool_id=pid, image_id=job.image_id, organ=job.organ, transform=item.transform,
                                 scale=f'{item.scale:g}', image_file=image_file, mask_file=mask_file))
    return entries, len(stage1)


def write_pool_index(file_name, entries):
    with open(file_name, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(POOL_FIELDS)
        for e in entries:
            writer.writerow(list(e))


def read_pool_index(file_name):
    res = []
    with open(file_name, newline='') as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != POOL_FIELDS:
            raise DataError(f'Unexpected header {header} in the pool index {file_name}')
        for ln, row in enumerate(reader, start=2):
            if len(row) != len(POOL_FIELDS):
                raise DataError(f'Invalid pool index line {ln} in {file_name}')
            res.append(PoolEntry(*row))
    return res


def read_prepared_manifest(prep_dir):
    """:return: SplitManifest, dataset root"""
    fn = os.path.join(prep_dir, MANIFEST_FILE)
    data = utils.read_json(fn)
    if 'data_root' not in data:
        raise DataError(f'No data_root in {fn}, is it a prepared directory?')
    return read_manifest(fn), data['data_root']


def main(argv=None):
    parser = ArgumentParser(description='Prepare masks, the augmented pool and normalization statistics')
    add_common_args(parser)
    parser.add_argument('--data_root', metavar='dataset root', help='a directory with images/, annotations/ '
                        'and a manifest', type=str, required=True)
    parser.add_argument('--manifest', metavar='split manifest', help='split manifest (default: <data_root>/manifest.json)',
                        type=str, default=None)
    parser.add_argument('--out_dir', metavar='prepared dir', help='output directory', type=str, required=True)
    parser.add_argument('--zoom_scales', metavar='zoom scales', help='zoom augmentation scales',
                        type=float, nargs='+', default=list(ZOOM_SCALES))
    parser.add_argument('--validate_monuseg', action='store_true',
                        help=f'require the split sizes {MONUSEG_SPLIT_QTY}')

    args = parse_args(parser, argv)

    if not args.zoom_scales or min(args.zoom_scales) <= 0:
        raise UsageError(f'Zoom scales must be positive: {args.zoom_scales}')
    manifest_file = args.manifest if args.manifest is not None else os.path.join(args.data_root, MANIFEST_FILE)
    manifest = read_manifest(manifest_file)
    validate_manifest(manifest, MONUSEG_SPLIT_QTY if args.validate_monuseg else None)
    if not manifest.train:
        raise DataError(f'No training images in {manifest_file}')
    check_annotations(args.data_root, manifest)

    log = utils.RunLog(args.out_dir)
    log(f'Split sizes: train {len(manifest.train)} st {len(manifest.st)} dt {len(manifest.dt)}')

    jobs = [PrepJob(data_root=args.data_root, out_dir=args.out_dir, image_id=e.image_id, organ=e.organ,
                    is_train=split_name == SPLIT_TRAIN, zoom_scales=tuple(args.zoom_scales))
            for split_name, split in manifest._asdict().items() for e in split]
    os.makedirs(os.path.join(args.out_dir, MASK_SUBDIR), exist_ok=True)
    os.makedirs(os.path.join(args.out_dir, POOL_SUBDIR), exist_ok=True)
    results = pool_map(prepare_one, jobs, args.workers, desc='prep')

    pool = [e for entries, _ in results for e in entries]
    stage1_qty = sum(qty for _, qty in results)
    utils.sync_out_streams()
    log(f'Stage-1 augmentation ({len(GEOMETRIC_TRANSFORMS)} flips/rotations): '
        f'{len(manifest.train)} -> {stage1_qty} images')
    log(f'Zoom augmentation ({len(args.zoom_scales)} scales): {stage1_qty} -> {len(pool)} images')
    write_pool_index(os.path.join(args.out_dir, POOL_INDEX_FILE), pool)

    train_images = (read_rgb_image(find_image(image_dir(args.data_root), e.image_id)) for e in manifest.train)
    stats = compute_stats(train_images, PIXEL_SCALE)
    save_stats(os.path.join(args.out_dir, STATS_FILE), stats)
    log('Color statistics: mean ' + ' '.join('%.6f' % v for v in stats.mean) +
        ' std ' + ' '.join('%.6f' % v for v in stats.std))

    out_manifest = manifest_to_json(manifest)
    out_manifest['data_root'] = os.path.abspath(args.data_root)
    utils.save_json(os.path.join(args.out_dir, MANIFEST_FILE), out_manifest)


if __name__ == '__main__':
    sys.exit(run_main(main))
