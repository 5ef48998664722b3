#!/usr/bin/env python
"""Generate a synthetic blob dataset: images, XML annotations and a split manifest."""
import os
import sys
from collections import namedtuple

from aenet import utils
from aenet.config import ORGANS, SPLIT_TRAIN, SPLIT_ST, SPLIT_DT, MANIFEST_FILE, IMAGE_SUBDIR, ANNOT_SUBDIR
from aenet.errors import UsageError
from aenet.imaging import write_rgb_image, annotations_to_xml
from aenet.synth import generate_blob_image
from aenet.cli.common import ArgumentParser, add_common_args, parse_args, run_main, pool_map, \
    ManifestEntry, SplitManifest, write_manifest, validate_manifest

TRAIN_ORGAN_QTY = 4

SynthJob = namedtuple('SynthJob', ['data_root', 'image_id', 'organ', 'size', 'seed',
                                   'blob_qty', 'radius', 'noise'])


def make_entries(split, qty, organs):
    return [ManifestEntry(image_id=f'{split}_{i:04d}', organ=organs[i % len(organs)]) for i in range(qty)]


def make_manifest(train_qty, st_qty, dt_qty, train_organ_qty=TRAIN_ORGAN_QTY):
    """Train and ST images cycle over the first organs, DT images over the remaining ones."""
    if not 0 < train_organ_qty < len(ORGANS):
        raise UsageError(f'The # of training organs must be in [1, {len(ORGANS) - 1}]')
    train_organs = ORGANS[:train_organ_qty]
    dt_organs = ORGANS[train_organ_qty:]
    return SplitManifest(train=make_entries(SPLIT_TRAIN, train_qty, train_organs),
                         st=make_entries(SPLIT_ST, st_qty, train_organs),
                         dt=make_entries(SPLIT_DT, dt_qty, dt_organs))


def write_one(job):
    rng = utils.derive_rng(job.seed, job.image_id)
    image, annots = generate_blob_image(rng, size=job.size, organ=job.organ, blob_qty=job.blob_qty,
                                        radius=job.radius, noise=job.noise)
    write_rgb_image(os.path.join(job.data_root, IMAGE_SUBDIR, job.image_id + '.png'), image)
    with open(os.path.join(job.data_root, ANNOT_SUBDIR, job.image_id + '.xml'), 'wb') as f:
        f.write(annotations_to_xml(annots))
    return len(annots.polygons)


def main(argv=None):
    parser = ArgumentParser(description='Generate a synthetic cell-blob dataset')
    add_common_args(parser)
    parser.add_argument('--data_root', metavar='output dir', help='dataset root to create',
                        type=str, required=True)
    parser.add_argument('--train_qty', metavar='# of train images', type=int, default=200)
    parser.add_argument('--st_qty', metavar='# of same-organ test images', type=int, default=25)
    parser.add_argument('--dt_qty', metavar='# of different-organ test images', type=int, default=25)
    parser.add_argument('--size', metavar='image side', type=int, default=64)
    parser.add_argument('--min_blob_qty', type=int, default=3)
    parser.add_argument('--max_blob_qty', type=int, default=8)
    parser.add_argument('--min_radius', type=float, default=3.0)
    parser.add_argument('--max_radius', type=float, default=7.0)
    parser.add_argument('--noise', metavar='noise std. dev.', type=float, default=12.0)

    args = parse_args(parser, argv)

    if args.size < 2 * args.max_radius + 1:
        raise UsageError(f'Image side {args.size} is too small for radius {args.max_radius}')
    if args.min_blob_qty > args.max_blob_qty or args.min_radius > args.max_radius:
        raise UsageError('Invalid blob count or radius range')

    log = utils.RunLog(args.data_root)
    manifest = make_manifest(args.train_qty, args.st_qty, args.dt_qty)
    validate_manifest(manifest)

    for sub_dir in (IMAGE_SUBDIR, ANNOT_SUBDIR):
        os.makedirs(os.path.join(args.data_root, sub_dir), exist_ok=True)

    jobs = [SynthJob(data_root=args.data_root, image_id=e.image_id, organ=e.organ, size=args.size,
                     seed=args.seed, blob_qty=(args.min_blob_qty, args.max_blob_qty),
                     radius=(args.min_radius, args.max_radius), noise=args.noise)
            for e in manifest.train + manifest.st + manifest.dt]
    blob_qtys = pool_map(write_one, jobs, args.workers, desc='synth')

    write_manifest(os.path.join(args.data_root, MANIFEST_FILE), manifest)
    utils.sync_out_streams()
    log(f'Generated {len(jobs)} images ({sum(blob_qtys)} nuclei): '
        f'train {len(manifest.train)} st {len(manifest.st)} dt {len(manifest.dt)}')


if __name__ == '__main__':
    sys.exit(run_main(main))
