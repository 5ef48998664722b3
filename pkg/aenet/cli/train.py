#!/usr/bin/env python
"""AENet training on a prepared directory with per-epoch validation and checkpointing.

Training state (global step, position inside the epoch, best score, statistics)
is stored in every checkpoint, so --init_model with a model.last file resumes the
run exactly. Batch order is derived from (seed, epoch) and crops from (seed, step).
"""
import os
import csv
import sys
import math
import time

import numpy as np
from tqdm import tqdm

from aenet import utils
from aenet.config import STATS_FILE, POOL_INDEX_FILE, MASK_SUBDIR, TRAIN_STAT_FILE, TRAIN_LOG_FILE, \
    MODEL_BEST, MODEL_LAST, CROP_SIDE, OUTPUT_STRIDE, ENCODER_VGG16, ENCODER_TOY, SPLIT_ST, SPLIT_NAMES, \
    INIT_LR, MAX_EPOCHS, BATCH_SIZE, HALVE_EPOCH, POLY_EPOCH, POLY_POWER
from aenet.errors import UsageError, DataError, NumericError
from aenet.imaging import read_rgb_image, read_mask_png, load_stats, normalize_global, random_crop
from aenet.inference import make_predictor, whole_image_forward, binarize
from aenet.metrics import confusion, aggregate
from aenet.model import AENet, Adam, TrainConfig, make_model_config, train_step, lr_schedule, \
    save_checkpoint, load_checkpoint
from aenet.cli.common import ArgumentParser, add_common_args, add_bool_arg, parse_args, run_main, \
    find_image, image_dir, run_config_from_args
from aenet.cli.prep import read_pool_index, read_prepared_manifest

TRAIN_LOG_FIELDS = ['epoch', 'lr', 'loss', 'valid_dice']


def batch_order(seed, epoch, qty):
    return utils.derive_rng(seed, f'order_{epoch}').permutation(qty)


def load_batch(prep_dir, entries, stats, crop_side, rng):
    images = []
    masks = []
    for e in entries:
        image = read_rgb_image(os.path.join(prep_dir, e.image_file))
        mask = read_mask_png(os.path.join(prep_dir, e.mask_file))
        if image.shape[:2] != mask.shape:
            raise DataError(f'Pool entry {e.pool_id}: image {image.shape[:2]} and mask {mask.shape} differ')
        img_crop, mask_crop, _ = random_crop(image, mask, crop_side, rng)
        images.append(normalize_global(img_crop, stats))
        masks.append(mask_crop)
    return np.stack(images), np.stack(masks)


def validate(model, prep_dir, data_root, entries, stats, batch_size):
    """Single-scale conventional dice (micro-averaged) of a held-out split."""
    predictor = make_predictor(model, batch_size)
    counts = []
    for e in tqdm(entries, desc='valid', leave=False):
        image = read_rgb_image(find_image(image_dir(data_root), e.image_id))
        gt = read_mask_png(os.path.join(prep_dir, MASK_SUBDIR, e.image_id + '.png'))
        prob = whole_image_forward(normalize_global(image, stats), predictor)
        counts.append(confusion(binarize(prob), gt))
    return aggregate(counts).dice


def write_train_log(file_name, train_stat):
    with open(file_name, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(TRAIN_LOG_FIELDS)
        for epoch in sorted(train_stat, key=int):
            st = train_stat[epoch]
            score = '' if st['score'] is None else '%.6f' % st['score']
            writer.writerow([epoch, '%g' % st['lr'], '%.6f' % st['loss'], score])


def run_training(prep_dir, model_out_dir, model_conf, train_conf, log,
                 crop_side=CROP_SIDE, max_steps=None, seed=0, init_model=None,
                 valid_split=SPLIT_ST, save_epoch_snapshots=False):
    """Train a model, returns the best validation dice (None if no validation images).

    :param prep_dir:        directory written by the prep command
    :param model_out_dir:   output directory for checkpoints and statistics
    :param model_conf:      AENetConfig (ignored when init_model is given)
    :param train_conf:      TrainConfig
    :param log:             RunLog-like callable
    :param crop_side:       training crop side (a multiple of the output stride)
    :param max_steps:       an optional cap on the number of optimizer steps
    :param init_model:      a checkpoint to start from, training state is resumed if present
    """
    if crop_side < OUTPUT_STRIDE or crop_side % OUTPUT_STRIDE:
        raise UsageError(f'Crop side must be a positive multiple of {OUTPUT_STRIDE}, got {crop_side}')
    if max_steps is not None and max_steps < 0:
        raise UsageError(f'Invalid # of steps: {max_steps}')

    pool = read_pool_index(os.path.join(prep_dir, POOL_INDEX_FILE))
    if not pool:
        raise DataError(f'Empty training pool in {prep_dir}')
    manifest, data_root = read_prepared_manifest(prep_dir)
    valid_entries = getattr(manifest, valid_split)
    stats = load_stats(os.path.join(prep_dir, STATS_FILE))

    state = {}
    if init_model is not None:
        model, optimizer, _, state = load_checkpoint(init_model)
        log(f'Loaded the model from {init_model}')
        if optimizer is None:
            optimizer = Adam(train_conf.beta1, train_conf.beta2, train_conf.adam_eps)
    else:
        model = AENet(model_conf)
        optimizer = Adam(train_conf.beta1, train_conf.beta2, train_conf.adam_eps)

    step = int(state.get('step', 0))
    start_epoch = int(state.get('epoch', 0))
    start_batch = int(state.get('batch_idx', 0))
    top_valid_score = state.get('best_dice')
    bad_epochs = int(state.get('bad_epochs', 0))
    train_stat = state.get('train_stat', {})
    if step:
        log(f'Resuming at step {step}, epoch {start_epoch}, batch {start_batch}')

    iters_per_epoch = int(math.ceil(len(pool) / train_conf.batch_size))
    total_iter = train_conf.max_epochs * iters_per_epoch
    log('Model configuration:', model.conf)
    log('Training parameters:', train_conf)
    log(f'# of parameters: {model.param_qty()} pool size: {len(pool)} batches per epoch: {iters_per_epoch}')
    os.makedirs(model_out_dir, exist_ok=True)

    def checkpoint_state(epoch, batch_idx):
        return {'step': step, 'epoch': epoch, 'batch_idx': batch_idx, 'best_dice': top_valid_score,
                'bad_epochs': bad_epochs, 'train_stat': train_stat}

    for epoch in range(start_epoch, train_conf.max_epochs):
        if max_steps is not None and step >= max_steps:
            break
        epoch_lr = lr_schedule(epoch, step, total_iter, train_conf)
        log(f'train epoch={epoch} lr={epoch_lr:g}')
        order = batch_order(seed, epoch, len(pool))
        first_batch = start_batch if epoch == start_epoch else 0

        start_train_time = time.time()
        loss_sum = 0.
        loss_qty = 0
        batch_idx = first_batch
        pbar = tqdm(total=iters_per_epoch, initial=first_batch, ncols=80, desc='training', leave=False)
        while batch_idx < iters_per_epoch:
            if max_steps is not None and step >= max_steps:
                break
            lr = lr_schedule(epoch, step, total_iter, train_conf)
            ids = order[batch_idx * train_conf.batch_size:(batch_idx + 1) * train_conf.batch_size]
            entries = [pool[i] for i in ids]
            images, masks = load_batch(prep_dir, entries, stats, crop_side, utils.derive_rng(seed, f'crop_{step}'))
            try:
                loss = train_step(model, optimizer, images, masks, lr, train_conf.class_weights)
            except NumericError as e:
                raise NumericError(f'{e} at epoch {epoch} batch {batch_idx} step {step}, '
                                   f'pool entries: {" ".join(x.pool_id for x in entries)}')
            loss_sum += loss
            loss_qty += 1
            step += 1
            batch_idx += 1
            pbar.update(1)
            pbar.set_description('train loss %.5f' % (loss_sum / loss_qty))
        pbar.close()
        epoch_done = batch_idx >= iters_per_epoch
        print(f'Training time: {time.time() - start_train_time:.1f} sec')

        if not loss_qty:
            break

        utils.sync_out_streams()
        valid_score = None
        if valid_entries:
            valid_score = validate(model, prep_dir, data_root, valid_entries, stats, train_conf.batch_size)
            log(f'validation epoch={epoch} dice={valid_score:.4g}')
        avg_loss = loss_sum / loss_qty
        log(f'train epoch={epoch} loss={avg_loss:.5g} steps={step}')

        prev = train_stat.get(str(epoch))
        train_stat[str(epoch)] = {'loss': avg_loss if prev is None else
                                  (prev['loss'] * prev['steps'] + loss_sum) / (prev['steps'] + loss_qty),
                                  'steps': loss_qty if prev is None else prev['steps'] + loss_qty,
                                  'score': valid_score,
                                  'lr': epoch_lr if prev is None else prev['lr']}
        utils.save_json(os.path.join(model_out_dir, TRAIN_STAT_FILE), train_stat)
        write_train_log(os.path.join(model_out_dir, TRAIN_LOG_FILE), train_stat)

        improved = valid_score is not None and (top_valid_score is None or valid_score > top_valid_score)
        if improved:
            top_valid_score = valid_score
            bad_epochs = 0
        elif valid_score is not None:
            bad_epochs += 1

        next_epoch, next_batch = (epoch + 1, 0) if epoch_done else (epoch, batch_idx)
        save_checkpoint(os.path.join(model_out_dir, MODEL_LAST), model, optimizer, next_epoch,
                        checkpoint_state(next_epoch, next_batch))
        if improved or valid_score is None:
            log('new top validation score, saving the model' if improved else 'Saving the model')
            save_checkpoint(os.path.join(model_out_dir, MODEL_BEST), model, None, next_epoch,
                            checkpoint_state(next_epoch, next_batch))
        if save_epoch_snapshots and epoch_done:
            save_checkpoint(os.path.join(model_out_dir, f'model.{epoch}'), model, optimizer, next_epoch,
                            checkpoint_state(next_epoch, next_batch))

        if train_conf.patience is not None and bad_epochs >= train_conf.patience:
            log(f'No improvement for {bad_epochs} epochs, stopping')
            break

    log(f'Finished after {step} steps, best validation dice: {top_valid_score}')
    return top_valid_score


def add_model_args(parser):
    parser.add_argument('--preset', metavar='encoder preset', choices=[ENCODER_VGG16, ENCODER_TOY],
                        default=ENCODER_VGG16, help='encoder/decoder width preset')
    add_bool_arg(parser, 'cam', True, 'channel attention module')
    add_bool_arg(parser, 'sam', True, 'spatial attention module')
    add_bool_arg(parser, 'ffb', True, 'feature fusion branch')


def add_train_args(parser):
    parser.add_argument('--init_lr', metavar='init learn. rate', type=float, default=INIT_LR)
    parser.add_argument('--max_epochs', metavar='# of epochs', type=int, default=MAX_EPOCHS)
    parser.add_argument('--batch_size', metavar='batch size', type=int, default=BATCH_SIZE)
    parser.add_argument('--halve_epoch', metavar='epoch', help='the first epoch with a halved learning rate',
                        type=int, default=HALVE_EPOCH)
    parser.add_argument('--poly_epoch', metavar='epoch', help='the first epoch of the poly decay',
                        type=int, default=POLY_EPOCH)
    parser.add_argument('--poly_power', metavar='power', type=float, default=POLY_POWER)
    parser.add_argument('--class_weights', metavar='weight', help='cell and background loss weights',
                        type=float, nargs=2, default=None)
    parser.add_argument('--patience', metavar='# of epochs', help='early stopping patience',
                        type=int, default=None)
    parser.add_argument('--crop_side', metavar='crop side', type=int, default=CROP_SIDE)
    parser.add_argument('--max_steps', metavar='# of steps', help='stop after this many optimizer steps',
                        type=int, default=None)


def model_conf_from_args(args):
    return make_model_config(args.preset, use_cam=args.cam, use_sam=args.sam, use_ffb=args.ffb, seed=args.seed)


def train_conf_from_args(args):
    if args.batch_size < 1 or args.max_epochs < 1:
        raise UsageError('Batch size and the # of epochs must be positive')
    if not args.halve_epoch <= args.poly_epoch <= args.max_epochs:
        raise UsageError('Expected halve_epoch <= poly_epoch <= max_epochs')
    return TrainConfig(init_lr=args.init_lr, max_epochs=args.max_epochs, batch_size=args.batch_size,
                       halve_epoch=args.halve_epoch, poly_epoch=args.poly_epoch, poly_power=args.poly_power,
                       class_weights=None if args.class_weights is None else tuple(args.class_weights),
                       patience=args.patience)


def main(argv=None):
    parser = ArgumentParser(description='AENet training and validation')
    add_common_args(parser)
    parser.add_argument('--prep_dir', metavar='prepared dir', help='output of the prep command',
                        type=str, required=True)
    parser.add_argument('--model_out_dir', '--out_dir', dest='model_out_dir', metavar='model out dir',
                        help='an output directory for the trained model', type=str, required=True)
    parser.add_argument('--init_model', metavar='checkpoint', help='initial model or a model.last to resume',
                        type=str, default=None)
    parser.add_argument('--valid_split', metavar='split', choices=SPLIT_NAMES, default=SPLIT_ST)
    parser.add_argument('--save_epoch_snapshots', action='store_true', help='save a checkpoint after each epoch')
    add_model_args(parser)
    add_train_args(parser)

    args = parse_args(parser, argv)

    utils.set_all_seeds(args.seed)
    log = utils.RunLog(args.model_out_dir)
    train_conf = train_conf_from_args(args)
    log('Run configuration:', run_config_from_args(args, train_conf))
    run_training(args.prep_dir, args.model_out_dir, model_conf_from_args(args), train_conf, log,
                 crop_side=args.crop_side, max_steps=args.max_steps, seed=args.seed, init_model=args.init_model,
                 valid_split=args.valid_split, save_epoch_snapshots=args.save_epoch_snapshots)


if __name__ == '__main__':
    sys.exit(run_main(main))
