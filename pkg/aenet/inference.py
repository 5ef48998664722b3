"""Patch-based inference with multi-scale and horizontal-flip ensembling.

A predictor is any callable mapping an N x 3 x h x w float array to N x 1 x h x w
cell probabilities; ``make_predictor`` wraps an AENet model.
"""
import os
from collections import namedtuple

import numpy as np

from aenet.config import PATCH_SIDE, MS_SCALES, BIN_THRESHOLD, OUTPUT_STRIDE, CELL_CLASS, BACKGROUND_CLASS
from aenet.errors import ShapeError
from aenet.tensor_core import bilinear_resize
from aenet.imaging import write_prob_png
from aenet.utils import save_json

TilingPlan = namedtuple('TilingPlan', ['patch_side', 'image_shape', 'padded_shape', 'origins'])

EnsembleConfig = namedtuple('EnsembleConfig', ['scales', 'flip', 'threshold', 'patch_side'],
                            defaults=[tuple(MS_SCALES), True, BIN_THRESHOLD, PATCH_SIDE])

SINGLE_SCALE = EnsembleConfig(scales=(1.0,), flip=False)


def check_ensemble_config(conf):
    if not conf.scales or min(conf.scales) <= 0:
        raise ValueError(f'Ensemble scales must be positive, got {conf.scales}')
    if not 0 < conf.threshold < 1:
        raise ValueError(f'Threshold must be in (0, 1), got {conf.threshold}')
    if conf.patch_side < 1:
        raise ValueError(f'Invalid patch side {conf.patch_side}')


def make_plan(shape, patch_side=PATCH_SIDE):
    """Cover an H x W image with a row-major grid of non-overlapping patches."""
    if patch_side < 1:
        raise ValueError(f'Invalid patch side {patch_side}')
    h, w = shape[-2:]
    if h < 1 or w < 1:
        raise ShapeError(f'Cannot tile an empty image of shape {shape}')
    ph = -(-h // patch_side) * patch_side
    pw = -(-w // patch_side) * patch_side
    origins = [(r, c) for r in range(0, ph, patch_side) for c in range(0, pw, patch_side)]
    return TilingPlan(patch_side=patch_side, image_shape=(h, w), padded_shape=(ph, pw), origins=origins)


def _pad_reflect(x, pad_h, pad_w):
    if not pad_h and not pad_w:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(0, pad_h), (0, pad_w)]
    return np.pad(x, widths, mode='reflect' if min(x.shape[-2:]) > 1 else 'edge')


def tile(image, plan):
    """Split the two trailing axes into patches, reflect-padding the bottom/right."""
    if tuple(image.shape[-2:]) != tuple(plan.image_shape):
        raise ShapeError(f'Image shape {image.shape[-2:]} does not match the plan {plan.image_shape}')
    h, w = plan.image_shape
    ph, pw = plan.padded_shape
    if plan.patch_side > ph or plan.patch_side > pw:
        raise ShapeError(f'Patch side {plan.patch_side} exceeds the padded image {ph}x{pw}')
    padded = _pad_reflect(image, ph - h, pw - w)
    s = plan.patch_side
    return [padded[..., r:r + s, c:c + s] for r, c in plan.origins]


def stitch(patches, plan):
    """Inverse of tile: place patches on the padded canvas and crop the padding away."""
    if len(patches) != len(plan.origins):
        raise ShapeError(f'Expected {len(plan.origins)} patches, got {len(patches)}')
    s = plan.patch_side
    lead = patches[0].shape[:-2]
    canvas = np.empty(lead + tuple(plan.padded_shape), dtype=patches[0].dtype)
    for patch, (r, c) in zip(patches, plan.origins):
        if patch.shape[-2:] != (s, s):
            raise ShapeError(f'Patch of shape {patch.shape} does not match side {s}')
        canvas[..., r:r + s, c:c + s] = patch
    h, w = plan.image_shape
    return canvas[..., :h, :w]


def make_predictor(model, batch_size=8):
    """Wrap a model into a batched predictor running in the inference mode."""
    model.eval()

    def predict(batch):
        res = [model.predict_proba(batch[i:i + batch_size]) for i in range(0, len(batch), batch_size)]
        return np.concatenate(res, axis=0)

    return predict


def predict_patches(patches, predictor):
    """Run the predictor on patches padded to a multiple of the output stride, crop the results back."""
    h, w = patches[0].shape[-2:]
    ph = -(-h // OUTPUT_STRIDE) * OUTPUT_STRIDE
    pw = -(-w // OUTPUT_STRIDE) * OUTPUT_STRIDE
    batch = np.stack([_pad_reflect(p, ph - h, pw - w) for p in patches]).astype(np.float32, copy=False)
    probs = predictor(batch)
    if probs.shape[0] != len(patches) or probs.shape[-2:] != (ph, pw):
        raise ShapeError(f'Predictor returned shape {probs.shape} for a batch of shape {batch.shape}')
    return [probs[i, 0, :h, :w] for i in range(len(patches))]


def tiled_forward(image, predictor, patch_side=PATCH_SIDE):
    """Probability map of a C x H x W image from a single tiled pass."""
    plan = make_plan(image.shape, patch_side)
    return stitch(predict_patches(tile(image, plan), predictor), plan)


def whole_image_forward(image, predictor):
    """Probability map of a C x H x W image from one untiled pass (small images, validation)."""
    return predict_patches([image], predictor)[0]


def ensemble_passes(conf):
    """(scale, flipped) pairs of every forward pass."""
    flips = [False, True] if conf.flip else [False]
    return [(scale, flipped) for scale in conf.scales for flipped in flips]


def multiscale_infer(image, predictor, conf=EnsembleConfig()):
    """Average of probability maps over scales and horizontal flips.

    :param image:      normalized C x H x W image
    :param predictor:  patch predictor (see make_predictor)
    :param conf:       EnsembleConfig
    :return: H x W probability map (float64)
    """
    check_ensemble_config(conf)
    h, w = image.shape[-2:]
    total = np.zeros((h, w), dtype=np.float64)
    passes = ensemble_passes(conf)
    for scale, flipped in passes:
        size = (max(int(round(h * scale)), 1), max(int(round(w * scale)), 1))
        scaled = bilinear_resize(image, size)
        if flipped:
            scaled = np.ascontiguousarray(scaled[..., ::-1])
        prob = tiled_forward(scaled, predictor, conf.patch_side)
        if flipped:
            prob = prob[..., ::-1]
        total += bilinear_resize(np.ascontiguousarray(prob), (h, w))
    return total / len(passes)


def binarize(prob, threshold=BIN_THRESHOLD):
    """p >= threshold -> cell (0), otherwise background (1)."""
    return np.where(prob >= threshold, CELL_CLASS, BACKGROUND_CLASS).astype(np.uint8)


def save_probability(file_name, prob, conf):
    """16-bit PNG plus a JSON sidecar with the ensemble settings."""
    write_prob_png(file_name, prob)
    stem, _ = os.path.splitext(file_name)
    save_json(stem + '.json', {'scales': [float(s) for s in conf.scales],
                               'flip': bool(conf.flip),
                               'threshold': float(conf.threshold),
                               'patch_side': int(conf.patch_side),
                               'pass_qty': len(ensemble_passes(conf))})
