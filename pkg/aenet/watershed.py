"""Marker-controlled watershed on the Euclidean distance map of a predicted mask.

Pipeline: binarize -> remove small components -> distance transform ->
sure-foreground markers (distance threshold) and sure background ->
priority flood from the markers. Cells are label 0 in masks and foreground here.
"""
import heapq
import itertools
from collections import namedtuple

import numpy as np
import scipy.ndimage
import skimage.segmentation

from aenet.config import BIN_THRESHOLD, MARKER_FRAC, MIN_SIZE, BG_MARGIN, CELL_CLASS, BACKGROUND_CLASS
from aenet.errors import ShapeError

WatershedConfig = namedtuple('WatershedConfig', ['threshold', 'marker_frac', 'min_size', 'bg_margin'],
                             defaults=[BIN_THRESHOLD, MARKER_FRAC, MIN_SIZE, BG_MARGIN])

UNKNOWN = 0
SURE_BACKGROUND = 1
FIRST_MARKER = 2

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)
FOUR_NEIGHBORS = ((-1, 0), (0, -1), (0, 1), (1, 0))


def _column_sq_dist(fg, big):
    """Squared distance to the nearest background pixel in the same column (big where none)."""
    h = fg.shape[0]
    idx = np.broadcast_to(np.arange(h)[:, None], fg.shape)
    last = np.maximum.accumulate(np.where(fg, -big, idx), axis=0)
    nxt = np.minimum.accumulate(np.where(fg, 2 * big, idx)[::-1], axis=0)[::-1]
    dist = np.minimum(idx - last, nxt - idx).astype(np.float64)
    return np.where(dist >= big, big, dist * dist)


def _lower_envelope_row(f):
    """Squared distance transform of a sampled function (lower envelope of parabolas)."""
    f = f.tolist()
    n = len(f)
    out = np.empty(n, dtype=np.float64)
    v = [0] * n
    z = [0.0] * (n + 1)
    k = 0
    z[0] = -np.inf
    z[1] = np.inf
    for q in range(1, n):
        while True:
            p = v[k]
            s = ((f[q] + q * q) - (f[p] + p * p)) / (2 * q - 2 * p)
            if s > z[k]:
                break
            k -= 1
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        out[q] = (q - v[k]) ** 2 + f[v[k]]
    return out


def squared_edt(fg):
    """Exact squared Euclidean distance from every True pixel to the nearest False pixel.

    :param fg: 2-d boolean array with at least one False pixel
    """
    h, w = fg.shape
    # a finite stand-in for infinity: larger than any real squared distance, exact in float64
    big = float(2 * (h + w) ** 2 + 1)
    cols = _column_sq_dist(fg, big)
    out = np.empty_like(cols)
    for r in range(h):
        if cols[r].max() == 0:
            out[r] = 0
        else:
            out[r] = _lower_envelope_row(cols[r])
    return out


def distance_transform(mask):
    """Euclidean distance of every cell pixel (label 0) to the nearest background pixel.

    An all-cell mask is measured against a virtual background border around the image.
    """
    fg = np.asarray(mask) == CELL_CLASS
    if fg.ndim != 2:
        raise ShapeError(f'Expected a 2-d mask, got shape {fg.shape}')
    if not fg.any():
        return np.zeros(fg.shape, dtype=np.float64)
    if fg.all():
        padded = np.pad(fg, 1, constant_values=False)
        return np.sqrt(squared_edt(padded))[1:-1, 1:-1]
    return np.sqrt(squared_edt(fg))


def remove_small_components(cell, min_size=MIN_SIZE):
    """Drop 8-connected foreground components smaller than min_size pixels."""
    labels, qty = scipy.ndimage.label(cell, structure=EIGHT_CONNECTED)
    if qty == 0:
        return cell.copy()
    sizes = np.bincount(labels.ravel())
    keep = sizes >= min_size
    keep[0] = False
    return keep[labels]


def extract_markers(dist, frac=MARKER_FRAC, bg_margin=BG_MARGIN):
    """Marker map: 0 unknown, 1 sure background, k >= 2 sure-foreground components.

    Sure foreground is dist >= frac * max(dist) split into 8-connected components.
    Sure background is dist == 0 farther than bg_margin pixels from the foreground.
    """
    if not 0 < frac < 1:
        raise ValueError(f'Marker fraction must be in (0, 1), got {frac}')
    markers = np.zeros(dist.shape, dtype=np.int32)
    dmax = float(dist.max(initial=0.0))
    if dmax <= 0:
        markers[:] = SURE_BACKGROUND
        return markers

    sure_fg = dist >= frac * dmax
    labels, _ = scipy.ndimage.label(sure_fg, structure=EIGHT_CONNECTED)
    markers[sure_fg] = labels[sure_fg] + FIRST_MARKER - 1

    background = dist == 0
    if background.any():
        gap = np.sqrt(squared_edt(background))
        markers[background & (gap > bg_margin)] = SURE_BACKGROUND
    return markers


def watershed_flood(topography, markers):
    """Meyer's priority flood from the markers, highest topography first.

    Ties are served in insertion order. Instance labels flood foreground pixels
    (topography > 0) only; a foreground pixel reached by two different instances
    becomes a boundary. Pixels at topography 0 join the background.
    Returns instance labels: 0 background/boundary, k >= 1 instances.
    """
    if topography.shape != markers.shape:
        raise ShapeError(f'Topography {topography.shape} and markers {markers.shape} shapes differ')
    h, w = markers.shape
    labels = markers.astype(np.int32).copy()
    queued = labels != UNKNOWN
    heap = []
    seq = itertools.count()

    def push_neighbors(r, c):
        for dr, dc in FOUR_NEIGHBORS:
            nr, nc = r + dr, c + dc
            if 0 <= nr < h and 0 <= nc < w and not queued[nr, nc]:
                queued[nr, nc] = True
                heapq.heappush(heap, (-topography[nr, nc], next(seq), nr, nc))

    unknown = labels == UNKNOWN
    frontier = np.zeros_like(unknown)
    frontier[1:] |= unknown[:-1]
    frontier[:-1] |= unknown[1:]
    frontier[:, 1:] |= unknown[:, :-1]
    frontier[:, :-1] |= unknown[:, 1:]
    for r, c in np.argwhere(frontier & ~unknown):
        push_neighbors(r, c)

    while heap:
        _, _, r, c = heapq.heappop(heap)
        if topography[r, c] <= 0:
            labels[r, c] = SURE_BACKGROUND
            push_neighbors(r, c)
            continue
        seen = set()
        for dr, dc in FOUR_NEIGHBORS:
            nr, nc = r + dr, c + dc
            if 0 <= nr < h and 0 <= nc < w and labels[nr, nc] >= FIRST_MARKER:
                seen.add(labels[nr, nc])
        if len(seen) == 1:
            labels[r, c] = seen.pop()
            push_neighbors(r, c)
        elif not seen:
            # reached from the background only, an instance may still arrive later
            queued[r, c] = False
        # several instances meet: the pixel stays unknown and becomes a boundary

    return np.where(labels >= FIRST_MARKER, labels - (FIRST_MARKER - 1), 0).astype(np.int32)


def postprocess(prob, conf=WatershedConfig()):
    """Split a probability map into cell instances.

    :return: refined mask (0 cell, 1 background), instance labels
    """
    cell = prob >= conf.threshold
    cell = remove_small_components(cell, conf.min_size)
    mask = np.where(cell, CELL_CLASS, BACKGROUND_CLASS).astype(np.uint8)
    dist = distance_transform(mask)
    markers = extract_markers(dist, conf.marker_frac, conf.bg_margin)
    labels = watershed_flood(dist, markers)
    refined = np.where(labels > 0, CELL_CLASS, BACKGROUND_CLASS).astype(np.uint8)
    return refined, labels


def overlay_boundaries(image, labels):
    """RGB uint8 image with instance boundaries drawn in yellow."""
    marked = skimage.segmentation.mark_boundaries(image, labels, color=(1, 1, 0), mode='inner')
    return np.clip(np.rint(marked * 255), 0, 255).astype(np.uint8)
