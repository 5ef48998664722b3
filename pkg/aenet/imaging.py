"""Annotation parsing, mask rasterization, augmentation, color normalization and image I/O.

In-memory masks label cells 0 and background 1; PNG masks use the display
convention (cell 255, background 0).
"""
import os
from collections import namedtuple

import numpy as np
import skimage.io
import skimage.transform
from lxml import etree
from tqdm import tqdm

from aenet.config import CELL_CLASS, BACKGROUND_CLASS, STATS_EPS, ZOOM_SCALES, CROP_SIDE, PIXEL_SCALE
from aenet.errors import DataError, ShapeError
from aenet.utils import read_json, save_json

PathologyImage = namedtuple('PathologyImage', ['pixels', 'source_id', 'organ'])
AnnotationSet = namedtuple('AnnotationSet', ['polygons'])
NormalizationStats = namedtuple('NormalizationStats', ['mean', 'std', 'pixel_scale'])
AugmentedItem = namedtuple('AugmentedItem', ['image', 'mask', 'transform', 'scale'])

MIN_POLYGON_VERTICES = 3

STATS_NOTE = 'mean/std are computed on pixel values multiplied by pixel_scale; ' \
             'normalization applies the same scale before standardizing'


def parse_annotations(document, source='<string>'):
    """Parse MoNuSeg-style XML (Annotation/Regions/Region/Vertices/Vertex with X/Y attributes).

    :param document: XML text or bytes
    :param source:   a name used in messages
    :return: AnnotationSet, regions with fewer than three vertices are skipped
    """
    if isinstance(document, str):
        document = document.encode('utf-8')
    # entities are kept as references: annotation files never pull in external content
    parser = etree.XMLParser(resolve_entities=False, no_network=True, load_dtd=False)
    try:
        root = etree.fromstring(document, parser)
    except etree.XMLSyntaxError as e:
        raise DataError(f'Malformed annotation XML in {source}, line {e.lineno}: {e.msg}')

    polygons = []
    for region_id, region in enumerate(root.iter('Region')):
        vertices = []
        for vert in region.iterfind('Vertices/Vertex'):
            x, y = vert.get('X'), vert.get('Y')
            if x is None or y is None:
                raise DataError(f'Vertex without X/Y in {source}, line {vert.sourceline}')
            try:
                vertices.append((float(x), float(y)))
            except ValueError:
                raise DataError(f'Invalid vertex coordinates ({x}, {y}) in {source}, line {vert.sourceline}')
        if len(vertices) < MIN_POLYGON_VERTICES:
            tqdm.write(f'Skipping region {region.get("Id", region_id)} with {len(vertices)} vertices '
                       f'in {source}, line {region.sourceline}')
            continue
        polygons.append(np.array(vertices, dtype=np.float64))

    return AnnotationSet(polygons=polygons)


def read_annotations(file_name):
    with open(file_name, 'rb') as f:
        return parse_annotations(f.read(), source=file_name)


def annotations_to_xml(annotations):
    """Serialize polygons in the layout parse_annotations reads, returns bytes."""
    root = etree.Element('Annotations')
    annot = etree.SubElement(root, 'Annotation', Id='1')
    regions = etree.SubElement(annot, 'Regions')
    for region_id, poly in enumerate(annotations.polygons, start=1):
        region = etree.SubElement(regions, 'Region', Id=str(region_id))
        verts = etree.SubElement(region, 'Vertices')
        for x, y in poly:
            etree.SubElement(verts, 'Vertex', X=f'{x:.4f}', Y=f'{y:.4f}')
    return etree.tostring(root, pretty_print=True, xml_declaration=True, encoding='UTF-8')


def _inside_even_odd(px, py, xs, ys):
    """Even-odd test of a grid of points (px columns, py rows) against one polygon."""
    gx, gy = np.meshgrid(px, py)
    inside = np.zeros(gx.shape, dtype=bool)
    qty = len(xs)
    for i in range(qty):
        x1, y1 = xs[i], ys[i]
        x2, y2 = xs[(i + 1) % qty], ys[(i + 1) % qty]
        if y1 == y2:
            continue
        straddle = (y1 > gy) != (y2 > gy)
        x_cross = x1 + (gy - y1) * (x2 - x1) / (y2 - y1)
        inside ^= straddle & (gx < x_cross)
    return inside


def rasterize(annotations, shape):
    """Label pixels whose centers lie inside any polygon as cells.

    :param annotations: AnnotationSet
    :param shape:       (H, W) of the source image
    :return: uint8 mask, 0 cell, 1 background
    """
    h, w = shape[:2]
    cell = np.zeros((h, w), dtype=bool)
    for poly in annotations.polygons:
        xs = np.clip(poly[:, 0], 0, w)
        ys = np.clip(poly[:, 1], 0, h)
        c0 = max(int(np.floor(xs.min() - 0.5)), 0)
        c1 = min(int(np.ceil(xs.max() + 0.5)), w)
        r0 = max(int(np.floor(ys.min() - 0.5)), 0)
        r1 = min(int(np.ceil(ys.max() + 0.5)), h)
        if c0 >= c1 or r0 >= r1:
            continue
        cell[r0:r1, c0:c1] |= _inside_even_odd(np.arange(c0, c1) + 0.5, np.arange(r0, r1) + 0.5, xs, ys)
    return np.where(cell, CELL_CLASS, BACKGROUND_CLASS).astype(np.uint8)


# Stage-1 transforms act on the two leading (spatial) axes, rotations are counterclockwise
GEOMETRIC_TRANSFORMS = [
    ('identity', lambda a: a),
    ('hflip', np.fliplr),
    ('vflip', np.flipud),
    ('rot90', lambda a: np.rot90(a, 1)),
    ('rot180', lambda a: np.rot90(a, 2)),
    ('rot270', lambda a: np.rot90(a, 3)),
]


def augment_geometric(items):
    """Expand every (image, mask) pair into flipped and rotated variants, 6 per input."""
    res = []
    for image, mask in items:
        for name, fn in GEOMETRIC_TRANSFORMS:
            res.append(AugmentedItem(image=np.ascontiguousarray(fn(image)),
                                     mask=None if mask is None else np.ascontiguousarray(fn(mask)),
                                     transform=name, scale=1.0))
    return res


def zoom(image, mask, scale):
    """Bilinear image and nearest-neighbor mask resampling by a scale factor."""
    if scale <= 0:
        raise ValueError(f'Zoom scale must be positive, got {scale}')
    h, w = image.shape[:2]
    new_h, new_w = max(int(round(h * scale)), 1), max(int(round(w * scale)), 1)
    if (new_h, new_w) == (h, w):
        return image.copy(), None if mask is None else mask.copy()
    zimg = skimage.transform.resize(image, (new_h, new_w) + image.shape[2:], order=1, mode='reflect',
                                    preserve_range=True, anti_aliasing=False)
    if np.issubdtype(image.dtype, np.integer):
        info = np.iinfo(image.dtype)
        zimg = np.clip(np.rint(zimg), info.min, info.max)
    zimg = zimg.astype(image.dtype)
    zmask = None
    if mask is not None:
        zmask = skimage.transform.resize(mask, (new_h, new_w), order=0, mode='edge',
                                         preserve_range=True, anti_aliasing=False).astype(mask.dtype)
    return zimg, zmask


def augment_zoom(items, scales=ZOOM_SCALES):
    res = []
    for item in items:
        for scale in scales:
            zimg, zmask = zoom(item.image, item.mask, scale)
            res.append(AugmentedItem(image=zimg, mask=zmask, transform=item.transform,
                                     scale=item.scale * scale))
    return res


def augment(items, scales=ZOOM_SCALES):
    """Flips/rotations followed by zooming: every pair yields 6 * len(scales) items."""
    return augment_zoom(augment_geometric(items), scales)


def random_crop(image, mask, side=CROP_SIDE, rng=None):
    """Aligned random crop of an image and its mask.

    Inputs smaller than the side are reflect-padded on the bottom/right first.

    :return: image crop, mask crop, (row, col) offset
    """
    if rng is None:
        raise ValueError('random_crop needs an explicit generator')
    h, w = image.shape[:2]
    pad_h, pad_w = max(side - h, 0), max(side - w, 0)
    if pad_h or pad_w:
        image = np.pad(image, ((0, pad_h), (0, pad_w)) + ((0, 0),) * (image.ndim - 2), mode='reflect')
        if mask is not None:
            mask = np.pad(mask, ((0, pad_h), (0, pad_w)), mode='reflect')
        h, w = image.shape[:2]
    row = int(rng.integers(0, h - side + 1))
    col = int(rng.integers(0, w - side + 1))
    img_crop = image[row:row + side, col:col + side]
    mask_crop = None if mask is None else mask[row:row + side, col:col + side]
    return img_crop, mask_crop, (row, col)


def compute_stats(images, pixel_scale=1.0):
    """Per-channel mean and population standard deviation over all pixels of all images.

    Per-image moments are merged pairwise, so the result does not depend on the order.

    :param images:       iterable of H x W x C arrays
    :param pixel_scale:  pixel values are multiplied by this factor first
    """
    qty = 0
    mean = None
    m2 = None
    for image in images:
        x = np.asarray(image, dtype=np.float64).reshape(-1, image.shape[-1]) * pixel_scale
        n = x.shape[0]
        if n == 0:
            continue
        img_mean = x.mean(axis=0)
        img_m2 = ((x - img_mean) ** 2).sum(axis=0)
        if mean is None:
            qty, mean, m2 = n, img_mean, img_m2
            continue
        total = qty + n
        delta = img_mean - mean
        mean = mean + delta * (n / total)
        m2 = m2 + img_m2 + delta ** 2 * (qty * n / total)
        qty = total
    if mean is None:
        raise DataError('Cannot compute normalization statistics of an empty image set')
    std = np.sqrt(m2 / qty)
    std = np.where(std > 0, std, STATS_EPS)
    return NormalizationStats(mean=mean, std=std, pixel_scale=pixel_scale)


def _standardize(image, mean, std, pixel_scale):
    x = np.asarray(image, dtype=np.float64) * pixel_scale
    return np.ascontiguousarray(((x - mean) / std).transpose(2, 0, 1), dtype=np.float32)


def normalize_global(image, stats):
    """Standardize an H x W x C image with dataset statistics, returns a C x H x W float32 tensor."""
    if image.ndim != 3 or image.shape[-1] != len(stats.mean):
        raise ShapeError(f'Image shape {image.shape} does not match {len(stats.mean)}-channel statistics')
    return _standardize(image, stats.mean, stats.std, stats.pixel_scale)


def normalize_individual(image):
    """Standardize an H x W x C image with its own per-channel statistics (C x H x W float32)."""
    if image.ndim != 3:
        raise ShapeError(f'Expected an H x W x C image, got shape {image.shape}')
    x = np.asarray(image, dtype=np.float64)
    mean = x.mean(axis=(0, 1))
    std = x.std(axis=(0, 1))
    std = np.where(std > 0, std, STATS_EPS)
    return _standardize(x, mean, std, 1.0)


def save_stats(file_name, stats):
    save_json(file_name, {'mean': [float(v) for v in stats.mean],
                          'std': [float(v) for v in stats.std],
                          'pixel_scale': float(stats.pixel_scale),
                          'note': STATS_NOTE})


def load_stats(file_name):
    data = read_json(file_name)
    try:
        mean = np.array(data['mean'], dtype=np.float64)
        std = np.array(data['std'], dtype=np.float64)
        pixel_scale = float(data.get('pixel_scale', PIXEL_SCALE))
    except KeyError as e:
        raise DataError(f'Missing key {e} in the stats file {file_name}')
    if mean.shape != std.shape or np.any(std <= 0):
        raise DataError(f'Invalid statistics in {file_name}')
    return NormalizationStats(mean=mean, std=std, pixel_scale=pixel_scale)


def read_rgb_image(file_name):
    """Read an 8-bit RGB image (grayscale is replicated, alpha dropped)."""
    try:
        img = skimage.io.imread(file_name)
    except (OSError, ValueError) as e:
        raise DataError(f'Cannot read image {file_name}: {e}')
    if img.dtype != np.uint8:
        raise DataError(f'Expected an 8-bit image in {file_name}, got {img.dtype}')
    if img.ndim == 2:
        img = np.stack([img] * 3, axis=-1)
    elif img.ndim == 3 and img.shape[-1] == 4:
        img = img[..., :3]
    if img.ndim != 3 or img.shape[-1] != 3 or min(img.shape[:2]) < 1:
        raise DataError(f'Unsupported image shape {img.shape} in {file_name}')
    return np.ascontiguousarray(img)


def _save_png(file_name, arr):
    dir_name = os.path.dirname(file_name)
    if dir_name:
        os.makedirs(dir_name, exist_ok=True)
    skimage.io.imsave(file_name, arr, check_contrast=False)


def write_rgb_image(file_name, image):
    _save_png(file_name, np.ascontiguousarray(image, dtype=np.uint8))


def write_mask_png(file_name, mask):
    _save_png(file_name, np.where(mask == CELL_CLASS, 255, 0).astype(np.uint8))


def read_mask_png(file_name):
    try:
        img = skimage.io.imread(file_name)
    except (OSError, ValueError) as e:
        raise DataError(f'Cannot read mask {file_name}: {e}')
    if img.ndim == 3:
        img = img[..., 0]
    return np.where(img >= 128, CELL_CLASS, BACKGROUND_CLASS).astype(np.uint8)


def write_prob_png(file_name, prob):
    """16-bit PNG of round(p * 65535)."""
    _save_png(file_name, np.rint(np.clip(prob, 0.0, 1.0) * 65535).astype(np.uint16))


def read_prob_png(file_name):
    return skimage.io.imread(file_name).astype(np.float64) / 65535


def write_label_png(file_name, labels):
    if labels.max(initial=0) > np.iinfo(np.uint16).max:
        raise DataError(f'Too many instances ({labels.max()}) for a 16-bit label image {file_name}')
    _save_png(file_name, labels.astype(np.uint16))


def read_label_png(file_name):
    return skimage.io.imread(file_name).astype(np.int32)
