"""Synthetic stain-like images with elliptical nuclei and their polygon annotations."""
import numpy as np

from aenet.config import ORGANS
from aenet.imaging import AnnotationSet, rasterize

# Background (eosin-like) and nucleus (hematoxylin-like) RGB per organ
STAIN_COLORS = {
    'breast': ((232, 190, 215), (95, 50, 140)),
    'liver': ((226, 178, 200), (110, 55, 130)),
    'kidney': ((238, 200, 220), (85, 45, 150)),
    'prostate': ((228, 185, 210), (100, 60, 145)),
    'bladder': ((215, 205, 225), (70, 60, 120)),
    'colon': ((240, 175, 195), (120, 45, 120)),
    'stomach': ((222, 195, 235), (80, 40, 160)),
}

POLYGON_VERTEX_QTY = 24


def ellipse_polygon(cx, cy, rx, ry, angle, vertex_qty=POLYGON_VERTEX_QTY):
    t = np.linspace(0.0, 2 * np.pi, vertex_qty, endpoint=False)
    ca, sa = np.cos(angle), np.sin(angle)
    x = rx * np.cos(t)
    y = ry * np.sin(t)
    return np.stack([cx + ca * x - sa * y, cy + sa * x + ca * y], axis=1)


def generate_blob_image(rng, size=64, organ='breast', blob_qty=(3, 8), radius=(3.0, 7.0), noise=12.0):
    """Generate one image.

    :param rng:       numpy Generator
    :param size:      image side
    :param organ:     organ tag that selects the stain colors
    :param blob_qty:  inclusive range of the # of nuclei
    :param radius:    range of the ellipse semi-axes
    :param noise:     standard deviation of additive Gaussian noise (0-255 scale)

    :return: H x W x 3 uint8 image, AnnotationSet
    """
    if organ not in STAIN_COLORS:
        raise ValueError(f'Unknown organ: {organ}, expected one of {ORGANS}')
    background, nucleus = (np.array(c, dtype=np.float64) for c in STAIN_COLORS[organ])
    qty = int(rng.integers(blob_qty[0], blob_qty[1] + 1))
    polygons = []
    for _ in range(qty):
        rx, ry = rng.uniform(radius[0], radius[1], size=2)
        cx, cy = rng.uniform(rx, size - rx), rng.uniform(ry, size - ry)
        polygons.append(ellipse_polygon(cx, cy, rx, ry, rng.uniform(0, np.pi)))
    annots = AnnotationSet(polygons=polygons)

    cell = rasterize(annots, (size, size)) == 0
    # Mild per-image stain jitter
    jitter = rng.normal(0.0, 6.0, size=3)
    img = np.where(cell[..., None], nucleus, background) + jitter
    img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), annots
