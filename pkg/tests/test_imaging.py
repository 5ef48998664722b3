import numpy as np
import pytest
import scipy.stats
import skimage.io

from aenet.config import ZOOM_SCALES, CELL_CLASS, BACKGROUND_CLASS
from aenet.errors import DataError, ShapeError
from aenet.imaging import AnnotationSet, parse_annotations, read_annotations, annotations_to_xml, rasterize, \
    augment, augment_geometric, zoom, random_crop, compute_stats, normalize_global, normalize_individual, \
    save_stats, load_stats, read_rgb_image, write_rgb_image, write_mask_png, read_mask_png, write_prob_png, \
    read_prob_png, write_label_png, read_label_png, NormalizationStats


def test_parse_skips_short_regions(square_xml):
    annots = parse_annotations(square_xml)
    assert len(annots.polygons) == 1
    np.testing.assert_array_equal(annots.polygons[0], [[2, 2], [6, 2], [6, 6], [2, 6]])


def test_rasterize_square(square_xml):
    mask = rasterize(parse_annotations(square_xml), (8, 9))
    assert mask.shape == (8, 9) and mask.dtype == np.uint8
    expected = np.full((8, 9), BACKGROUND_CLASS, dtype=np.uint8)
    expected[2:6, 2:6] = CELL_CLASS
    np.testing.assert_array_equal(mask, expected)


def test_rasterize_clips_and_ignores_outside_polygons():
    annots = AnnotationSet(polygons=[np.array([[-5.0, -5.0], [3.0, -5.0], [3.0, 3.0], [-5.0, 3.0]]),
                                     np.array([[20.0, 20.0], [30.0, 20.0], [30.0, 30.0]])])
    mask = rasterize(annots, (6, 6))
    assert (mask == CELL_CLASS).sum() == 9
    assert np.all(mask[:3, :3] == CELL_CLASS)


@pytest.mark.parametrize('document', [b'<Annotations><Region>', b'not xml at all'])
def test_malformed_xml(document):
    with pytest.raises(DataError):
        parse_annotations(document)


def test_vertex_without_coordinates():
    doc = b'<A><Regions><Region><Vertices><Vertex X="1"/></Vertices></Region></Regions></A>'
    with pytest.raises(DataError):
        parse_annotations(doc)


def test_xml_writer_is_readable(tmp_path, square_xml):
    annots = parse_annotations(square_xml)
    fn = tmp_path / 'a.xml'
    fn.write_bytes(annotations_to_xml(annots))
    back = read_annotations(str(fn))
    assert len(back.polygons) == 1
    np.testing.assert_allclose(back.polygons[0], annots.polygons[0], atol=1e-4)


def test_augmentation_counts(rng):
    items = [(rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8), rng.integers(0, 2, size=(8, 8), dtype=np.uint8))
             for _ in range(16)]
    stage1 = augment_geometric(items)
    assert len(stage1) == 96
    full = augment(items)
    assert len(full) == 576
    assert sorted({item.scale for item in full}) == sorted(ZOOM_SCALES)
    for item in full:
        assert item.image.shape[:2] == item.mask.shape


def test_geometric_transforms_keep_alignment(rng):
    image = rng.integers(0, 256, size=(4, 6, 3), dtype=np.uint8)
    mask = (image[..., 0] > 127).astype(np.uint8)
    for item in augment_geometric([(image, mask)]):
        np.testing.assert_array_equal(item.mask, (item.image[..., 0] > 127).astype(np.uint8))
        if item.transform in ('rot90', 'rot270'):
            assert item.image.shape == (6, 4, 3)
    names = [item.transform for item in augment_geometric([(image, mask)])]
    assert len(set(names)) == 6


def test_zoom_sizes_and_labels(rng):
    image = rng.integers(0, 256, size=(10, 10, 3), dtype=np.uint8)
    mask = rng.integers(0, 2, size=(10, 10), dtype=np.uint8)
    zimg, zmask = zoom(image, mask, 0.5)
    assert zimg.shape == (5, 5, 3) and zimg.dtype == np.uint8
    assert set(np.unique(zmask)) <= {0, 1}
    zimg, zmask = zoom(image, mask, 1.75)
    assert zimg.shape == (18, 18, 3) and zmask.shape == (18, 18)
    same, same_mask = zoom(image, mask, 1.0)
    np.testing.assert_array_equal(same, image)
    with pytest.raises(ValueError):
        zoom(image, mask, 0)


def test_random_crop_alignment(rng):
    image = rng.integers(0, 256, size=(20, 30, 3), dtype=np.uint8)
    mask = image[..., 1].copy()
    for _ in range(20):
        img_crop, mask_crop, (row, col) = random_crop(image, mask, side=8, rng=rng)
        assert img_crop.shape == (8, 8, 3)
        np.testing.assert_array_equal(img_crop[..., 1], mask_crop)
        np.testing.assert_array_equal(img_crop, image[row:row + 8, col:col + 8])

    img_crop, mask_crop, _ = random_crop(image[:5, :5], mask[:5, :5], side=8, rng=rng)
    assert img_crop.shape == (8, 8, 3) and mask_crop.shape == (8, 8)
    with pytest.raises(ValueError):
        random_crop(image, mask, side=8)


def test_individual_normalization(rng):
    image = rng.integers(0, 256, size=(12, 9, 3)).astype(np.uint8)
    out = normalize_individual(image)
    assert out.shape == (3, 12, 9) and out.dtype == np.float32
    np.testing.assert_allclose(out.mean(axis=(1, 2)), 0.0, atol=1e-5)
    np.testing.assert_allclose(out.std(axis=(1, 2)), 1.0, atol=1e-4)

    flat = np.full((4, 4, 3), 77, dtype=np.uint8)
    out = normalize_individual(flat)
    assert np.all(np.isfinite(out)) and np.all(out == 0)


def test_stats_order_independent(rng):
    images = [rng.integers(0, 256, size=(rng.integers(3, 9), rng.integers(3, 9), 3)) for _ in range(10)]
    stats = compute_stats(images, pixel_scale=1 / 255)
    rev = compute_stats(images[::-1], pixel_scale=1 / 255)
    np.testing.assert_allclose(stats.mean, rev.mean, atol=1e-12)
    np.testing.assert_allclose(stats.std, rev.std, atol=1e-12)

    pixels = np.concatenate([im.reshape(-1, 3) for im in images]) / 255
    np.testing.assert_allclose(stats.mean, pixels.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(stats.std, pixels.std(axis=0), atol=1e-12)

    with pytest.raises(DataError):
        compute_stats([])


def test_global_normalization(rng):
    image = rng.integers(0, 256, size=(5, 6, 3)).astype(np.uint8)
    stats = NormalizationStats(mean=np.array([0.5, 0.4, 0.3]), std=np.array([0.2, 0.25, 0.1]), pixel_scale=1 / 255)
    out = normalize_global(image, stats)
    np.testing.assert_allclose(out[2], (image[..., 2] / 255 - 0.3) / 0.1, atol=1e-5)
    with pytest.raises(ShapeError):
        normalize_global(image[..., :2], stats)


def test_stats_file(tmp_path):
    stats = NormalizationStats(mean=np.array([0.1, 0.2, 0.3]), std=np.array([1.0, 2.0, 3.0]), pixel_scale=1 / 255)
    fn = str(tmp_path / 'stats.json')
    save_stats(fn, stats)
    back = load_stats(fn)
    np.testing.assert_allclose(back.mean, stats.mean)
    assert back.pixel_scale == pytest.approx(1 / 255)

    (tmp_path / 'bad.json').write_text('{"mean": [0, 0, 0]}')
    with pytest.raises(DataError):
        load_stats(str(tmp_path / 'bad.json'))


def test_png_io(tmp_path, rng):
    image = rng.integers(0, 256, size=(7, 5, 3), dtype=np.uint8)
    write_rgb_image(str(tmp_path / 'img.png'), image)
    np.testing.assert_array_equal(read_rgb_image(str(tmp_path / 'img.png')), image)

    gray = image[..., 0]
    skimage.io.imsave(str(tmp_path / 'gray.png'), gray, check_contrast=False)
    rgb = read_rgb_image(str(tmp_path / 'gray.png'))
    assert rgb.shape == (7, 5, 3)
    np.testing.assert_array_equal(rgb[..., 2], gray)

    mask = rng.integers(0, 2, size=(7, 5)).astype(np.uint8)
    write_mask_png(str(tmp_path / 'sub' / 'mask.png'), mask)
    stored = skimage.io.imread(str(tmp_path / 'sub' / 'mask.png'))
    assert set(np.unique(stored)) <= {0, 255}
    np.testing.assert_array_equal(read_mask_png(str(tmp_path / 'sub' / 'mask.png')), mask)

    prob = rng.uniform(size=(7, 5))
    write_prob_png(str(tmp_path / 'prob.png'), prob)
    np.testing.assert_allclose(read_prob_png(str(tmp_path / 'prob.png')), prob, atol=1 / 65535)

    labels = rng.integers(0, 300, size=(7, 5))
    write_label_png(str(tmp_path / 'labels.png'), labels)
    np.testing.assert_array_equal(read_label_png(str(tmp_path / 'labels.png')), labels)

    with pytest.raises(DataError):
        read_rgb_image(str(tmp_path / 'missing.png'))


TRIANGLE_AND_BOX_XML = b"""<?xml version="1.0" encoding="UTF-8"?>
<Annotations>
  <Annotation Id="1">
    <Regions>
      <Region Id="1">
        <Vertices>
          <Vertex X="0" Y="0"/>
          <Vertex X="6.2" Y="0"/>
          <Vertex X="0" Y="6.2"/>
        </Vertices>
      </Region>
      <Region Id="2">
        <Vertices>
          <Vertex X="7.2" Y="1.2"/>
          <Vertex X="9.8" Y="1.2"/>
          <Vertex X="9.8" Y="4.8"/>
          <Vertex X="7.2" Y="4.8"/>
        </Vertices>
      </Region>
    </Regions>
  </Annotation>
</Annotations>
"""

# '#' is a cell pixel
TRIANGLE_AND_BOX_MASK = [
    '######.....',
    '#####..###.',
    '####...###.',
    '###....###.',
    '##.....###.',
    '#..........',
    '...........',
]


def test_rasterize_matches_golden_mask():
    mask = rasterize(parse_annotations(TRIANGLE_AND_BOX_XML), (7, 11))
    golden = np.array([[CELL_CLASS if ch == '#' else BACKGROUND_CLASS for ch in row]
                       for row in TRIANGLE_AND_BOX_MASK], dtype=np.uint8)
    np.testing.assert_array_equal(mask, golden)


def test_external_entities_are_not_loaded(tmp_path):
    secret = tmp_path / 'regions.xml'
    secret.write_text('<Regions><Region><Vertices><Vertex X="0" Y="0"/><Vertex X="4" Y="0"/>'
                      '<Vertex X="4" Y="4"/></Vertices></Region></Regions>')
    doc = (f'<?xml version="1.0"?>\n'
           f'<!DOCTYPE Annotations [<!ENTITY ext SYSTEM "{secret.as_uri()}">]>\n'
           f'<Annotations><Annotation>&ext;</Annotation></Annotations>')
    assert parse_annotations(doc).polygons == []


def test_double_rot90_is_rot180(rng):
    image = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    mask = rng.integers(0, 2, size=(5, 7), dtype=np.uint8)
    by_name = {item.transform: item for item in augment_geometric([(image, mask)])}
    rot90 = by_name['rot90']
    twice = {item.transform: item for item in augment_geometric([(rot90.image, rot90.mask)])}['rot90']
    np.testing.assert_array_equal(twice.image, by_name['rot180'].image)
    np.testing.assert_array_equal(twice.mask, by_name['rot180'].mask)


def test_random_crop_offsets_are_uniform():
    image = np.zeros((1000, 1000, 3), dtype=np.uint8)
    rng = np.random.default_rng(2024)
    bin_qty = 7
    counts = np.zeros((bin_qty, bin_qty))
    for _ in range(10000):
        _, _, (row, col) = random_crop(image, None, side=224, rng=rng)
        assert 0 <= row <= 776 and 0 <= col <= 776
        # 777 offsets split into 7 bins of 111
        counts[row // 111, col // 111] += 1
    assert scipy.stats.chisquare(counts.ravel()).pvalue > 0.01


def test_random_crop_exact_fit(rng):
    image = rng.integers(0, 256, size=(224, 224, 3), dtype=np.uint8)
    crop, _, offset = random_crop(image, None, side=224, rng=rng)
    assert offset == (0, 0)
    np.testing.assert_array_equal(crop, image)


def test_individual_normalization_is_idempotent(rng):
    image = rng.integers(0, 256, size=(16, 12, 3)).astype(np.uint8)
    once = normalize_individual(image)
    twice = normalize_individual(once.transpose(1, 2, 0))
    assert np.abs(twice - once).max() < 1e-4
