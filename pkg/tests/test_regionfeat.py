import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rnnprop.imagecore import Image, SceneConfig, generate_scene
from rnnprop.overseg import build_region_graph, fh_segment
from rnnprop.regionfeat import (
    COLOR,
    CONTRAST,
    GEOM,
    MEAN_RGB,
    N_BINS,
    ORIENT,
    USED_DIMS,
    extract_all_features,
    extract_features,
    sobel_gradients,
)


def box_of(pixels, width):
    ys, xs = np.divmod(np.asarray(pixels), width)
    return (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)


def test_single_red_pixel_histogram():
    img = np.zeros((5, 5, 3), np.uint8)
    img[2, 2] = (255, 0, 0)
    f = extract_features(Image(img), [12], (2, 2, 3, 3))
    hist = f[COLOR].reshape(3, N_BINS)
    assert [np.count_nonzero(row) for row in hist] == [1, 1, 1]
    assert hist[0, N_BINS - 1] == 1.0 and hist[1, 0] == 1.0 and hist[2, 0] == 1.0
    assert np.allclose(f[MEAN_RGB], [1.0, 0.0, 0.0])


def test_whole_image_region():
    img, _ = generate_scene(SceneConfig(seed=1, width=20, height=12))
    f = extract_features(img, np.arange(240), (0, 0, 20, 12))
    g = f[GEOM]
    assert g[0] == pytest.approx(1.0)
    assert (g[4], g[5]) == (0.5, 0.5)
    assert (g[1], g[2], g[6]) == (1.0, 1.0, 1.0)
    assert np.all(f[CONTRAST] == 0)  # no border inside the canvas


def test_translated_copies_differ_only_in_geometry():
    img = np.full((20, 30, 3), 40, np.uint8)
    patch = np.random.default_rng(0).integers(0, 256, size=(4, 5, 3))
    img[3:7, 4:9] = patch
    img[11:15, 20:25] = patch
    idx = np.arange(600).reshape(20, 30)
    a = idx[3:7, 4:9].ravel()
    b = idx[11:15, 20:25].ravel()
    fa = extract_features(Image(img), a, box_of(a, 30))
    fb = extract_features(Image(img), b, box_of(b, 30))
    same = np.ones(fa.size, bool)
    same[GEOM] = False
    assert np.array_equal(fa[same], fb[same])
    assert np.array_equal(fa[GEOM][[0, 1, 2, 3, 6]], fb[GEOM][[0, 1, 2, 3, 6]])
    assert not np.array_equal(fa[GEOM][4:6], fb[GEOM][4:6])


def test_flat_region_orientation_is_uniform():
    img = Image(np.full((6, 6, 3), 100, np.uint8))
    f = extract_features(img, np.arange(36), (0, 0, 6, 6))
    assert np.allclose(f[ORIENT], 1.0 / N_BINS)


def test_vertical_edge_orientation():
    img = np.zeros((5, 6, 3), np.uint8)
    img[:, 3:] = 200
    mag, bins = sobel_gradients(Image(img))
    assert mag[:, 2:4].min() > 0 and np.all(mag[:, [0, 5]] == 0)
    # gradient points along +x: angle 0 falls in the bin just above pi
    assert np.all(bins[:, 2:4] == N_BINS // 2)


def test_empty_region_raises():
    with pytest.raises(ValueError):
        extract_features(Image(np.zeros((3, 3, 3), np.uint8)), [], (0, 0, 1, 1))


def test_short_dims_rejected():
    with pytest.raises(ValueError):
        extract_features(Image(np.zeros((3, 3, 3), np.uint8)), [0], (0, 0, 1, 1), dims=USED_DIMS - 1)


@pytest.mark.parametrize("seed", range(6))
def test_all_features_invariants(seed):
    img, _ = generate_scene(SceneConfig(seed=seed))
    g = build_region_graph(fh_segment(img, 100, 8))
    X = extract_all_features(img, g)
    assert X.shape == (g.n_regions, 64)
    assert np.all(np.isfinite(X)) and X.min() >= 0 and X.max() <= 1
    assert np.allclose(X[:, COLOR].reshape(-1, 3, N_BINS).sum(axis=2), 1.0, atol=1e-9)
    assert np.allclose(X[:, ORIENT].sum(axis=1), 1.0, atol=1e-9)
    assert np.all(X[:, USED_DIMS:] == 0)
    # batched path agrees with the single-region path
    for r in range(0, g.n_regions, max(1, g.n_regions // 5)):
        assert np.allclose(X[r], extract_features(img, g.pixels(r), g.boxes[r]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 8), st.integers(2, 8))
def test_random_region_bounds(seed, h, w):
    rng = np.random.default_rng(seed)
    img = Image(rng.integers(0, 256, size=(h, w, 3)).astype(np.uint8))
    pixels = np.flatnonzero(rng.random(h * w) < 0.5)
    if pixels.size == 0:
        pixels = np.array([0])
    f = extract_features(img, pixels, box_of(pixels, w))
    assert np.all(np.isfinite(f)) and f.min() >= 0 and f.max() <= 1
