import numpy as np
import pytest
from scipy import ndimage

from rnnprop import overseg
from rnnprop._accel import python_impl
from rnnprop.imagecore import Image, SceneConfig, generate_scene
from rnnprop.overseg import Segmentation, build_region_graph, fh_segment


def _image(arr):
    return Image(np.asarray(arr, dtype=np.uint8))


def half_red_half_blue():
    img = np.zeros((4, 4, 3), np.uint8)
    img[:, :2] = (255, 0, 0)
    img[:, 2:] = (0, 0, 255)
    return _image(img)


def noise_image(seed, size=16):
    return _image(np.random.default_rng(seed).integers(0, 256, size=(size, size, 3)))


def assert_4connected(seg):
    for r in range(seg.region_count):
        _, n = ndimage.label(seg.region_of == r)  # default structure is 4-connectivity
        assert n == 1, f"region {r} splits into {n} pieces"


def test_two_halves():
    seg = fh_segment(half_red_half_blue(), k=10, min_size=1, sigma=0)
    assert seg.region_count == 2
    assert np.all(seg.region_of[:, :2] == 0) and np.all(seg.region_of[:, 2:] == 1)


@pytest.mark.parametrize("k", [1, 100, 1e6])
def test_uniform_image_is_one_region(k):
    seg = fh_segment(_image(np.full((7, 5, 3), 90)), k=k, min_size=1, sigma=0.8)
    assert seg.region_count == 1


def test_min_size_on_noise():
    seg = fh_segment(noise_image(0), k=100, min_size=20, sigma=0.8)
    sizes = np.bincount(seg.region_of.ravel())
    assert sizes.min() >= 20
    assert_4connected(seg)


def test_regions_are_4connected_and_contiguous():
    img, _ = generate_scene(SceneConfig(seed=9))
    seg = fh_segment(img, k=100, min_size=8)
    assert sorted(np.unique(seg.region_of)) == list(range(seg.region_count))
    assert_4connected(seg)


def test_checkerboard_pixels_stay_4connected():
    # alternating colours: the 8-connected graph links diagonal twins
    yy, xx = np.mgrid[0:6, 0:6]
    img = np.where(((yy + xx) % 2 == 0)[..., None], (255, 255, 255), (0, 0, 0))
    seg = fh_segment(_image(img), k=10, min_size=1, sigma=0)
    assert_4connected(seg)


def test_larger_k_never_gives_more_regions():
    # fixed corpus: default scenes; not a universal property of the algorithm
    for seed in range(40):
        img, _ = generate_scene(SceneConfig(seed=seed))
        assert fh_segment(img, 250, 8).region_count <= fh_segment(img, 100, 8).region_count


def test_deterministic():
    img = noise_image(3, 24)
    a = fh_segment(img, 150, 10)
    b = fh_segment(img, 150, 10)
    assert np.array_equal(a.region_of, b.region_of)


def test_compiled_and_python_kernels_agree(monkeypatch):
    img, _ = generate_scene(SceneConfig(seed=4))
    compiled = fh_segment(img, 100, 8)
    for name in ("_segment_graph", "_absorb_small", "_split_4connected", "_attach_fragments", "_roots", "_find", "_join"):
        monkeypatch.setattr(overseg, name, python_impl(getattr(overseg, name)))
    plain = fh_segment(img, 100, 8)
    assert np.array_equal(compiled.region_of, plain.region_of)


def test_invalid_parameters():
    img = half_red_half_blue()
    with pytest.raises(ValueError):
        fh_segment(img, 0)
    with pytest.raises(ValueError):
        fh_segment(img, 10, min_size=0)
    with pytest.raises(ValueError):
        fh_segment(img, 10, sigma=-1)


def test_smooth_preserves_constant_and_mean():
    flat = np.full((5, 6), 7.0)
    assert np.allclose(overseg.smooth(flat, 0.8), 7.0)
    x = np.random.default_rng(0).random((9, 9))
    assert np.array_equal(overseg.smooth(x, 0), x)


# --- region graph ---------------------------------------------------------


def seg_of(labels):
    labels = np.asarray(labels, dtype=np.int32)
    return Segmentation(labels, int(labels.max()) + 1)


def test_graph_half_half():
    g = build_region_graph(seg_of([[0, 0, 1, 1]] * 4))
    assert g.edge_set() == {(0, 1)}


def test_graph_three_stripes():
    g = build_region_graph(seg_of([[0, 1, 2]] * 3))
    assert g.edge_set() == {(0, 1), (1, 2)}


def test_graph_quadrants_no_diagonals():
    g = build_region_graph(seg_of([[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]]))
    assert g.edge_set() == {(0, 1), (0, 2), (1, 3), (2, 3)}
    assert g.neighbors(0) == {1, 2}


def test_graph_node_stats():
    img, _ = generate_scene(SceneConfig(seed=2))
    seg = fh_segment(img, 100, 8)
    g = build_region_graph(seg)
    assert g.sizes.sum() == 64 * 64
    assert all(a < b for a, b in g.edges)
    for r in range(seg.region_count):
        ys, xs = np.nonzero(seg.region_of == r)
        assert tuple(g.boxes[r]) == (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)
        assert sorted(g.pixels(r)) == sorted(np.flatnonzero(seg.region_of == r))
    # brute-force adjacency
    brute = set()
    lab = seg.region_of
    for y in range(64):
        for x in range(64):
            for dy, dx in ((0, 1), (1, 0)):
                if y + dy < 64 and x + dx < 64 and lab[y, x] != lab[y + dy, x + dx]:
                    a, b = lab[y, x], lab[y + dy, x + dx]
                    brute.add((min(a, b), max(a, b)))
    assert g.edge_set() == brute
