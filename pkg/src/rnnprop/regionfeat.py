"""Hand-crafted region descriptors.

Layout of the 64-dim vector (all entries in [0, 1]):

====== ===== =====================================================
offset len   block
====== ===== =====================================================
0      24    RGB histogram, 8 bins per channel, each channel sums to 1
24     3     mean RGB / 255
27     8     Sobel orientation histogram on grey, magnitude weighted
35     7     log-area ratio, box w/W, box h/H, aspect/10, centre x, y,
             fill ratio (area / box area)
42     3     mean |RGB difference| across the region border / 255
45     19    zero padding
====== ===== =====================================================
"""

from __future__ import annotations

import numpy as np

from .imagecore import Image
from .overseg import RegionGraph

N_BINS = 8
USED_DIMS = 45
DEFAULT_DIMS = 64

COLOR = slice(0, 24)
MEAN_RGB = slice(24, 27)
ORIENT = slice(27, 35)
GEOM = slice(35, 42)
CONTRAST = slice(42, 45)


def sobel_gradients(image: Image) -> tuple:
    """Magnitude and orientation bin of the grey-level Sobel gradient."""
    grey = image.data.astype(np.float64).sum(axis=2) / 3.0
    p = np.pad(grey, 1, mode="symmetric")
    gx = (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2])
    gy = (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:])
    mag = np.hypot(gx, gy)
    angle = np.arctan2(gy, gx)
    bins = np.floor((angle + np.pi) / (2 * np.pi / N_BINS)).astype(np.int64) % N_BINS
    return mag, bins


def _border_pairs(labels: np.ndarray):
    """Flat pixel index pairs (p, q) that are 4-adjacent with different labels."""
    h, w = labels.shape
    idx = np.arange(h * w).reshape(h, w)
    ps, qs = [], []
    for a, b, ia, ib in ((labels[:, :-1], labels[:, 1:], idx[:, :-1], idx[:, 1:]),
                         (labels[:-1, :], labels[1:, :], idx[:-1, :], idx[1:, :])):
        diff = a != b
        ps.append(ia[diff])
        qs.append(ib[diff])
    return np.concatenate(ps), np.concatenate(qs)


def _assemble(n, color_counts, rgb_sum, orient, area, boxes, contrast_sum, contrast_n, width, height, dims):
    out = np.zeros((n, dims), dtype=np.float64)
    safe = np.maximum(area, 1.0)
    cc = color_counts.reshape(n, 3, N_BINS)
    out[:, COLOR] = (cc / safe[:, None, None]).reshape(n, 3 * N_BINS)
    out[:, MEAN_RGB] = rgb_sum / safe[:, None] / 255.0

    tot = orient.sum(axis=1, keepdims=True)
    flat = tot[:, 0] <= 0
    orient = np.where(flat[:, None], 1.0 / N_BINS, orient / np.where(flat, 1.0, tot[:, 0])[:, None])
    out[:, ORIENT] = orient

    bw = (boxes[:, 2] - boxes[:, 0]).astype(np.float64)
    bh = (boxes[:, 3] - boxes[:, 1]).astype(np.float64)
    g = out[:, GEOM]
    g[:, 0] = np.log1p(area) / np.log1p(width * height)
    g[:, 1] = bw / width
    g[:, 2] = bh / height
    g[:, 3] = np.clip(bw / bh, 0.1, 10.0) / 10.0
    g[:, 4] = (boxes[:, 0] + boxes[:, 2]) / 2.0 / width
    g[:, 5] = (boxes[:, 1] + boxes[:, 3]) / 2.0 / height
    g[:, 6] = area / (bw * bh)
    out[:, GEOM] = g

    denom = np.maximum(contrast_n, 1)[:, None]
    out[:, CONTRAST] = contrast_sum / denom / 255.0
    return out


def extract_features(image: Image, pixels, box, dims: int = DEFAULT_DIMS) -> np.ndarray:
    """Descriptor of one region given its flat pixel indices and tight box."""
    pixels = np.asarray(pixels, dtype=np.int64)
    if pixels.size == 0:
        raise ValueError("cannot describe an empty region")
    if dims < USED_DIMS:
        raise ValueError(f"feature length must be >= {USED_DIMS}")
    h, w = image.height, image.width
    inside = np.zeros(h * w, dtype=np.int32)
    inside[pixels] = 1
    return _features_for_labels(image, inside.reshape(h, w), 2, np.array([box, box]), dims)[1:2][0]


def extract_all_features(image: Image, graph: RegionGraph, dims: int = DEFAULT_DIMS) -> np.ndarray:
    """``(n_regions, dims)`` descriptors for every region of ``graph``."""
    if dims < USED_DIMS:
        raise ValueError(f"feature length must be >= {USED_DIMS}")
    return _features_for_labels(image, graph.seg.region_of, graph.n_regions, graph.boxes, dims)


def _features_for_labels(image, labels, n, boxes, dims):
    h, w = labels.shape
    flat = labels.ravel().astype(np.int64)
    rgb = image.data.reshape(-1, 3).astype(np.int64)
    area = np.bincount(flat, minlength=n).astype(np.float64)

    color_counts = np.zeros(n * 3 * N_BINS, dtype=np.float64)
    for c in range(3):
        key = flat * (3 * N_BINS) + c * N_BINS + rgb[:, c] // (256 // N_BINS)
        color_counts += np.bincount(key, minlength=n * 3 * N_BINS)
    rgb_sum = np.stack([np.bincount(flat, weights=rgb[:, c], minlength=n) for c in range(3)], axis=1)

    mag, obin = sobel_gradients(image)
    orient = np.bincount(flat * N_BINS + obin.ravel(), weights=mag.ravel(), minlength=n * N_BINS).reshape(n, N_BINS)

    p, q = _border_pairs(labels)
    diff = np.abs(rgb[p] - rgb[q]).astype(np.float64)
    contrast_sum = np.zeros((n, 3))
    for c in range(3):
        contrast_sum[:, c] = np.bincount(flat[p], weights=diff[:, c], minlength=n)
        contrast_sum[:, c] += np.bincount(flat[q], weights=diff[:, c], minlength=n)
    contrast_n = np.bincount(flat[p], minlength=n) + np.bincount(flat[q], minlength=n)

    return _assemble(n, color_counts, rgb_sum, orient, area, np.asarray(boxes), contrast_sum, contrast_n, w, h, dims)
