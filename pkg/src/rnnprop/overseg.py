"""Graph-based over-segmentation (Felzenszwalb & Huttenlocher) and region graphs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._accel import njit
from .imagecore import Image


@dataclass(frozen=True)
class Segmentation:
    region_of: np.ndarray  # (height, width) int32
    region_count: int

    @property
    def width(self) -> int:
        return self.region_of.shape[1]

    @property
    def height(self) -> int:
        return self.region_of.shape[0]


@dataclass
class RegionGraph:
    """Regions of a segmentation plus their 4-adjacency.

    ``boxes[r]`` is ``(x0, y0, x1, y1)`` inclusive-exclusive.  Pixels of a
    region are available as flat indices through :meth:`pixels`.
    """

    seg: Segmentation
    sizes: np.ndarray
    boxes: np.ndarray
    edges: np.ndarray  # (E, 2), a < b, lexicographically sorted
    _order: np.ndarray = field(repr=False)
    _offsets: np.ndarray = field(repr=False)
    _neighbors: list = field(default=None, repr=False)

    @property
    def n_regions(self) -> int:
        return int(self.sizes.shape[0])

    def pixels(self, region: int) -> np.ndarray:
        return self._order[self._offsets[region]:self._offsets[region + 1]]

    def neighbors(self, region: int) -> set:
        if self._neighbors is None:
            nb = [set() for _ in range(self.n_regions)]
            for a, b in self.edges:
                nb[a].add(int(b))
                nb[b].add(int(a))
            self._neighbors = nb
        return self._neighbors[region]

    def edge_set(self) -> set:
        return {(int(a), int(b)) for a, b in self.edges}


# ---------------------------------------------------------------------------
# kernels (numba-compatible subset)


@njit
def _find(parent, x):
    while parent[x] != x:
        parent[x] = parent[parent[x]]
        x = parent[x]
    return x


@njit
def _join(parent, rank, size, a, b):
    if rank[a] > rank[b]:
        parent[b] = a
        size[a] += size[b]
        return a
    parent[a] = b
    size[b] += size[a]
    if rank[a] == rank[b]:
        rank[b] += 1
    return b


@njit
def _segment_graph(n, src, dst, weight, k, parent, rank, size):
    thr = np.empty(n, dtype=np.float64)
    for i in range(n):
        thr[i] = k
    for e in range(src.shape[0]):
        a = _find(parent, src[e])
        b = _find(parent, dst[e])
        if a != b:
            w = weight[e]
            if w <= thr[a] and w <= thr[b]:
                r = _join(parent, rank, size, a, b)
                thr[r] = w + k / size[r]


@njit
def _absorb_small(src, dst, min_size, parent, rank, size):
    # edges arrive in ascending weight, so each small component joins its cheapest neighbour
    for e in range(src.shape[0]):
        a = _find(parent, src[e])
        b = _find(parent, dst[e])
        if a != b and (size[a] < min_size or size[b] < min_size):
            _join(parent, rank, size, a, b)


@njit
def _split_4connected(comp, height, width, parent, rank, size):
    for y in range(height):
        for x in range(width):
            p = y * width + x
            if x + 1 < width and comp[p] == comp[p + 1]:
                a = _find(parent, p)
                b = _find(parent, p + 1)
                if a != b:
                    _join(parent, rank, size, a, b)
            if y + 1 < height and comp[p] == comp[p + width]:
                a = _find(parent, p)
                b = _find(parent, p + width)
                if a != b:
                    _join(parent, rank, size, a, b)


@njit
def _attach_fragments(src, dst, anchor, parent, rank, size):
    # ascending 4-neighbour edges; two anchored groups never merge
    for e in range(src.shape[0]):
        a = _find(parent, src[e])
        b = _find(parent, dst[e])
        if a != b and not (anchor[a] and anchor[b]):
            flag = anchor[a] or anchor[b]
            _join(parent, rank, size, a, b)
            anchor[_find(parent, a)] = flag


@njit
def _roots(parent):
    out = np.empty(parent.shape[0], dtype=np.int64)
    for i in range(parent.shape[0]):
        out[i] = _find(parent, i)
    return out


# ---------------------------------------------------------------------------


def _gaussian_kernel(sigma: float) -> np.ndarray:
    sigma = max(sigma, 0.01)
    half = int(np.ceil(sigma * 4.0))
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def smooth(channel: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with edge clamping; ``sigma == 0`` is a no-op."""
    out = np.asarray(channel, dtype=np.float64)
    if sigma <= 0:
        return out.copy()
    k = _gaussian_kernel(sigma)
    half = len(k) // 2
    for axis in (1, 0):
        pad = [(0, 0), (0, 0)]
        pad[axis] = (half, half)
        padded = np.pad(out, pad, mode="edge")
        acc = np.zeros_like(out)
        n = out.shape[axis]
        for i, wt in enumerate(k):
            sl = [slice(None), slice(None)]
            sl[axis] = slice(i, i + n)
            acc += wt * padded[tuple(sl)]
        out = acc
    return out


def _pixel_edges(img: np.ndarray, eight: bool):
    h, w, _ = img.shape
    idx = np.arange(h * w, dtype=np.int64).reshape(h, w)
    offsets = [(0, 1), (1, 0)]
    if eight:
        offsets += [(1, 1), (-1, 1)]
    srcs, dsts, wts = [], [], []
    for dy, dx in offsets:
        ys = slice(max(0, -dy), h - max(0, dy))
        yd = slice(max(0, dy), h - max(0, -dy))
        xs = slice(0, w - dx)
        xd = slice(dx, w)
        a = idx[ys, xs].ravel()
        b = idx[yd, xd].ravel()
        diff = img[ys, xs] - img[yd, xd]
        srcs.append(a)
        dsts.append(b)
        wts.append(np.sqrt(np.sum(diff * diff, axis=-1)).ravel())
    src = np.concatenate(srcs)
    dst = np.concatenate(dsts)
    wt = np.concatenate(wts)
    lo = np.minimum(src, dst)
    hi = np.maximum(src, dst)
    order = np.lexsort((hi, lo, wt))
    return lo[order], hi[order], wt[order]


def _relabel(roots: np.ndarray, shape) -> tuple:
    _, first, inverse = np.unique(roots, return_index=True, return_inverse=True)
    # ids in order of first appearance (row-major)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(first))
    return rank[inverse].reshape(shape).astype(np.int32), len(first)


def default_min_size(width: int, height: int) -> int:
    return max(4, (width * height) // 500)


def fh_segment(image: Image, k: float, min_size: int = 20, sigma: float = 0.8) -> Segmentation:
    """Over-segment ``image`` into 4-connected regions.

    The 8-connected pixel graph is merged in ascending edge order whenever
    the edge is no heavier than both components' internal difference plus
    ``k / |C|``; components under ``min_size`` are then absorbed by their
    cheapest neighbour.  Components are finally split into 4-connected
    pieces; the largest piece of each component stays and the others are
    attached along the cheapest 4-neighbour edges, so every region is
    4-connected and the region count matches the component count.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    if min_size < 1:
        raise ValueError("min_size must be >= 1")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    h, w = image.height, image.width
    n = h * w
    rgb = image.data.astype(np.float64)
    smoothed = np.stack([smooth(rgb[..., c], sigma) for c in range(3)], axis=-1)

    src, dst, wt = _pixel_edges(smoothed, eight=True)
    parent = np.arange(n, dtype=np.int64)
    rank = np.zeros(n, dtype=np.int64)
    size = np.ones(n, dtype=np.int64)
    _segment_graph(n, src, dst, wt, float(k), parent, rank, size)
    _absorb_small(src, dst, min_size, parent, rank, size)
    comp = _roots(parent)

    parent = np.arange(n, dtype=np.int64)
    rank = np.zeros(n, dtype=np.int64)
    size = np.ones(n, dtype=np.int64)
    _split_4connected(comp, h, w, parent, rank, size)
    src4, dst4, _ = _pixel_edges(smoothed, eight=False)
    _attach_fragments(src4, dst4, _anchors(comp, _roots(parent), size), parent, rank, size)
    _absorb_small(src4, dst4, min_size, parent, rank, size)

    labels, count = _relabel(_roots(parent), (h, w))
    return Segmentation(labels, count)


def _anchors(comp, piece, size):
    """Mark the largest 4-connected piece of each component (first on ties)."""
    roots = np.unique(piece)
    best = {}
    for r in roots:
        c = comp[r]
        if c not in best or size[r] > size[best[c]]:
            best[c] = r
    anchor = np.zeros(comp.shape[0], dtype=np.bool_)
    anchor[list(best.values())] = True
    return anchor


def build_region_graph(seg: Segmentation) -> RegionGraph:
    lab = seg.region_of
    h, w = lab.shape
    n = seg.region_count
    flat = lab.ravel()
    sizes = np.bincount(flat, minlength=n).astype(np.int64)

    ys, xs = np.divmod(np.arange(h * w), w)
    boxes = np.empty((n, 4), dtype=np.int64)
    boxes[:, 0] = w
    boxes[:, 1] = h
    boxes[:, 2] = 0
    boxes[:, 3] = 0
    np.minimum.at(boxes[:, 0], flat, xs)
    np.minimum.at(boxes[:, 1], flat, ys)
    np.maximum.at(boxes[:, 2], flat, xs + 1)
    np.maximum.at(boxes[:, 3], flat, ys + 1)

    pairs = []
    for a, b in ((lab[:, :-1], lab[:, 1:]), (lab[:-1, :], lab[1:, :])):
        diff = a != b
        if np.any(diff):
            pa, pb = a[diff].astype(np.int64), b[diff].astype(np.int64)
            pairs.append(np.stack([np.minimum(pa, pb), np.maximum(pa, pb)], axis=1))
    if pairs:
        edges = np.unique(np.concatenate(pairs), axis=0)
    else:
        edges = np.zeros((0, 2), dtype=np.int64)

    order = np.argsort(flat, kind="stable")
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    return RegionGraph(seg, sizes, boxes, edges, order, offsets)
