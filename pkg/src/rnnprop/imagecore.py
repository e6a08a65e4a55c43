"""Raster types, PPM/PGM codecs and the synthetic scene generator."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

SHAPES = ("rectangle", "ellipse", "lshape")


class DecodeError(ValueError):
    """Malformed or truncated netpbm data."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Image:
    """RGB raster stored as a ``(height, width, 3)`` uint8 array."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.uint8)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"image data must have shape (h, w, 3), got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def __eq__(self, other):
        return isinstance(other, Image) and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True)
class LabelMask:
    """Per-pixel instance ids, 0 is background."""

    labels: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.labels, dtype=np.int32)
        if arr.ndim != 2:
            raise ValueError("label mask must be 2-D")
        if arr.size and arr.min() < 0:
            raise ValueError("label ids must be non-negative")
        arr.setflags(write=False)
        object.__setattr__(self, "labels", arr)

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    def __eq__(self, other):
        return isinstance(other, LabelMask) and np.array_equal(self.labels, other.labels)

    __hash__ = None


Box = tuple  # (x0, y0, x1, y1), inclusive-exclusive


@dataclass(frozen=True)
class GroundTruth:
    boxes: list  # (instance_id, x0, y0, x1, y1)
    mask: LabelMask

    def box_array(self) -> np.ndarray:
        if not self.boxes:
            return np.zeros((0, 4), dtype=np.int64)
        return np.array([b[1:] for b in self.boxes], dtype=np.int64)

    def instance_areas(self) -> np.ndarray:
        counts = np.bincount(self.mask.labels.ravel())
        return np.array([counts[b[0]] for b in self.boxes], dtype=np.int64)

    def __eq__(self, other):
        return isinstance(other, GroundTruth) and self.boxes == other.boxes and self.mask == other.mask

    __hash__ = None


def boxes_from_mask(labels: np.ndarray) -> list:
    """Tight inclusive-exclusive box of every non-zero instance id, sorted by id."""
    boxes = []
    for inst in np.unique(labels):
        if inst == 0:
            continue
        ys, xs = np.nonzero(labels == inst)
        boxes.append((int(inst), int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1))
    return boxes


# ---------------------------------------------------------------------------
# netpbm codecs


def _parse_header(buf: bytes, magic: bytes) -> tuple:
    if buf[:2] != magic:
        raise DecodeError(f"expected magic {magic.decode()}", 0)
    pos = 2
    values = []
    while len(values) < 3:
        if pos >= len(buf):
            raise DecodeError("truncated header", pos)
        c = buf[pos:pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            nl = buf.find(b"\n", pos)
            if nl < 0:
                raise DecodeError("unterminated comment in header", pos)
            pos = nl + 1
        elif c.isdigit():
            start = pos
            while pos < len(buf) and buf[pos:pos + 1].isdigit():
                pos += 1
            values.append(int(buf[start:pos]))
        else:
            raise DecodeError(f"unexpected byte {c!r} in header", pos)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise DecodeError("missing whitespace after max value", pos)
    pos += 1
    width, height, maxval = values
    if width < 1 or height < 1:
        raise DecodeError(f"invalid dimensions {width}x{height}", 2)
    if maxval != 255:
        raise DecodeError(f"unsupported max value {maxval}", pos - 1)
    return width, height, pos


def decode_ppm(buf: bytes) -> Image:
    width, height, pos = _parse_header(buf, b"P6")
    need = width * height * 3
    if len(buf) - pos < need:
        raise DecodeError(f"truncated data: need {need} bytes, have {len(buf) - pos}", len(buf))
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return Image(data.reshape(height, width, 3))


def encode_ppm(image: Image) -> bytes:
    return b"P6\n%d %d\n255\n" % (image.width, image.height) + image.data.tobytes()


def read_image(path) -> Image:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())


def write_image(image: Image, path) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(encode_ppm(image))
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write image: {exc.strerror}", os.fspath(path)) from exc


def decode_pgm(buf: bytes) -> np.ndarray:
    width, height, pos = _parse_header(buf, b"P5")
    need = width * height
    if len(buf) - pos < need:
        raise DecodeError(f"truncated data: need {need} bytes, have {len(buf) - pos}", len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(height, width).copy()


def encode_pgm(values: np.ndarray) -> bytes:
    arr = np.asarray(values)
    h, w = arr.shape
    return b"P5\n%d %d\n255\n" % (w, h) + (arr.astype(np.int64) % 256).astype(np.uint8).tobytes()


def read_mask(path) -> LabelMask:
    with open(path, "rb") as fh:
        return LabelMask(decode_pgm(fh.read()).astype(np.int32))


def write_mask(mask, path) -> None:
    labels = mask.labels if isinstance(mask, LabelMask) else mask
    with open(path, "wb") as fh:
        fh.write(encode_pgm(labels))


def gt_to_json(gt: GroundTruth, mask_path: str) -> str:
    boxes = [{"id": b[0], "x0": b[1], "y0": b[2], "x1": b[3], "y1": b[4]} for b in gt.boxes]
    return json.dumps({"boxes": boxes, "mask": mask_path}, indent=1) + "\n"


def read_ground_truth(json_path) -> GroundTruth:
    with open(json_path) as fh:
        doc = json.load(fh)
    mask_path = doc["mask"]
    if not os.path.isabs(mask_path):
        mask_path = os.path.join(os.path.dirname(os.fspath(json_path)), mask_path)
    boxes = [(int(b["id"]), int(b["x0"]), int(b["y0"]), int(b["x1"]), int(b["y1"])) for b in doc["boxes"]]
    return GroundTruth(boxes, read_mask(mask_path))


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SceneConfig:
    width: int = 64
    height: int = 64
    min_objects: int = 2
    max_objects: int = 4
    shapes: Sequence[str] = SHAPES
    noise_amplitude: int = 12
    background: str = "noise"  # or "checker"
    checker_cell: int = 8
    occlusion_prob: float = 0.3
    min_color_distance: float = 90.0
    min_extent: float = 0.15  # min object side as a fraction of the canvas
    max_extent: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("canvas must be at least 1x1")
        if not (0 <= self.min_objects <= self.max_objects):
            raise ValueError("object count range is empty")
        if not self.shapes or any(s not in SHAPES for s in self.shapes):
            raise ValueError(f"shapes must be a non-empty subset of {SHAPES}")
        if self.background not in ("checker", "noise"):
            raise ValueError("background must be 'checker' or 'noise'")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ValueError("occlusion_prob must lie in [0, 1]")
        if not 0 <= self.noise_amplitude <= 255:
            raise ValueError("noise_amplitude must lie in [0, 255]")

    @classmethod
    def from_dict(cls, doc: dict) -> "SceneConfig":
        doc = dict(doc)
        if "shapes" in doc:
            doc["shapes"] = tuple(doc["shapes"])
        return cls(**doc)


def _shape_mask(shape: str, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    if shape == "rectangle":
        return np.ones((h, w), dtype=bool)
    if shape == "ellipse":
        yy, xx = np.mgrid[0:h, 0:w]
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        ry, rx = max(h / 2.0, 0.5), max(w / 2.0, 0.5)
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    # L-shape: the full box minus one corner quadrant
    m = np.ones((h, w), dtype=bool)
    cut_h = max(1, int(round(h * rng.uniform(0.4, 0.6))))
    cut_w = max(1, int(round(w * rng.uniform(0.4, 0.6))))
    corner = int(rng.integers(4))
    ys = slice(0, cut_h) if corner < 2 else slice(h - cut_h, h)
    xs = slice(0, cut_w) if corner % 2 == 0 else slice(w - cut_w, w)
    m[ys, xs] = False
    return m


def _random_color(rng, avoid, min_dist):
    color = rng.integers(0, 256, size=3)
    for _ in range(200):
        if all(np.linalg.norm(color - a) >= min_dist for a in avoid):
            break
        color = rng.integers(0, 256, size=3)
    return color


def generate_scene(config: SceneConfig) -> tuple:
    """Draw a random scene; returns ``(Image, GroundTruth)``.

    Everything is a pure function of ``config`` (numpy PCG64 seeded with
    ``config.seed``).  Objects are painted back to front, so the mask carries
    the id of the front-most object at each pixel.  An object whose
    placement leaves any instance below 0.5% of the canvas is redrawn, up to
    100 attempts, after which the scene keeps the objects placed so far.
    """
    rng = np.random.default_rng(np.uint64(config.seed & 0xFFFFFFFFFFFFFFFF))
    H, W = config.height, config.width
    min_pixels = int(np.ceil(0.005 * H * W))

    if config.background == "checker":
        c0 = rng.integers(0, 256, size=3)
        c1 = _random_color(rng, [c0], config.min_color_distance / 2)
        yy, xx = np.mgrid[0:H, 0:W]
        cell = max(1, config.checker_cell)
        parity = ((yy // cell) + (xx // cell)) % 2
        canvas = np.where(parity[..., None] == 0, c0, c1).astype(np.int64)
        bg_colors = [c0, c1]
    else:
        c0 = rng.integers(0, 256, size=3)
        canvas = np.broadcast_to(c0, (H, W, 3)).astype(np.int64)
        bg_colors = [c0]
    amp = config.noise_amplitude
    if amp > 0:
        canvas = canvas + rng.integers(-amp, amp + 1, size=(H, W, 3))

    labels = np.zeros((H, W), dtype=np.int32)
    n_objects = int(rng.integers(config.min_objects, config.max_objects + 1))
    used_colors = list(bg_colors)

    for inst in range(1, n_objects + 1):
        placed = False
        for _attempt in range(100):
            shape = config.shapes[int(rng.integers(len(config.shapes)))]
            lo_h = max(1, int(round(config.min_extent * H)))
            lo_w = max(1, int(round(config.min_extent * W)))
            hi_h = max(lo_h, int(round(config.max_extent * H)))
            hi_w = max(lo_w, int(round(config.max_extent * W)))
            oh = int(rng.integers(lo_h, hi_h + 1))
            ow = int(rng.integers(lo_w, hi_w + 1))
            y0 = int(rng.integers(0, H - oh + 1))
            x0 = int(rng.integers(0, W - ow + 1))
            footprint = _shape_mask(shape, oh, ow, rng)
            allow_overlap = rng.random() < config.occlusion_prob
            color = _random_color(rng, used_colors, config.min_color_distance)
            noise = rng.integers(-amp, amp + 1, size=(oh, ow, 3)) if amp > 0 else 0

            window = labels[y0:y0 + oh, x0:x0 + ow]
            if not allow_overlap and np.any(window[footprint] != 0):
                continue
            trial = labels.copy()
            trial[y0:y0 + oh, x0:x0 + ow][footprint] = inst
            counts = np.bincount(trial.ravel(), minlength=inst + 1)
            if np.any(counts[1:inst + 1] < min_pixels):
                continue
            labels = trial
            patch = canvas[y0:y0 + oh, x0:x0 + ow]
            patch[footprint] = (color + noise)[footprint]
            used_colors.append(color)
            placed = True
            break
        if not placed:
            break

    image = Image(np.clip(canvas, 0, 255).astype(np.uint8))
    mask = LabelMask(labels)
    return image, GroundTruth(boxes_from_mask(labels), mask)


def mix_seed(seed: int, index: int) -> int:
    """splitmix64 finaliser over ``seed`` and ``index``; used for per-item seeds."""
    mask = 0xFFFFFFFFFFFFFFFF
    z = (seed + 0x9E3779B97F4A7C15 * (index + 1)) & mask
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
    return z ^ (z >> 31)
