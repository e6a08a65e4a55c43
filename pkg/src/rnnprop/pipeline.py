"""Glue from images to segmentations, descriptors and training examples."""

from __future__ import annotations

import glob
import os
from dataclasses import dataclass

import numpy as np

from .imagecore import GroundTruth, Image, read_ground_truth, read_image
from .overseg import RegionGraph, Segmentation, build_region_graph, default_min_size, fh_segment
from .regionfeat import extract_all_features
from .training import TrainExample, label_regions

DEFAULT_SEG_KS = (100, 250)


@dataclass(frozen=True)
class SegConfig:
    k: float
    min_size: int | None = None  # None: max(4, area / 500)
    sigma: float = 0.8


@dataclass
class SegmentedImage:
    k: float
    seg: Segmentation
    graph: RegionGraph
    features: np.ndarray


@dataclass
class PreparedImage:
    image: Image
    segmentations: list


def as_seg_configs(seg_ks) -> list:
    return [s if isinstance(s, SegConfig) else SegConfig(float(s)) for s in seg_ks]


def prepare_image(image: Image, seg_configs, dims: int = 64) -> PreparedImage:
    out = []
    for cfg in as_seg_configs(seg_configs):
        min_size = cfg.min_size or default_min_size(image.width, image.height)
        seg = fh_segment(image, cfg.k, min_size, cfg.sigma)
        graph = build_region_graph(seg)
        out.append(SegmentedImage(cfg.k, seg, graph, extract_all_features(image, graph, dims)))
    return PreparedImage(image, out)


def training_examples(prepared: PreparedImage, gt: GroundTruth, name: str = "") -> list:
    """One :class:`TrainExample` per segmentation of the image."""
    out = []
    for s in prepared.segmentations:
        labeling = label_regions(s.seg, s.graph, gt)
        out.append(TrainExample(s.features, s.graph.edges, s.graph.sizes, s.graph.boxes, labeling,
                                gt.box_array(), f"{name}@k={s.k:g}"))
    return out


def scene_paths(data_dir) -> list:
    """Sorted ``scene_XXXX`` stems that have an image and a ground-truth file."""
    stems = []
    for ppm in sorted(glob.glob(os.path.join(os.fspath(data_dir), "scene_*.ppm"))):
        stem = ppm[:-4]
        if os.path.exists(stem + ".gt.json"):
            stems.append(stem)
    return stems


def load_scene(stem) -> tuple:
    return read_image(stem + ".ppm"), read_ground_truth(stem + ".gt.json")
