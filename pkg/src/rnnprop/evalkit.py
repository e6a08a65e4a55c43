"""Box-level proposal metrics: IoU, recall at budget, average recall."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

# 0.50, 0.55, ..., 0.95; built from integers so 0.75 etc. are exact
AR_THRESHOLDS = tuple((50 + 5 * i) / 100 for i in range(10))
SIZE_BUCKETS = (0.02, 0.10)
SIZE_BUCKET_NAMES = ("small", "medium", "large")
NA = "NA"


def _box_area(b: np.ndarray) -> np.ndarray:
    return (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])


def iou_box(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    for box in (a, b):
        if box.shape != (4,) or not (box[0] < box[2] and box[1] < box[3]):
            raise ValueError(f"degenerate box {box.tolist()}")
    return float(iou_matrix(a[None], b[None])[0, 0])


def iou_matrix(A, B) -> np.ndarray:
    """Pairwise IoU of inclusive-exclusive boxes, shape ``(len(A), len(B))``."""
    A = np.asarray(A, dtype=np.float64).reshape(-1, 4)
    B = np.asarray(B, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(A[:, None, 2], B[None, :, 2]) - np.maximum(A[:, None, 0], B[None, :, 0])
    iy = np.minimum(A[:, None, 3], B[None, :, 3]) - np.maximum(A[:, None, 1], B[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    union = _box_area(A)[:, None] + _box_area(B)[None, :] - inter
    return inter / union


def best_overlaps(proposals, gts, budget: int) -> np.ndarray:
    """Best IoU of each ground-truth box against the top ``budget`` proposals."""
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    top = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)[:max(budget, 0)]
    if len(gts) == 0:
        return np.zeros(0)
    if len(top) == 0:
        return np.zeros(len(gts))
    return iou_matrix(top, gts).max(axis=0)


def _pooled_best(proposals_per_image, gts_per_image, budget):
    if len(proposals_per_image) != len(gts_per_image):
        raise ValueError("proposal and ground-truth lists differ in length")
    best = [best_overlaps(p, g, budget) for p, g in zip(proposals_per_image, gts_per_image)]
    best = np.concatenate(best) if best else np.zeros(0)
    if best.size == 0:
        raise ValueError("recall needs at least one ground-truth object")
    return best


def recall_at(proposals_per_image, gts_per_image, iou_threshold: float, budget: int) -> float:
    """Fraction of all ground-truth boxes hit (IoU >= threshold) by their image's top proposals."""
    best = _pooled_best(proposals_per_image, gts_per_image, budget)
    return float(np.mean(best >= iou_threshold))


def average_recall(proposals_per_image, gts_per_image, budget: int) -> float:
    best = _pooled_best(proposals_per_image, gts_per_image, budget)
    return float(np.mean([np.mean(best >= t) for t in AR_THRESHOLDS]))


def size_bucket(area_fraction: float, edges=SIZE_BUCKETS) -> int:
    return int(np.searchsorted(np.asarray(edges), area_fraction, side="right"))


def ar_by_size(proposals_per_image, gts_per_image, areas_per_image, canvas_areas, budget: int,
               edges=SIZE_BUCKETS) -> list:
    """Average recall per object-size bucket; ``None`` for a bucket with no objects.

    Buckets split the object pixel area as a fraction of its canvas at
    ``edges`` (default: below 2%, 2-10%, above 10%).
    """
    best = [best_overlaps(p, g, budget) for p, g in zip(proposals_per_image, gts_per_image)]
    fracs = [np.asarray(a, dtype=np.float64) / c for a, c in zip(areas_per_image, canvas_areas)]
    best = np.concatenate(best) if best else np.zeros(0)
    fracs = np.concatenate(fracs) if fracs else np.zeros(0)
    bucket = np.searchsorted(np.asarray(edges), fracs, side="right")
    out = []
    for k in range(len(edges) + 1):
        sel = best[bucket == k]
        out.append(None if sel.size == 0 else float(np.mean([np.mean(sel >= t) for t in AR_THRESHOLDS])))
    return out


@dataclass
class EvalReport:
    policy: str
    budgets: list
    thresholds: list
    recall: dict = field(default_factory=dict)  # (budget, threshold) -> recall
    ar: dict = field(default_factory=dict)  # budget -> AR
    ar_size: dict = field(default_factory=dict)  # budget -> [AR or None per bucket]
    n_objects: int = 0
    n_images: int = 0

    def rows(self):
        for b in self.budgets:
            for t in self.thresholds:
                yield [self.policy, b, f"{t:.2f}", f"{self.recall[(b, t)]:.6f}"]
        for b in self.budgets:
            yield [self.policy, b, "AR", f"{self.ar[b]:.6f}"]


def evaluate(policy: str, proposals_per_image, gts_per_image, areas_per_image, canvas_areas,
             budgets, thresholds=None) -> EvalReport:
    """Recall table over ``budgets`` x ``thresholds`` plus AR and size-bucketed AR."""
    thresholds = list(AR_THRESHOLDS if thresholds is None else thresholds)
    grid = sorted(set(thresholds) | set(AR_THRESHOLDS))
    rep = EvalReport(policy, list(budgets), thresholds,
                     n_objects=int(sum(len(np.asarray(g).reshape(-1, 4)) for g in gts_per_image)),
                     n_images=len(gts_per_image))
    for b in budgets:
        best = _pooled_best(proposals_per_image, gts_per_image, b)
        rec = {t: float(np.mean(best >= t)) for t in grid}
        for t in thresholds:
            rep.recall[(b, t)] = rec[t]
        rep.ar[b] = float(np.mean([rec[t] for t in AR_THRESHOLDS]))
        rep.ar_size[b] = ar_by_size(proposals_per_image, gts_per_image, areas_per_image, canvas_areas, b)
    return rep


def write_report_csv(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "budget", "threshold", "recall"])
        for rep in reports:
            for row in rep.rows():
                w.writerow(row)


def write_size_csv(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "budget", "bucket", "ar"])
        for rep in reports:
            for b in rep.budgets:
                for name, v in zip(SIZE_BUCKET_NAMES, rep.ar_size[b]):
                    w.writerow([rep.policy, b, name, NA if v is None else f"{v:.6f}"])


def write_comparison_csv(reports, path) -> None:
    """Greedy-vs-random summary: R@0.5, R@0.8 and AR per policy and budget."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "budget", "R@0.5", "R@0.8", "AR"])
        for rep in reports:
            for b in rep.budgets:
                w.writerow([rep.policy, b, f"{rep.recall[(b, 0.5)]:.6f}", f"{rep.recall[(b, 0.8)]:.6f}",
                            f"{rep.ar[b]:.6f}"])


def compare_policies(prepared_images, gts, params, policies: dict, budgets) -> list:
    """Evaluate named policies on shared segmentations and one model.

    ``prepared_images`` holds per-image segmentation bundles from
    :func:`rnnprop.pipeline.prepare_image`; ``gts`` the matching
    :class:`~rnnprop.imagecore.GroundTruth` list.
    """
    from .inference import proposals_from_prepared

    if len(policies) < 2:
        raise ValueError("need at least two policies to compare")
    n_max = max(budgets)
    gt_boxes = [g.box_array() for g in gts]
    areas = [g.instance_areas() for g in gts]
    canvas = [g.mask.width * g.mask.height for g in gts]
    reports = []
    for name, policy in policies.items():
        props = [proposals_from_prepared(p, params, policy, n_max) for p in prepared_images]
        boxes = [np.array([q.box for q in plist]).reshape(-1, 4) for plist in props]
        reports.append(evaluate(name, boxes, gt_boxes, areas, canvas, budgets))
    return reports
