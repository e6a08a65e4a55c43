"""Structured max-margin training of the merging network.

A tree is *correct* when every region joins the rest of its instance before
touching anything else.  The merging loss is a structured hinge between the
loss-augmented best tree and the best correct tree, both found greedily;
objectness is a summed two-class cross entropy over nodes whose tight box
clearly overlaps (IoU > 0.5) or clearly misses (IoU < 0.2) every object.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import nnet
from .evalkit import iou_matrix
from .rnnmodel import (
    BIASES,
    MergeForest,
    MergeTree,
    ModelParams,
    Tape,
    objectness_batch,
    tree_score,
    tree_score_backward,
)

log = logging.getLogger(__name__)

POSITIVE_IOU = 0.5
NEGATIVE_IOU = 0.2


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, example, tensor):
        super().__init__(f"non-finite gradient in tensor {tensor!r} (batch examples: {example})")
        self.example = example
        self.tensor = tensor


# ---------------------------------------------------------------------------
# labels and correctness


@dataclass
class InstanceLabeling:
    """Instance label per initial region plus per-instance region totals."""

    instance: np.ndarray
    region_class: np.ndarray
    totals: dict = field(default_factory=dict)

    def __post_init__(self):
        self.instance = np.asarray(self.instance, dtype=np.int64)
        if not self.totals:
            self.totals = dict(Counter(int(i) for i in self.instance))

    @classmethod
    def from_instances(cls, instances) -> "InstanceLabeling":
        inst = np.asarray(instances, dtype=np.int64)
        return cls(inst, inst.copy())

    def leaf_state(self, region: int) -> "LabelState":
        return LabelState({int(self.instance[region]): 1}, False)


def label_regions(seg, graph, gt) -> InstanceLabeling:
    """Majority ground-truth label per region, then connected components.

    Ties in the majority vote go to background (label 0), otherwise to the
    smaller label.  Same-label regions that touch in the region graph share
    one instance; disconnected groups, background included, get their own.
    """
    mask = gt.mask.labels if hasattr(gt, "mask") else np.asarray(gt)
    if mask.shape != seg.region_of.shape:
        raise ValueError("segmentation and ground truth differ in size")
    n = seg.region_count
    n_lab = int(mask.max()) + 1
    counts = np.bincount(seg.region_of.ravel().astype(np.int64) * n_lab + mask.ravel(),
                         minlength=n * n_lab).reshape(n, n_lab)
    best = counts.max(axis=1)
    # argmax returns the first maximum, so label 0 wins any tie it is part of
    region_class = np.argmax(counts == best[:, None], axis=1)
    return InstanceLabeling(instances_from_classes(region_class, graph.edges), region_class)


def instances_from_classes(region_class, edges) -> np.ndarray:
    """Connected components of same-class regions, numbered by first region."""
    n = len(region_class)
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in edges:
        if region_class[a] == region_class[b]:
            ra, rb = find(int(a)), find(int(b))
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
    remap = {}
    return np.array([remap.setdefault(find(i), len(remap)) for i in range(n)], dtype=np.int64)


@dataclass(frozen=True)
class LabelState:
    """Instance-label histogram of a forest root and whether it is already incorrect."""

    counts: dict
    incorrect: bool

    def pure_label(self):
        return next(iter(self.counts)) if len(self.counts) == 1 else None

    def complete(self, labeling: InstanceLabeling) -> bool:
        return all(labeling.totals[l] == c for l, c in self.counts.items())

    def union(self, other: "LabelState", ok: bool) -> "LabelState":
        counts = dict(self.counts)
        for l, c in other.counts.items():
            counts[l] = counts.get(l, 0) + c
        return LabelState(counts, self.incorrect or other.incorrect or not ok)


def merge_ok(a: LabelState, b: LabelState, labeling: InstanceLabeling) -> bool:
    pa, pb = a.pure_label(), b.pure_label()
    if pa is not None and pa == pb:
        return True
    return a.complete(labeling) and b.complete(labeling)


def node_states(tree: MergeTree, labeling: InstanceLabeling) -> list:
    states = [labeling.leaf_state(i) for i in range(tree.n_leaves)]
    for a, b in zip(tree.left, tree.right):
        ok = merge_ok(states[a], states[b], labeling)
        states.append(states[a].union(states[b], ok))
    return states


def margin_delta(tree: MergeTree, labeling: InstanceLabeling) -> int:
    """Number of internal nodes whose subtree is incorrect (inherited upwards)."""
    states = node_states(tree, labeling)
    return sum(1 for s in states[tree.n_leaves:] if s.incorrect)


# ---------------------------------------------------------------------------
# greedy tree construction


@dataclass
class TrainExample:
    features: np.ndarray
    edges: np.ndarray
    sizes: np.ndarray
    boxes: np.ndarray
    labeling: InstanceLabeling
    gt_boxes: np.ndarray
    name: str = ""

    @property
    def n_regions(self) -> int:
        return self.features.shape[0]

    def tape(self, params: ModelParams) -> Tape:
        return Tape(params, self.features, self.sizes, self.boxes)


def _best(items):
    """Highest key, ties broken towards the smaller pair."""
    best_pair, best_key = None, None
    for pair, key in items:
        if best_key is None or key > best_key or (key == best_key and pair < best_pair):
            best_pair, best_key = pair, key
    return best_pair


def greedy_augmented_tree(tape: Tape, edges, labeling: InstanceLabeling, kappa: float) -> tuple:
    """Greedy approximation of argmax over trees of ``score + kappa * delta``.

    Returns ``(tree, augmented_score)``.  ``kappa = 0`` is plain greedy merging.
    """
    forest = MergeForest(tape, edges)
    states = {i: labeling.leaf_state(i) for i in range(tape.n_leaves)}
    delta = 0
    while not forest.done():
        def keyed():
            for pair, (s, _, _) in forest.candidates.items():
                a, b = pair
                viol = states[a].incorrect or states[b].incorrect or not merge_ok(states[a], states[b], labeling)
                yield pair, s + kappa * viol

        a, b = _best(keyed())
        ok = merge_ok(states[a], states[b], labeling)
        new = forest.merge(a, b)
        states[new] = states.pop(a).union(states.pop(b), ok)
        delta += states[new].incorrect
    _check_complete(forest)
    tree = forest.tree()
    return tree, tree_score(tree) + kappa * delta


def greedy_correct_tree(tape: Tape, edges, labeling: InstanceLabeling) -> MergeTree:
    """Highest-scoring merge at each step among pairs that keep the tree correct."""
    forest = MergeForest(tape, edges)
    states = {i: labeling.leaf_state(i) for i in range(tape.n_leaves)}
    while not forest.done():
        allowed = ((pair, s) for pair, (s, _, _) in forest.candidates.items()
                   if merge_ok(states[pair[0]], states[pair[1]], labeling))
        pair = _best(allowed)
        if pair is None:
            raise RuntimeError("no correct merge available; is every instance connected?")
        a, b = pair
        new = forest.merge(a, b)
        states[new] = states.pop(a).union(states.pop(b), True)
    _check_complete(forest)
    return forest.tree()


def _check_complete(forest: MergeForest) -> None:
    if len(forest.adj) != 1:
        raise ValueError(f"region graph is disconnected ({len(forest.adj)} components remain)")


# ---------------------------------------------------------------------------
# losses


def _merging_term(tape: Tape, example: TrainExample, kappa: float, grads: nnet.GradStore, gx: dict) -> tuple:
    t_hat, aug = greedy_augmented_tree(tape, example.edges, example.labeling, kappa)
    t_cor = greedy_correct_tree(tape, example.edges, example.labeling)
    if t_hat.structure() == t_cor.structure():
        return 0.0, t_hat, t_cor
    loss = aug - tree_score(t_cor)
    if loss <= 0.0:
        return 0.0, t_hat, t_cor
    tree_score_backward(t_hat, 1.0, gx, grads)
    tree_score_backward(t_cor, -1.0, gx, grads)
    return loss, t_hat, t_cor


def merging_loss_and_grad(example: TrainExample, params: ModelParams, kappa: float) -> tuple:
    """Structured hinge ``max(0, s(t_hat) + kappa * delta(t_hat) - s(t_correct))``.

    Returns ``(loss, grads, t_hat, t_correct)``.  The gradient is zero when
    the hinge is inactive or both greedy trees group the regions identically.
    """
    tape = example.tape(params)
    grads = nnet.GradStore.like(params)
    gx = {}
    loss, t_hat, t_cor = _merging_term(tape, example, kappa, grads, gx)
    tape.backward(gx, grads)
    return loss, grads, t_hat, t_cor


def objectness_labels(boxes: np.ndarray, gt_boxes: np.ndarray) -> np.ndarray:
    """1 positive, 0 negative, -1 ignored, from the best IoU against any object."""
    boxes = np.asarray(boxes).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes).reshape(-1, 4)
    if len(gt_boxes) == 0:
        return np.zeros(len(boxes), dtype=np.int64)
    best = iou_matrix(boxes, gt_boxes).max(axis=1)
    out = np.full(len(boxes), -1, dtype=np.int64)
    out[best > POSITIVE_IOU] = 1
    out[best < NEGATIVE_IOU] = 0
    return out


def objectness_samples(tree: MergeTree, gt_boxes, nodes=None) -> list:
    """``(node, label)`` for the nodes of ``tree`` that are not in the IoU dead zone."""
    nodes = list(range(tree.n_nodes)) if nodes is None else list(nodes)
    boxes = np.array([tree.box(n) for n in nodes])
    labels = objectness_labels(boxes, gt_boxes)
    return [(n, int(l)) for n, l in zip(nodes, labels) if l >= 0]


def objectness_loss_and_grad(tape: Tape, samples, params: ModelParams, scale: float = 1.0,
                             grads: nnet.GradStore | None = None, gx: dict | None = None) -> tuple:
    """Summed cross entropy over ``samples`` given as ``(tape_index, label)``.

    Parameter gradients of the head go to ``grads``; gradients with respect
    to semantic vectors are added to ``gx`` (tape index keyed) for the caller
    to push through the tape.  Everything is multiplied by ``scale``.
    """
    grads = grads if grads is not None else nnet.GradStore.like(params)
    gx = gx if gx is not None else {}
    if not samples:
        return 0.0, grads, gx
    idx = [t for t, _ in samples]
    lab = np.array([l for _, l in samples])
    X = tape.X(idx)
    P, (h_pre, h) = objectness_batch(params, X)
    picked = P[np.arange(len(lab)), lab]
    loss = float(-np.sum(np.log(np.maximum(picked, 1e-300))))
    dz = P.copy()
    dz[np.arange(len(lab)), lab] -= 1.0
    dz *= scale
    grads.add("W_o1", dz.T @ h)
    dh_pre = np.where(h_pre > 0.0, dz @ params.W_o1, 0.0)
    grads.add("W_o0", dh_pre.T @ X)
    grads.add("b_o0", dh_pre.sum(axis=0))
    dX = dh_pre @ params.W_o0
    for k, t in enumerate(idx):
        gx[t] = gx[t] + dX[k] if t in gx else dX[k].copy()
    return loss, grads, gx


def example_loss_and_grad(example: TrainExample, params: ModelParams, kappa: float, lam: float) -> tuple:
    """``(merging_loss, objectness_loss, grads)`` for one example.

    Objectness samples come from every node of the correct tree and the
    internal nodes of the loss-augmented tree.
    """
    tape = example.tape(params)
    grads = nnet.GradStore.like(params)
    gx = {}
    lm, t_hat, t_cor = _merging_term(tape, example, kappa, grads, gx)
    nodes = [(t_cor.tape_index[n], t_cor.box(n)) for n in range(t_cor.n_nodes)]
    nodes += [(t_hat.tape_index[n], t_hat.box(n)) for n in t_hat.internal_nodes()]
    labels = objectness_labels(np.array([b for _, b in nodes]), example.gt_boxes)
    samples = [(t, int(l)) for (t, _), l in zip(nodes, labels) if l >= 0]
    lo, _, gx = objectness_loss_and_grad(tape, samples, params, lam, grads, gx)
    tape.backward(gx, grads)
    grads.count = 1
    return lm, lo, grads


# ---------------------------------------------------------------------------
# optimisation


@dataclass(frozen=True)
class TrainConfig:
    kappa: float = 0.1
    lam: float = 1.0
    weight_decay: float = 5e-4
    lr: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 2
    epochs: int = 30
    lr_decay_epochs: int = 20
    lr_decay_factor: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if min(self.kappa, self.lam, self.weight_decay, self.lr) < 0:
            raise ValueError("kappa, lam, weight_decay and lr must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        return cls(**doc)

    def lr_at(self, epoch: int) -> float:
        if self.lr_decay_epochs <= 0:
            return self.lr
        return self.lr * self.lr_decay_factor ** (epoch // self.lr_decay_epochs)


@dataclass
class OptimizerState:
    velocity: dict
    step: int = 0

    @classmethod
    def like(cls, params: ModelParams) -> "OptimizerState":
        return cls({name: np.zeros_like(arr) for name, arr in params.tensors()})


def sgd_step(params: ModelParams, grads: nnet.GradStore, state: OptimizerState, config: TrainConfig,
             lr: float | None = None, example=None) -> ModelParams:
    """Momentum SGD with L2 weight decay on weight matrices only; updates in place."""
    lr = config.lr if lr is None else lr
    for name, g in grads.grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(example, name)
    for name, theta in params.tensors():
        g = grads[name]
        if name not in BIASES and config.weight_decay:
            g = g + config.weight_decay * theta
        v = state.velocity[name]
        v *= config.momentum
        v -= lr * g
        theta += v
    state.step += 1
    return params


@dataclass
class EpochLog:
    epoch: int
    mean_merging_loss: float
    mean_objectness_loss: float
    mean_total_loss: float
    lr: float


def train(dataset: list, config: TrainConfig, params: ModelParams, callback=None) -> tuple:
    """Run SGD over ``dataset``; returns ``(params, [EpochLog, ...])``.

    ``params`` is copied, never mutated.  Examples are shuffled each epoch
    from ``config.seed``; a batch gradient is the in-order sum of its
    examples' gradients.
    """
    if not dataset:
        raise ValueError("empty training set")
    params = params.copy()
    state = OptimizerState.like(params)
    rng = np.random.default_rng(np.uint64(config.seed & 0xFFFFFFFFFFFFFFFF))
    history = []
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(len(dataset))
        sums = np.zeros(3)
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            total = nnet.GradStore.like(params)
            # overflow surfaces as a NonFiniteGradientError from sgd_step
            with np.errstate(over="ignore", invalid="ignore"):
                for i in batch:
                    lm, lo, g = example_loss_and_grad(dataset[i], params, config.kappa, config.lam)
                    sums += (lm, lo, lm + config.lam * lo)
                    total.merge(g)
            names = [dataset[i].name or str(int(i)) for i in batch]
            sgd_step(params, total, state, config, lr, example=names)
        means = sums / len(dataset)
        entry = EpochLog(epoch + 1, float(means[0]), float(means[1]), float(means[2]), lr)
        history.append(entry)
        log.info("epoch %d  merge %.4f  obj %.4f  total %.4f  lr %.2e", entry.epoch,
                 entry.mean_merging_loss, entry.mean_objectness_loss, entry.mean_total_loss, lr)
        if callback is not None:
            callback(entry, params)
    return params, history


def write_train_log(history: list, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("epoch,mean_merging_loss,mean_objectness_loss,mean_total_loss,lr\n")
        for e in history:
            fh.write(f"{e.epoch},{e.mean_merging_loss!r},{e.mean_objectness_loss!r},"
                     f"{e.mean_total_loss!r},{e.lr!r}\n")

