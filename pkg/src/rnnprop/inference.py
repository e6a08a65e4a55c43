"""Greedy and randomized top-k merging, proposal extraction and ranking."""

from __future__ import annotations

import csv
import heapq
from dataclasses import dataclass

import numpy as np

from .imagecore import encode_pgm, mix_seed
from .rnnmodel import MergeForest, MergeTree, ModelParams, Tape, objectness_batch


@dataclass(frozen=True)
class MergePolicy:
    """``kind`` is ``"greedy"`` or ``"random"``; greedy ignores ``k`` and runs once."""

    kind: str = "random"
    k: int = 5
    repeats: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("greedy", "random"):
            raise ValueError(f"unknown policy {self.kind!r}")
        if self.k < 1 or self.repeats < 1:
            raise ValueError("k and repeats must be >= 1")

    @property
    def n_runs(self) -> int:
        return 1 if self.kind == "greedy" else self.repeats

    @classmethod
    def greedy(cls, seed: int = 0) -> "MergePolicy":
        return cls("greedy", 1, 1, seed)


def _rank_key(item):
    pair, s = item
    return (-s, pair)


def top_k_sample(scores, k: int, rng: np.random.Generator):
    """Draw one pair among the ``k`` best by ``exp(score)`` weights.

    ``scores`` is an iterable of ``(pair, score)``.  Exactly one uniform
    draw is consumed whatever ``k`` is.
    """
    items = list(scores)
    if not items:
        raise ValueError("no candidate pairs to sample from")
    top = heapq.nsmallest(k, items, key=_rank_key)
    s = np.array([v for _, v in top])
    w = np.exp(s - s.max())
    cdf = np.cumsum(w)
    u = rng.random() * cdf[-1]
    idx = min(int(np.searchsorted(cdf, u, side="right")), len(top) - 1)
    return top[idx][0]


def top_k_probabilities(scores, k: int) -> tuple:
    """The pairs :func:`top_k_sample` chooses among, with their probabilities."""
    top = heapq.nsmallest(k, list(scores), key=_rank_key)
    s = np.array([v for _, v in top])
    w = np.exp(s - s.max())
    return [p for p, _ in top], w / w.sum()


def greedy_merge(tape: Tape, edges) -> MergeTree:
    """Always merge the best-scoring adjacent pair (ties: smaller pair)."""
    forest = MergeForest(tape, edges)
    while not forest.done():
        best_pair, best_s = None, None
        for pair, (s, _, _) in forest.candidates.items():
            if best_s is None or s > best_s or (s == best_s and pair < best_pair):
                best_pair, best_s = pair, s
        forest.merge(*best_pair)
    if len(forest.adj) != 1:
        raise ValueError("region graph is disconnected")
    return forest.tree()


def randomized_merge(tape: Tape, edges, policy: MergePolicy, repeat_index: int, on_merge=None) -> MergeTree:
    """Randomized top-k merging of all regions into one tree.

    Each step samples a pair among the ``policy.k`` best live scores, merges
    it, drops every score that involved either child and scores the new
    node against its neighbours.  The generator is seeded from
    ``mix_seed(policy.seed, repeat_index)``.
    """
    rng = np.random.default_rng(np.uint64(mix_seed(policy.seed, repeat_index)))
    forest = MergeForest(tape, edges)
    while not forest.done():
        pair = top_k_sample(((p, v[0]) for p, v in forest.candidates.items()), policy.k, rng)
        forest.merge(*pair)
        if on_merge is not None:
            on_merge(forest)
    if len(forest.adj) != 1:
        raise ValueError("region graph is disconnected")
    return forest.tree()


def build_trees(tape: Tape, edges, policy: MergePolicy) -> list:
    if policy.kind == "greedy":
        return [greedy_merge(tape, edges)]
    return [randomized_merge(tape, edges, policy, r) for r in range(policy.repeats)]


@dataclass
class Proposal:
    box: tuple
    objectness: float
    area: int
    seg_k: float
    repeat: int
    node_id: int
    order: tuple  # provenance position used to break ranking ties
    _region_of: np.ndarray = None
    _leaves: list = None

    def mask(self) -> np.ndarray:
        """Boolean pixel mask of the proposal."""
        return np.isin(self._region_of, self._leaves)


def tree_candidates(tree: MergeTree, p_pos: np.ndarray, region_of, seg_k, repeat: int, seg_index: int) -> list:
    """One proposal per tree node (leaves included), before deduplication."""
    out = []
    for node in range(tree.n_nodes):
        t = tree.tape_index[node]
        out.append(Proposal(tree.box(node), float(p_pos[t]), tree.size(node), seg_k, repeat, node,
                            (seg_index, repeat, node), region_of, None))
    return out


def _fill_leaves(props, trees):
    for p in props:
        p._leaves = trees[(p.order[0], p.repeat)].leaves_under(p.node_id)


def rank_proposals(candidates: list, n: int | None = None) -> list:
    """Deduplicate by box (keep highest objectness, earliest on ties) and rank."""
    best = {}
    for c in candidates:
        cur = best.get(c.box)
        if cur is None or c.objectness > cur.objectness:
            best[c.box] = c
    ranked = sorted(best.values(), key=lambda c: (-c.objectness, -c.area, c.order))
    return ranked if n is None else ranked[:max(n, 0)]


def proposals_from_prepared(prepared, params: ModelParams, policy: MergePolicy, n: int | None = None) -> list:
    """Ranked proposals for one image given its prepared segmentations."""
    if n is not None and n <= 0:
        return []
    candidates, trees = [], {}
    for si, seg in enumerate(prepared.segmentations):
        if seg.features.shape[1] != params.F:
            raise ValueError(f"model expects F={params.F}, features have {seg.features.shape[1]}")
        tape = Tape(params, seg.features, seg.graph.sizes, seg.graph.boxes)
        seg_trees = build_trees(tape, seg.graph.edges, policy)
        P, _ = objectness_batch(params, tape.X())
        for r, tree in enumerate(seg_trees):
            trees[(si, r)] = tree
            candidates += tree_candidates(tree, P[:, 1], seg.graph.seg.region_of, seg.k, r, si)
    ranked = rank_proposals(candidates, n)
    _fill_leaves(ranked, trees)
    return ranked


def generate_proposals(image, params: ModelParams, seg_configs, policy: MergePolicy, n: int | None = None) -> list:
    from .pipeline import prepare_image

    return proposals_from_prepared(prepare_image(image, seg_configs, params.F), params, policy, n)


def _fmt_k(k) -> str:
    return str(int(k)) if float(k).is_integer() else repr(float(k))


def write_proposals_csv(proposals: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "x0", "y0", "x1", "y1", "objectness", "seg_k", "repeat", "node_id"])
        for rank, p in enumerate(proposals, 1):
            w.writerow([rank, *p.box, repr(p.objectness), _fmt_k(p.seg_k), p.repeat, p.node_id])


def write_proposal_masks(proposals: list, directory) -> list:
    import os

    paths = []
    for rank, p in enumerate(proposals, 1):
        path = os.path.join(directory, f"proposal_{rank:04d}.pgm")
        with open(path, "wb") as fh:
            fh.write(encode_pgm(p.mask().astype(np.uint8) * 255))
        paths.append(path)
    return paths
