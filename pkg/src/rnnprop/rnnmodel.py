"""Recursive merging network: mapper, combiner, merge scorer, objectness head.

Forward passes over merge trees are recorded on a :class:`Tape`; leaves are
evaluated once per image and any number of trees (training's two greedy
trees, inference repeats) append their internal nodes to the same tape.
Reverse mode walks the tape backwards.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import nnet

TENSOR_ORDER = ("W_s", "b_s", "W_c", "b_c", "W_m", "W_o0", "b_o0", "W_o1")
BIASES = frozenset({"b_s", "b_c", "b_o0"})


class ModelFormatError(ValueError):
    pass


@dataclass
class ModelParams:
    W_s: np.ndarray
    b_s: np.ndarray
    W_c: np.ndarray
    b_c: np.ndarray
    W_m: np.ndarray
    W_o0: np.ndarray
    b_o0: np.ndarray
    W_o1: np.ndarray

    @property
    def F(self) -> int:
        return self.W_s.shape[1]

    @property
    def D(self) -> int:
        return self.W_s.shape[0]

    @staticmethod
    def shapes(F: int, D: int) -> dict:
        return {
            "W_s": (D, F), "b_s": (D,),
            "W_c": (D, 2 * D), "b_c": (D,),
            "W_m": (1, D),
            "W_o0": (D, D), "b_o0": (D,),
            "W_o1": (2, D),
        }

    def tensors(self):
        for name in TENSOR_ORDER:
            yield name, getattr(self, name)

    def copy(self) -> "ModelParams":
        return ModelParams(**{name: arr.copy() for name, arr in self.tensors()})

    def validate(self) -> None:
        for name, shape in self.shapes(self.F, self.D).items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")

    @classmethod
    def zeros(cls, F: int, D: int) -> "ModelParams":
        return cls(**{name: np.zeros(shape) for name, shape in cls.shapes(F, D).items()})

    def to_bytes(self) -> bytes:
        header = json.dumps({"format": 1, "F": self.F, "D": self.D}, separators=(",", ":")).encode()
        buf = io.BytesIO()
        buf.write(struct.pack("<Q", len(header)))
        buf.write(header)
        for _, arr in self.tensors():
            buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelParams":
        if len(data) < 8:
            raise ModelFormatError("model file too short")
        (hlen,) = struct.unpack("<Q", data[:8])
        try:
            header = json.loads(data[8:8 + hlen])
        except ValueError as exc:
            raise ModelFormatError(f"bad model header: {exc}") from exc
        if header.get("format") != 1:
            raise ModelFormatError(f"unsupported model format {header.get('format')!r}")
        F, D = int(header["F"]), int(header["D"])
        pos = 8 + hlen
        tensors = {}
        for name, shape in cls.shapes(F, D).items():
            n = int(np.prod(shape))
            chunk = data[pos:pos + 8 * n]
            if len(chunk) != 8 * n:
                raise ModelFormatError(f"truncated tensor {name}")
            tensors[name] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
            pos += 8 * n
        if pos != len(data):
            raise ModelFormatError("trailing bytes after tensors")
        return cls(**tensors)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ModelParams":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def init_params(F: int, D: int, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    if F < 1 or D < 1:
        raise ValueError("F and D must be >= 1")
    rng = np.random.default_rng(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    out = {}
    for name, shape in ModelParams.shapes(F, D).items():
        if name in BIASES:
            out[name] = np.zeros(shape)
        else:
            fan_out, fan_in = shape
            a = np.sqrt(6.0 / (fan_in + fan_out))
            out[name] = rng.uniform(-a, a, size=shape)
    return ModelParams(**out)


# ---------------------------------------------------------------------------
# single-vector forward ops


def semantic_map(params: ModelParams, v) -> np.ndarray:
    return nnet.relu(nnet.affine(params.W_s, v, params.b_s))


def combine(params: ModelParams, x_i, x_j) -> np.ndarray:
    x_i = nnet._check_vec(x_i, params.D, "left child")
    x_j = nnet._check_vec(x_j, params.D, "right child")
    return nnet.relu(nnet.affine(params.W_c, np.concatenate([x_i, x_j]), params.b_c))


def merge_score(params: ModelParams, x_ij) -> float:
    return float(nnet.affine(params.W_m, x_ij)[0])


def objectness(params: ModelParams, x) -> np.ndarray:
    """``(p_neg, p_pos)`` for one semantic vector."""
    h = nnet.relu(nnet.affine(params.W_o0, x, params.b_o0))
    return nnet.softmax2(nnet.affine(params.W_o1, h))


# ---------------------------------------------------------------------------
# batched forward ops


def map_batch(params: ModelParams, V: np.ndarray) -> tuple:
    pre = V @ params.W_s.T + params.b_s
    return pre, np.maximum(pre, 0.0)


def combine_batch(params: ModelParams, XL: np.ndarray, XR: np.ndarray) -> tuple:
    """Pre-activations, parent vectors and merge scores for rows of child pairs."""
    pre = np.hstack([XL, XR]) @ params.W_c.T + params.b_c
    x = np.maximum(pre, 0.0)
    return pre, x, x @ params.W_m[0]


def objectness_batch(params: ModelParams, X: np.ndarray) -> tuple:
    """Returns ``(P, cache)`` with ``P[:, 1]`` the positive-class probability."""
    h_pre = X @ params.W_o0.T + params.b_o0
    h = np.maximum(h_pre, 0.0)
    z = h @ params.W_o1.T
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    P = e / e.sum(axis=1, keepdims=True)
    return P, (h_pre, h)


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Forward record of leaves and merged nodes for one segmented image."""

    def __init__(self, params: ModelParams, features: np.ndarray, sizes, boxes):
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != params.F:
            raise ValueError(f"features must be (n, {params.F}), got {features.shape}")
        self.params = params
        self.features = features
        self.n_leaves = features.shape[0]
        pre, x = map_batch(params, features)
        self.pre = list(pre)
        self.x = list(x)
        self.left = [-1] * self.n_leaves
        self.right = [-1] * self.n_leaves
        self.sizes = [int(s) for s in sizes]
        self.boxes = [tuple(int(c) for c in b) for b in boxes]

    def __len__(self):
        return len(self.x)

    def add_internal(self, i: int, j: int, pre: np.ndarray, x: np.ndarray) -> int:
        self.pre.append(pre)
        self.x.append(x)
        self.left.append(i)
        self.right.append(j)
        self.sizes.append(self.sizes[i] + self.sizes[j])
        bi, bj = self.boxes[i], self.boxes[j]
        self.boxes.append((min(bi[0], bj[0]), min(bi[1], bj[1]), max(bi[2], bj[2]), max(bi[3], bj[3])))
        return len(self.x) - 1

    def X(self, nodes=None) -> np.ndarray:
        if nodes is None:
            return np.array(self.x)
        return np.array([self.x[n] for n in nodes])

    def backward(self, gx: dict, grads: nnet.GradStore) -> None:
        """Push per-node semantic-vector gradients ``gx`` down to the parameters."""
        p = self.params
        D = p.D
        nl = self.n_leaves
        pending = {k: v.copy() for k, v in gx.items()}
        top = max(pending, default=-1)
        for node in range(top, nl - 1, -1):
            g = pending.pop(node, None)
            if g is None:
                continue
            dpre = nnet.relu_backward(g, self.pre[node])
            i, j = self.left[node], self.right[node]
            inp = np.concatenate([self.x[i], self.x[j]])
            dinp, dW, db = nnet.affine_backward(dpre, p.W_c, inp)
            grads.add("W_c", dW)
            grads.add("b_c", db)
            for child, part in ((i, dinp[:D]), (j, dinp[D:])):
                if child in pending:
                    pending[child] += part
                else:
                    pending[child] = part
        if pending:
            leaves = np.array(sorted(pending))
            G = np.array([pending[k] for k in leaves])
            pre = np.array([self.pre[k] for k in leaves])
            dpre = np.where(pre > 0.0, G, 0.0)
            grads.add("W_s", dpre.T @ self.features[leaves])
            grads.add("b_s", dpre.sum(axis=0))


@dataclass
class MergeTree:
    """A binary merge tree over ``n_leaves`` regions.

    Node ids are tree-local: leaves ``0..n_leaves-1``, internal nodes numbered
    in merge order from ``n_leaves``.  ``tape_index`` maps each id to its
    record on the shared :class:`Tape`.
    """

    tape: Tape
    n_leaves: int
    left: list
    right: list
    merge_scores: list
    tape_index: list

    @property
    def n_nodes(self) -> int:
        return self.n_leaves + len(self.left)

    @property
    def root(self) -> int:
        return self.n_nodes - 1

    def children(self, node: int):
        if node < self.n_leaves:
            return None
        k = node - self.n_leaves
        return self.left[k], self.right[k]

    def internal_nodes(self):
        return range(self.n_leaves, self.n_nodes)

    def leaves_under(self, node: int) -> list:
        out, stack = [], [node]
        while stack:
            n = stack.pop()
            if n < self.n_leaves:
                out.append(n)
            else:
                stack.extend(self.children(n))
        return sorted(out)

    def clusters(self) -> list:
        """Leaf sets of every node, indexed by node id."""
        out = [frozenset([i]) for i in range(self.n_leaves)]
        for a, b in zip(self.left, self.right):
            out.append(out[a] | out[b])
        return out

    def structure(self) -> frozenset:
        """Order-free identity of the tree: the set of internal leaf-sets."""
        cl = self.clusters()
        return frozenset(cl[self.n_leaves:])

    def size(self, node: int) -> int:
        return self.tape.sizes[self.tape_index[node]]

    def box(self, node: int) -> tuple:
        return self.tape.boxes[self.tape_index[node]]

    def semantic(self, node: int) -> np.ndarray:
        return self.tape.x[self.tape_index[node]]


def tree_score(tree: MergeTree) -> float:
    return float(sum(tree.merge_scores))


def recompute_tree_score(params: ModelParams, features: np.ndarray, tree: MergeTree) -> float:
    """Score ``tree`` from scratch with the single-vector ops."""
    x = [semantic_map(params, v) for v in features]
    total = 0.0
    for a, b in zip(tree.left, tree.right):
        xab = combine(params, x[a], x[b])
        total += merge_score(params, xab)
        x.append(xab)
    return total


def tree_score_backward(tree: MergeTree, coef: float, gx: dict, grads: nnet.GradStore) -> None:
    """Accumulate ``coef * d tree_score`` into node gradients and ``W_m``."""
    w = tree.tape.params.W_m[0]
    for node in tree.internal_nodes():
        t = tree.tape_index[node]
        grads.add("W_m", coef * tree.tape.x[t][None, :])
        if t in gx:
            gx[t] = gx[t] + coef * w
        else:
            gx[t] = coef * w


# ---------------------------------------------------------------------------
# forest bookkeeping shared by every merging strategy


class MergeForest:
    """Current roots, their adjacency, and a live score for every adjacent pair.

    ``candidates`` maps ``(a, b)`` with ``a < b`` (tree-local ids) to
    ``(score, pre, x)``; the lower id always feeds the combiner first.
    """

    def __init__(self, tape: Tape, edges):
        self.tape = tape
        n = tape.n_leaves
        self.n_leaves = n
        self.tape_index = list(range(n))
        self.adj = {i: set() for i in range(n)}
        for a, b in edges:
            a, b = int(a), int(b)
            self.adj[a].add(b)
            self.adj[b].add(a)
        self.left, self.right, self.scores = [], [], []
        self.candidates = {}
        pairs = sorted((min(a, b), max(a, b)) for a, b in {(min(a, b), max(a, b)) for a, b in edges})
        self._score_pairs(pairs)

    @property
    def next_id(self) -> int:
        return self.n_leaves + len(self.left)

    @property
    def roots(self) -> set:
        return set(self.adj)

    def done(self) -> bool:
        return not self.candidates

    def _score_pairs(self, pairs) -> None:
        if not pairs:
            return
        X = self.tape.x
        ti = self.tape_index
        XL = np.array([X[ti[a]] for a, _ in pairs])
        XR = np.array([X[ti[b]] for _, b in pairs])
        pre, x, s = combine_batch(self.tape.params, XL, XR)
        for k, pair in enumerate(pairs):
            self.candidates[pair] = (float(s[k]), pre[k], x[k])

    def merge(self, a: int, b: int) -> int:
        if a > b:
            a, b = b, a
        score, pre, x = self.candidates[(a, b)]
        t = self.tape.add_internal(self.tape_index[a], self.tape_index[b], pre, x)
        new = self.next_id
        self.tape_index.append(t)
        self.left.append(a)
        self.right.append(b)
        self.scores.append(score)

        nbrs = (self.adj.pop(a) | self.adj.pop(b)) - {a, b}
        for n in nbrs:
            self.adj[n].discard(a)
            self.adj[n].discard(b)
            self.adj[n].add(new)
            self.candidates.pop((min(n, a), max(n, a)), None)
            self.candidates.pop((min(n, b), max(n, b)), None)
        del self.candidates[(a, b)]
        self.adj[new] = set(nbrs)
        self._score_pairs([(n, new) for n in sorted(nbrs)])
        return new

    def tree(self) -> MergeTree:
        return MergeTree(self.tape, self.n_leaves, list(self.left), list(self.right),
                         list(self.scores), list(self.tape_index))
