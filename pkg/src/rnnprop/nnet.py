"""Dense float64 primitives and their backward passes.

Matrices and vectors are plain numpy arrays.  Backward functions return
gradients; callers accumulate parameter gradients into a :class:`GradStore`.
"""

from __future__ import annotations

import numpy as np


def _check_vec(x, n=None, what="vector"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"{what} must be 1-D, got shape {x.shape}")
    if n is not None and x.shape[0] != n:
        raise ValueError(f"{what} has length {x.shape[0]}, expected {n}")
    return x


def affine(W: np.ndarray, x: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ValueError("weight must be a matrix")
    x = _check_vec(x, W.shape[1], "input")
    y = W @ x
    if b is not None:
        y = y + _check_vec(b, W.shape[0], "bias")
    return y


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def softmax2(z) -> np.ndarray:
    z = _check_vec(z, 2, "logits")
    e = np.exp(z - z.max())
    return e / e.sum()


def affine_backward(g: np.ndarray, W: np.ndarray, x: np.ndarray) -> tuple:
    """Gradients ``(dx, dW, db)`` of ``W @ x + b`` for upstream ``g``."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape[0] != W.shape[0] or x.shape[0] != W.shape[1]:
        raise ValueError(f"shape mismatch: W {W.shape}, x {x.shape}, g {g.shape}")
    return W.T @ g, np.outer(g, x), g.copy()


def relu_backward(g: np.ndarray, pre: np.ndarray) -> np.ndarray:
    # subgradient 0 at the kink
    if g.shape != pre.shape:
        raise ValueError(f"shape mismatch: {g.shape} vs {pre.shape}")
    return np.where(pre > 0.0, g, 0.0)


def softmax2_ce_backward(p: np.ndarray, label: int) -> np.ndarray:
    """d(-log p[label]) / d(logits) for a softmax over two logits."""
    if p.shape != (2,):
        raise ValueError("expected two probabilities")
    g = p.copy()
    g[label] -= 1.0
    return g


class GradStore:
    """Gradient buffers keyed by parameter name, shaped like the parameters."""

    def __init__(self, shapes: dict):
        self.grads = {name: np.zeros(shape) for name, shape in shapes.items()}
        self.count = 0

    @classmethod
    def like(cls, params) -> "GradStore":
        return cls({name: arr.shape for name, arr in params.tensors()})

    def __getitem__(self, name):
        return self.grads[name]

    def add(self, name: str, value) -> None:
        self.grads[name] += value

    def merge(self, other: "GradStore") -> None:
        for name, g in other.grads.items():
            self.grads[name] += g
        self.count += other.count

    def zero(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)
        self.count = 0

    def scaled(self, factor: float) -> "GradStore":
        out = GradStore({k: v.shape for k, v in self.grads.items()})
        for k, v in self.grads.items():
            out.grads[k] = v * factor
        out.count = self.count
        return out
