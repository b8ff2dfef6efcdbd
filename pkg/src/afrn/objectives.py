"""Training objective: triplet ratio, pairwise and identity-preserving losses.

The three loss shapes are reconstructions (the formulas come from an external
source); each lives behind one function so an alternative can be swapped in:

* triplet ratio: ``mean max(0, 1 - d_n / (d_p + m))``
* pairwise: ``mean d_p``
* identity: softmax cross-entropy of an affine classifier on the embedding

``d`` is the squared L2 distance everywhere.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .kernels import ShapeError

DEFAULT_WEIGHTS = (1.0, 0.5, 1.0)


class LabelError(ValueError):
    pass


@dataclass
class LossBreakdown:
    triplet: float
    pairwise: float
    identity: float
    total: float
    weights: tuple

    def as_dict(self) -> dict:
        return {"L_t": self.triplet, "L_p": self.pairwise, "L_id": self.identity,
                "total": self.total}


def mine_triplets(labels, seed) -> np.ndarray:
    """One random (anchor, positive, negative) per anchor that has a positive.

    Returns an ``(T, 3)`` int array, empty when the batch has no valid triplet.
    """
    labels = np.asarray(labels)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = []
    if len(np.unique(labels)) < 2:
        return np.zeros((0, 3), dtype=np.int64)
    idx = np.arange(len(labels))
    for a in idx:
        pos = idx[(labels == labels[a]) & (idx != a)]
        if pos.size == 0:
            continue
        neg = idx[labels != labels[a]]
        out.append((a, pos[rng.integers(pos.size)], neg[rng.integers(neg.size)]))
    return np.asarray(out, dtype=np.int64).reshape(-1, 3)


def _sqdist(diff):
    return (diff * diff).sum(axis=-1)


def triplet_ratio_loss(triplets, embeddings, margin: float = 1.0, grad: bool = False):
    if margin <= 0:
        raise ValueError("margin must be positive")
    emb = np.asarray(embeddings, dtype=np.float64)
    triplets = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    g = np.zeros_like(emb)
    if len(triplets) == 0:
        return (0.0, g) if grad else 0.0
    a, p, n = triplets.T
    dap = emb[a] - emb[p]
    dan = emb[a] - emb[n]
    d_p, d_n = _sqdist(dap), _sqdist(dan)
    denom = d_p + margin
    terms = 1.0 - d_n / denom
    active = terms > 0
    loss = float(np.where(active, terms, 0.0).mean())
    if not grad:
        return loss
    T = len(triplets)
    c_p = np.where(active, d_n / denom ** 2, 0.0)[:, None] / T
    c_n = np.where(active, -1.0 / denom, 0.0)[:, None] / T
    # d d_p / d anchor = 2 (a - p), etc.
    np.add.at(g, a, 2 * c_p * dap + 2 * c_n * dan)
    np.add.at(g, p, -2 * c_p * dap)
    np.add.at(g, n, -2 * c_n * dan)
    return loss, g


def triplet_terms(triplets, embeddings, margin: float = 1.0) -> np.ndarray:
    emb = np.asarray(embeddings, dtype=np.float64)
    a, p, n = np.asarray(triplets, dtype=np.int64).reshape(-1, 3).T
    d_p = _sqdist(emb[a] - emb[p])
    d_n = _sqdist(emb[a] - emb[n])
    return np.maximum(0.0, 1.0 - d_n / (d_p + margin))


def pairwise_loss(triplets, embeddings, grad: bool = False):
    emb = np.asarray(embeddings, dtype=np.float64)
    triplets = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    g = np.zeros_like(emb)
    if len(triplets) == 0:
        return (0.0, g) if grad else 0.0
    a, p = triplets[:, 0], triplets[:, 1]
    diff = emb[a] - emb[p]
    loss = float(_sqdist(diff).mean())
    if not grad:
        return loss
    T = len(triplets)
    np.add.at(g, a, 2 * diff / T)
    np.add.at(g, p, -2 * diff / T)
    return loss, g


def identity_loss(embeddings, labels, classifier, grad: bool = False):
    """Mean softmax cross-entropy; ``classifier`` is ``(W, b)``.

    With ``grad=True`` returns ``(loss, d_embeddings, dW, db)``.
    """
    W, b = classifier
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if emb.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"classifier {W.shape}/{b.shape} does not fit embeddings {emb.shape}")
    n_cls = W.shape[1]
    if labels.shape != (emb.shape[0],):
        raise ShapeError(f"{labels.shape[0]} labels for {emb.shape[0]} embeddings")
    if labels.size and (labels.min() < 0 or labels.max() >= n_cls):
        raise LabelError(f"labels must lie in [0, {n_cls})")
    logits = emb @ W + b
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    B = emb.shape[0]
    loss = float((logsum - shifted[np.arange(B), labels]).mean())
    if not grad:
        return loss
    probs = np.exp(shifted - logsum[:, None])
    dlogits = probs
    dlogits[np.arange(B), labels] -= 1.0
    dlogits /= B
    return loss, dlogits @ W.T, emb.T @ dlogits, dlogits.sum(axis=0)


def joint_loss(embeddings, labels, classifier, margin: float = 1.0,
               weights: Sequence[float] = DEFAULT_WEIGHTS,
               triplets: Optional[np.ndarray] = None, seed=0):
    """Weighted sum of the three losses and its gradients.

    Returns ``(LossBreakdown, grads)`` where ``grads`` holds ``embeddings``,
    ``cls.W`` and ``cls.b``. Triplets are mined with ``seed`` when not given;
    a batch without any valid triplet contributes only the identity term.
    """
    w_t, w_p, w_id = (float(w) for w in weights)
    if not all(np.isfinite([w_t, w_p, w_id])):
        raise ValueError("loss weights must be finite")
    if triplets is None:
        triplets = mine_triplets(labels, seed)
    lt, gt = triplet_ratio_loss(triplets, embeddings, margin, grad=True)
    lp, gp = pairwise_loss(triplets, embeddings, grad=True)
    lid, gid, dW, db = identity_loss(embeddings, labels, classifier, grad=True)
    total = w_t * lt + w_p * lp + w_id * lid
    grads = {"embeddings": w_t * gt + w_p * gp + w_id * gid,
             "cls.W": w_id * dW, "cls.b": w_id * db}
    return LossBreakdown(lt, lp, lid, total, (w_t, w_p, w_id)), grads
