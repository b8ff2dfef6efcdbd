"""Biometric evaluation on squared-L2 distances.

A comparison is accepted when ``distance <= threshold``. Thresholds are swept
over the observed distances plus -inf/+inf, so every curve is an exact step
function.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .kernels import ShapeError


class ProtocolError(ValueError):
    pass


@dataclass
class ScoredPairSet:
    distances: np.ndarray
    genuine: np.ndarray

    def __post_init__(self):
        self.distances = np.asarray(self.distances, dtype=np.float64)
        self.genuine = np.asarray(self.genuine, dtype=bool)
        if self.distances.shape != self.genuine.shape or self.distances.ndim != 1:
            raise ShapeError("distances and genuine flags must be equal-length vectors")
        if np.any(self.distances < 0):
            raise ValueError("distances must be non-negative")

    def check_curve(self):
        if not self.genuine.any() or self.genuine.all():
            raise ProtocolError("need at least one genuine and one impostor pair")


@dataclass
class CurvePoint:
    threshold: float
    tar: float
    far: float
    target: float


@dataclass
class Template:
    template_id: object
    subject_id: object
    media: list


def squared_l2(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"width mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return float(d @ d)


def pairwise_sq_l2(X, Y) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape[1] != Y.shape[1]:
        raise ShapeError(f"width mismatch: {X.shape[1]} vs {Y.shape[1]}")
    diff = X[:, None, :] - Y[None, :, :]
    return (diff * diff).sum(axis=-1)


def thresholds_for(distances) -> np.ndarray:
    return np.concatenate([[-np.inf], np.unique(distances), [np.inf]])


def _accept_rate(sorted_d: np.ndarray, thr: np.ndarray) -> np.ndarray:
    if sorted_d.size == 0:
        return np.zeros(thr.shape)
    return np.searchsorted(sorted_d, thr, side="right") / sorted_d.size


def _check_targets(targets):
    targets = [float(t) for t in targets]
    for t in targets:
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"rate target {t} outside [0, 1]")
    return targets


def _pick(thr, hit, false, targets) -> list:
    out = []
    for t in targets:
        k = np.flatnonzero(false <= t)[-1]   # -inf always qualifies
        out.append(CurvePoint(float(thr[k]), float(hit[k]), float(false[k]), t))
    return out


def roc(pairs: ScoredPairSet):
    """Full ``(thresholds, TAR, FAR)`` step curve."""
    pairs.check_curve()
    thr = thresholds_for(pairs.distances)
    tar = _accept_rate(np.sort(pairs.distances[pairs.genuine]), thr)
    far = _accept_rate(np.sort(pairs.distances[~pairs.genuine]), thr)
    return thr, tar, far


def tar_at_far(pairs: ScoredPairSet, far_targets: Sequence[float]) -> list:
    """TAR at the largest threshold whose FAR does not exceed each target."""
    targets = _check_targets(far_targets)
    thr, tar, far = roc(pairs)
    return _pick(thr, tar, far, targets)


def verification_accuracy(pairs: ScoredPairSet):
    """Best single-threshold accuracy; ties resolve to the smallest threshold."""
    pairs.check_curve()
    thr, tar, far = roc(pairs)
    n_gen = int(pairs.genuine.sum())
    n_imp = pairs.genuine.size - n_gen
    correct = tar * n_gen + (1.0 - far) * n_imp
    acc = np.rint(correct) / pairs.genuine.size
    k = int(np.argmax(acc))
    return float(acc[k]), float(thr[k])


def all_pairs(embeddings, labels) -> ScoredPairSet:
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    i, j = np.triu_indices(len(labels), k=1)
    d = pairwise_sq_l2(emb, emb)[i, j]
    return ScoredPairSet(np.maximum(d, 0.0), labels[i] == labels[j])


def balanced_pairs(embeddings, labels, seed) -> ScoredPairSet:
    """Every genuine pair plus an equal number of random impostor pairs."""
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    i, j = np.triu_indices(len(labels), k=1)
    same = labels[i] == labels[j]
    rng = np.random.default_rng(seed)
    imp = np.flatnonzero(~same)
    gen = np.flatnonzero(same)
    pick = np.sort(rng.choice(imp, size=min(len(gen), len(imp)), replace=False))
    keep = np.concatenate([gen, pick])
    d = pairwise_sq_l2(emb, emb)[i[keep], j[keep]]
    return ScoredPairSet(np.maximum(d, 0.0), same[keep])


# --------------------------------------------------------------------------
# templates and identification

def aggregate_template(t: Template) -> np.ndarray:
    """Mean of per-media mean embeddings."""
    if not t.media:
        raise ProtocolError(f"template {t.template_id} has no media")
    means = []
    width = None
    for m in t.media:
        m = np.atleast_2d(np.asarray(m, dtype=np.float64))
        if m.shape[0] == 0:
            raise ProtocolError(f"template {t.template_id} has an empty media")
        if width is not None and m.shape[1] != width:
            raise ShapeError(f"template {t.template_id}: mixed embedding widths")
        width = m.shape[1]
        means.append(m.mean(axis=0))
    return np.mean(means, axis=0)


def _gallery(gallery: Sequence[Template]):
    subjects = [t.subject_id for t in gallery]
    if len(set(subjects)) != len(subjects):
        raise ProtocolError("gallery subjects must be unique")
    feats = np.stack([aggregate_template(t) for t in gallery])
    return subjects, feats


def _ranked(probe_emb, gallery):
    subjects, feats = _gallery(gallery)
    d = pairwise_sq_l2(np.atleast_2d(probe_emb), feats)
    order = np.argsort(d, axis=1, kind="stable")
    return subjects, d, order


def rank_n(probe_embeddings, probe_subjects, gallery: Sequence[Template],
           ranks: Sequence[int] = (1, 5, 10)) -> dict:
    """Closed-set CMC accuracies ``{N: fraction}``."""
    subjects, d, order = _ranked(probe_embeddings, gallery)
    pos = {s: k for k, s in enumerate(subjects)}
    hit_rank = []
    for p, s in enumerate(probe_subjects):
        if s not in pos:
            raise ProtocolError(f"probe subject {s!r} is not in the gallery")
        hit_rank.append(int(np.flatnonzero(order[p] == pos[s])[0]) + 1)
    hit_rank = np.asarray(hit_rank)
    return {int(n): float((hit_rank <= n).mean()) for n in ranks}


def tpir_at_fpir(mated_embeddings, mated_subjects, nonmated_embeddings,
                 gallery: Sequence[Template], fpir_targets: Sequence[float]) -> list:
    """Open-set identification; a mated hit needs a correct rank-1 under threshold.

    Returned points carry TPIR in ``tar`` and FPIR in ``far``.
    """
    targets = _check_targets(fpir_targets)
    nonmated = np.atleast_2d(np.asarray(nonmated_embeddings, dtype=np.float64))
    if nonmated.size == 0:
        raise ProtocolError("FPIR is undefined without non-mated probes")
    mated = np.atleast_2d(np.asarray(mated_embeddings, dtype=np.float64))
    if mated.size == 0:
        raise ProtocolError("need at least one mated probe")
    subjects, dm, om = _ranked(mated, gallery)
    _, dn, on = _ranked(nonmated, gallery)
    sset = set(subjects)
    for s in mated_subjects:
        if s not in sset:
            raise ProtocolError(f"mated probe subject {s!r} is not in the gallery")
    best_m = dm[np.arange(len(dm)), om[:, 0]]
    correct = np.array([subjects[om[p, 0]] == s for p, s in enumerate(mated_subjects)])
    best_n = dn[np.arange(len(dn)), on[:, 0]]
    thr = thresholds_for(np.concatenate([best_m, best_n]))
    # count hits over all mated probes, wrong rank-1 matches never count
    hits = np.searchsorted(np.sort(best_m[correct]), thr, side="right")
    tpir = hits / len(correct)
    fpir = _accept_rate(np.sort(best_n), thr)
    return _pick(thr, tpir, fpir, targets)


# --------------------------------------------------------------------------
# report emission

def curve_csv(points: Sequence[CurvePoint], kind: str = "verification") -> str:
    hit, false = ("tar", "far") if kind == "verification" else ("tpir", "fpir")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["target", "threshold", hit, false])
    for p in points:
        w.writerow([repr(p.target), repr(p.threshold), repr(p.tar), repr(p.far)])
    return buf.getvalue()


def summary_lines(records: Sequence[dict]) -> str:
    """One JSON object per line, keys sorted."""
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
