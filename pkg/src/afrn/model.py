"""Attentional feature-pair relation network: forward and manual backward.

Shapes used throughout (batch axis ``B`` first when present):

* grid ``(H, W, D)``; block features ``F`` ``(D, N)`` with ``N = H * W``
* attention logits / scores ``(N, N)``
* relation ``r'`` ``(L,)``, pooled relation ``r~`` ``(C,)``
* embedding ``(E,)``
"""
from __future__ import annotations

import warnings
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np

from .kernels import (ShapeError, relu, relu_backward, softmax_flat,
                      softmax_flat_backward)


class DegenerateParameterError(ValueError):
    """A weight-normalized direction column has zero norm."""


class CacheError(RuntimeError):
    """A forward cache does not match the parameters or gradient it is used with."""


class InvalidBatchError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration and parameters

@dataclass(frozen=True)
class ModelConfig:
    H: int
    W: int
    D: int
    L: int
    L_att: int
    C: int
    E: int
    n_identities: int
    K: int
    hidden: Optional[int] = None
    selection: bool = True
    renormalize: bool = False
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.hidden is None:
            object.__setattr__(self, "hidden", self.E)
        for f in ("H", "W", "D", "L", "L_att", "C", "E", "n_identities", "K", "hidden"):
            v = getattr(self, f)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{f} must be a positive integer, got {v!r}")

    @property
    def N(self) -> int:
        return self.H * self.W

    @property
    def effective_K(self) -> int:
        return min(self.K, self.N * self.N)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model fields: {sorted(unknown)}")
        return cls(**d)


TOY_PRESET = ModelConfig(H=3, W=3, D=16, L=32, L_att=32, C=16, E=32,
                         n_identities=8, K=27)
# Full-size shapes; far too large for CI.
PAPER_PRESET = ModelConfig(H=9, W=9, D=2048, L=1024, L_att=1024, C=1024, E=1024,
                           n_identities=8630, K=442)

WEIGHT_NORMED = ("att.U", "att.V", "rel.U", "rel.V", "rel.P")


def parameter_shapes(cfg: ModelConfig) -> dict:
    return {
        "att.U.v": (cfg.D, cfg.L_att), "att.U.g": (cfg.L_att,),
        "att.V.v": (cfg.D, cfg.L_att), "att.V.g": (cfg.L_att,),
        "att.p": (cfg.L_att,),
        "rel.U.v": (cfg.D, cfg.L), "rel.U.g": (cfg.L,),
        "rel.V.v": (cfg.D, cfg.L), "rel.V.g": (cfg.L,),
        "rel.P.v": (cfg.L, cfg.C), "rel.P.g": (cfg.C,),
        "mlp.W1": (cfg.C, cfg.hidden), "mlp.b1": (cfg.hidden,),
        "mlp.bn1.gamma": (cfg.hidden,), "mlp.bn1.beta": (cfg.hidden,),
        "mlp.W2": (cfg.hidden, cfg.E), "mlp.b2": (cfg.E,),
        "mlp.bn2.gamma": (cfg.E,), "mlp.bn2.beta": (cfg.E,),
        "cls.W": (cfg.E, cfg.n_identities), "cls.b": (cfg.n_identities,),
    }


def buffer_shapes(cfg: ModelConfig) -> dict:
    return {
        "mlp.bn1.mean": (cfg.hidden,), "mlp.bn1.var": (cfg.hidden,),
        "mlp.bn2.mean": (cfg.E,), "mlp.bn2.var": (cfg.E,),
    }


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict
    buffers: dict
    version: int = 0

    def check(self):
        for name, shape in parameter_shapes(self.config).items():
            if name not in self.tensors:
                raise ShapeError(f"missing parameter {name}")
            if self.tensors[name].shape != shape:
                raise ShapeError(f"parameter {name}: expected {shape}, "
                                 f"got {self.tensors[name].shape}")
        for name, shape in buffer_shapes(self.config).items():
            if self.buffers.get(name) is None or self.buffers[name].shape != shape:
                raise ShapeError(f"buffer {name}: expected {shape}")

    def trainable(self) -> dict:
        return self.tensors

    def bump(self):
        self.version += 1

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()},
                           {k: v.copy() for k, v in self.buffers.items()}, self.version)

    def with_config(self, **changes) -> "ModelParams":
        """Same tensors under a config differing only in non-shape fields."""
        cfg = replace(self.config, **changes)
        if parameter_shapes(cfg) != parameter_shapes(self.config):
            raise ShapeError("config change alters parameter shapes")
        return ModelParams(cfg, self.tensors, self.buffers, self.version)

    def attention_params(self) -> "AttentionParams":
        t = self.tensors
        return AttentionParams(weight_norm(t["att.U.v"], t["att.U.g"]),
                               weight_norm(t["att.V.v"], t["att.V.g"]), t["att.p"])

    def relation_params(self) -> "RelationParams":
        t = self.tensors
        return RelationParams(weight_norm(t["rel.U.v"], t["rel.U.g"]),
                              weight_norm(t["rel.V.v"], t["rel.V.g"]),
                              weight_norm(t["rel.P.v"], t["rel.P.g"]))

    def head(self) -> "MlpHead":
        t, b = self.tensors, self.buffers
        return MlpHead(t["mlp.W1"], t["mlp.b1"], t["mlp.bn1.gamma"], t["mlp.bn1.beta"],
                       b["mlp.bn1.mean"], b["mlp.bn1.var"],
                       t["mlp.W2"], t["mlp.b2"], t["mlp.bn2.gamma"], t["mlp.bn2.beta"],
                       b["mlp.bn2.mean"], b["mlp.bn2.var"],
                       self.config.bn_eps, self.config.bn_momentum)

    def classifier(self) -> tuple:
        return self.tensors["cls.W"], self.tensors["cls.b"]


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Gaussian(0, 2/fan_in) weights and directions, unit gains, zero shifts."""
    tensors = {}
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("g", "gamma"):
            tensors[name] = np.ones(shape)
        elif leaf in ("beta",) or name.endswith((".b1", ".b2")) or name == "cls.b":
            tensors[name] = np.zeros(shape)
        else:
            fan_in = shape[0]
            tensors[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    buffers = {}
    for name, shape in buffer_shapes(cfg).items():
        buffers[name] = np.ones(shape) if name.endswith(".var") else np.zeros(shape)
    return ModelParams(cfg, tensors, buffers)


# --------------------------------------------------------------------------
# block rearrangement

@dataclass
class RearrangedFeatures:
    F: np.ndarray
    H: int
    W: int

    @property
    def N(self) -> int:
        return self.F.shape[-1]

    @property
    def D(self) -> int:
        return self.F.shape[-2]


def rearrange(grid) -> RearrangedFeatures:
    """Stack the blocks of an ``(..., H, W, D)`` grid as columns of ``F`` (row-major)."""
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim < 3 or min(g.shape[-3:]) < 1:
        raise ShapeError(f"grid must be (..., H, W, D) with positive sizes, got {g.shape}")
    H, W, D = g.shape[-3:]
    F = np.swapaxes(g.reshape(g.shape[:-3] + (H * W, D)), -1, -2)
    return RearrangedFeatures(np.ascontiguousarray(F), H, W)


def unrearrange(feats: RearrangedFeatures) -> np.ndarray:
    F = feats.F
    D, N = F.shape[-2:]
    return np.swapaxes(F, -1, -2).reshape(F.shape[:-2] + (feats.H, feats.W, D))


# --------------------------------------------------------------------------
# weight normalization

def weight_norm(direction: np.ndarray, gains: np.ndarray) -> np.ndarray:
    """Column ``j`` becomes ``gains[j] * direction[:, j] / ||direction[:, j]||``."""
    v = np.asarray(direction, dtype=np.float64)
    g = np.asarray(gains, dtype=np.float64)
    if v.ndim != 2 or g.shape != (v.shape[1],):
        raise ShapeError(f"weight_norm: direction {v.shape} vs gains {g.shape}")
    norms = np.sqrt((v * v).sum(axis=0))
    if np.any(norms == 0.0):
        bad = np.flatnonzero(norms == 0.0).tolist()
        raise DegenerateParameterError(f"zero-norm direction columns {bad}")
    return v * (g / norms)


def weight_norm_backward(direction: np.ndarray, gains: np.ndarray, grad: np.ndarray):
    """Return ``(d_direction, d_gains)``."""
    norms = np.sqrt((direction * direction).sum(axis=0))
    unit = direction / norms
    d_gain = (grad * unit).sum(axis=0)
    d_dir = (gains / norms) * (grad - unit * d_gain)
    return d_dir, d_gain


# --------------------------------------------------------------------------
# feature-pair bilinear attention

@dataclass
class AttentionParams:
    Uprime: np.ndarray
    Vprime: np.ndarray
    p: np.ndarray

    @property
    def rank(self) -> int:
        return self.p.shape[0]


@dataclass
class BilinearAttentionMap:
    logits: np.ndarray
    scores: np.ndarray

    @classmethod
    def from_scores(cls, scores) -> "BilinearAttentionMap":
        s = np.asarray(scores, dtype=np.float64)
        with np.errstate(divide="ignore"):
            return cls(np.log(s), s)


def _check_features(F: np.ndarray, maps: tuple, what: str):
    for M in maps:
        if M.shape[0] != F.shape[-2]:
            raise ShapeError(f"{what}: feature depth {F.shape[-2]} does not match "
                             f"map of shape {M.shape}")


def attention_logits(feats, ap: AttentionParams) -> np.ndarray:
    """``((1 p^T) * relu(F^T U')) @ relu(V'^T F)``, shape ``(..., N, N)``."""
    F = feats.F if isinstance(feats, RearrangedFeatures) else np.asarray(feats)
    _check_features(F, (ap.Uprime, ap.Vprime), "attention_logits")
    if ap.Uprime.shape != ap.Vprime.shape or ap.p.shape != (ap.Uprime.shape[1],):
        raise ShapeError(f"attention params: U' {ap.Uprime.shape}, V' {ap.Vprime.shape}, "
                         f"p {ap.p.shape}")
    Ft = np.swapaxes(F, -1, -2)
    Xa = relu(Ft @ ap.Uprime)
    Ya = relu(Ft @ ap.Vprime)
    return (Xa * ap.p) @ np.swapaxes(Ya, -1, -2)


def attention_logits_pairwise(feats, ap: AttentionParams) -> np.ndarray:
    """Per-pair reference: ``p^T (relu(U'^T f_i) * relu(V'^T f_j))`` for every (i, j)."""
    F = feats.F if isinstance(feats, RearrangedFeatures) else np.asarray(feats)
    N = F.shape[1]
    out = np.zeros((N, N))
    for i in range(N):
        ui = relu(ap.Uprime.T @ F[:, i])
        for j in range(N):
            vj = relu(ap.Vprime.T @ F[:, j])
            out[i, j] = ap.p @ (ui * vj)
    return out


def attention_logits_backward(F, ap: AttentionParams, grad):
    """Gradients of ``attention_logits`` for a single ``(D, N)`` feature matrix.

    Returns ``(dF, dUprime, dVprime, dp)``.
    """
    Ft = F.T
    Zu, Zv = Ft @ ap.Uprime, Ft @ ap.Vprime
    Xa, Ya = relu(Zu), relu(Zv)
    dp = np.einsum("ij,il,jl->l", grad, Xa, Ya)
    dZu = relu_backward(Zu, (grad @ Ya) * ap.p)
    dZv = relu_backward(Zv, (grad.T @ Xa) * ap.p)
    dF = ap.Uprime @ dZu.T + ap.Vprime @ dZv.T
    return dF, F @ dZu, F @ dZv, dp


def attention_map(logits) -> BilinearAttentionMap:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim < 2 or z.shape[-1] != z.shape[-2]:
        raise ShapeError(f"attention logits must be square, got {z.shape}")
    return BilinearAttentionMap(z, softmax_flat(z))


# --------------------------------------------------------------------------
# top-K pair selection

@dataclass
class PairSelection:
    pairs: np.ndarray     # (K, 2) int, rows (i, j)
    scores: np.ndarray    # (K,)
    N: int

    @property
    def K(self) -> int:
        return len(self.pairs)

    @property
    def flat(self) -> np.ndarray:
        return self.pairs[:, 0] * self.N + self.pairs[:, 1]

    def as_list(self) -> list:
        return [(int(i), int(j)) for i, j in self.pairs]


def clamp_k(K: int, N: int) -> int:
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if K > N * N:
        warnings.warn(f"K={K} exceeds the {N * N} available pairs; using all pairs",
                      stacklevel=3)
        return N * N
    return K


def top_k_flat(values: np.ndarray, K: int) -> np.ndarray:
    """Flat indices of the K largest entries per trailing (N, N) map.

    Order is descending by value; ties go to the smaller row-major index, i.e.
    lexicographic (i, j).
    """
    N = values.shape[-1]
    flat = values.reshape(values.shape[:-2] + (N * N,))
    order = np.argsort(-flat, axis=-1, kind="stable")
    return order[..., :K]


def select_pairs(amap: BilinearAttentionMap, K: int, by: str = "scores") -> PairSelection:
    vals = amap.scores if by == "scores" else amap.logits
    if vals.ndim != 2:
        raise ShapeError("select_pairs expects a single (N, N) map")
    N = vals.shape[-1]
    K = clamp_k(K, N)
    idx = top_k_flat(vals, K)
    pairs = np.stack([idx // N, idx % N], axis=1)
    return PairSelection(pairs, amap.scores.reshape(-1)[idx], N)


# --------------------------------------------------------------------------
# joint feature-pair relation

@dataclass
class RelationParams:
    U: np.ndarray
    V: np.ndarray
    P: np.ndarray

    @property
    def rank(self) -> int:
        return self.U.shape[1]


class MacCounter:
    """Counts multiply-accumulate groups (one per (pair, rank) term)."""

    def __init__(self):
        self.count = 0

    def add(self, n: int):
        self.count += int(n)


def _scores_of(amap) -> np.ndarray:
    return amap.scores if isinstance(amap, BilinearAttentionMap) else np.asarray(amap)


def _relation_inputs(feats, rp: RelationParams, A: np.ndarray, what: str):
    F = feats.F if isinstance(feats, RearrangedFeatures) else np.asarray(feats)
    _check_features(F, (rp.U, rp.V), what)
    if rp.U.shape != rp.V.shape:
        raise ShapeError(f"{what}: U {rp.U.shape} vs V {rp.V.shape}")
    N = F.shape[-1]
    if A.shape[-2:] != (N, N):
        raise ShapeError(f"{what}: attention map {A.shape} does not match N={N}")
    Ft = np.swapaxes(F, -1, -2)
    return F, relu(Ft @ rp.U), relu(Ft @ rp.V)


def joint_relation_full(feats, amap, rp: RelationParams,
                        counter: Optional[MacCounter] = None) -> np.ndarray:
    """``r'_l = X_l^T A Y_l`` with ``X = relu(F^T U)``, ``Y = relu(F^T V)``."""
    A = _scores_of(amap)
    F, X, Y = _relation_inputs(feats, rp, A, "joint_relation_full")
    if counter is not None:
        batch = int(np.prod(F.shape[:-2]))
        counter.add(batch * A.shape[-1] ** 2 * rp.rank)
    return np.einsum("...il,...ij,...jl->...l", X, A, Y)


def joint_relation_naive(feats, amap, rp: RelationParams,
                         counter: Optional[MacCounter] = None) -> np.ndarray:
    """Explicit double sum over all (i, j); single sample only."""
    A = _scores_of(amap)
    F, X, Y = _relation_inputs(feats, rp, A, "joint_relation_naive")
    N, L = X.shape
    r = np.zeros(L)
    for i in range(N):
        for j in range(N):
            r += A[i, j] * X[i] * Y[j]
            if counter is not None:
                counter.add(L)
    return r


def _selected_sum(X, Y, A, idx, renormalize: bool):
    """Attention-weighted relation sum over the pair indices ``idx`` ``(B, K)``."""
    B, N, _ = A.shape
    rows = np.arange(B)[:, None]
    wi, wj = idx // N, idx % N
    a = A.reshape(B, N * N)[rows, idx]
    total = None
    if renormalize:
        total = a.sum(axis=1, keepdims=True)
        a = a / total
    Xs = X[rows, wi]
    Ys = Y[rows, wj]
    r = np.einsum("bk,bkl,bkl->bl", a, Xs, Ys)
    return r, (wi, wj, a, total, Xs, Ys)


def joint_relation_selected(feats, amap, sel: PairSelection, rp: RelationParams,
                            counter: Optional[MacCounter] = None,
                            renormalize: bool = False) -> np.ndarray:
    """Sum over the kept pairs only; kept scores are used as-is unless ``renormalize``."""
    A = _scores_of(amap)
    F, X, Y = _relation_inputs(feats, rp, A, "joint_relation_selected")
    N = A.shape[-1]
    pairs = np.asarray(sel.pairs)
    if pairs.size and (pairs.min() < 0 or pairs.max() >= N):
        raise IndexError(f"pair index out of range for N={N}")
    idx = (pairs[:, 0] * N + pairs[:, 1])[None, :]
    if counter is not None:
        counter.add(len(pairs) * rp.rank)
    r, _ = _selected_sum(X[None], Y[None], A[None], idx, renormalize)
    return r[0]


def joint_relation_backward(F, A, rp: RelationParams, grad,
                            sel: Optional[PairSelection] = None, renormalize: bool = False):
    """Gradients of the joint relation for one sample. Returns ``(dF, dA, dU, dV)``.

    With ``sel`` the kept set is treated as a constant and ``dA`` is zero on
    every dropped pair.
    """
    A = _scores_of(A)
    Ft = F.T
    Zu, Zv = Ft @ rp.U, Ft @ rp.V
    X, Y = relu(Zu), relu(Zv)
    N = A.shape[-1]
    if sel is None:
        dA = (X * grad) @ Y.T
        dX = (A @ Y) * grad
        dY = (A.T @ X) * grad
    else:
        idx = np.asarray(sel.flat)[None, :]
        _, parts = _selected_sum(X[None], Y[None], A[None], idx, renormalize)
        wi, wj, a, total, Xs, Ys = (p if p is None else p[0] for p in parts)
        da = np.einsum("l,kl,kl->k", grad, Xs, Ys)
        dX = np.zeros_like(X)
        dY = np.zeros_like(Y)
        np.add.at(dX, wi, a[:, None] * grad * Ys)
        np.add.at(dY, wj, a[:, None] * grad * Xs)
        if renormalize:
            da = (da - (da * a).sum()) / total[0]
        dA = np.zeros(N * N)
        dA[idx[0]] = da
        dA = dA.reshape(N, N)
    dZu = relu_backward(Zu, dX)
    dZv = relu_backward(Zv, dY)
    dF = rp.U @ dZu.T + rp.V @ dZv.T
    return dF, dA, F @ dZu, F @ dZv


def pool_relation(r, P) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-1] != P.shape[0]:
        raise ShapeError(f"pool_relation: r' width {r.shape[-1]} vs P {P.shape}")
    return r @ P


# --------------------------------------------------------------------------
# batch normalization and MLP head

@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    mode: str


def batch_norm(x, gamma, beta, running_mean, running_var, mode: str = "train",
               eps: float = 1e-5, momentum: float = 0.1):
    """Returns ``(y, cache, new_running_mean, new_running_var)``.

    Running statistics are returned, not written, so the call stays pure. The
    running variance tracks the unbiased batch variance.
    """
    x = np.asarray(x, dtype=np.float64)
    if mode == "train":
        n = x.shape[0]
        if n < 2:
            raise InvalidBatchError("train-mode batch norm needs a batch of at least 2")
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        new_mean = (1 - momentum) * running_mean + momentum * mean
        new_var = (1 - momentum) * running_var + momentum * var * n / (n - 1)
    elif mode == "infer":
        mean, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return gamma * xhat + beta, BatchNormCache(xhat, inv_std, gamma, mode), new_mean, new_var


def batch_norm_backward(cache: BatchNormCache, grad: np.ndarray):
    """Return ``(dx, dgamma, dbeta)``."""
    dbeta = grad.sum(axis=0)
    dgamma = (grad * cache.xhat).sum(axis=0)
    dxhat = grad * cache.gamma
    if cache.mode == "infer":
        return dxhat * cache.inv_std, dgamma, dbeta
    n = grad.shape[0]
    dx = cache.inv_std / n * (n * dxhat - dxhat.sum(axis=0)
                              - cache.xhat * (dxhat * cache.xhat).sum(axis=0))
    return dx, dgamma, dbeta


@dataclass
class MlpHead:
    W1: np.ndarray
    b1: np.ndarray
    gamma1: np.ndarray
    beta1: np.ndarray
    mean1: np.ndarray
    var1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    gamma2: np.ndarray
    beta2: np.ndarray
    mean2: np.ndarray
    var2: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1


@dataclass
class MlpCache:
    x: np.ndarray
    z1: np.ndarray
    bn1: BatchNormCache
    a1: np.ndarray
    h1: np.ndarray
    z2: np.ndarray
    bn2: BatchNormCache
    a2: np.ndarray
    running: dict = field(default_factory=dict)


def mlp_head(x, head: MlpHead, mode: str = "train"):
    """affine -> BN -> ReLU, twice. Returns ``(embedding, cache)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != head.W1.shape[0]:
        raise ShapeError(f"mlp_head: input {x.shape} vs first layer {head.W1.shape}")
    z1 = x @ head.W1 + head.b1
    a1, bn1, m1, v1 = batch_norm(z1, head.gamma1, head.beta1, head.mean1, head.var1,
                                 mode, head.eps, head.momentum)
    h1 = relu(a1)
    z2 = h1 @ head.W2 + head.b2
    a2, bn2, m2, v2 = batch_norm(z2, head.gamma2, head.beta2, head.mean2, head.var2,
                                 mode, head.eps, head.momentum)
    out = relu(a2)
    running = {"mlp.bn1.mean": m1, "mlp.bn1.var": v1, "mlp.bn2.mean": m2, "mlp.bn2.var": v2}
    return out, MlpCache(x, z1, bn1, a1, h1, z2, bn2, a2, running)


def mlp_head_backward(cache: MlpCache, head: MlpHead, grad: np.ndarray):
    """Return ``(dx, grads)`` with grads keyed by parameter name."""
    da2 = relu_backward(cache.a2, grad)
    dz2, dg2, db2_bn = batch_norm_backward(cache.bn2, da2)
    grads = {"mlp.W2": cache.h1.T @ dz2, "mlp.b2": dz2.sum(axis=0),
             "mlp.bn2.gamma": dg2, "mlp.bn2.beta": db2_bn}
    dh1 = dz2 @ head.W2.T
    da1 = relu_backward(cache.a1, dh1)
    dz1, dg1, db1_bn = batch_norm_backward(cache.bn1, da1)
    grads.update({"mlp.W1": cache.x.T @ dz1, "mlp.b1": dz1.sum(axis=0),
                  "mlp.bn1.gamma": dg1, "mlp.bn1.beta": db1_bn})
    return dz1 @ head.W1.T, grads


def embedding_of(cache: MlpCache) -> np.ndarray:
    """The face representation: the last layer's post-activation output."""
    return relu(cache.a2)


# --------------------------------------------------------------------------
# full model

@dataclass
class ForwardCache:
    params_id: int
    version: int
    mode: str
    F: np.ndarray
    Up: np.ndarray
    Vp: np.ndarray
    Zu_att: np.ndarray
    Zv_att: np.ndarray
    Xa: np.ndarray
    Ya: np.ndarray
    logits: np.ndarray
    scores: np.ndarray
    U: np.ndarray
    V: np.ndarray
    P: np.ndarray
    Zu: np.ndarray
    Zv: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    selection: Optional[np.ndarray]
    sel_parts: Optional[tuple]
    r_prime: np.ndarray
    r_tilde: np.ndarray
    mlp: MlpCache
    embeddings: np.ndarray
    params: "ModelParams" = field(repr=False, default=None)

    @property
    def running_stats(self) -> dict:
        return self.mlp.running

    def selection_pairs(self, b: int = 0) -> PairSelection:
        N = self.scores.shape[-1]
        idx = self.selection[b]
        pairs = np.stack([idx // N, idx % N], axis=1)
        return PairSelection(pairs, self.scores[b].reshape(-1)[idx], N)


@contextmanager
def _stage(name: str):
    try:
        yield
    except (ShapeError, DegenerateParameterError, InvalidBatchError, IndexError) as e:
        raise type(e)(f"[{name}] {e}") from e


def forward(params: ModelParams, grids, mode: str = "train",
            frozen_selection: Optional[np.ndarray] = None,
            counter: Optional[MacCounter] = None):
    """Run the full pipeline on a batch of grids ``(B, H, W, D)``.

    ``frozen_selection`` (flat pair indices, ``(B, K)``) replaces the top-K
    ranking; used to check gradients with the kept set held fixed.
    Returns ``(embeddings, cache)``; train-mode running statistics are in
    ``cache.running_stats`` and are committed with ``commit_running_stats``.
    """
    cfg = params.config
    t = params.tensors
    g = np.asarray(grids, dtype=np.float64)
    if g.ndim == 3:
        g = g[None]
    with _stage("rearrange"):
        if g.ndim != 4 or g.shape[1:] != (cfg.H, cfg.W, cfg.D):
            raise ShapeError(f"grids {g.shape} do not match model (B, {cfg.H}, {cfg.W}, {cfg.D})")
        F = rearrange(g).F
    B, N = g.shape[0], cfg.N
    Ft = np.swapaxes(F, -1, -2)

    with _stage("attention_logits"):
        Up = weight_norm(t["att.U.v"], t["att.U.g"])
        Vp = weight_norm(t["att.V.v"], t["att.V.g"])
        Zu_att = Ft @ Up
        Zv_att = Ft @ Vp
        Xa, Ya = relu(Zu_att), relu(Zv_att)
        logits = (Xa * t["att.p"]) @ np.swapaxes(Ya, -1, -2)
    with _stage("attention_map"):
        scores = softmax_flat(logits)

    with _stage("joint_relation"):
        U = weight_norm(t["rel.U.v"], t["rel.U.g"])
        V = weight_norm(t["rel.V.v"], t["rel.V.g"])
        Zu, Zv = Ft @ U, Ft @ V
        X, Y = relu(Zu), relu(Zv)
        selection = sel_parts = None
        if frozen_selection is not None:
            selection = np.asarray(frozen_selection, dtype=np.int64).reshape(B, -1)
            if selection.min() < 0 or selection.max() >= N * N:
                raise IndexError("frozen selection index out of range")
        elif cfg.selection:
            selection = top_k_flat(scores, clamp_k(cfg.K, N))
        if selection is not None:
            r_prime, sel_parts = _selected_sum(X, Y, scores, selection, cfg.renormalize)
            if counter is not None:
                counter.add(selection.size * cfg.L)
        else:
            r_prime = np.einsum("bil,bij,bjl->bl", X, scores, Y)
            if counter is not None:
                counter.add(B * N * N * cfg.L)

    with _stage("pool_relation"):
        P = weight_norm(t["rel.P.v"], t["rel.P.g"])
        r_tilde = r_prime @ P
    with _stage("mlp_head"):
        emb, mcache = mlp_head(r_tilde, params.head(), mode)

    cache = ForwardCache(id(params), params.version, mode, F, Up, Vp, Zu_att, Zv_att,
                         Xa, Ya, logits, scores, U, V, P, Zu, Zv, X, Y,
                         selection, sel_parts, r_prime, r_tilde, mcache, emb, params)
    return emb, cache


def commit_running_stats(params: ModelParams, cache: ForwardCache):
    if cache.mode == "train":
        for k, v in cache.running_stats.items():
            params.buffers[k] = v


def relation_backward(cache: ForwardCache, d_r_prime: np.ndarray, renormalize: bool):
    """Gradients of the relation wrt scores, X and Y. Returns ``(dA, dX, dY)``.

    With a selection, only kept entries of ``dA`` are nonzero: the ranking
    itself carries no gradient.
    """
    A, X, Y = cache.scores, cache.X, cache.Y
    if cache.selection is None:
        dA = (X * d_r_prime[:, None, :]) @ np.swapaxes(Y, -1, -2)
        dX = (A @ Y) * d_r_prime[:, None, :]
        dY = (np.swapaxes(A, -1, -2) @ X) * d_r_prime[:, None, :]
        return dA, dX, dY
    B, N, _ = A.shape
    wi, wj, a, total, Xs, Ys = cache.sel_parts
    rows = np.arange(B)[:, None]
    da = np.einsum("bl,bkl,bkl->bk", d_r_prime, Xs, Ys)
    dXs = a[:, :, None] * d_r_prime[:, None, :] * Ys
    dYs = a[:, :, None] * d_r_prime[:, None, :] * Xs
    dX = np.zeros_like(X)
    dY = np.zeros_like(Y)
    for b in range(B):
        np.add.at(dX[b], wi[b], dXs[b])
        np.add.at(dY[b], wj[b], dYs[b])
    if renormalize:
        da = (da - (da * a).sum(axis=1, keepdims=True)) / total
    dA = np.zeros((B, N * N))
    # selection indices are distinct, so plain assignment is a scatter-add
    dA[rows, cache.selection] = da
    return dA.reshape(B, N, N), dX, dY


def backward(cache: ForwardCache, d_embeddings, params: Optional[ModelParams] = None,
             return_input_grad: bool = False):
    """Reverse pass. Returns gradients for every non-classifier parameter."""
    params = cache.params if params is None else params
    if params is None or id(params) != cache.params_id or params.version != cache.version:
        raise CacheError("forward cache is stale or belongs to different parameters")
    d_emb = np.asarray(d_embeddings, dtype=np.float64)
    if d_emb.shape != cache.embeddings.shape:
        raise CacheError(f"embedding gradient {d_emb.shape} does not match cache "
                         f"{cache.embeddings.shape}")
    t = params.tensors
    cfg = params.config

    d_rt, grads = mlp_head_backward(cache.mlp, params.head(), d_emb)
    dP = cache.r_prime.T @ d_rt
    d_rp = d_rt @ cache.P.T
    grads["rel.P.v"], grads["rel.P.g"] = weight_norm_backward(t["rel.P.v"], t["rel.P.g"], dP)

    dA, dX, dY = relation_backward(cache, d_rp, cfg.renormalize)
    F = cache.F
    dZu = relu_backward(cache.Zu, dX)
    dZv = relu_backward(cache.Zv, dY)
    dU = np.einsum("bdn,bnl->dl", F, dZu)
    dV = np.einsum("bdn,bnl->dl", F, dZv)
    grads["rel.U.v"], grads["rel.U.g"] = weight_norm_backward(t["rel.U.v"], t["rel.U.g"], dU)
    grads["rel.V.v"], grads["rel.V.g"] = weight_norm_backward(t["rel.V.v"], t["rel.V.g"], dV)

    dlog = softmax_flat_backward(cache.scores, dA)
    p = t["att.p"]
    grads["att.p"] = np.einsum("bij,bil,bjl->l", dlog, cache.Xa, cache.Ya)
    dXa = (dlog @ cache.Ya) * p
    dYa = (np.swapaxes(dlog, -1, -2) @ cache.Xa) * p
    dZua = relu_backward(cache.Zu_att, dXa)
    dZva = relu_backward(cache.Zv_att, dYa)
    dUp = np.einsum("bdn,bnl->dl", F, dZua)
    dVp = np.einsum("bdn,bnl->dl", F, dZva)
    grads["att.U.v"], grads["att.U.g"] = weight_norm_backward(t["att.U.v"], t["att.U.g"], dUp)
    grads["att.V.v"], grads["att.V.g"] = weight_norm_backward(t["att.V.v"], t["att.V.g"], dVp)

    if not return_input_grad:
        return grads
    # d loss / d F  (D, N), then back to grid layout
    dF = (cache.U @ np.swapaxes(dZu, -1, -2) + cache.V @ np.swapaxes(dZv, -1, -2)
          + cache.Up @ np.swapaxes(dZua, -1, -2) + cache.Vp @ np.swapaxes(dZva, -1, -2))
    d_grids = unrearrange(RearrangedFeatures(dF, cfg.H, cfg.W))
    return grads, d_grids


def relu_preactivations(cache: ForwardCache) -> list:
    """Every array fed to a ReLU in the forward pass (for kink screening)."""
    return [cache.Zu_att, cache.Zv_att, cache.Zu, cache.Zv, cache.mlp.a1, cache.mlp.a2]
