"""Finite-difference validation of every kernel, layer and the full model."""
from __future__ import annotations

from typing import Optional

import numpy as np

from .kernels import (KINK_EXCLUSION, GradCheckReport, check_param_gradients,
                      finite_diff_check, kernel_ops, softmax_flat_backward)
from .model import (AttentionParams, ModelConfig, PairSelection,
                    RelationParams, attention_logits, attention_logits_backward,
                    backward, batch_norm, batch_norm_backward, forward, init_params,
                    joint_relation_backward, joint_relation_full, joint_relation_selected,
                    mlp_head, mlp_head_backward, relu_preactivations, softmax_flat,
                    top_k_flat, weight_norm, weight_norm_backward, MlpHead)
from .objectives import (identity_loss, joint_loss, mine_triplets, pairwise_loss,
                         triplet_ratio_loss)

TINY = ModelConfig(H=2, W=2, D=3, L=4, L_att=4, C=3, E=5, n_identities=3, K=6)
MAX_N = 8


def _flip(grads: dict, on: bool) -> dict:
    return {k: -v for k, v in grads.items()} if on else grads


def _kink_free(arrays, margin=10 * KINK_EXCLUSION) -> bool:
    return all(np.abs(a).min(initial=np.inf) > margin for a in arrays)


def _rng_instances(seed):
    """Yield fresh generators; callers take the first kink-free draw."""
    ss = np.random.SeedSequence(seed)
    for child in ss.spawn(200):
        yield np.random.default_rng(child)
    raise RuntimeError("no kink-free random instance found")


def check_kernels(tol, fault=None) -> list:
    reports = []
    rng = np.random.default_rng(7)
    for op in kernel_ops():
        x = rng.uniform(-2, 2, size=(4, 4))
        if fault == op.name:
            back = op.backward
            op.backward = lambda x, y, g, back=back: -back(x, y, g)
        reports.append(finite_diff_check(op, x, tol))
    return reports


def check_weight_norm(tol, fault=None):
    rng = np.random.default_rng(11)
    v = rng.uniform(-2, 2, size=(4, 3))
    g = rng.uniform(0.5, 2, size=3)
    R = rng.standard_normal((4, 3))
    obj = lambda: float((R * weight_norm(v, g)).sum())
    dv, dg = weight_norm_backward(v, g, R)
    return check_param_gradients("weight_norm", obj, {"direction": v, "gains": g},
                                 _flip({"direction": dv, "gains": dg}, fault == "weight_norm"),
                                 tol)


def check_attention_logits(tol, fault=None, D=4, N=5, Lp=3):
    for rng in _rng_instances(13):
        F = rng.uniform(-2, 2, size=(D, N))
        Up, Vp = rng.standard_normal((D, Lp)), rng.standard_normal((D, Lp))
        if _kink_free([F.T @ Up, F.T @ Vp]):
            break
    p = rng.standard_normal(Lp)
    R = rng.standard_normal((N, N))
    obj = lambda: float((R * attention_logits(F, AttentionParams(Up, Vp, p))).sum())
    dF, dU, dV, dp = attention_logits_backward(F, AttentionParams(Up, Vp, p), R)
    return check_param_gradients(
        "attention_logits", obj, {"F": F, "Uprime": Up, "Vprime": Vp, "p": p},
        _flip({"F": dF, "Uprime": dU, "Vprime": dV, "p": dp}, fault == "attention_logits"), tol)


def check_attention_map(tol, fault=None):
    """Logits -> softmax over the full map."""
    rng = np.random.default_rng(17)
    Z = rng.uniform(-2, 2, size=(5, 5))
    R = rng.standard_normal((5, 5))
    obj = lambda: float((R * softmax_flat(Z)).sum())
    g = softmax_flat_backward(softmax_flat(Z), R)
    return check_param_gradients("attention_map", obj, {"logits": Z},
                                 _flip({"logits": g}, fault == "attention_map"), tol)


def _relation_instance(seed, D=4, N=5, L=3):
    for rng in _rng_instances(seed):
        F = rng.uniform(-2, 2, size=(D, N))
        U, V = rng.standard_normal((D, L)), rng.standard_normal((D, L))
        if _kink_free([F.T @ U, F.T @ V]):
            break
    A = softmax_flat(rng.standard_normal((N, N)))
    R = rng.standard_normal(L)
    return F, A, U, V, R, rng


def check_relation_full(tol, fault=None):
    F, A, U, V, R, _ = _relation_instance(19)
    P = np.eye(U.shape[1])
    obj = lambda: float(R @ joint_relation_full(F, A, RelationParams(U, V, P)))
    dF, dA, dU, dV = joint_relation_backward(F, A, RelationParams(U, V, P), R)
    return check_param_gradients(
        "joint_relation_full", obj, {"F": F, "A": A, "U": U, "V": V},
        _flip({"F": dF, "A": dA, "U": dU, "V": dV}, fault == "joint_relation_full"), tol)


def check_relation_selected(tol, fault=None, renormalize=False):
    F, A, U, V, R, rng = _relation_instance(23)
    N = A.shape[0]
    idx = top_k_flat(A, 9)
    sel = PairSelection(np.stack([idx // N, idx % N], axis=1), A.reshape(-1)[idx], N)
    P = np.eye(U.shape[1])
    rp = lambda: RelationParams(U, V, P)
    obj = lambda: float(R @ joint_relation_selected(F, A, sel, rp(), renormalize=renormalize))
    dF, dA, dU, dV = joint_relation_backward(F, A, rp(), R, sel, renormalize)
    name = "joint_relation_selected" + ("[renormalized]" if renormalize else "")
    return check_param_gradients(
        name, obj, {"F": F, "A": A, "U": U, "V": V},
        _flip({"F": dF, "A": dA, "U": dU, "V": dV}, fault == name), tol)


def check_pool(tol, fault=None):
    rng = np.random.default_rng(29)
    r = rng.standard_normal((3, 4))
    P = rng.standard_normal((4, 2))
    R = rng.standard_normal((3, 2))
    obj = lambda: float((R * (r @ P)).sum())
    return check_param_gradients("pool_relation", obj, {"r": r, "P": P},
                                 _flip({"r": R @ P.T, "P": r.T @ R}, fault == "pool_relation"),
                                 tol)


def check_batch_norm(tol, fault=None, mode="train"):
    rng = np.random.default_rng(31)
    x = rng.standard_normal((6, 4))
    gamma, beta = rng.uniform(0.5, 2, 4), rng.standard_normal(4)
    mean, var = rng.standard_normal(4), rng.uniform(0.5, 2, 4)
    R = rng.standard_normal((6, 4))
    obj = lambda: float((R * batch_norm(x, gamma, beta, mean, var, mode)[0]).sum())
    _, cache, _, _ = batch_norm(x, gamma, beta, mean, var, mode)
    dx, dg, db = batch_norm_backward(cache, R)
    name = f"batch_norm[{mode}]"
    return check_param_gradients(name, obj, {"x": x, "gamma": gamma, "beta": beta},
                                 _flip({"x": dx, "gamma": dg, "beta": db},
                                       fault in (name, "batch_norm")), tol)


def check_mlp_head(tol, fault=None, B=6, C=4, Hd=5, E=3):
    for rng in _rng_instances(37):
        t = {"W1": rng.standard_normal((C, Hd)), "b1": rng.standard_normal(Hd),
             "gamma1": rng.uniform(0.5, 2, Hd), "beta1": rng.standard_normal(Hd),
             "W2": rng.standard_normal((Hd, E)), "b2": rng.standard_normal(E),
             "gamma2": rng.uniform(0.5, 2, E), "beta2": rng.standard_normal(E)}
        x = rng.standard_normal((B, C))
        head = lambda: MlpHead(t["W1"], t["b1"], t["gamma1"], t["beta1"], np.zeros(Hd),
                               np.ones(Hd), t["W2"], t["b2"], t["gamma2"], t["beta2"],
                               np.zeros(E), np.ones(E))
        _, cache = mlp_head(x, head())
        if _kink_free([cache.a1, cache.a2]):
            break
    R = rng.standard_normal((B, E))
    obj = lambda: float((R * mlp_head(x, head())[0]).sum())
    dx, g = mlp_head_backward(cache, head(), R)
    rename = {"W1": "mlp.W1", "b1": "mlp.b1", "gamma1": "mlp.bn1.gamma", "beta1": "mlp.bn1.beta",
              "W2": "mlp.W2", "b2": "mlp.b2", "gamma2": "mlp.bn2.gamma", "beta2": "mlp.bn2.beta"}
    analytic = {k: g[v] for k, v in rename.items()}
    analytic["x"] = dx
    return check_param_gradients("mlp_head", obj, {**t, "x": x},
                                 _flip(analytic, fault == "mlp_head"), tol)


def _loss_instance(seed):
    for rng in _rng_instances(seed):
        emb = rng.standard_normal((8, 3))
        labels = np.array([0, 0, 1, 1, 2, 2, 0, 1])
        trip = mine_triplets(labels, rng)
        if np.abs(_ratio_raw(trip, emb)).min() > 1e-3:
            return emb, labels, trip, rng
    raise RuntimeError("no hinge-free instance")


def _ratio_raw(trip, emb, margin=1.0):
    a, p, n = trip.T
    d_p = ((emb[a] - emb[p]) ** 2).sum(1)
    d_n = ((emb[a] - emb[n]) ** 2).sum(1)
    return 1.0 - d_n / (d_p + margin)


def check_losses(tol, fault=None) -> list:
    emb, labels, trip, rng = _loss_instance(41)
    W, b = rng.standard_normal((3, 3)), rng.standard_normal(3)
    out = []
    _, g = triplet_ratio_loss(trip, emb, 1.0, grad=True)
    out.append(check_param_gradients(
        "triplet_ratio_loss", lambda: triplet_ratio_loss(trip, emb, 1.0), {"embeddings": emb},
        _flip({"embeddings": g}, fault == "triplet_ratio_loss"), tol))
    _, g = pairwise_loss(trip, emb, grad=True)
    out.append(check_param_gradients(
        "pairwise_loss", lambda: pairwise_loss(trip, emb), {"embeddings": emb},
        _flip({"embeddings": g}, fault == "pairwise_loss"), tol))
    _, ge, gW, gb = identity_loss(emb, labels, (W, b), grad=True)
    out.append(check_param_gradients(
        "identity_loss", lambda: identity_loss(emb, labels, (W, b)),
        {"embeddings": emb, "W": W, "b": b},
        _flip({"embeddings": ge, "W": gW, "b": gb}, fault == "identity_loss"), tol))
    _, g = joint_loss(emb, labels, (W, b), triplets=trip)
    out.append(check_param_gradients(
        "joint_loss", lambda: joint_loss(emb, labels, (W, b), triplets=trip)[0].total,
        {"embeddings": emb, "W": W, "b": b},
        _flip({"embeddings": g["embeddings"], "W": g["cls.W"], "b": g["cls.b"]},
              fault == "joint_loss"), tol))
    return out


def model_instance(cfg: ModelConfig, seed: int, B: int = 4):
    """Random parameters and grids with every ReLU input away from its kink."""
    for rng in _rng_instances(seed):
        params = init_params(cfg, rng)
        # non-trivial gains and shifts so their gradients are exercised
        for k, v in params.tensors.items():
            if k.endswith((".g", "gamma")):
                v[...] = rng.uniform(0.5, 1.5, v.shape)
            elif k.endswith(("beta", ".b1", ".b2")):
                v[...] = rng.normal(0, 0.3, v.shape)
        grids = rng.uniform(-2, 2, size=(B, cfg.H, cfg.W, cfg.D))
        _, cache = forward(params, grids, "train")
        if _kink_free(relu_preactivations(cache)):
            return params, grids, rng
    raise RuntimeError("no kink-free model instance")


def check_model(cfg: ModelConfig, tol, fault=None, selection: bool = False,
                seed: int = 43, B: int = 4) -> GradCheckReport:
    cfg = ModelConfig(**{**cfg.to_dict(), "selection": selection})
    params, grids, rng = model_instance(cfg, seed, B)
    frozen = None
    if selection:
        frozen = forward(params, grids, "train")[1].selection.copy()
    R = rng.standard_normal((B, cfg.E))
    emb, cache = forward(params, grids, "train", frozen_selection=frozen)
    grads, dgrid = backward(cache, R, params, return_input_grad=True)
    live = {k: v for k, v in params.tensors.items() if not k.startswith("cls.")}

    def obj():
        return float((R * forward(params, grids, "train", frozen_selection=frozen)[0]).sum())

    name = "model[selection=frozen]" if selection else "model[selection=off]"
    analytic = {k: grads[k] for k in live}
    analytic["grids"] = dgrid
    return check_param_gradients(name, obj, {**live, "grids": grids},
                                 _flip(analytic, fault == name), tol)


def check_training_objective(cfg: ModelConfig, tol, fault=None, seed: int = 47) -> GradCheckReport:
    """Embeddings -> joint loss with classifier, Φ frozen and triplets fixed."""
    B = 6
    for attempt in range(50):
        params, grids, rng = model_instance(cfg, seed + attempt, B)
        labels = np.arange(B) % min(cfg.n_identities, 3)
        trip = mine_triplets(labels, rng)
        emb, cache = forward(params, grids, "train")
        if len(trip) and np.abs(_ratio_raw(trip, emb)).min() > 1e-3:
            break
    frozen = cache.selection.copy() if cache.selection is not None else None

    def obj():
        e = forward(params, grids, "train", frozen_selection=frozen)[0]
        return joint_loss(e, labels, params.classifier(), triplets=trip)[0].total

    _, lg = joint_loss(emb, labels, params.classifier(), triplets=trip)
    grads = backward(cache, lg["embeddings"], params)
    grads["cls.W"], grads["cls.b"] = lg["cls.W"], lg["cls.b"]
    return check_param_gradients("training_objective", obj, params.tensors,
                                 _flip(grads, fault == "training_objective"), tol)


def run_suite(cfg: Optional[ModelConfig] = None, tol: float = 1e-5,
              fault: Optional[str] = None) -> list:
    cfg = TINY if cfg is None else cfg
    if cfg.N > MAX_N:
        raise ValueError(f"gradient check needs N <= {MAX_N}, got N={cfg.N}")
    reports = check_kernels(tol, fault)
    reports += [check_weight_norm(tol, fault), check_attention_logits(tol, fault),
                check_attention_map(tol, fault), check_relation_full(tol, fault),
                check_relation_selected(tol, fault),
                check_relation_selected(tol, fault, renormalize=True),
                check_pool(tol, fault), check_batch_norm(tol, fault),
                check_batch_norm(tol, fault, "infer"), check_mlp_head(tol, fault)]
    reports += check_losses(tol, fault)
    reports += [check_model(cfg, tol, fault, selection=False),
                check_model(cfg, tol, fault, selection=True),
                check_training_objective(cfg, tol, fault)]
    return reports
