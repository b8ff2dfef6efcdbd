"""Acceptance suite: one check per criterion, each with its stated tolerance.

Run under pytest (a PASS/FAIL line per criterion is printed in the terminal
summary) or directly with ``python tests/test_acceptance.py``.
"""
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from afrn import checkpoint
from afrn.bench import bench_grid
from afrn.data import SyntheticDatasetSpec, decode_grids, encode_grids, generate
from afrn.gradcheck import run_suite
from afrn.metrics import (ScoredPairSet, Template, aggregate_template, rank_n, tar_at_far,
                          tpir_at_fpir, verification_accuracy)
from afrn.model import (BilinearAttentionMap, ModelConfig, RelationParams, attention_map,
                        backward, forward, init_params, joint_relation_backward,
                        joint_relation_full, joint_relation_naive, joint_relation_selected,
                        relation_backward, select_pairs)
from afrn.optim import clip_global_norm, global_norm, lr_schedule
from afrn.training import config_from_dict, k_sweep, toy_config, train

from oracles import (accuracy_bruteforce, rank_n_bruteforce, tar_far_bruteforce,
                     template_mean_loops, tpir_bruteforce)

RESULTS = {}


def record(num, title, ok, detail):
    RESULTS[num] = f"{'PASS' if ok else 'FAIL'} criterion {num:2d} {title}: {detail}"
    return ok


def rel_dev(a, b):
    scale = max(float(np.abs(b).max()), 1e-300)
    return float(np.abs(np.asarray(a) - b).max()) / scale


def relation_instances(seed, count=200):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        N, D, L = int(rng.integers(2, 17)), int(rng.integers(1, 9)), int(rng.integers(1, 9))
        F = rng.standard_normal((D, N))
        A = attention_map(rng.standard_normal((N, N)) * 2)
        rp = RelationParams(rng.standard_normal((D, L)), rng.standard_normal((D, L)), np.eye(L))
        yield F, A, rp


def nonzero(x):
    return np.abs(x).max() > 0


# ---------------------------------------------------------------------------

def criterion_1():
    t0 = time.perf_counter()
    worst = 0.0
    for F, A, rp in relation_instances(1):
        naive = joint_relation_naive(F, A, rp)
        if nonzero(naive):
            worst = max(worst, rel_dev(joint_relation_full(F, A, rp), naive))
    dt = time.perf_counter() - t0
    return record(1, "matrix relation == double sum", worst <= 1e-10 and dt < 5,
                  f"max_rel_dev={worst:.2e} (<=1e-10) runtime={dt:.2f}s (<5s)")


def criterion_2():
    worst = 0.0
    for F, A, rp in relation_instances(2):
        naive = joint_relation_naive(F, A, rp)
        N = A.scores.shape[0]
        if nonzero(naive):
            worst = max(worst, rel_dev(joint_relation_selected(F, A, select_pairs(A, N * N), rp),
                                       naive))
    return record(2, "exhaustive selection == double sum", worst <= 1e-12,
                  f"max_rel_dev={worst:.2e} (<=1e-12)")


def criterion_3():
    rng = np.random.default_rng(3)
    worst_sum, negatives, argmax_ok = 0.0, 0, True
    for _ in range(100):
        N = int(rng.integers(1, 17))
        z = rng.standard_normal((N, N)) * rng.uniform(0.1, 20)
        s = attention_map(z).scores
        negatives += int((s < 0).sum())
        worst_sum = max(worst_sum, abs(s.sum() - 1))
        argmax_ok &= bool(np.argmax(s) == np.argmax(z))
    ok = negatives == 0 and worst_sum <= 1e-9 and argmax_ok
    return record(3, "attention normalization", ok,
                  f"negatives={negatives} max|sum-1|={worst_sum:.1e} argmax_match={argmax_ok}")


def criterion_4():
    t0 = time.perf_counter()
    reports = run_suite(tol=1e-5)
    single = ModelConfig(H=1, W=1, D=3, L=4, L_att=4, C=3, E=5, n_identities=3, K=1)
    reports += [r for r in run_suite(single, 1e-5) if r.op_name.startswith("model")]
    dt = time.perf_counter() - t0
    failed = [r.op_name for r in reports if not r.passed]
    worst = max(r.max_rel_error for r in reports)
    return record(4, "gradient suite", not failed and dt < 60,
                  f"{len(reports)} checks, worst={worst:.2e} (<=1e-5), failed={failed}, "
                  f"runtime={dt:.1f}s (<60s)")


def criterion_5():
    # perturbing dropped score entries leaves the selected relation bit-identical
    rng = np.random.default_rng(5)
    untouched, dA_zero = True, True
    for _ in range(20):
        N, D, L = 5, 3, 4
        F = rng.standard_normal((D, N))
        A = attention_map(rng.standard_normal((N, N)))
        rp = RelationParams(rng.standard_normal((D, L)), rng.standard_normal((D, L)), np.eye(L))
        sel = select_pairs(A, 8)
        base = joint_relation_selected(F, A, sel, rp)
        dA = joint_relation_backward(F, A, rp, rng.standard_normal(L), sel)[1].ravel()
        kept = set(sel.flat.tolist())
        for f in set(range(N * N)) - kept:
            bumped = A.scores.copy()
            bumped.flat[f] += rng.uniform(0.1, 1.0)
            out = joint_relation_selected(F, BilinearAttentionMap(A.logits, bumped), sel, rp)
            untouched &= bool(np.array_equal(out, base))
            dA_zero &= dA[f] == 0.0

    # full model: score gradient is zero off the kept set
    cfg = ModelConfig(H=2, W=2, D=3, L=4, L_att=4, C=3, E=5, n_identities=3, K=6)
    params = init_params(cfg, np.random.default_rng(50))
    grids = np.random.default_rng(51).uniform(-2, 2, (4, 2, 2, 3))
    _, cache = forward(params, grids)
    dA_m, _, _ = relation_backward(cache, np.random.default_rng(52).standard_normal((4, cfg.L)),
                                   False)
    dA_m = dA_m.reshape(4, -1)
    model_zero = all(np.all(np.delete(dA_m[b], cache.selection[b]) == 0.0) for b in range(4))

    # exhaustive selection reproduces selection-disabled gradients
    full = ModelConfig(**{**cfg.to_dict(), "K": 16})
    params = init_params(full, np.random.default_rng(53))
    R = np.random.default_rng(54).standard_normal((4, full.E))
    on = backward(forward(params, grids)[1], R, params)
    p_off = params.with_config(selection=False)
    off = backward(forward(p_off, grids)[1], R, p_off)
    scale = max(np.abs(g).max() for g in off.values())
    dev = max(np.abs(on[k] - off[k]).max() for k in off) / scale
    ok = untouched and dA_zero and model_zero and dev <= 1e-12
    return record(5, "gradient routing", ok,
                  f"dropped-pair perturbation exact={untouched}, dA=0 on dropped "
                  f"(layer={dA_zero}, model={model_zero}), K=N^2 grad dev={dev:.1e} (<=1e-12)")


def criterion_6():
    sched = (lr_schedule(1) == 1e-3 and lr_schedule(4) == lr_schedule(10) == 4e-3
             and lr_schedule(11) == lr_schedule(12) == 1e-3 and lr_schedule(13) == 2.5e-4)
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        g = {str(i): rng.standard_normal(rng.integers(1, 30)) * rng.uniform(1e-3, 1e2)
             for i in range(int(rng.integers(1, 6)))}
        worst = max(worst, global_norm(clip_global_norm(g, 0.25)[0]))
    ok = sched and worst <= 0.25 + 1e-12
    return record(6, "schedule and clipping", ok,
                  f"schedule exact={sched}, max post-clip norm={worst:.15f} (<=0.25+1e-12)")


def criterion_7():
    t0 = time.perf_counter()
    accs, steps = [], []
    for seed in range(3):
        res = train(toy_config(seed=seed, threads=1))
        accs.append(res.val_accuracy)
        steps.append(res.steps)
    dt = time.perf_counter() - t0
    mean = float(np.mean(accs))
    ok = mean >= 0.90 and max(steps) <= 300 and dt < 120
    return record(7, "toy training smoke test", ok,
                  f"val acc {accs} mean={mean:.3f} (>=0.90), steps={steps} (<=300), "
                  f"runtime={dt:.1f}s (<120s)")


def criterion_8():
    best, ref = [], []
    for seed in range(5):
        rows = k_sweep(toy_config(seed=seed), [9, 18, 27, 45, 63])
        best.append(max(r["accuracy"] for r in rows if not r["reference"]))
        ref.append(rows[-1]["accuracy"])
    ok = np.mean(best) >= np.mean(ref)
    return record(8, "K-sweep trend", ok,
                  f"mean best-K acc={np.mean(best):.4f} >= mean K=N^2 acc={np.mean(ref):.4f} "
                  f"(per seed best={best}, ref={ref})")


def criterion_9():
    rng = np.random.default_rng(9)
    targets = [0.0, 1e-3, 0.01, 0.1, 0.3, 1.0]
    ok_tar = ok_acc = True
    for trial in range(10):
        d = (rng.integers(0, 30, 200).astype(float) if trial % 2 else rng.exponential(1.0, 200))
        g = rng.random(200) < 0.5
        g[:2] = [True, False]
        pairs = ScoredPairSet(d + np.where(g, 0, rng.uniform(0, 0.8, 200)), g)
        got = [(p.threshold, p.tar, p.far) for p in tar_at_far(pairs, targets)]
        ok_tar &= got == tar_far_bruteforce(pairs.distances.tolist(), g.tolist(), targets)
        ok_acc &= verification_accuracy(pairs) == accuracy_bruteforce(
            pairs.distances.tolist(), g.tolist())

    gallery, feats = [], []
    for s in range(10):
        media = [rng.standard_normal((int(rng.integers(1, 4)), 6)) for _ in range(2)]
        gallery.append(Template(s, s, media))
        feats.append(template_mean_loops(media))
    subj = rng.integers(0, 10, 200).tolist()
    probes = np.array([feats[s] + rng.normal(0, 0.9, 6) for s in subj])
    ok_rank = rank_n(probes, subj, gallery, [1, 3, 5]) == rank_n_bruteforce(
        probes, subj, feats, list(range(10)), [1, 3, 5])
    mated, msub = probes[:120], subj[:120]
    non = rng.standard_normal((80, 6)) * 1.4
    got = [(p.tar, p.far) for p in tpir_at_fpir(mated, msub, non, gallery, targets)]
    ref = [(t, f) for _, t, f in tpir_bruteforce(mated, msub, non, feats, list(range(10)),
                                                  targets)]
    ok_tpir = got == ref

    media = [rng.standard_normal((int(rng.integers(1, 6)), 8)) for _ in range(5)]
    tmpl_dev = rel_dev(aggregate_template(Template("t", 0, media)), template_mean_loops(media))
    f1, f2, f3 = np.zeros(2), np.full(2, 2.0), np.array([4.0, 8.0])
    asym = aggregate_template(Template("a", 0, [[f1, f2], [f3]]))
    differs = not np.allclose(asym, (f1 + f2 + f3) / 3)
    ok = ok_tar and ok_acc and ok_rank and ok_tpir and tmpl_dev <= 1e-12 and differs
    return record(9, "metric oracles", ok,
                  f"tar_at_far={ok_tar} accuracy={ok_acc} rank_n={ok_rank} tpir={ok_tpir} "
                  f"template dev={tmpl_dev:.1e} (<=1e-12) differs_from_flat={differs}")


def criterion_10():
    rows = bench_grid([4, 9, 16], [8], [4, 16], [1, 27, 81, 256], seed=10, repeats=1)
    rows += bench_grid([81], [16], [64], [442], seed=10, repeats=3)
    counters = all(r["naive_macs"] == r["full_macs"] == r["N"] ** 2 * r["L"]
                   and r["selected_macs"] == r["K"] * r["L"] for r in rows)
    ratio = all(r["mac_ratio"] == r["N"] ** 2 / r["K"] for r in rows)
    big = rows[-1]
    return record(10, "kernel cost counters", counters and ratio,
                  f"{len(rows)} grid points exact={counters}; N=81 L=64 K=442: "
                  f"mac_ratio={big['mac_ratio']:.2f}, "
                  f"speedup naive/selected={big['speedup_naive_over_selected']:.1f}x "
                  f"(informational)")


def criterion_11(tmp=None):
    import tempfile
    with tempfile.TemporaryDirectory(dir=tmp) as d:
        d = Path(d)
        cfg = config_from_dict({"optim": {"max_steps": 40}, "seed": 11}, "toy")
        train(cfg, out_dir=d / "a")
        train(cfg, out_dir=d / "b")
        a = (d / "a/checkpoint.afrn").read_bytes()
        same = a == (d / "b/checkpoint.afrn").read_bytes()
        p, o, prog = checkpoint.decode(a)
        ckpt_rt = checkpoint.encode(p, o, prog) == a
    grids = encode_grids(generate(SyntheticDatasetSpec(4, 5, 3, 3, 16, seed=11)))
    grid_rt = encode_grids(decode_grids(grids)) == grids
    return record(11, "reproducibility and persistence", same and ckpt_rt and grid_rt,
                  f"same-seed checkpoints identical={same}, checkpoint round-trip={ckpt_rt}, "
                  f"grid round-trip={grid_rt}")


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6,
            criterion_7, criterion_8, criterion_9, criterion_10, criterion_11]


@pytest.mark.parametrize("check", CRITERIA, ids=[f"criterion_{i}" for i in range(1, 12)])
def test_criterion(check):
    ok = check()
    num = CRITERIA.index(check) + 1
    assert ok, RESULTS[num]


def main():
    failures = 0
    for check in CRITERIA:
        failures += not check()
        print(RESULTS[CRITERIA.index(check) + 1], flush=True)
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
