"""Timing and operation counts for the three joint-relation kernels."""
from __future__ import annotations

import itertools
import time

import numpy as np

from .model import (MacCounter, RelationParams, attention_map, joint_relation_full,
                    joint_relation_naive, joint_relation_selected, select_pairs)


def _time(fn, repeats):
    best = np.inf
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return out, best


def bench_point(N: int, D: int, L: int, K: int, seed: int = 0, repeats: int = 3) -> dict:
    rng = np.random.default_rng(seed)
    F = rng.standard_normal((D, N))
    rp = RelationParams(rng.standard_normal((D, L)), rng.standard_normal((D, L)), np.eye(L))
    amap = attention_map(rng.standard_normal((N, N)))
    sel = select_pairs(amap, K)
    row = {"N": N, "D": D, "L": L, "K": sel.K}
    outs = {}
    for name, fn in (("naive", joint_relation_naive), ("full", joint_relation_full)):
        c = MacCounter()
        outs[name], row[f"{name}_s"] = _time(lambda: fn(F, amap, rp), repeats)
        fn(F, amap, rp, counter=c)
        row[f"{name}_macs"] = c.count
    c = MacCounter()
    outs["selected"], row["selected_s"] = _time(
        lambda: joint_relation_selected(F, amap, sel, rp), repeats)
    joint_relation_selected(F, amap, sel, rp, counter=c)
    row["selected_macs"] = c.count
    row["mac_ratio"] = row["naive_macs"] / row["selected_macs"]
    row["speedup_naive_over_selected"] = row["naive_s"] / row["selected_s"]
    scale = max(float(np.abs(outs["naive"]).max()), 1e-300)
    row["max_dev_full"] = float(np.abs(outs["full"] - outs["naive"]).max()) / scale
    row["max_dev_selected"] = (float(np.abs(outs["selected"] - outs["naive"]).max()) / scale
                               if sel.K == N * N else None)
    return row


def bench_grid(Ns, Ds, Ls, Ks, seed: int = 0, repeats: int = 3) -> list:
    rows = []
    for N, D, L, K in itertools.product(Ns, Ds, Ls, Ks):
        rows.append(bench_point(N, D, L, min(K, N * N), seed, repeats))
    return rows
