"""Command-line entry point: ``afrn {train,eval,gradcheck,ksweep,bench}``.

Exit codes: 0 success, 1 validation error, 2 numerical failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import warnings
from contextlib import nullcontext
from pathlib import Path

import numpy as np
import yaml

from . import checkpoint
from .bench import bench_grid
from .checkpoint import CheckpointError
from .data import Dataset, GridFormatError, load_grids, save_grids
from .gradcheck import MAX_N, TINY, run_suite
from .kernels import GradCheckError, ShapeError
from .metrics import (Template, all_pairs, curve_csv, rank_n, summary_lines, tar_at_far,
                      tpir_at_fpir, verification_accuracy, ProtocolError)
from .optim import GradientExplosionError
from .training import (ConfigError, NumericalFailure, RunConfig, config_from_dict, embed,
                       k_sweep, train)

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3


class CommandFailed(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _ints(s: str) -> list:
    try:
        return [int(x) for x in s.split(",") if x.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers: {s!r}") from e


def _floats(s: str) -> list:
    try:
        return [float(x) for x in s.split(",") if x.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers: {s!r}") from e


def load_run_config(args) -> RunConfig:
    doc = {}
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as e:
            raise CommandFailed(f"cannot read config: {e}", EXIT_IO) from e
        try:
            doc = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"config is not valid YAML: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError("config must be a mapping at top level")
    preset = args.preset
    if preset is None and not args.config:
        preset = "toy"
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.out is not None:
        doc["out"] = args.out
    if args.threads is not None:
        doc["threads"] = args.threads
    return config_from_dict(doc, preset)


def _thread_limit(n):
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.atomic_write(path, text.encode())


# --------------------------------------------------------------------------
# commands

def cmd_train(args) -> int:
    cfg = load_run_config(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "config.yaml", yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    with _thread_limit(cfg.threads):
        res = train(cfg, out_dir=out, log=lambda m: print(m, file=sys.stderr))
    save_grids(out / "validation.grids", res.validation)
    save_grids(out / "train.grids", res.train)
    report = res.report(cfg)
    report["artifacts"] = {"checkpoint": str(out / "checkpoint.afrn"),
                           "validation_grids": str(out / "validation.grids"),
                           "train_grids": str(out / "train.grids")}
    _write(out / "report.json", json.dumps(report, indent=2, sort_keys=True))
    lines = [{"metric": "epoch", **{k: v for k, v in e.items()}} for e in report["epochs"]]
    lines.append({"metric": "val_verification_accuracy", "value": res.val_accuracy,
                  "threshold": res.val_threshold, "seed": cfg.seed, "steps": res.steps})
    _write(out / "summary.jsonl", summary_lines(lines))
    print(f"trained {res.steps} steps; held-out verification accuracy "
          f"{res.val_accuracy}; checkpoint {out / 'checkpoint.afrn'}")
    return EXIT_OK


def identification_split(labels: np.ndarray):
    """Enrolled subjects give half their samples to a gallery template; the rest
    of their samples are mated probes. The last quarter of subjects (at least
    one) stays out of the gallery and provides non-mated probes."""
    subjects = sorted(set(labels.tolist()))
    if len(subjects) < 2:
        raise ProtocolError("identification needs at least two subjects")
    n_out = max(1, len(subjects) // 4)
    enrolled, outsiders = subjects[:-n_out], subjects[-n_out:]
    gallery_idx, mated_idx = {}, []
    for s in enrolled:
        idx = np.flatnonzero(labels == s)
        if len(idx) < 2:
            raise ProtocolError(f"subject {s} needs at least two samples")
        half = len(idx) // 2
        gallery_idx[s] = idx[:half]
        mated_idx.extend(idx[half:].tolist())
    nonmated_idx = np.flatnonzero(np.isin(labels, outsiders))
    return gallery_idx, np.asarray(mated_idx), nonmated_idx


def evaluate(params, data: Dataset, protocol: str, far_targets, fpir_targets, ranks):
    """Returns ``(csv_text, summary_records)``."""
    emb = embed(params, data.grids)
    records = []
    if protocol == "verification":
        pairs = all_pairs(emb, data.labels)
        pts = tar_at_far(pairs, far_targets)
        acc, thr = verification_accuracy(pairs)
        records += [{"metric": "tar_at_far", "target": p.target, "value": p.tar,
                     "far": p.far, "threshold": p.threshold} for p in pts]
        records.append({"metric": "verification_accuracy", "value": acc, "threshold": thr})
        return curve_csv(pts, "verification"), records
    gallery_idx, mated, nonmated = identification_split(data.labels)
    gallery = [Template(f"T{s}", s, [emb[i][None] for i in idx])
               for s, idx in gallery_idx.items()]
    pts = tpir_at_fpir(emb[mated], data.labels[mated].tolist(), emb[nonmated], gallery,
                       fpir_targets)
    cmc = rank_n(emb[mated], data.labels[mated].tolist(), gallery, ranks)
    records += [{"metric": "tpir_at_fpir", "target": p.target, "value": p.tar,
                 "fpir": p.far, "threshold": p.threshold} for p in pts]
    records += [{"metric": f"rank_{n}", "value": v} for n, v in cmc.items()]
    return curve_csv(pts, "identification"), records


def cmd_eval(args) -> int:
    try:
        params, _, _ = checkpoint.load(args.checkpoint)
        data = load_grids(args.data)
    except (OSError, CheckpointError, GridFormatError) as e:
        raise CommandFailed(str(e), EXIT_IO) from e
    cfg = params.config
    if data.grids.shape[1:] != (cfg.H, cfg.W, cfg.D):
        raise ShapeError(f"data grids {data.grids.shape[1:]} do not match checkpoint model "
                         f"(H, W, D) = ({cfg.H}, {cfg.W}, {cfg.D})")
    with _thread_limit(args.threads or 1):
        text, records = evaluate(params, data, args.protocol, args.far, args.fpir, args.ranks)
    out = Path(args.out or "eval")
    _write(out / f"{args.protocol}.csv", text)
    _write(out / f"{args.protocol}_summary.jsonl", summary_lines(records))
    for r in records:
        print(json.dumps(r, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.config or args.preset:
        cfg = load_run_config(args).model
    else:
        cfg = TINY
    if cfg.N > MAX_N:
        raise ConfigError(f"gradcheck requires N = H*W <= {MAX_N}, got {cfg.N}")
    with _thread_limit(1):
        reports = run_suite(cfg, args.tol, fault=args.inject_fault)
    failed = [r for r in reports if not r.passed]
    for r in reports:
        print(r.line())
    if args.out:
        _write(Path(args.out) / "gradcheck.txt", "".join(r.line() + "\n" for r in reports))
    if failed:
        print("gradient check failed: " + ", ".join(r.op_name for r in failed), file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_ksweep(args) -> int:
    cfg = load_run_config(args)
    ks = args.k if args.k else [cfg.model.effective_K]
    with _thread_limit(cfg.threads):
        rows = k_sweep(cfg, ks, log=lambda m: print(m, file=sys.stderr))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["K", "accuracy", "threshold", "reference"])
    for r in rows:
        w.writerow([r["K"], repr(r["accuracy"]), repr(r["threshold"]), int(r["reference"])])
    out = Path(cfg.out)
    _write(out / "ksweep.csv", buf.getvalue())
    best = max((r for r in rows if not r["reference"]), key=lambda r: r["accuracy"])
    ref = rows[-1]
    records = [{"metric": "ksweep", "K": r["K"], "value": r["accuracy"],
                "reference": r["reference"]} for r in rows]
    records.append({"metric": "ksweep_best", "K": best["K"], "value": best["accuracy"],
                    "reference_value": ref["accuracy"], "seed": cfg.seed,
                    "note": "accuracy = held-out verification accuracy on balanced pairs"})
    _write(out / "ksweep_summary.jsonl", summary_lines(records))
    print(buf.getvalue(), end="")
    return EXIT_OK


def cmd_bench(args) -> int:
    with _thread_limit(args.threads or 1):
        rows = bench_grid(args.n, args.d, args.l, args.k, seed=args.seed or 0,
                          repeats=args.repeats)
    keys = list(rows[0])
    buf = io.StringIO()
    w = csv.DictWriter(buf, keys, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    if args.out:
        _write(Path(args.out) / "bench.csv", buf.getvalue())
    print(buf.getvalue(), end="")
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--preset", choices=("toy", "paper"))
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="BLAS thread limit (1 = deterministic)")

    p = argparse.ArgumentParser(prog="afrn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a model")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a grid file")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="grid container file")
    e.add_argument("--protocol", choices=("verification", "identification"),
                   default="verification")
    e.add_argument("--far", type=_floats, default=[1e-3, 1e-2, 1e-1])
    e.add_argument("--fpir", type=_floats, default=[1e-2, 1e-1])
    e.add_argument("--ranks", type=_ints, default=[1, 5, 10])

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    g.add_argument("--tol", type=float, default=1e-5)
    g.add_argument("--inject-fault", default=None, help=argparse.SUPPRESS)

    k = sub.add_parser("ksweep", parents=[common], help="train one model per K")
    k.add_argument("--k", type=_ints, help="comma-separated K values")

    b = sub.add_parser("bench", parents=[common], help="time the joint-relation kernels")
    b.add_argument("--n", type=_ints, default=[9, 81])
    b.add_argument("--d", type=_ints, default=[16])
    b.add_argument("--l", type=_ints, default=[64])
    b.add_argument("--k", type=_ints, default=[27, 442])
    b.add_argument("--repeats", type=int, default=3)
    return p


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "ksweep": cmd_ksweep, "bench": cmd_bench}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            warnings.showwarning = lambda msg, *a, **k: print(f"warning: {msg}", file=sys.stderr)
            return COMMANDS[args.command](args)
    except CommandFailed as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (NumericalFailure, GradientExplosionError, GradCheckError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, CheckpointError, GridFormatError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ShapeError, ProtocolError, ValueError) as e:
        print(f"validation error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
