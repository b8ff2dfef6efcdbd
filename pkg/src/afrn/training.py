"""Training harness: run configuration, the epoch loop, held-out evaluation, K sweep."""
from __future__ import annotations

import time
import warnings
from dataclasses import MISSING, asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import checkpoint
from .data import Dataset, SyntheticDatasetSpec, generate, load_grids, split
from .metrics import balanced_pairs, verification_accuracy
from .model import (PAPER_PRESET, TOY_PRESET, ModelConfig, ModelParams, backward,
                    commit_running_stats, forward, init_params)
from .objectives import joint_loss, mine_triplets
from .optim import (AdamaxState, adamax_step, clip_global_norm, lr_schedule,
                    schedule_epoch)


class ConfigError(ValueError):
    pass


class NumericalFailure(FloatingPointError):
    pass


@dataclass
class DataConfig:
    samples_per_identity: int = 20
    prototype_scale: float = 1.0
    noise: float = 0.1
    holdout: float = 0.2
    seed: Optional[int] = None
    grid_file: Optional[str] = None


@dataclass
class OptimConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 0.25
    epochs: int = 52
    epoch_scale: float = 0.25
    max_steps: Optional[int] = 300


@dataclass
class LossConfig:
    margin: float = 1.0
    w_t: float = 1.0
    w_p: float = 0.5
    w_id: float = 1.0

    @property
    def weights(self) -> tuple:
        return (self.w_t, self.w_p, self.w_id)


@dataclass
class RunConfig:
    model: ModelConfig
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    batch_size: int = 32
    seed: int = 0
    threads: int = 1
    out: str = "runs/afrn"

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch normalization)")
        if self.optim.clip <= 0:
            raise ConfigError("optim.clip must be positive")
        if self.optim.epochs < 1:
            raise ConfigError("optim.epochs must be >= 1")

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "data": asdict(self.data),
                "optim": asdict(self.optim), "loss": asdict(self.loss),
                "batch_size": self.batch_size, "seed": self.seed,
                "threads": self.threads, "out": self.out}

    def with_model(self, **changes) -> "RunConfig":
        return replace(self, model=replace(self.model, **changes))


def toy_config(**top) -> RunConfig:
    return RunConfig(model=TOY_PRESET, **top)


def paper_config(**top) -> RunConfig:
    return RunConfig(model=PAPER_PRESET,
                     data=DataConfig(samples_per_identity=40, holdout=0.1),
                     optim=OptimConfig(epochs=13, epoch_scale=1.0, max_steps=None),
                     batch_size=120, **top)


PRESETS = {"toy": toy_config, "paper": paper_config}

_SECTIONS = {"data": DataConfig, "optim": OptimConfig, "loss": LossConfig}
_TOP = ("batch_size", "seed", "threads", "out")


def config_from_dict(doc: dict, preset: Optional[str] = None) -> RunConfig:
    """Build a RunConfig from a nested mapping; unknown keys are errors.

    Without a preset every model field except the optional ones is required.
    """
    doc = dict(doc or {})
    base = PRESETS[preset]() if preset else None
    allowed = set(_SECTIONS) | {"model"} | set(_TOP)
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")

    model_doc = doc.get("model") or {}
    if not isinstance(model_doc, dict):
        raise ConfigError("model: expected a mapping")
    mnames = [f.name for f in fields(ModelConfig)]
    bad = sorted(set(model_doc) - set(mnames))
    if bad:
        raise ConfigError(f"unknown keys in model: {bad}")
    if base is not None:
        merged = {**base.model.to_dict(), **model_doc}
    else:
        required = [f.name for f in fields(ModelConfig) if f.default is MISSING]
        missing = [n for n in required if n not in model_doc]
        if missing:
            raise ConfigError(f"missing required model field(s): {', '.join(missing)}")
        merged = model_doc
    try:
        model = ModelConfig(**merged)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"model: {e}") from e

    sections = {}
    for name, cls in _SECTIONS.items():
        sec = doc.get(name) or {}
        if not isinstance(sec, dict):
            raise ConfigError(f"{name}: expected a mapping")
        names = {f.name for f in fields(cls)}
        bad = sorted(set(sec) - names)
        if bad:
            raise ConfigError(f"unknown keys in {name}: {bad}")
        start = asdict(getattr(base, name)) if base is not None else {}
        sections[name] = cls(**{**start, **sec})
    top = {k: doc[k] for k in _TOP if k in doc}
    if base is not None:
        top = {**{k: getattr(base, k) for k in _TOP}, **top}
    try:
        return RunConfig(model=model, **sections, **top)
    except TypeError as e:
        raise ConfigError(str(e)) from e


@dataclass
class EpochRecord:
    epoch: int
    schedule_epoch: int
    lr: float
    steps: int
    L_t: float
    L_p: float
    L_id: float
    total: float
    grad_norm: float


@dataclass
class TrainResult:
    params: ModelParams
    optimizer: AdamaxState
    train: Dataset
    validation: Dataset
    epochs: list
    steps: int
    seconds: float
    val_accuracy: Optional[float] = None
    val_threshold: Optional[float] = None

    def report(self, cfg: RunConfig) -> dict:
        return {"config": cfg.to_dict(), "seed": cfg.seed, "steps": self.steps,
                "epochs": [asdict(e) for e in self.epochs],
                "val_accuracy": self.val_accuracy, "val_threshold": self.val_threshold,
                "wall_clock_s": self.seconds}


def _streams(seed: int) -> dict:
    names = ("init", "shuffle", "mining", "eval")
    return dict(zip(names, (np.random.default_rng(s)
                            for s in np.random.SeedSequence(seed).spawn(len(names)))))


def load_dataset(cfg: RunConfig) -> Dataset:
    m = cfg.model
    if cfg.data.grid_file:
        data = load_grids(cfg.data.grid_file)
        if data.grids.shape[1:] != (m.H, m.W, m.D):
            raise ConfigError(f"grid file shape {data.grids.shape[1:]} does not match "
                              f"model ({m.H}, {m.W}, {m.D})")
        if len(data) and data.labels.max() >= m.n_identities:
            raise ConfigError("grid file labels exceed model.n_identities")
        return data
    spec = SyntheticDatasetSpec(m.n_identities, cfg.data.samples_per_identity, m.H, m.W, m.D,
                                cfg.data.prototype_scale, cfg.data.noise,
                                cfg.seed if cfg.data.seed is None else cfg.data.seed)
    return generate(spec)


def embed(params: ModelParams, grids, batch_size: int = 256) -> np.ndarray:
    """Inference-mode embeddings (running batch-norm statistics)."""
    grids = np.asarray(grids)
    out = [forward(params, grids[s:s + batch_size], mode="infer")[0]
           for s in range(0, len(grids), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, params.config.E))


def evaluate_heldout(params: ModelParams, data: Dataset, seed) -> tuple:
    emb = embed(params, data.grids)
    return verification_accuracy(balanced_pairs(emb, data.labels, seed))


def train_step(params: ModelParams, opt: AdamaxState, grids, labels, lr: float,
               cfg: RunConfig, rng: np.random.Generator):
    emb, cache = forward(params, grids, mode="train")
    triplets = mine_triplets(labels, rng)
    losses, lgrads = joint_loss(emb, labels, params.classifier(), cfg.loss.margin,
                                cfg.loss.weights, triplets=triplets)
    if not np.isfinite(losses.total):
        raise NumericalFailure(f"non-finite loss {losses.total}")
    grads = backward(cache, lgrads["embeddings"], params)
    grads["cls.W"] = lgrads["cls.W"]
    grads["cls.b"] = lgrads["cls.b"]
    clipped, norm = clip_global_norm(grads, cfg.optim.clip)
    commit_running_stats(params, cache)
    adamax_step(params.tensors, clipped, opt, lr)
    params.bump()
    return losses, norm


def train(cfg: RunConfig, out_dir=None, data: Optional[Dataset] = None,
          log: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Train from scratch. With ``out_dir`` a checkpoint is written after every epoch."""
    t0 = time.perf_counter()
    rngs = _streams(cfg.seed)
    data = load_dataset(cfg) if data is None else data
    train_set, val_set = split(data, cfg.data.holdout, cfg.seed)
    params = init_params(cfg.model, rngs["init"])
    opt = AdamaxState(cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps)
    ckpt_path = None if out_dir is None else Path(out_dir) / "checkpoint.afrn"

    records = []
    steps = 0
    n = len(train_set)
    done = False
    for epoch in range(1, cfg.optim.epochs + 1):
        sched = schedule_epoch(epoch, cfg.optim.epoch_scale)
        lr = lr_schedule(sched)
        order = rngs["shuffle"].permutation(n)
        sums = np.zeros(4)
        norms = []
        count = 0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            if len(idx) < 2:
                continue
            losses, norm = train_step(params, opt, train_set.grids[idx], train_set.labels[idx],
                                      lr, cfg, rngs["mining"])
            sums += [losses.triplet, losses.pairwise, losses.identity, losses.total]
            norms.append(norm)
            count += 1
            steps += 1
            if cfg.optim.max_steps is not None and steps >= cfg.optim.max_steps:
                done = True
                break
        if count:
            mean = sums / count
            rec = EpochRecord(epoch, sched, lr, count, *mean.tolist(), float(np.mean(norms)))
            records.append(rec)
            if log:
                log(f"epoch {epoch:3d} lr={lr:.2e} total={rec.total:.4f} "
                    f"L_t={rec.L_t:.4f} L_p={rec.L_p:.4f} L_id={rec.L_id:.4f}")
        if ckpt_path is not None:
            checkpoint.save(ckpt_path, params, opt, {"epoch": epoch, "steps": steps})
        if done:
            break
    result = TrainResult(params, opt, train_set, val_set, records, steps,
                         time.perf_counter() - t0)
    if len(val_set) >= 2 and len(np.unique(val_set.labels)) >= 2:
        result.val_accuracy, result.val_threshold = evaluate_heldout(
            params, val_set, rngs["eval"])
    result.seconds = time.perf_counter() - t0
    return result


def normalize_k_list(ks: Sequence[int], N: int) -> list:
    out = []
    for k in ks:
        k = int(k)
        if k < 1:
            raise ConfigError(f"K values must be >= 1, got {k}")
        if k > N * N:
            warnings.warn(f"K={k} exceeds N^2={N * N}; clamped", stacklevel=2)
            k = N * N
        if k in out:
            warnings.warn(f"duplicate K={k} dropped", stacklevel=2)
            continue
        out.append(k)
    return out


def k_sweep(cfg: RunConfig, ks: Sequence[int], log=None) -> list:
    """One training run per K on shared data and seed, plus the K = N^2 reference.

    Returns rows ``{"K", "accuracy", "threshold", "reference"}``; the reference
    row is last.
    """
    N = cfg.model.N
    ks = normalize_k_list(ks, N)
    data = load_dataset(cfg)
    rows = []
    for k in ks + [N * N]:
        reference = len(rows) == len(ks)
        run = cfg.with_model(K=k, selection=True)
        res = train(run, data=data)
        rows.append({"K": k, "accuracy": res.val_accuracy, "threshold": res.val_threshold,
                     "reference": reference})
        if log:
            log(f"K={k:5d}{' (reference)' if reference else ''} "
                f"val_acc={res.val_accuracy:.4f}")
    return rows
