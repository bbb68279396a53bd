"""Two-phase SGD training.

Phase 1 (``identity_only``) trains the backbone and the identity branch with
normal triplet losses.  Phase 2 (``full``) starts from the phase-1 parameters
and trains everything under the uncertainty-aware objective.  A one-stage
baseline trainer is included for ablations.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .core_math import make_rng
from .errors import ConfigError, NumericError
from .losses import LossConfig, evaluate_objective
from .model import (IDENTITY_PARAMS, ModelConfig, ModelParams, atomic_write_text, init_params)
from .sampling import BatchSpec, build_triplet_sets, sample_batch, sample_pk_batch
from .synthbench import Dataset

PHASES = ("identity_only", "full", "baseline")
METRICS_HEADER = ("iter", "lr", "L_tv", "L_tc", "L_tv_e", "L_tc_e", "total", "sigma_v_mean", "sigma_c_mean")


@dataclass(frozen=True)
class TrainConfig:
    phase: str = "identity_only"
    lr: float = 0.1
    milestones: tuple[int, ...] = ()
    lr_decay: float = 0.1
    momentum: float = 0.9
    total_iters: int = 1000
    batch_spec: BatchSpec = field(default_factory=BatchSpec)
    margin: float = 0.2
    seed: int = 0
    eval_every: int = 0
    weight_decay: float = 5e-4
    sigma_mode: str = "scalar"

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if self.phase not in PHASES:
            raise ConfigError(f"phase must be one of {PHASES}")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not 0 < self.lr_decay < 1:
            raise ConfigError("lr_decay must lie in (0, 1)")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.total_iters < 0:
            raise ConfigError("total_iters must be >= 0")
        ms = self.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ConfigError("milestones must be strictly increasing")
        if ms and ms[-1] >= max(self.total_iters, 1):
            raise ConfigError(f"milestones {list(ms)} must be below total_iters {self.total_iters}")
        if self.weight_decay < 0 or self.margin <= 0:
            raise ConfigError("weight_decay must be >= 0 and margin > 0")

    @property
    def loss_config(self) -> LossConfig:
        return LossConfig(margin=self.margin, sigma_mode=self.sigma_mode)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("batch_spec"), dict):
            d["batch_spec"] = BatchSpec(**d["batch_spec"])
        elif isinstance(d.get("batch_spec"), (list, tuple)):
            d["batch_spec"] = BatchSpec(*d["batch_spec"])
        if "milestones" in d:
            d["milestones"] = tuple(d["milestones"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class MetricsRow:
    iter: int
    lr: float
    L_tv: float | None
    L_tc: float | None
    L_tv_e: float | None
    L_tc_e: float | None
    total: float
    sigma_v_mean: float | None = None
    sigma_c_mean: float | None = None
    sigma_by_condition: dict[str, tuple[float, float]] = field(default_factory=dict)
    wall_clock: float = 0.0


def sgd_step(params: ModelParams, grads: ModelParams, velocity: ModelParams, lr: float, momentum: float,
             weight_decay: float, names=None) -> tuple[ModelParams, ModelParams]:
    """Heavy-ball SGD: ``v' = momentum * v + (g + wd * theta)``, ``theta' = theta - lr * v'``.

    Only the tensors listed in ``names`` (default: all) are touched.
    """
    names = params.names() if names is None else names
    new_p, new_v = params.copy(), velocity.copy()
    for n in names:
        theta, g, v = getattr(params, n), getattr(grads, n), getattr(velocity, n)
        if theta.shape != g.shape or theta.shape != v.shape:
            raise ValueError(f"shape mismatch for {n}: {theta.shape}, {g.shape}, {v.shape}")
        v2 = momentum * v + (g + weight_decay * theta)
        setattr(new_v, n, v2)
        setattr(new_p, n, theta - lr * v2)
    return new_p, new_v


def lr_schedule(iteration: int, config: TrainConfig) -> float:
    """Step decay: ``lr * lr_decay ** (number of milestones <= iteration)``."""
    passed = sum(1 for m in config.milestones if m <= iteration)
    return config.lr * config.lr_decay ** passed


def _opt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def metrics_csv(rows: list[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow([r.iter, repr(float(r.lr)), _opt(r.L_tv), _opt(r.L_tc), _opt(r.L_tv_e), _opt(r.L_tc_e),
                    repr(float(r.total)), _opt(r.sigma_v_mean), _opt(r.sigma_c_mean)])
    return buf.getvalue()


def write_metrics(rows: list[MetricsRow], path) -> None:
    atomic_write_text(path, metrics_csv(rows))


def _run(dataset: Dataset, params: ModelParams, model_config: ModelConfig, cfg: TrainConfig, rng,
         objective: str, sampler, trainable) -> tuple[ModelParams, list[MetricsRow]]:
    frames_all = dataset.frames_tensor
    velocity = params.zeros_like()
    rows: list[MetricsRow] = []
    loss_cfg = cfg.loss_config
    start = time.perf_counter()
    for it in range(cfg.total_iters):
        batch = sampler(dataset, cfg.batch_spec, rng)
        triplets = build_triplet_sets(batch)
        frames = frames_all[batch.record_indices]
        ev = evaluate_objective(frames, triplets, params, model_config, loss_cfg, objective=objective, rng=rng)
        b = ev.breakdown
        if not math.isfinite(b.total):
            raise NumericError(f"non-finite loss at iteration {it}")
        lr = lr_schedule(it, cfg)
        row = MetricsRow(it, lr, b.L_tv, b.L_tc, b.L_tv_e, b.L_tc_e, b.total,
                         wall_clock=time.perf_counter() - start)
        if ev.cache.sigma_c is not None:
            row.sigma_v_mean = float(ev.cache.sigma_v.mean())
            row.sigma_c_mean = float(ev.cache.sigma_c.mean())
            conds = np.array([e.condition for e in batch.entries])
            for c in np.unique(conds):
                sel = conds == c
                row.sigma_by_condition[str(c)] = (float(ev.cache.sigma_v[sel].mean()),
                                                  float(ev.cache.sigma_c[sel].mean()))
        rows.append(row)
        params, velocity = sgd_step(params, ev.grads, velocity, lr, cfg.momentum, cfg.weight_decay, trainable)
        for n in trainable:
            if not np.all(np.isfinite(getattr(params, n))):
                raise NumericError(f"parameter {n} became non-finite at iteration {it}")
    return params, rows


def train_phase1(dataset: Dataset, model_config: ModelConfig, train_config: TrainConfig,
                 init: ModelParams | None = None) -> tuple[ModelParams, list[MetricsRow]]:
    """Identity-branch training; uncertainty parameters stay at initialisation."""
    if train_config.phase != "identity_only":
        raise ConfigError("train_phase1 needs phase='identity_only'")
    if not model_config.two_stage:
        raise ConfigError("train_phase1 needs a two-stage model")
    rng = make_rng(train_config.seed, PHASES.index("identity_only"))
    params = init_params(model_config, rng) if init is None else init.copy()
    return _run(dataset, params, model_config, train_config, rng, "identity_only", sample_batch, IDENTITY_PARAMS)


def train_phase2(dataset: Dataset, pretrained: ModelParams, model_config: ModelConfig,
                 train_config: TrainConfig) -> tuple[ModelParams, list[MetricsRow]]:
    """Full training under the uncertainty-aware objective, from phase-1 parameters."""
    if train_config.phase != "full":
        raise ConfigError("train_phase2 needs phase='full'")
    pretrained.check(model_config)
    rng = make_rng(train_config.seed, PHASES.index("full"))
    return _run(dataset, pretrained.copy(), model_config, train_config, rng, "full", sample_batch,
                tuple(pretrained.names()))


def train_baseline(dataset: Dataset, model_config: ModelConfig, train_config: TrainConfig,
                   ) -> tuple[ModelParams, list[MetricsRow]]:
    """One-stage mapping trained with a normal triplet loss over the whole PK batch."""
    if train_config.phase != "baseline":
        raise ConfigError("train_baseline needs phase='baseline'")
    cfg = replace(model_config, two_stage=False)
    rng = make_rng(train_config.seed, PHASES.index("baseline"))
    params = init_params(cfg, rng)
    names = ("backbone_w", "backbone_b", "id_cvm_w", "id_cvm_b")
    return _run(dataset, params, cfg, train_config, rng, "baseline", sample_pk_batch, names)


def smoothed(values, window: int) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)
