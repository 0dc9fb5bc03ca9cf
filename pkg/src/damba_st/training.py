"""Objective, regularizers, metrics, and the multi-domain training loop."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DomainBundle, WindowArrays
from .model import DambaST, ForwardOut, ModelConfig
from .numerics import (
    OptimizerState,
    Tensor,
    adam_step,
    as_tensor,
    backward,
    concat,
    exp,
    no_grad,
    norm,
    tabs,
)
from .ssm import ContractError

MAPE_FLOOR = 1e-6


@dataclass
class ObjectiveConfig:
    alpha: float = 1.0
    beta: float = 0.5
    sigma: float = 1.0
    c0: float | None = None  # None -> L * D of the representations

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ContractError("alpha and beta must be non-negative")
        if self.sigma <= 0 or (self.c0 is not None and self.c0 <= 0):
            raise ContractError("sigma and c0 must be positive")


# -- objective terms ----------------------------------------------------------------------

def l1_loss(pred, truth) -> Tensor:
    pred = as_tensor(pred)
    truth = np.asarray(getattr(truth, "data", truth), dtype=np.float64)
    if pred.shape != truth.shape:
        raise ContractError(f"prediction {pred.shape} and truth {truth.shape} differ")
    if pred.size == 0:
        raise ContractError("L1 loss of an empty batch")
    return tabs(pred - truth).mean()


def frobenius_distance(theta_d, theta_c) -> Tensor:
    theta_d, theta_c = list(theta_d), list(theta_c)
    if not theta_d or len(theta_d) != len(theta_c):
        raise ContractError("model-difference term needs equally long, non-empty parameter lists")
    diffs = []
    for pd, pc in zip(theta_d, theta_c):
        pd, pc = as_tensor(pd), as_tensor(pc)
        if pd.shape != pc.shape:
            raise ContractError(f"aligned parameters differ in shape: {pd.shape} vs {pc.shape}")
        diffs.append((pd - pc).reshape(-1))
    return norm(concat(diffs, axis=0))


def model_diff_reg(theta_d, theta_c, sigma: float = 1.0) -> Tensor:
    """exp(-||theta_D - theta_C||_F / (2 sigma^2)) over role-aligned tensors."""
    return exp(frobenius_distance(theta_d, theta_c) * (-1.0 / (2.0 * sigma * sigma)))


def repr_diff_reg(r_d, r_c, c0: float | None = None) -> Tensor:
    """||R_D^T R_C||_F / C0, averaged over any leading batch axes.

    ``r_d``, ``r_c`` are ``(..., L, D)``; C0 defaults to L * D.
    """
    r_d, r_c = as_tensor(r_d), as_tensor(r_c)
    if r_d.shape != r_c.shape:
        raise ContractError(f"representations differ in shape: {r_d.shape} vs {r_c.shape}")
    L, D = r_d.shape[-2:]
    c0 = float(L * D) if c0 is None else float(c0)
    gram = r_d.swapaxes(-1, -2) @ r_c
    return norm(gram, axis=(-2, -1)).mean() / c0


def total_objective(losses, s_m, s_r, cfg: ObjectiveConfig) -> Tensor:
    losses = list(losses)
    if not losses:
        raise ContractError("objective needs at least one domain loss")
    total = as_tensor(losses[0])
    for extra in losses[1:]:
        total = total + extra
    return total + cfg.alpha * as_tensor(s_m) + cfg.beta * as_tensor(s_r)


# -- metrics ------------------------------------------------------------------------------

@dataclass
class MetricsReport:
    dataset: str
    mode: str
    mae: float
    rmse: float
    mape: float  # percent, over entries with |y| > 1e-6
    mape_excluded: int
    n_values: int = 0

    def row(self) -> list:
        return [self.dataset, self.mode, f"{self.mae:.9g}", f"{self.rmse:.9g}", f"{self.mape:.9g}",
                self.mape_excluded]


METRICS_HEADER = ["dataset", "mode", "mae", "rmse", "mape", "mape_excluded"]


def compute_metrics(pred, truth, dataset: str = "", mode: str = "") -> MetricsReport:
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.size == 0:
        raise ContractError("metrics need equally shaped, non-empty arrays")
    err = pred - truth
    keep = np.abs(truth) > MAPE_FLOOR
    mape = 100.0 * float(np.mean(np.abs(err[keep]) / np.abs(truth[keep]))) if keep.any() else float("nan")
    return MetricsReport(dataset, mode, float(np.mean(np.abs(err))), float(np.sqrt(np.mean(err ** 2))),
                         mape, int((~keep).sum()), int(pred.size))


def write_metrics_csv(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for r in reports:
            w.writerow(r.row())


# -- training -----------------------------------------------------------------------------

class TrainingAborted(FloatingPointError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 8
    seed: int = 0
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)


@dataclass
class TrainState:
    model: DambaST
    opt: OptimizerState
    rng: np.random.Generator
    domains: list[str]
    cfg: TrainConfig
    epoch: int = 0

    @classmethod
    def create(cls, model_cfg: ModelConfig, domains: list[str], cfg: TrainConfig) -> TrainState:
        rng = np.random.default_rng(cfg.seed)
        model = DambaST(model_cfg, len(domains), rng)
        return cls(model, OptimizerState(lr=cfg.lr), rng, list(domains), cfg)


@dataclass
class EpochRow:
    epoch: int
    domain: str
    l1: float
    s_m: float
    s_r: float
    objective: float
    wall_ms: float


EPOCH_HEADER = ["epoch", "domain", "l1", "S_m", "S_r", "objective", "wall_ms"]


def batch_objective(model: DambaST, bundle: DomainBundle, batch: WindowArrays,
                    obj: ObjectiveConfig, rng: np.random.Generator | None) -> tuple[Tensor, dict]:
    """Objective of one batch from training domain ``bundle.index`` and its parts."""
    i = bundle.index
    out: ForwardOut = model(batch.x, batch.ts, bundle.context, i, rng)
    l1 = l1_loss(out.pred, batch.y)
    if model.cfg.variant == "damba":
        s_m = model_diff_reg(*model.aligned_parameters(i), obj.sigma)
        t = out.views["temporal"]
        s_r = repr_diff_reg(t.r_d, t.r_c, obj.c0)
        total = total_objective([l1], s_m, s_r, obj)
    else:
        s_m = s_r = Tensor(0.0)
        total = l1
    return total, {"l1": l1.item(), "s_m": s_m.item(), "s_r": s_r.item(), "objective": total.item()}


def multi_domain_objective(model: DambaST, bundles: list[DomainBundle], obj: ObjectiveConfig,
                           rng: np.random.Generator | None) -> Tensor:
    """Sum of per-domain batch objectives over every training window of ``bundles``."""
    total = None
    for b in bundles:
        part, _ = batch_objective(model, b, b.train, obj, rng)
        total = part if total is None else total + part
    return total


def epoch_schedule(bundles: list[DomainBundle], batch_size: int,
                   rng: np.random.Generator) -> list[tuple[int, np.ndarray]]:
    """Round-robin over domains; windows shuffled within each domain."""
    per_domain = []
    for k, b in enumerate(bundles):
        order = rng.permutation(len(b.train))
        per_domain.append([order[s:s + batch_size] for s in range(0, len(order), batch_size)])
    sched = []
    for j in range(max(len(p) for p in per_domain)):
        for k, p in enumerate(per_domain):
            if j < len(p):
                sched.append((k, p[j]))
    return sched


def train_epoch(state: TrainState, bundles: list[DomainBundle]) -> list[EpochRow]:
    """One pass over every training window; one Adam step per batch."""
    if not bundles or any(len(b.train) == 0 for b in bundles):
        raise ContractError("every training domain needs at least one window")
    for b in bundles:
        if b.index is None or state.domains[b.index] != b.context.name:
            raise ContractError(f"domain {b.context.name!r} is not registered at its index")
    model, obj = state.model, state.cfg.objective
    params = dict(model.named_parameters())
    sums = {k: {"l1": 0.0, "s_m": 0.0, "s_r": 0.0, "objective": 0.0, "n": 0, "ms": 0.0}
            for k in range(len(bundles))}
    state.epoch += 1
    for k, idx in epoch_schedule(bundles, state.cfg.batch_size, state.rng):
        t0 = time.perf_counter()
        bundle = bundles[k]
        total, parts = batch_objective(model, bundle, bundle.train.subset(idx), obj, state.rng)
        if not np.isfinite(parts["objective"]):
            raise TrainingAborted(f"non-finite objective at epoch {state.epoch}, domain "
                                  f"{bundle.context.name!r}", {"epoch": state.epoch,
                                                               "domain": bundle.context.name, **parts})
        model.zero_grad()
        backward(total)
        adam_step(state.opt, params)
        model.zero_grad()
        model.invalidate_cache()
        s = sums[k]
        for key in ("l1", "s_m", "s_r", "objective"):
            s[key] += parts[key] * len(idx)
        s["n"] += len(idx)
        s["ms"] += 1000.0 * (time.perf_counter() - t0)
    rows = []
    for k, b in enumerate(bundles):
        s = sums[k]
        n = max(s["n"], 1)
        rows.append(EpochRow(state.epoch, b.context.name, s["l1"] / n, s["s_m"] / n, s["s_r"] / n,
                             s["objective"] / n, s["ms"]))
    return rows


class EpochLog:
    """Line-oriented CSV that is flushed after every epoch."""

    def __init__(self, path):
        self.path = Path(path)
        with open(self.path, "w", newline="") as fh:
            csv.writer(fh).writerow(EPOCH_HEADER)

    def append(self, rows: list[EpochRow]) -> None:
        with open(self.path, "a", newline="") as fh:
            w = csv.writer(fh)
            for r in rows:
                w.writerow([r.epoch, r.domain, f"{r.l1:.9g}", f"{r.s_m:.9g}", f"{r.s_r:.9g}",
                            f"{r.objective:.9g}", f"{r.wall_ms:.1f}"])


def predict(model: DambaST, bundle: DomainBundle, windows: WindowArrays, domain: int | None,
            batch_size: int = 16) -> np.ndarray:
    preds = []
    with no_grad():
        for s in range(0, len(windows), batch_size):
            part = windows.subset(slice(s, s + batch_size))
            preds.append(model(part.x, part.ts, bundle.context, domain).pred.data)
    return np.concatenate(preds, axis=0)


def evaluate(model: DambaST, bundle: DomainBundle, mode: str = "in_distribution",
             split: str = "test") -> MetricsReport:
    """Metrics on ``bundle``'s ``split`` windows without touching parameters."""
    if mode not in ("in_distribution", "zero_shot"):
        raise ContractError(f"unknown evaluation mode {mode!r}")
    windows = bundle.test if split == "test" else bundle.train
    if len(windows) == 0:
        raise ContractError(f"domain {bundle.context.name!r} has no {split} windows")
    if mode == "in_distribution" and bundle.index is None:
        raise ContractError(f"domain {bundle.context.name!r} was not trained; use zero-shot mode")
    domain = bundle.index if mode == "in_distribution" else None
    pred = predict(model, bundle, windows, domain)
    return compute_metrics(pred, windows.y, bundle.context.name, mode)


def fit(state: TrainState, bundles: list[DomainBundle], epochs: int | None = None,
        log: EpochLog | None = None) -> list[list[EpochRow]]:
    history = []
    for _ in range(state.cfg.epochs if epochs is None else epochs):
        rows = train_epoch(state, bundles)
        if log is not None:
            log.append(rows)
        history.append(rows)
    return history


def mean_l1(rows: list[EpochRow]) -> float:
    """Mean over domains of one epoch's L1 values."""
    return float(np.mean([r.l1 for r in rows]))


__all__ = [
    "EPOCH_HEADER",
    "EpochLog",
    "EpochRow",
    "METRICS_HEADER",
    "MetricsReport",
    "ObjectiveConfig",
    "TrainConfig",
    "TrainState",
    "TrainingAborted",
    "batch_objective",
    "compute_metrics",
    "evaluate",
    "fit",
    "l1_loss",
    "mean_l1",
    "model_diff_reg",
    "multi_domain_objective",
    "predict",
    "repr_diff_reg",
    "total_objective",
    "train_epoch",
    "write_metrics_csv",
]
