"""Desk-scale experiments on the default synthetic corpus."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import file_digest, load_checkpoint, save_checkpoint
from .data import DomainBundle, LoadedDomain, default_corpus, prepare_domain, synthesize
from .model import ModelConfig
from .training import EpochRow, MetricsReport, TrainConfig, TrainState, evaluate, mean_l1, train_epoch


def corpus_bundles(mc: ModelConfig, seed: int = 0, workers: int = 1) -> tuple[list[DomainBundle], DomainBundle]:
    """Training bundles (chronological 80/20 split) plus the held-out domain with every window as test."""
    specs, held = default_corpus(seed)
    bundles = []
    for i, s in enumerate(specs):
        g, series = synthesize(s)
        loaded = LoadedDomain(s.name, g, series, {"steps_per_day": s.steps_per_day})
        bundles.append(prepare_domain(loaded, mc.history, mc.horizon, mc.k_eig, mc.max_lag,
                                      index=i, workers=workers))
    g, series = synthesize(held)
    loaded = LoadedDomain(held.name, g, series, {"steps_per_day": held.steps_per_day})
    heldout = prepare_domain(loaded, mc.history, mc.horizon, mc.k_eig, mc.max_lag, train_fraction=1.0,
                             workers=workers)
    heldout.test = heldout.train
    return bundles, heldout


def training_curve(mc: ModelConfig, tc: TrainConfig, bundles, epochs: int | None = None) -> tuple[TrainState, list[list[EpochRow]]]:
    state = TrainState.create(mc, [b.context.name for b in bundles], tc)
    history = [train_epoch(state, bundles) for _ in range(tc.epochs if epochs is None else epochs)]
    return state, history


@dataclass
class ZeroShotRun:
    seed: int
    variant: str
    report: MetricsReport
    digest_before: str
    digest_after: str
    first_l1: float
    last_l1: float
    seconds: float

    @property
    def frozen(self) -> bool:
        return self.digest_before == self.digest_after


def zero_shot_run(variant: str, seed: int, epochs: int, workdir, bundles, heldout,
                  mc: ModelConfig | None = None, lr: float = 1e-3) -> ZeroShotRun:
    """Train one variant, checkpoint it, then evaluate the reloaded checkpoint on the held-out domain."""
    t0 = time.perf_counter()
    mc = ModelConfig(variant=variant) if mc is None else mc
    tc = TrainConfig(lr=lr, epochs=epochs, seed=seed)
    state, history = training_curve(mc, tc, bundles)
    path = Path(workdir) / f"{variant}_seed{seed}.bin"
    save_checkpoint(state, path)
    before = file_digest(path)
    frozen = load_checkpoint(path)
    report = evaluate(frozen.model, heldout, "zero_shot")
    after = file_digest(path)
    first = mean_l1(history[0]) if history else float("nan")
    last = mean_l1(history[-1]) if history else float("nan")
    return ZeroShotRun(seed, variant, report, before, after, first, last, time.perf_counter() - t0)


def zero_shot_comparison(seeds, epochs: int, workdir, lr: float = 1e-3, log=print) -> list[tuple[ZeroShotRun, ZeroShotRun]]:
    """Damba against the fused-SSM ablation on the held-out domain, one pair per seed."""
    bundles, heldout = corpus_bundles(ModelConfig())
    pairs = []
    for seed in seeds:
        pair = tuple(zero_shot_run(v, seed, epochs, workdir, bundles, heldout, lr=lr) for v in ("damba", "fused"))
        if log is not None:
            d, f = pair
            log(f"seed {seed}: damba MAE {d.report.mae:.4f}  fused MAE {f.report.mae:.4f}  "
                f"(train L1 {d.last_l1:.3f} / {f.last_l1:.3f}, {d.seconds + f.seconds:.0f}s)")
        pairs.append(pair)
    return pairs


def damba_wins(pairs) -> int:
    return int(sum(d.report.mae <= f.report.mae for d, f in pairs))


__all__ = ["ZeroShotRun", "corpus_bundles", "damba_wins", "training_curve", "zero_shot_comparison",
           "zero_shot_run"]
