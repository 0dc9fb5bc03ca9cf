"""Forward-pass timing of the selective scan against sequence length."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from .numerics import no_grad
from .ssm import ContractError, ScanMethod, SelectiveSSM


@dataclass
class BenchResult:
    lengths: list[int]
    ms: list[float]
    slope: float | None = None  # ms per position
    intercept: float | None = None
    r2: float | None = None

    def doubling_ratios(self) -> list[float]:
        return [b / a for a, b in zip(self.ms, self.ms[1:])]


def linear_fit(x, y) -> tuple[float, float, float]:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def bench_scan(lengths, dim: int = 16, d_state: int = 16, repeats: int = 15, seed: int = 0,
               method: ScanMethod = "sequential", chunk: int | None = 128) -> BenchResult:
    """Best-of-``repeats`` wall time of one selective-SSM forward pass per length."""
    lengths = [int(v) for v in lengths]
    if not lengths or any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise ContractError("lengths must be non-empty and strictly ascending")
    rng = np.random.default_rng(seed)
    ssm = SelectiveSSM(dim, d_state, rng)
    with no_grad():
        def run(x):
            if chunk is None:
                return ssm(x, method=method)
            return ssm.forward_chunked(x, chunk, method=method)

        xs = [rng.normal(size=(L, dim)) for L in lengths]
        for x in xs:  # warm-up
            run(x)
        times = [[] for _ in lengths]
        # round-robin over lengths so a transient slowdown hits every length alike
        for _ in range(repeats):
            for i, x in enumerate(xs):
                t0 = time.perf_counter()
                run(x)
                times[i].append(1000.0 * (time.perf_counter() - t0))
        ms = [float(np.min(t)) for t in times]
    res = BenchResult(lengths, ms)
    if len(lengths) >= 2:
        res.slope, res.intercept, res.r2 = linear_fit(lengths, ms)
    return res


def write_bench_csv(res: BenchResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["L", "ms"])
        for L, t in zip(res.lengths, res.ms):
            w.writerow([L, f"{t:.4f}"])
        if res.slope is not None:
            w.writerow(["slope_ms_per_step", f"{res.slope:.6g}"])
            w.writerow(["intercept_ms", f"{res.intercept:.6g}"])
            w.writerow(["r2", f"{res.r2:.6f}"])
