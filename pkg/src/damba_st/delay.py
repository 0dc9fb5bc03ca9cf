"""Propagation-delay estimation and the delay-following scan."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import (
    Linear,
    Module,
    Tensor,
    as_tensor,
    broadcast_to,
    clip,
    concat,
    matmul,
    round_ste,
    tanh,
)
from .spatial import ScanSequence, TrafficGraph
from .ssm import ContractError


def _main_channel(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[:, 0] if x.ndim == 2 else x


def lagged_correlations(xa, xb, max_lag: int) -> np.ndarray:
    """Pearson correlation of xa[:T-t] with xb[t:] for t = 0..max_lag.

    Lags whose overlap has zero variance in either series get -inf.
    """
    a, b = _main_channel(xa), _main_channel(xb)
    T = a.shape[0]
    out = np.full(max_lag + 1, -np.inf)
    for t in range(max_lag + 1):
        u = a[: T - t] - a[: T - t].mean()
        v = b[t:] - b[t:].mean()
        denom = np.sqrt(np.dot(u, u) * np.dot(v, v))
        if denom > 0:
            out[t] = np.dot(u, v) / denom
    return out


def estimate_delay(xa, xb, max_lag: int) -> int:
    """Lag in [0, max_lag] at which shifting ``xa`` forward best matches ``xb``.

    Only the main (first) channel is used; ties go to the smallest lag.
    """
    T = _main_channel(xa).shape[0]
    if T <= 2 * max_lag:
        raise ContractError(f"need T > 2*max_lag, got T={T}, max_lag={max_lag}")
    return int(np.argmax(lagged_correlations(xa, xb, max_lag)))


@dataclass
class DelayMatrix:
    lags: np.ndarray  # (N, N) int, zero where undefined
    defined: np.ndarray  # (N, N) bool, True on edges
    max_lag: int

    def edge_rows(self) -> list[tuple[int, int, int]]:
        src, dst = np.nonzero(self.defined)
        return [(int(a), int(b), int(self.lags[a, b])) for a, b in zip(src, dst)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["src", "dst", "lag"])
            w.writerows(self.edge_rows())

    @classmethod
    def from_csv(cls, path, n: int, max_lag: int) -> DelayMatrix:
        lags = np.zeros((n, n), dtype=np.int64)
        defined = np.zeros((n, n), dtype=bool)
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                a, b, lag = int(row["src"]), int(row["dst"]), int(row["lag"])
                if not 0 <= lag <= max_lag:
                    raise ValueError(f"{Path(path).name}: lag {lag} outside [0, {max_lag}]")
                lags[a, b], defined[a, b] = lag, True
        return cls(lags, defined, max_lag)


def build_delay_matrix(graph: TrafficGraph, series: np.ndarray, max_lag: int,
                       workers: int = 1) -> DelayMatrix:
    """Estimate the lag of every ordered edge; ``series`` is ``(T, N)`` or ``(T, N, C)``."""
    x = np.asarray(series, dtype=np.float64)
    if x.ndim == 3:
        x = x[..., 0]
    if x.shape[1] != graph.n:
        raise ContractError(f"series covers {x.shape[1]} nodes, graph has {graph.n}")
    edges = [(a, b) for a, b in graph.edges() if a != b]

    def one(edge):
        a, b = edge
        return estimate_delay(x[:, a], x[:, b], max_lag)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            found = list(pool.map(one, edges))
    else:
        found = [one(e) for e in edges]
    lags = np.zeros((graph.n, graph.n), dtype=np.int64)
    defined = np.zeros((graph.n, graph.n), dtype=bool)
    for (a, b), lag in zip(edges, found):
        lags[a, b], defined[a, b] = lag, True
    return DelayMatrix(lags, defined, max_lag)


def timestamp_features(tod: np.ndarray, dow: np.ndarray) -> np.ndarray:
    """Stack time-of-day in [0, 1) and day-of-week in {0..6}/7 -> (..., 2)."""
    tod, dow = np.asarray(tod, dtype=np.float64), np.asarray(dow, dtype=np.float64)
    if np.any((tod < 0) | (tod >= 1)) or np.any((dow < 0) | (dow >= 1)):
        raise ContractError("timestamp features must lie in [0, 1)")
    return np.stack([tod, dow], axis=-1)


class DelayAdjuster(Module):
    """Two-layer tanh perceptron from (time-of-day, day-of-week) to a lag offset."""

    def __init__(self, hidden: int, rng: np.random.Generator | None = None):
        self.hidden_layer = Linear(2, hidden, rng if rng is not None else np.random.default_rng(0))
        self.out_layer = Linear(hidden, 1, rng if rng is not None else np.random.default_rng(0),
                                scale=0.1 / np.sqrt(hidden))
        if rng is None:
            for p in self.parameters():
                p.data = np.zeros_like(p.data)

    def __call__(self, t) -> Tensor:
        h = tanh(self.hidden_layer(as_tensor(t)))
        out = self.out_layer(h)
        return out.reshape(out.shape[:-1])


@dataclass
class AdjustedDelay:
    lags: np.ndarray  # (..., N, N) integer effective lags
    offset: Tensor  # (...,) continuous perceptron output
    lags_st: Tensor  # same values as ``lags``; straight-through gradient to ``offset``


def adjust_delay(tau: DelayMatrix, adj: DelayAdjuster, t) -> AdjustedDelay:
    """tau + round(MLP(t)) clipped to [0, max_lag] on defined entries."""
    offset = adj(t)
    shift = round_ste(offset)
    shift = shift.reshape(shift.shape + (1, 1))
    eff = clip(Tensor(tau.lags.astype(np.float64)) + shift, 0.0, float(tau.max_lag))
    eff = eff * Tensor(tau.defined.astype(np.float64))
    return AdjustedDelay(np.rint(eff.data).astype(np.int64), offset, eff)


# -- delay-following sequences ------------------------------------------------------------

@dataclass
class DelayPlan:
    nodes: np.ndarray  # (B, P, S, K) node of each patch slot
    patches: np.ndarray  # (B, P, S, K) patch index of each slot
    valid: np.ndarray  # (B, P, S, K) False where the slot repeats a clipped patch
    hops_from: np.ndarray  # (P, K-1) source node of each hop
    hops_to: np.ndarray  # (P, K-1) target node of each hop


def delay_scan_plan(paths: np.ndarray, lags: np.ndarray, patch_len: int, n_patches: int,
                    starts) -> DelayPlan:
    """Patch/node indices for every (batch, path, start) delay sequence.

    ``paths`` is ``(P, K)`` node ids, ``lags`` is ``(B, N, N)`` integer lags, and
    each hop advances the patch index by ``lag // patch_len``.  A sequence that
    runs past the last patch repeats its final reachable patch.
    """
    paths = np.asarray(paths, dtype=np.int64)
    lags = np.asarray(lags, dtype=np.int64)
    starts = np.asarray(list(starts), dtype=np.int64)
    if np.any((starts < 0) | (starts >= n_patches)):
        raise ContractError(f"start patch index out of range [0, {n_patches})")
    B = lags.shape[0]
    P, K = paths.shape
    S = starts.size
    nodes = np.empty((B, P, S, K), dtype=np.int64)
    patches = np.empty((B, P, S, K), dtype=np.int64)
    valid = np.ones((B, P, S, K), dtype=bool)
    nodes[..., 0] = paths[None, :, None, 0]
    patches[..., 0] = starts[None, None, :]
    for j in range(1, K):
        hop = lags[:, paths[:, j - 1], paths[:, j]] // patch_len  # (B, P)
        raw = patches[..., j - 1] + hop[:, :, None]
        ok = valid[..., j - 1] & (raw <= n_patches - 1)
        valid[..., j] = ok
        patches[..., j] = np.where(ok, raw, patches[..., j - 1])
        nodes[..., j] = np.where(ok, paths[None, :, None, j], nodes[..., j - 1])
    return DelayPlan(nodes, patches, valid, paths[:, :-1], paths[:, 1:])


def delay_sequences(tokens: Tensor, plan: DelayPlan, adapter, lags_st: Tensor | None,
                    patch_len: int) -> ScanSequence:
    """Gather ``tokens`` ``(B, N, L, D)`` along ``plan`` and append the delay adapter.

    With ``lags_st`` the gathered tokens carry a straight-through surrogate so the
    lag offset receives gradient; the forward values are unchanged.
    """
    tokens, adapter = as_tensor(tokens), as_tensor(adapter)
    B, _, L, D = tokens.shape
    bidx = np.arange(B)[:, None, None, None]
    gathered = tokens[bidx, plan.nodes, plan.patches]  # (B, P, S, K, D)
    if lags_st is not None and lags_st.requires_grad:
        nxt = np.minimum(plan.patches + 1, L - 1)
        diff = tokens[bidx, plan.nodes, nxt] - gathered
        bsel = np.arange(B)[:, None, None]
        hop = lags_st[bsel, plan.hops_from[None], plan.hops_to[None]] / float(patch_len)  # (B, P, K-1)
        K = plan.nodes.shape[-1]
        tri = np.triu(np.ones((K - 1, K)), 1)  # cumulative hop count at each slot
        cum = matmul(hop, Tensor(tri))  # (B, P, K)
        surrogate = cum - cum.detach()
        mask = plan.valid & (plan.patches + 1 <= L - 1)
        weight = surrogate.reshape(B, plan.nodes.shape[1], 1, K) * Tensor(mask.astype(np.float64))
        gathered = gathered + diff * weight.reshape(weight.shape + (1,))
    lead = gathered.shape[:-2]
    ad = broadcast_to(adapter.reshape((1,) * len(lead) + (1, D)), lead + (1, D))
    pad = -np.ones(lead + (1,), dtype=np.int64)
    nodes = np.concatenate([np.where(plan.valid, plan.nodes, -1), pad], axis=-1)
    patches = np.concatenate([np.where(plan.valid, plan.patches, -1), pad], axis=-1)
    K = plan.nodes.shape[-1]
    return ScanSequence(concat([gathered, ad], axis=-2), nodes, patches, "delay", (K,))


def st_delay_scan(patches, path, lags, patch_len: int, adapter, start: int = 0,
                  length: int | None = None) -> ScanSequence:
    """One delay sequence ``(length, D)`` over ``patches`` laid out ``(L, N, D)``.

    ``path`` is truncated or padded (repeating the final reachable patch) so the
    sequence holds ``length - 1`` patches followed by the adapter.
    """
    patches = as_tensor(patches)
    L, N, D = patches.shape
    length = L if length is None else length
    path = list(np.asarray(path, dtype=np.int64))[: length - 1]
    while len(path) < length - 1:
        path.append(path[-1])
    lag_arr = np.asarray(getattr(lags, "lags", lags), dtype=np.int64)
    lag_arr = lag_arr.copy()
    lag_arr[np.arange(N), np.arange(N)] = 0
    tokens = patches.transpose(1, 0, 2).reshape(1, N, L, D)
    plan = delay_scan_plan(np.array([path]), lag_arr[None], patch_len, L, [start])
    seq = delay_sequences(tokens, plan, adapter, None, patch_len)
    return ScanSequence(seq.tokens.reshape(length, D), seq.nodes.reshape(length),
                        seq.patches.reshape(length), "delay", (length - 1,))
