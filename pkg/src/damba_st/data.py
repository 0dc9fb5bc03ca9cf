"""Synthetic multi-domain traffic corpora, their on-disk format, and windowing."""

from __future__ import annotations

import csv
import io
import json
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .delay import build_delay_matrix
from .model import DomainContext
from .spatial import GraphError, TrafficGraph, positional_features
from .ssm import ContractError

GRAPH_FAMILIES = ("cycle", "grid", "geometric")
CHANNELS = ("value", "tod", "dow")
DAYS_PER_WEEK = 7


class IngestionError(ValueError):
    pass


class RowCountError(IngestionError):
    pass


class SymmetryError(IngestionError):
    pass


class NonFiniteError(IngestionError):
    pass


class NodeIdError(IngestionError):
    pass


@dataclass
class DomainSpec:
    name: str
    n_nodes: int = 20
    graph: str = "cycle"
    steps_per_day: int = 288
    n_steps: int = 2016
    amplitude: float = 10.0
    trend: float = 0.0
    delay_steps: int = 3
    noise: float = 0.5
    weekly: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.n_nodes < 2:
            raise ContractError(f"domain {self.name!r}: need n_nodes >= 2, got {self.n_nodes}")
        if self.graph not in GRAPH_FAMILIES:
            raise ContractError(f"domain {self.name!r}: unknown graph family {self.graph!r}")
        if self.steps_per_day < 2 or self.n_steps % self.steps_per_day:
            raise ContractError(f"domain {self.name!r}: steps_per_day must divide n_steps")
        if self.noise < 0 or self.delay_steps < 0:
            raise ContractError(f"domain {self.name!r}: noise and delay must be non-negative")


# -- graphs -------------------------------------------------------------------------------

def cycle_adjacency(n: int) -> np.ndarray:
    adj = np.zeros((n, n))
    i = np.arange(n)
    adj[i, (i + 1) % n] = 1.0
    adj[(i + 1) % n, i] = 1.0
    return adj


def grid_adjacency(n: int) -> np.ndarray:
    rows = max(r for r in range(1, int(np.sqrt(n)) + 1) if n % r == 0)
    cols = n // rows
    adj = np.zeros((n, n))
    for v in range(n):
        r, c = divmod(v, cols)
        if c + 1 < cols:
            adj[v, v + 1] = adj[v + 1, v] = 1.0
        if r + 1 < rows:
            adj[v, v + cols] = adj[v + cols, v] = 1.0
    return adj


def _components(adj: np.ndarray) -> list[list[int]]:
    n = adj.shape[0]
    seen = np.zeros(n, dtype=bool)
    comps = []
    for s in range(n):
        if seen[s]:
            continue
        comp, queue = [], deque([s])
        seen[s] = True
        while queue:
            u = queue.popleft()
            comp.append(u)
            for v in np.flatnonzero(adj[u]):
                if not seen[v]:
                    seen[v] = True
                    queue.append(v)
        comps.append(comp)
    return comps


def geometric_adjacency(n: int, rng: np.random.Generator, radius: float | None = None) -> np.ndarray:
    """Random geometric graph on the unit square with Gaussian-kernel weights.

    Components are joined through their closest node pair so the graph is connected.
    """
    pts = rng.random((n, 2))
    dist = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    r = radius if radius is not None else np.sqrt(2.0 * np.log(n) / (np.pi * n))
    adj = np.where((dist < r) & (dist > 0), np.exp(-((dist / r) ** 2)), 0.0)
    comps = _components(adj)
    while len(comps) > 1:
        a, rest = comps[0], [v for c in comps[1:] for v in c]
        sub = dist[np.ix_(a, rest)]
        i, j = np.unravel_index(np.argmin(sub), sub.shape)
        u, v = a[i], rest[j]
        adj[u, v] = adj[v, u] = np.exp(-((dist[u, v] / r) ** 2))
        comps = _components(adj)
    return adj


def build_graph(spec: DomainSpec, rng: np.random.Generator) -> TrafficGraph:
    if spec.graph == "cycle":
        adj = cycle_adjacency(spec.n_nodes)
    elif spec.graph == "grid":
        adj = grid_adjacency(spec.n_nodes)
    else:
        adj = geometric_adjacency(spec.n_nodes, rng)
    return TrafficGraph(adj)


def bfs_depth(adj: np.ndarray, root: int = 0) -> np.ndarray:
    depth = np.full(adj.shape[0], -1, dtype=np.int64)
    depth[root] = 0
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for v in np.flatnonzero(adj[u]):
            if depth[v] < 0:
                depth[v] = depth[u] + 1
                queue.append(v)
    return depth


# -- series -------------------------------------------------------------------------------

def time_channels(n_steps: int, steps_per_day: int) -> tuple[np.ndarray, np.ndarray]:
    t = np.arange(n_steps)
    tod = (t % steps_per_day) / steps_per_day
    dow = ((t // steps_per_day) % DAYS_PER_WEEK) / DAYS_PER_WEEK
    return tod, dow


def synthesize(spec: DomainSpec) -> tuple[TrafficGraph, np.ndarray]:
    """Graph and ``(T, N, 3)`` series (value, time of day, day of week) for ``spec``.

    Each node replays a common daily profile shifted by ``delay_steps`` per BFS
    hop from node 0, so every tree edge carries the planted lag.
    """
    rng = np.random.default_rng(spec.seed)
    graph = build_graph(spec, rng)
    T, N, p = spec.n_steps, spec.n_nodes, spec.steps_per_day
    depth = bfs_depth(graph.adjacency)
    scale = rng.uniform(0.8, 1.2, size=N)
    tt = np.arange(T)[:, None] - depth[None, :] * spec.delay_steps  # (T, N)
    daily = np.sin(2 * np.pi * tt / p)
    weekly = 1.0 + spec.weekly * np.sin(2 * np.pi * tt / (DAYS_PER_WEEK * p))
    value = spec.amplitude * scale * (2.0 + daily * weekly)
    value = value + spec.trend * np.arange(T)[:, None] + rng.normal(0.0, spec.noise, size=(T, N))
    tod, dow = time_channels(T, p)
    series = np.stack([value, np.repeat(tod[:, None], N, 1), np.repeat(dow[:, None], N, 1)], axis=-1)
    return graph, series


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def generate_domain(spec: DomainSpec, out_dir) -> Path:
    """Write adjacency.csv, series.csv and meta.json for ``spec`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    graph, series = synthesize(spec)
    T, N, C = series.shape
    lines = ["src,dst,weight"]
    lines += [f"{a},{b},{_fmt(graph.adjacency[a, b])}" for a, b in graph.edges()]
    (out / "adjacency.csv").write_text("\n".join(lines) + "\n")
    header = [f"n{v}_{ch}" for v in range(N) for ch in CHANNELS]
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    flat = series.reshape(T, N * C)
    for row in flat:
        buf.write(",".join(_fmt(x) for x in row) + "\n")
    (out / "series.csv").write_text(buf.getvalue())
    meta = {
        "name": spec.name,
        "N": N,
        "T": T,
        "C_in": C,
        "steps_per_day": spec.steps_per_day,
        "channels": list(CHANNELS),
        "seed": spec.seed,
        "spec": asdict(spec),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


@dataclass
class LoadedDomain:
    name: str
    graph: TrafficGraph
    series: np.ndarray  # (T, N, C)
    meta: dict = field(default_factory=dict)

    @property
    def steps_per_day(self) -> int:
        return int(self.meta["steps_per_day"])


def load_dataset(path) -> LoadedDomain:
    root = Path(path)
    for fname in ("meta.json", "adjacency.csv", "series.csv"):
        if not (root / fname).is_file():
            raise FileNotFoundError(f"{root}: missing {fname}")
    meta = json.loads((root / "meta.json").read_text())
    N, T, C = int(meta["N"]), int(meta["T"]), int(meta["C_in"])
    adj = np.zeros((N, N))
    with open(root / "adjacency.csv", newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), start=2):
            a, b, w = int(row["src"]), int(row["dst"]), float(row["weight"])
            if not (0 <= a < N and 0 <= b < N):
                raise NodeIdError(f"adjacency.csv line {lineno}: node id outside [0, {N})")
            adj[a, b] = w
    if not np.all(np.isfinite(adj)):
        raise NonFiniteError("adjacency.csv: non-finite weight")
    bad = np.argwhere(adj != adj.T)
    if bad.size:
        a, b = bad[0]
        raise SymmetryError(f"adjacency.csv: weight({a},{b})={adj[a, b]} but weight({b},{a})={adj[b, a]}")
    with open(root / "series.csv", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    if len(header) != N * C:
        raise IngestionError(f"series.csv: expected {N * C} columns, found {len(header)}")
    if len(rows) != T:
        raise RowCountError(f"series.csv: expected {T} rows, found {len(rows)}")
    series = np.asarray(rows, dtype=np.float64).reshape(T, N, C)
    if not np.all(np.isfinite(series)):
        t, v, c = np.argwhere(~np.isfinite(series))[0]
        raise NonFiniteError(f"series.csv: non-finite value at row {t}, node {v}, channel {c}")
    try:
        graph = TrafficGraph(adj)
    except GraphError as exc:
        raise IngestionError(f"adjacency.csv: {exc}") from exc
    return LoadedDomain(str(meta.get("name", root.name)), graph, series, meta)


# -- windows ------------------------------------------------------------------------------

@dataclass
class WindowSet:
    ends: np.ndarray  # history covers [t-H, t), target [t, t+F)
    history: int
    horizon: int

    def __len__(self) -> int:
        return int(self.ends.size)


def make_windows(series, history: int, horizon: int, stride: int) -> WindowSet:
    T = np.shape(series)[0] if not np.isscalar(series) else int(series)
    if stride < 1 or history < 1 or horizon < 1:
        raise ContractError("history, horizon and stride must be positive")
    if T < history + horizon:
        raise ContractError(f"series of {T} steps cannot hold H={history} plus F={horizon}")
    return WindowSet(np.arange(history, T - horizon + 1, stride), history, horizon)


@dataclass
class WindowArrays:
    x: np.ndarray  # (W, H, N, C)
    y: np.ndarray  # (W, F, N) main channel
    ts: np.ndarray  # (W, 2) timestamp features at the last history step

    def __len__(self) -> int:
        return self.x.shape[0]

    def subset(self, idx) -> WindowArrays:
        return WindowArrays(self.x[idx], self.y[idx], self.ts[idx])


def gather_windows(series: np.ndarray, ws: WindowSet) -> WindowArrays:
    H, F = ws.history, ws.horizon
    x = np.stack([series[t - H:t] for t in ws.ends]) if len(ws) else np.zeros((0, H) + series.shape[1:])
    y = np.stack([series[t:t + F, :, 0] for t in ws.ends]) if len(ws) else np.zeros((0, F, series.shape[1]))
    ts = np.stack([series[t - 1, 0, 1:3] for t in ws.ends]) if len(ws) else np.zeros((0, 2))
    return WindowArrays(x, y, ts)


@dataclass
class DomainBundle:
    """One domain ready for the model: context plus train and test windows."""

    context: DomainContext
    train: WindowArrays
    test: WindowArrays
    index: int | None = None  # training-domain slot; None for a held-out domain


def prepare_domain(loaded: LoadedDomain, history: int, horizon: int, k_eig: int, max_lag: int,
                   train_fraction: float = 0.8, index: int | None = None,
                   workers: int = 1) -> DomainBundle:
    """Chronological split; lags come from the training part only."""
    series = loaded.series
    T = series.shape[0]
    cut = int(round(T * train_fraction))
    train_s, test_s = series[:cut], series[cut:]
    tau = build_delay_matrix(loaded.graph, train_s[..., 0], max_lag, workers=workers)
    phi = positional_features(loaded.graph, k_eig)
    ctx = DomainContext(loaded.name, loaded.graph, phi, tau)
    train = gather_windows(train_s, make_windows(train_s, history, horizon, horizon))
    if test_s.shape[0] >= history + horizon:
        test = gather_windows(test_s, make_windows(test_s, history, horizon, horizon))
    else:
        test = WindowArrays(np.zeros((0, history) + series.shape[1:]), np.zeros((0, horizon, series.shape[1])),
                            np.zeros((0, 2)))
    return DomainBundle(ctx, train, test, index)


def tiny_corpus(n_domains: int = 2, n_nodes: int = 6, n_steps: int = 48, seed: int = 0,
                history: int = 24, horizon: int = 12, k_eig: int = 3, max_lag: int = 4) -> list[DomainBundle]:
    """Small in-memory training domains for gradient checks and fast tests."""
    families = GRAPH_FAMILIES
    bundles = []
    for i in range(n_domains):
        spec = DomainSpec(f"tiny{i}", n_nodes=n_nodes, graph=families[i % len(families)],
                          steps_per_day=24, n_steps=n_steps, amplitude=2.0 + i, trend=0.01 * i,
                          delay_steps=1 + i, noise=0.1, seed=seed + i)
        graph, series = synthesize(spec)
        loaded = LoadedDomain(spec.name, graph, series, {"steps_per_day": spec.steps_per_day})
        bundles.append(prepare_domain(loaded, history, horizon, k_eig, max_lag, train_fraction=1.0,
                                      index=i))
    return bundles


def default_corpus(seed: int = 0) -> tuple[list[DomainSpec], DomainSpec]:
    """Three training domains plus one held-out domain, N=20 and one week each."""
    train = [
        DomainSpec("metro_cycle", graph="cycle", steps_per_day=288, amplitude=10.0, trend=0.001,
                   delay_steps=3, noise=0.5, weekly=0.3, seed=seed + 1),
        DomainSpec("metro_grid", graph="grid", steps_per_day=144, amplitude=25.0, trend=-0.002,
                   delay_steps=6, noise=1.25, weekly=0.2, seed=seed + 2),
        DomainSpec("metro_geo", graph="geometric", steps_per_day=224, amplitude=5.0, trend=0.0,
                   delay_steps=4, noise=0.25, weekly=0.4, seed=seed + 3),
    ]
    held_out = DomainSpec("metro_heldout", graph="geometric", steps_per_day=288, amplitude=15.0,
                          trend=0.0005, delay_steps=5, noise=0.75, weekly=0.25, seed=seed + 4)
    return train, held_out


__all__ = [
    "DomainBundle",
    "DomainSpec",
    "IngestionError",
    "LoadedDomain",
    "NodeIdError",
    "NonFiniteError",
    "RowCountError",
    "SymmetryError",
    "WindowArrays",
    "WindowSet",
    "default_corpus",
    "gather_windows",
    "generate_domain",
    "load_dataset",
    "make_windows",
    "prepare_domain",
    "synthesize",
    "tiny_corpus",
]
