"""Graph positional encodings and the bidirectional spatial scan."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Linear, Module, Tensor, as_tensor, broadcast_to, concat, flip
from .ssm import ContractError

TRIVIAL_EIGENVALUE = 1e-8
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100


class GraphError(ValueError):
    pass


@dataclass
class TrafficGraph:
    """Symmetric non-negative weighted adjacency over ``n`` sensors."""

    adjacency: np.ndarray
    self_loops: bool = False

    def __post_init__(self):
        adj = np.asarray(self.adjacency, dtype=np.float64)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise GraphError(f"adjacency must be square, got {adj.shape}")
        if np.any(adj < 0):
            raise GraphError("adjacency weights must be non-negative")
        if not np.allclose(adj, adj.T, rtol=0.0, atol=1e-12):
            i, j = np.argwhere(~np.isclose(adj, adj.T, rtol=0.0, atol=1e-12))[0]
            raise GraphError(f"adjacency is not symmetric at ({i}, {j})")
        if not self.self_loops and np.any(np.diag(adj) != 0):
            raise GraphError("non-zero diagonal without declared self-loops")
        self.adjacency = adj

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @property
    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    def edges(self) -> list[tuple[int, int]]:
        """Ordered (src, dst) pairs with positive weight, row-major."""
        src, dst = np.nonzero(self.adjacency)
        return list(zip(src.tolist(), dst.tolist()))

    @classmethod
    def from_edges(cls, n: int, edges, self_loops: bool = False) -> TrafficGraph:
        adj = np.zeros((n, n))
        for a, b, w in edges:
            adj[a, b] = w
            adj[b, a] = w
        return cls(adj, self_loops=self_loops)


def normalized_laplacian(g: TrafficGraph) -> np.ndarray:
    """I - D^-1/2 A D^-1/2."""
    deg = g.degrees
    if np.any(deg <= 0):
        raise GraphError(f"isolated node(s): {np.flatnonzero(deg <= 0).tolist()}")
    inv = 1.0 / np.sqrt(deg)
    return np.eye(g.n) - inv[:, None] * g.adjacency * inv[None, :]


def jacobi_eigh(mat: np.ndarray, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS):
    """Cyclic Jacobi rotations for a symmetric matrix.

    Returns ascending eigenvalues and column eigenvectors.
    """
    a = np.array(mat, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n) or not np.allclose(a, a.T, atol=1e-12):
        raise ContractError("jacobi_eigh needs a symmetric square matrix")
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum((a - np.diag(np.diag(a))) ** 2))
        if off < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < 1e-30:  # negligible next to the stopping tolerance
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.copysign(1.0, theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    vecs = vecs.copy()
    for j in range(vecs.shape[1]):
        nz = np.flatnonzero(np.abs(vecs[:, j]) > 1e-12)
        if nz.size and vecs[nz[0], j] < 0:
            vecs[:, j] = -vecs[:, j]
    return vecs


def laplacian_eigs(mat: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """The ``k`` smallest eigenpairs with eigenvalue above 1e-8.

    Fewer than ``k`` columns come back when the spectrum has fewer non-trivial
    values.  Each eigenvector's first non-zero entry is positive.
    """
    n = mat.shape[0]
    if k >= n:
        raise ContractError(f"k={k} must be smaller than N={n}")
    w, v = jacobi_eigh(mat)
    keep = np.flatnonzero(w > TRIVIAL_EIGENVALUE)[:k]
    return w[keep], _fix_signs(v[:, keep])


def positional_features(g: TrafficGraph, k: int) -> np.ndarray:
    """Laplacian eigenvector features, zero-padded to exactly ``k`` columns."""
    k_eff = min(k, g.n - 1)
    _, phi = laplacian_eigs(normalized_laplacian(g), k_eff)
    out = np.zeros((g.n, k))
    out[:, : phi.shape[1]] = phi
    return out


def random_walk_paths(g: TrafficGraph, length: int, rng: np.random.Generator) -> np.ndarray:
    """One weighted random walk of ``length`` nodes from every node -> (N, length).

    A node without neighbours other than itself repeats in place.
    """
    if length < 1:
        raise ContractError("walk length must be >= 1")
    adj = g.adjacency
    n = g.n
    paths = np.empty((n, length), dtype=np.int64)
    paths[:, 0] = np.arange(n)
    cum = np.cumsum(adj, axis=1)
    totals = cum[:, -1]
    for step in range(1, length):
        cur = paths[:, step - 1]
        u = rng.random(n) * totals[cur]
        nxt = np.array([np.searchsorted(cum[c], u_i, side="right") for c, u_i in zip(cur, u)])
        nxt = np.minimum(nxt, n - 1)
        paths[:, step] = np.where(totals[cur] > 0, nxt, cur)
    return paths


@dataclass
class ScanSequence:
    """Token sequence ``(..., L, D)`` plus per-position provenance.

    ``nodes``/``patches`` are ``(..., L)`` integer arrays; -1 marks an adapter slot
    (and, for ``patches``, views that carry no patch index).
    """

    tokens: Tensor
    nodes: np.ndarray
    patches: np.ndarray
    kind: str = ""
    adapter_positions: tuple[int, ...] = field(default_factory=tuple)

    @property
    def length(self) -> int:
        return self.tokens.shape[-2]


def bidirectional_spatial_scan(path, S, adapter) -> tuple[ScanSequence, ScanSequence]:
    """[adapter; s_a..s_g; adapter] and [adapter; s_g..s_a; adapter].

    ``path`` may be one path ``(L-2,)`` or a stack of paths ``(P, L-2)``.
    """
    S, adapter = as_tensor(S), as_tensor(adapter)
    path = np.asarray(path, dtype=np.int64)
    lead = path.shape[:-1]
    D = S.shape[-1]
    ad = broadcast_to(adapter.reshape((1,) * len(lead) + (1, D)), lead + (1, D))
    interior = S[path]
    pad = -np.ones(lead + (1,), dtype=np.int64)
    fwd_nodes = np.concatenate([pad, path, pad], axis=-1)
    bwd_nodes = np.concatenate([pad, path[..., ::-1], pad], axis=-1)
    L = path.shape[-1] + 2
    adapters = (0, L - 1)
    fwd = ScanSequence(concat([ad, interior, ad], axis=-2), fwd_nodes, -np.ones_like(fwd_nodes),
                       "spatial_forward", adapters)
    bwd = ScanSequence(concat([ad, flip(interior, axis=-2), ad], axis=-2), bwd_nodes,
                       -np.ones_like(bwd_nodes), "spatial_backward", adapters)
    return fwd, bwd


class SpatialEncoder(Module):
    """Linear map from k eigenvector features to D-dimensional node tokens."""

    def __init__(self, k: int, d_model: int, rng: np.random.Generator):
        self.proj = Linear(k, d_model, rng)

    def __call__(self, phi: np.ndarray) -> Tensor:
        return self.proj(Tensor(phi))
