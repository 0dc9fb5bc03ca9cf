"""The three-view forecasting model: spatial, temporal and delay DASSM blocks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dassm import DASSM, FusedSSMBlock, PredictHead, st_fusion
from .delay import DelayAdjuster, DelayMatrix, adjust_delay, delay_scan_plan, delay_sequences
from .numerics import Module, Tensor, concat, param, scatter_add
from .spatial import SpatialEncoder, TrafficGraph, bidirectional_spatial_scan, random_walk_paths
from .ssm import ContractError, ScanMethod
from .temporal import PatchEmbedding, num_patches, patchify, revin_normalize, temporal_scan

VIEWS = ("spatial", "temporal", "delay")
VARIANTS = ("damba", "fused")


@dataclass
class ModelConfig:
    d_model: int = 16
    d_state: int = 8
    k_eig: int = 8
    patch_len: int = 12
    stride: int = 12
    history: int = 48
    horizon: int = 48
    max_lag: int = 24
    delay_hidden: int = 8
    c_in: int = 3
    w1: float = 0.4
    w2: float = 0.6
    variant: str = "damba"
    scan: ScanMethod = "parallel"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.w1 <= 0 or self.w2 < 0:
            raise ContractError("fusion weights must satisfy w1 > 0, w2 >= 0")
        if self.n_patches < 3:
            raise ContractError(f"need at least 3 patches per window, got {self.n_patches}")

    @property
    def n_patches(self) -> int:
        return num_patches(self.history, self.patch_len, self.stride)


@dataclass
class DomainContext:
    """Parameter-free per-domain inputs: graph, eigenvector features and lags."""

    name: str
    graph: TrafficGraph
    phi: np.ndarray  # (N, k)
    tau: DelayMatrix

    @property
    def n(self) -> int:
        return self.graph.n


@dataclass
class ForwardOut:
    pred: Tensor  # (B, F, N) on the raw scale
    pred_norm: Tensor  # (B, N, F) before denormalization
    views: dict = field(default_factory=dict)  # view -> BlockOutput


class DambaST(Module):
    def __init__(self, cfg: ModelConfig, n_domains: int, rng: np.random.Generator):
        self.cfg = cfg
        self.n_domains = n_domains
        D = cfg.d_model
        self.embed = PatchEmbedding(cfg.c_in, D, cfg.patch_len, cfg.stride, rng)
        self.spatial_enc = SpatialEncoder(cfg.k_eig, D, rng)
        self.delay_adj = DelayAdjuster(cfg.delay_hidden, rng)
        # stored per-domain adapters, one list per view
        self.adapters = {v: [param(rng.normal(0.0, 1.0, size=D)) for _ in range(n_domains)]
                         for v in VIEWS}
        if cfg.variant == "damba":
            self.blocks = {v: DASSM(n_domains, D, cfg.d_state, rng, cfg.w1, cfg.w2, cfg.scan)
                           for v in VIEWS}
        else:
            self.blocks = {v: FusedSSMBlock(D, cfg.d_state, rng, cfg.scan) for v in VIEWS}
        self.head = PredictHead(cfg.n_patches, 2 * D, cfg.horizon, rng)

    def invalidate_cache(self) -> None:
        for b in self.blocks.values():
            b.invalidate_cache()

    def adapter_for(self, view: str, domain: int | None) -> Tensor:
        if domain is None:
            return Tensor(np.mean([a.data for a in self.adapters[view]], axis=0))
        return self.adapters[view][domain]

    def bank(self, view: str) -> list[Tensor]:
        return list(self.adapters[view])

    def _perm(self, rng: np.random.Generator | None, domain: int | None) -> np.ndarray | None:
        m = self.n_domains + (1 if domain is None else 0)
        return None if rng is None else rng.permutation(m)

    def __call__(self, x: np.ndarray, ts: np.ndarray, ctx: DomainContext, domain: int | None,
                 rng: np.random.Generator | None = None, walk_seed: int = 0) -> ForwardOut:
        """Forecast from raw histories ``x`` ``(B, H, N, C_in)`` and timestamps ``ts`` ``(B, 2)``.

        ``rng`` drives random walks and adapter shuffles during training; without
        it walks come from ``walk_seed`` and the shuffle is the identity.
        """
        cfg = self.cfg
        x = np.asarray(x, dtype=np.float64)
        B, H, N, C = x.shape
        if H != cfg.history or C != cfg.c_in or N != ctx.n:
            raise ContractError(f"batch shape {x.shape} does not fit the model/domain")
        L, D = cfg.n_patches, cfg.d_model
        walk_rng = rng if rng is not None else np.random.default_rng(walk_seed)

        xn, stats = revin_normalize(np.swapaxes(x, 1, 2))  # (B, N, H, C)
        tokens = patchify(xn, self.embed)  # (B, N, L, D)
        views = {}

        # spatial: node tokens along random walks, both directions through one block call
        s_tok = self.spatial_enc(ctx.phi)
        walks = random_walk_paths(ctx.graph, L - 2, walk_rng)
        fwd, bwd = bidirectional_spatial_scan(walks, s_tok, self.adapter_for("spatial", domain))
        out_s = self.blocks["spatial"](concat([fwd.tokens, bwd.tokens], axis=0), domain,
                                       self.bank("spatial"), self._perm(rng, domain))
        y_s = out_s.y[:N, 1] + out_s.y[N:, L - 2]  # each node's own path start, both directions
        views["spatial"] = out_s

        # temporal: first L-1 patches plus the adapter
        t_seq = temporal_scan(tokens[:, :, : L - 1], self.adapter_for("temporal", domain))
        out_t = self.blocks["temporal"](t_seq.tokens.reshape(B * N, L, D), domain,
                                        self.bank("temporal"), self._perm(rng, domain))
        y_t = out_t.y.reshape(B, N, L, D)
        views["temporal"] = out_t

        # delay: walks of L-1 nodes whose patch index advances by the adjusted lag
        adj = adjust_delay(ctx.tau, self.delay_adj, ts)
        d_walks = random_walk_paths(ctx.graph, L - 1, walk_rng)
        plan = delay_scan_plan(d_walks, adj.lags, cfg.patch_len, L, range(L - 1))
        d_seq = delay_sequences(tokens, plan, self.adapter_for("delay", domain), adj.lags_st,
                                cfg.patch_len)
        P, S, K = plan.nodes.shape[1:]
        out_d = self.blocks["delay"](d_seq.tokens.reshape(B * P * S, K + 1, D), domain,
                                     self.bank("delay"), self._perm(rng, domain))
        views["delay"] = out_d
        y_d = self._scatter_delay(out_d.y.reshape(B, P, S, K + 1, D)[..., :K, :], plan, (B, N, L, D))

        z = st_fusion(y_t, y_d, y_s)
        pred_norm = self.head(z)  # (B, N, F)
        mean, std = stats.mean[..., 0], stats.std[..., 0]  # (B, N, 1)
        pred = (pred_norm * std + mean).swapaxes(1, 2)
        return ForwardOut(pred, pred_norm, views)

    @staticmethod
    def _scatter_delay(y, plan, shape) -> Tensor:
        """Average delay outputs back onto their (batch, node, patch) slots."""
        B = shape[0]
        sel = np.nonzero(plan.valid)
        b = np.broadcast_to(np.arange(B)[:, None, None, None], plan.valid.shape)[sel]
        idx = (b, plan.nodes[sel], plan.patches[sel])
        summed = scatter_add(y[sel], idx, shape)
        counts = np.zeros(shape[:-1])
        np.add.at(counts, idx, 1.0)
        return summed / np.maximum(counts, 1.0)[..., None]

    # -- regularizer inputs ---------------------------------------------------------------

    def aligned_parameters(self, domain: int) -> tuple[list[Tensor], list[Tensor]]:
        """Role-matched (domain learner, shared learner) tensors over all three views."""
        if self.cfg.variant != "damba":
            raise ContractError("aligned parameters exist only in the DASSM variant")
        theta_d, theta_c = [], []
        for v in VIEWS:
            d_params, c_params = self.blocks[v].aligned_parameters(domain)
            theta_d += d_params
            theta_c += c_params
        return theta_d, theta_c

    def discrimination_parameters(self, domain: int) -> dict[str, Tensor]:
        out = {}
        if self.cfg.variant != "damba":
            return out
        for v in VIEWS:
            for name, p in self.blocks[v].disc[domain].named_parameters():
                out[f"blocks.{v}.disc.{domain}.{name}"] = p
        return out


__all__ = ["DambaST", "DomainContext", "ForwardOut", "ModelConfig", "VARIANTS", "VIEWS"]
