"""Domain-adaptive selective SSM blocks.

Each block owns one discrimination SSM per training domain, a shared
forward/backward SSM pair over the domain-adapter sequence, and one shared
commonalities SSM that reads token representations projected onto the
refreshed adapter.  The two branches are fused linearly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    Linear,
    Module,
    Tensor,
    as_tensor,
    broadcast_to,
    concat,
    flip,
    matmul,
    no_grad,
    sqrt,
    stack,
)
from .ssm import ContractError, ScanMethod, SelectiveSSM

PROJ_MIN_NORM = 1e-8
SEQ_RMS_EPS = 1e-12

SSM_ROLES = ("A", "w_b", "w_c", "delta_proj.weight", "delta_proj.bias")


def project_onto_adapter(R, t) -> Tensor:
    """Rank-one projection of every row of ``R`` (..., D) onto span(t)."""
    R, t = as_tensor(R), as_tensor(t)
    sq = float(np.dot(t.data, t.data))
    if np.sqrt(sq) <= PROJ_MIN_NORM:
        raise ContractError("adapter norm too small to define a projection")
    tt = (t * t).sum()
    coef = matmul(R, t.reshape(-1, 1)) / tt
    return coef * t


def prompt_residual(R, t) -> Tensor:
    """The additive prompt P with R + P == proj(R, t)."""
    return project_onto_adapter(R, t) - as_tensor(R)


def sequence_rms_normalize(x, eps: float = SEQ_RMS_EPS) -> Tensor:
    """Scale each ``(L, D)`` sequence to unit root-mean-square; zero stays zero.

    A selective SSM is cubic in its input scale, so the small outputs of the
    first-stage learner would otherwise barely drive the shared learner.
    """
    x = as_tensor(x)
    return x / sqrt((x * x).mean(axis=(-2, -1), keepdims=True) + eps)


def ssm_role_tensors(ssm: SelectiveSSM) -> list[Tensor]:
    """Parameters compared between learners, ordered as ``SSM_ROLES``."""
    return [ssm.A(), ssm.w_b, ssm.w_c, ssm.delta_proj.weight, ssm.delta_proj.bias]


def mean_ssm(ssms: list[SelectiveSSM], rng: np.random.Generator) -> SelectiveSSM:
    """A frozen SSM whose parameters are elementwise means (A averaged before the log)."""
    out = SelectiveSSM(ssms[0].d_model, ssms[0].d_state, rng)
    with no_grad():
        a_mean = np.mean([-np.exp(s.a_log.data) for s in ssms], axis=0)
        out.a_log = Tensor(np.log(-a_mean))
        out.w_b = Tensor(np.mean([s.w_b.data for s in ssms], axis=0))
        out.w_c = Tensor(np.mean([s.w_c.data for s in ssms], axis=0))
        out.delta_proj.weight = Tensor(np.mean([s.delta_proj.weight.data for s in ssms], axis=0))
        out.delta_proj.bias = Tensor(np.mean([s.delta_proj.bias.data for s in ssms], axis=0))
    return out


@dataclass
class BlockOutput:
    y: Tensor  # (S, L, D) fused representation
    r_d: Tensor | None = None  # discriminative representation
    r_c: Tensor | None = None  # common representation
    adapter_out: Tensor | None = None  # refreshed adapter (D,)


class DASSM(Module):
    def __init__(self, n_domains: int, d_model: int, d_state: int, rng: np.random.Generator,
                 w1: float = 0.4, w2: float = 0.6, method: ScanMethod = "parallel"):
        if n_domains < 1:
            raise ContractError("DASSM needs at least one domain")
        self.n_domains, self.d_model, self.d_state = n_domains, d_model, d_state
        self.w1, self.w2, self.method = float(w1), float(w2), method
        self.disc = [SelectiveSSM(d_model, d_state, rng) for _ in range(n_domains)]
        self.adapter_fwd = SelectiveSSM(d_model, d_state, rng)
        self.adapter_bwd = SelectiveSSM(d_model, d_state, rng)
        self.common = SelectiveSSM(d_model, d_state, rng)
        self.fuse_d = Linear(d_model, d_model, rng)
        self.fuse_c = Linear(d_model, d_model, rng)
        self.init_cross_state()
        self._zero_shot: SelectiveSSM | None = None

    def init_cross_state(self) -> None:
        """Set the shared state matrix to the mean of the domain state matrices."""
        a_mean = np.mean([-np.exp(s.a_log.data) for s in self.disc], axis=0)
        self.common.a_log.data = np.log(-a_mean)

    def invalidate_cache(self) -> None:
        self._zero_shot = None

    def discrimination_learner(self, domain: int | None) -> SelectiveSSM:
        if domain is None:
            if self._zero_shot is None:
                self._zero_shot = mean_ssm(self.disc, np.random.default_rng(0))
            return self._zero_shot
        if not 0 <= domain < self.n_domains:
            raise KeyError(f"no discrimination learner for domain {domain}")
        return self.disc[domain]

    def discrimination_forward(self, seq, domain: int | None) -> tuple[Tensor, Tensor]:
        """R_D for ``seq`` (S, L, D) and the refreshed adapter: mean final-position output."""
        r_d, _ = self.discrimination_learner(domain)(as_tensor(seq), method=self.method)
        return r_d, r_d[..., -1, :].reshape(-1, self.d_model).mean(axis=0)

    def adapter_learner_forward(self, adapters, perm: np.ndarray | None = None) -> Tensor:
        """Bidirectional SSM over the (shuffled) adapter sequence, returned in domain order."""
        adapters = as_tensor(adapters)
        M = adapters.shape[0]
        perm = np.arange(M) if perm is None else np.asarray(perm)
        x = adapters[perm].reshape(1, M, self.d_model)
        yf, _ = self.adapter_fwd(x, method=self.method)
        yb, _ = self.adapter_bwd(flip(x, axis=1), method=self.method)
        mixed = (yf + flip(yb, axis=1)).reshape(M, self.d_model)
        return mixed[np.argsort(perm)]

    def commonalities_forward(self, r_proj) -> Tensor:
        r_c, _ = self.common(as_tensor(r_proj), method=self.method)
        return r_c

    def fuse(self, r_d, r_c) -> Tensor:
        return self.w1 * self.fuse_d(r_d) + self.w2 * self.fuse_c(r_c)

    def __call__(self, seq, domain: int | None, bank: list[Tensor],
                 perm: np.ndarray | None = None) -> BlockOutput:
        """Full block on sequences ``(S, L, D)`` of one domain.

        ``bank`` holds the stored adapters of the training domains.  For a
        training domain its row is replaced by the refreshed adapter; an unseen
        domain (``domain=None``) is appended after the bank.
        """
        r_d, refreshed = self.discrimination_forward(seq, domain)
        rows = list(bank)
        if domain is None:
            rows.append(refreshed)
            slot = len(rows) - 1
        else:
            rows[domain] = refreshed
            slot = domain
        if perm is not None and len(perm) != len(rows):
            raise ContractError("permutation length does not match the adapter sequence")
        mixed = self.adapter_learner_forward(stack(rows, axis=0), perm)
        r_proj = sequence_rms_normalize(project_onto_adapter(r_d, mixed[slot]))
        r_c = self.commonalities_forward(r_proj)
        return BlockOutput(self.fuse(r_d, r_c), r_d, r_c, refreshed)

    def aligned_parameters(self, domain: int) -> tuple[list[Tensor], list[Tensor]]:
        return ssm_role_tensors(self.disc[domain]), ssm_role_tensors(self.common)


class FusedSSMBlock(Module):
    """Ablation: one selective SSM shared by every domain plus a linear readout."""

    def __init__(self, d_model: int, d_state: int, rng: np.random.Generator,
                 method: ScanMethod = "parallel"):
        self.d_model = d_model
        self.method = method
        self.ssm = SelectiveSSM(d_model, d_state, rng)
        self.out = Linear(d_model, d_model, rng)

    def invalidate_cache(self) -> None:
        pass

    def __call__(self, seq, domain: int | None, bank: list[Tensor],
                 perm: np.ndarray | None = None) -> BlockOutput:
        y, _ = self.ssm(as_tensor(seq), method=self.method)
        return BlockOutput(self.out(y))


def st_fusion(y_t, y_d, y_s) -> Tensor:
    """Concatenate (Y_T + Y_D) with the node-level spatial term along channels.

    ``y_t``/``y_d`` are ``(..., N, L, D)``; ``y_s`` is ``(N, D)`` or already
    ``(..., N, L, D)`` and is broadcast over the leading and temporal axes.
    """
    y_t, y_d, y_s = as_tensor(y_t), as_tensor(y_d), as_tensor(y_s)
    if y_t.shape != y_d.shape:
        raise ContractError(f"temporal {y_t.shape} and delay {y_d.shape} shapes differ")
    if y_s.ndim == 2:
        N, D = y_s.shape
        if y_t.shape[-3] != N:
            raise ContractError("spatial term is not node-aligned")
        y_s = y_s.reshape(N, 1, D)
    y_s = broadcast_to(y_s, y_t.shape[:-1] + (y_s.shape[-1],))
    return concat([y_t + y_d, y_s], axis=-1)


class PredictHead(Module):
    """Per node: flatten (L x 2D) and map linearly to F normalized outputs."""

    def __init__(self, n_positions: int, width: int, horizon: int, rng: np.random.Generator):
        self.n_positions, self.width, self.horizon = n_positions, width, horizon
        self.proj = Linear(n_positions * width, horizon, rng)

    def __call__(self, z) -> Tensor:
        z = as_tensor(z)
        lead = z.shape[:-2]
        return self.proj(z.reshape(lead + (self.n_positions * self.width,)))


def a_matrix(ssm: SelectiveSSM) -> np.ndarray:
    return -np.exp(ssm.a_log.data)


__all__ = [
    "BlockOutput",
    "DASSM",
    "FusedSSMBlock",
    "PredictHead",
    "SSM_ROLES",
    "a_matrix",
    "mean_ssm",
    "project_onto_adapter",
    "prompt_residual",
    "sequence_rms_normalize",
    "ssm_role_tensors",
    "st_fusion",
]
