"""Instance normalization, patch tokens and the temporal scan."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Module, Tensor, as_tensor, broadcast_to, concat, param
from .spatial import ScanSequence
from .ssm import ContractError

REVIN_EPS = 1e-5


@dataclass
class RevinState:
    mean: np.ndarray  # (..., 1, C)
    std: np.ndarray  # (..., 1, C), already clamped to >= eps
    eps: float = REVIN_EPS


def revin_normalize(series: np.ndarray, eps: float = REVIN_EPS) -> tuple[np.ndarray, RevinState]:
    """Per-channel z-score over the time axis (second to last) of ``(..., T, C)``.

    Uses the population standard deviation, clamped below at ``eps``.
    """
    x = np.asarray(series, dtype=np.float64)
    if x.shape[-2] < 2:
        raise ContractError("instance normalization needs at least two time steps")
    mean = x.mean(axis=-2, keepdims=True)
    std = np.maximum(x.std(axis=-2, keepdims=True), eps)
    return (x - mean) / std, RevinState(mean, std, eps)


def revin_denormalize(pred, state: RevinState, channel: int | None = None):
    """``pred * std + mean``; ``channel`` selects one channel's statistics."""
    mean, std = state.mean, state.std
    if channel is not None:
        mean, std = mean[..., channel:channel + 1], std[..., channel:channel + 1]
    try:
        np.broadcast_shapes(np.shape(getattr(pred, "data", pred)), mean.shape)
    except ValueError as exc:
        raise ContractError(f"prediction shape {np.shape(getattr(pred, 'data', pred))} "
                            f"does not match statistics {mean.shape}") from exc
    if isinstance(pred, Tensor):
        return pred * std + mean
    return np.asarray(pred) * std + mean


def num_patches(T: int, patch_len: int, stride: int) -> int:
    if T < patch_len:
        raise ContractError(f"series of length {T} is shorter than patch length {patch_len}")
    return (T - patch_len) // stride + 1


class PatchEmbedding(Module):
    """Strided 1-D convolution; weights laid out (D, C_in, P)."""

    def __init__(self, c_in: int, d_model: int, patch_len: int, stride: int,
                 rng: np.random.Generator | None = None):
        if not patch_len >= stride >= 1:
            raise ContractError("patch embedding needs P >= S >= 1")
        self.c_in, self.d_model, self.patch_len, self.stride = c_in, d_model, patch_len, stride
        fan_in = c_in * patch_len
        init = (rng.uniform(-1, 1, size=(d_model, c_in, patch_len)) / np.sqrt(fan_in)
                if rng is not None else np.zeros((d_model, c_in, patch_len)))
        self.weight = param(init)
        self.bias = param(np.zeros(d_model))


def patchify(series, emb: PatchEmbedding) -> Tensor:
    """``(..., T, C_in)`` -> ``(..., L, D)`` with L = floor((T - P)/S) + 1."""
    if isinstance(series, Tensor) and series.requires_grad:
        raise ContractError("patchify treats its input as data")
    x = np.asarray(getattr(series, "data", series), dtype=np.float64)
    T, C = x.shape[-2], x.shape[-1]
    if C != emb.c_in:
        raise ContractError(f"expected {emb.c_in} channels, got {C}")
    L = num_patches(T, emb.patch_len, emb.stride)
    starts = np.arange(L) * emb.stride
    idx = starts[:, None] + np.arange(emb.patch_len)[None, :]
    windows = np.swapaxes(x[..., idx, :], -1, -2)  # (..., L, C, P)
    flat = windows.reshape(windows.shape[:-2] + (C * emb.patch_len,))
    w = emb.weight.reshape(emb.d_model, C * emb.patch_len).T
    return Tensor(flat) @ w + emb.bias


def temporal_scan(tokens, adapter) -> ScanSequence:
    """Append the temporal adapter after the patch tokens ``(..., L-1, D)``."""
    tokens, adapter = as_tensor(tokens), as_tensor(adapter)
    if tokens.shape[-2] < 1:
        raise ContractError("temporal scan needs at least one patch")
    lead = tokens.shape[:-2]
    D = tokens.shape[-1]
    ad = broadcast_to(adapter.reshape((1,) * len(lead) + (1, D)), lead + (1, D))
    n = tokens.shape[-2]
    patches = np.broadcast_to(np.append(np.arange(n), -1), lead + (n + 1,))
    return ScanSequence(concat([tokens, ad], axis=-2), -np.ones_like(patches), patches,
                        "temporal", (n,))
