"""Diagonal selective state-space layer.

Shapes follow one convention throughout: inputs ``x`` are ``(..., L, D)``,
discretized transitions ``abar``/``bbar`` are ``(..., L, D, N)``, readouts ``c``
are ``(..., L, N)`` and hidden states are ``(..., D, N)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .numerics import Linear, Module, Tensor, as_tensor, concat, custom_op, exp, expm1_over_x, param, softplus
from .numerics.tensor import _unbroadcast

ScanMethod = Literal["sequential", "parallel"]

# |delta * A| below this switches B-bar to its series expansion
SERIES_THRESHOLD = 1e-6


class ContractError(ValueError):
    """A precondition of an operation was violated."""


# -- discretization -----------------------------------------------------------------

def discretize_zoh(A, B, delta) -> tuple[Tensor, Tensor]:
    """Zero-order hold for a diagonal state matrix.

    ``A`` holds the diagonal, ``B`` and ``delta`` broadcast against it.
    Returns ``(exp(delta*A), (delta*A)^-1 (exp(delta*A) - 1) * delta * B)``.
    """
    A, B, delta = as_tensor(A), as_tensor(B), as_tensor(delta)
    if np.any(delta.data <= 0):
        raise ContractError("discretize_zoh needs delta > 0")
    z = delta * A
    return exp(z), expm1_over_x(z) * delta * B


@dataclass
class DiscretizedStep:
    """Per-step transition ``abar``, input map ``bbar`` and readout ``c``."""

    abar: Tensor
    bbar: Tensor
    c: Tensor

    @property
    def length(self) -> int:
        return self.abar.shape[-3]


# -- scan kernels (time on axis 0) ------------------------------------------------------

def compose(later: tuple, earlier: tuple) -> tuple:
    """(a2, b2) o (a1, b1) = (a2 a1, a2 b1 + b2): apply ``earlier`` first."""
    a2, b2 = later
    a1, b1 = earlier
    return a2 * a1, a2 * b1 + b2


def _scan_sequential_np(a: np.ndarray, b: np.ndarray, h0: np.ndarray) -> np.ndarray:
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    h = np.broadcast_to(h0, out.shape[1:])
    for t in range(a.shape[0]):
        h = a[t] * h + b[t]
        out[t] = h
    return out


def _scan_parallel_np(a: np.ndarray, b: np.ndarray, h0: np.ndarray) -> np.ndarray:
    """Blelloch up-sweep/down-sweep over (a, b) pairs, padded to a power of two."""
    shape = np.broadcast_shapes(a.shape, b.shape)
    L = shape[0]
    n = 1 << max(L - 1, 0).bit_length()
    ea = np.ones((n,) + shape[1:])
    eb = np.zeros((n,) + shape[1:])
    ea[:L] = a
    eb[:L] = b
    eb[0] = ea[0] * h0 + eb[0]
    A, B = ea.copy(), eb.copy()
    d = 1
    while d < n:
        left, right = slice(d - 1, n, 2 * d), slice(2 * d - 1, n, 2 * d)
        B[right] = A[right] * B[left] + B[right]
        A[right] = A[right] * A[left]
        d *= 2
    A[n - 1] = 1.0
    B[n - 1] = 0.0
    d = n // 2
    while d >= 1:
        left, right = slice(d - 1, n, 2 * d), slice(2 * d - 1, n, 2 * d)
        ta, tb = A[left].copy(), B[left].copy()
        A[left] = A[right]
        B[left] = B[right]
        B[right] = ta * B[right] + tb
        A[right] = ta * A[right]
        d //= 2
    # A, B now hold exclusive prefixes; fold in each element for the inclusive scan
    return (ea[:L] * B[:L] + eb[:L]).copy()


_KERNELS = {"sequential": _scan_sequential_np, "parallel": _scan_parallel_np}


def linear_recurrence(a, b, h0=None, method: ScanMethod = "parallel") -> Tensor:
    """All states of h_t = a_t * h_{t-1} + b_t, differentiable in a, b and h0.

    ``a`` and ``b`` are ``(..., L, D, N)``; the result has the broadcast shape.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-3] != b.shape[-3]:
        raise ContractError(f"length mismatch: {a.shape[-3]} vs {b.shape[-3]}")
    kernel = _KERNELS[method]
    out_shape = np.broadcast_shapes(a.shape, b.shape)
    state_shape = out_shape[:-3] + out_shape[-2:]
    if h0 is None:
        h0 = Tensor(np.zeros(state_shape))
    h0 = as_tensor(h0)
    at = np.moveaxis(np.broadcast_to(a.data, out_shape), -3, 0)
    bt = np.moveaxis(np.broadcast_to(b.data, out_shape), -3, 0)
    Ht = kernel(at, bt, h0.data)
    a_shape, b_shape, h_shape = a.shape, b.shape, h0.shape

    def bw(g):
        gt = np.moveaxis(g, -3, 0)
        a_next = np.concatenate([np.zeros_like(at[:1]), at[:0:-1]], axis=0)
        adj = kernel(a_next, gt[::-1], np.zeros(gt.shape[1:]))[::-1]
        prev = np.concatenate([np.broadcast_to(h0.data, Ht.shape[1:])[None], Ht[:-1]], axis=0)
        ga = np.moveaxis(adj * prev, 0, -3)
        gb = np.moveaxis(adj, 0, -3)
        gh0 = at[0] * adj[0]
        return _unbroadcast(ga, a_shape), _unbroadcast(gb, b_shape), _unbroadcast(gh0, h_shape)

    return custom_op(np.moveaxis(Ht, 0, -3), (a, b, h0), bw, f"scan_{method}")


def _check_steps(steps: DiscretizedStep, x: Tensor) -> None:
    if steps.length != x.shape[-2]:
        raise ContractError(f"steps cover {steps.length} positions but x has {x.shape[-2]}")


def _scan(steps: DiscretizedStep, x, h0, method: ScanMethod) -> tuple[Tensor, Tensor]:
    x = as_tensor(x)
    _check_steps(steps, x)
    xb = x.reshape(x.shape + (1,))
    states = linear_recurrence(steps.abar, steps.bbar * xb, h0, method)
    c = steps.c.reshape(steps.c.shape[:-1] + (1,) + steps.c.shape[-1:])
    y = (states * c).sum(axis=-1)
    return y, states[..., -1, :, :]


def ssm_scan_sequential(steps: DiscretizedStep, x, h0=None) -> tuple[Tensor, Tensor]:
    """Exact-order recurrence; returns outputs ``(..., L, D)`` and the last state."""
    return _scan(steps, x, h0, "sequential")


def ssm_scan_parallel(steps: DiscretizedStep, x, h0=None) -> tuple[Tensor, Tensor]:
    """Same result as :func:`ssm_scan_sequential` via the associative tree scan."""
    return _scan(steps, x, h0, "parallel")


def conv_kernel(abar, bbar, c, length: int) -> np.ndarray:
    """K_k = C Abar^k Bbar for k < length, one column per channel -> (length, D)."""
    abar, bbar, c = (np.asarray(getattr(v, "data", v), dtype=np.float64) for v in (abar, bbar, c))
    if abar.ndim != 2 or bbar.ndim != 2 or c.ndim != 1:
        raise ContractError("convolution form needs time-invariant (D, N) transitions and an (N,) readout")
    powers = abar[None] ** np.arange(length)[:, None, None]
    return np.einsum("kdn,dn,n->kd", powers, bbar, c)


def conv_kernel_apply(abar, bbar, c, x) -> np.ndarray:
    """Causal convolution y = x * K for a time-invariant system; x is (L, D)."""
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    L, D = x.shape
    K = conv_kernel(abar, bbar, c, L)
    return np.stack([np.convolve(x[:, d], K[:, d])[:L] for d in range(D)], axis=1)


# -- the selective layer ---------------------------------------------------------------

class SelectiveSSM(Module):
    """Input-dependent B_t, C_t, Delta_t over a diagonal, strictly negative A.

    A = -exp(a_log) per channel and state; the skip term is omitted.
    """

    def __init__(self, d_model: int, d_state: int, rng: np.random.Generator,
                 dt_range: tuple[float, float] = (0.05, 0.5)):
        self.d_model, self.d_state = d_model, d_state
        self.a_log = param(np.log(np.tile(np.arange(1, d_state + 1, dtype=float), (d_model, 1))))
        self.w_b = param(rng.normal(0.0, d_model ** -0.5, size=(d_model, d_state)))
        self.w_c = param(rng.normal(0.0, d_model ** -0.5, size=(d_model, d_state)))
        self.delta_proj = Linear(d_model, d_model, rng, scale=0.1 * d_model ** -0.5)
        dt = np.exp(rng.uniform(np.log(dt_range[0]), np.log(dt_range[1]), size=d_model))
        self.delta_proj.bias.data = dt + np.log(-np.expm1(-dt))  # softplus^-1(dt)

    def A(self) -> Tensor:
        return -exp(self.a_log)

    def selective_params(self, x) -> DiscretizedStep:
        x = as_tensor(x)
        B = x @ self.w_b
        C = x @ self.w_c
        delta = softplus(self.delta_proj(x))
        d4 = delta.reshape(delta.shape + (1,))
        abar, bbar = discretize_zoh(self.A(), B.reshape(B.shape[:-1] + (1,) + B.shape[-1:]), d4)
        return DiscretizedStep(abar, bbar, C)

    def __call__(self, x, h0=None, method: ScanMethod = "parallel") -> tuple[Tensor, Tensor]:
        steps = self.selective_params(x)
        return _scan(steps, x, h0, method)

    def forward_chunked(self, x, chunk: int = 128, h0=None,
                        method: ScanMethod = "parallel") -> tuple[Tensor, Tensor]:
        """Same outputs as ``__call__``, computed ``chunk`` positions at a time.

        The hidden state is carried across chunk boundaries, so only
        ``(chunk, D, N)`` intermediates are alive at once.
        """
        x = as_tensor(x)
        if chunk < 1:
            raise ContractError("chunk must be >= 1")
        L = x.shape[-2]
        ys, h = [], h0
        for s in range(0, L, chunk):
            y, h = self(x[..., s:s + chunk, :], h, method)
            ys.append(y)
        return concat(ys, axis=-2), h


def selective_params(x, params: SelectiveSSM) -> DiscretizedStep:
    return params.selective_params(x)
