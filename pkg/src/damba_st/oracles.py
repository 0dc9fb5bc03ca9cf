"""Slow, independent reference computations used by ``verify`` and the tests.

None of these share code with the routines they check.
"""

from __future__ import annotations

import numpy as np


def taylor_expm(M: np.ndarray, terms: int = 20) -> np.ndarray:
    """Matrix exponential by a truncated Taylor series with scaling and squaring."""
    M = np.asarray(M, dtype=np.float64)
    nrm = np.max(np.sum(np.abs(M), axis=1)) if M.size else 0.0
    s = max(0, int(np.ceil(np.log2(nrm / 0.5)))) if nrm > 0.5 else 0
    X = M / (2.0 ** s)
    out = np.eye(M.shape[0])
    term = np.eye(M.shape[0])
    for k in range(1, terms):
        term = term @ X / k
        out = out + term
    for _ in range(s):
        out = out @ out
    return out


def zoh_oracle(a_diag: np.ndarray, b: np.ndarray, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Discretize one channel through the exponential of the augmented block matrix.

    exp([[dA, dB], [0, 0]]) = [[Abar, Bbar], [0, 1]] for any A, here diagonal.
    """
    n = a_diag.shape[0]
    aug = np.zeros((n + 1, n + 1))
    aug[:n, :n] = delta * np.diag(a_diag)
    aug[:n, n] = delta * b
    E = taylor_expm(aug)
    return np.diag(E[:n, :n]).copy(), E[:n, n].copy()


def recurrence_loop(a: np.ndarray, b: np.ndarray, h0: np.ndarray) -> np.ndarray:
    """h_t = a_t h_{t-1} + b_t with an explicit Python loop over axis 0."""
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    h = np.array(h0, dtype=np.float64)
    for t in range(out.shape[0]):
        h = a[t] * h + b[t]
        out[t] = h
    return out


def brute_force_delay(xa: np.ndarray, xb: np.ndarray, max_lag: int) -> int:
    """Exhaustive lag search with numpy's correlation coefficient."""
    best, best_r = 0, -np.inf
    T = xa.shape[0]
    for t in range(max_lag + 1):
        u, v = xa[: T - t], xb[t:]
        if np.std(u) == 0 or np.std(v) == 0:
            continue
        r = np.corrcoef(u, v)[0, 1]
        if r > best_r:
            best, best_r = t, r
    return best


def qr_eigenvalues(M: np.ndarray, iters: int = 500) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by Wilkinson-shifted QR iteration with deflation."""
    A = np.array(M, dtype=np.float64)
    vals = []
    n = A.shape[0]
    while n > 1:
        for _ in range(iters):
            if abs(A[n - 1, n - 2]) < 1e-14 * (abs(A[n - 1, n - 1]) + abs(A[n - 2, n - 2]) + 1e-300):
                break
            d = (A[n - 2, n - 2] - A[n - 1, n - 1]) / 2.0
            bsq = A[n - 1, n - 2] ** 2
            mu = A[n - 1, n - 1] - bsq / (d + np.copysign(np.sqrt(d * d + bsq), d if d != 0 else 1.0))
            Q, R = np.linalg.qr(A[:n, :n] - mu * np.eye(n))
            A[:n, :n] = R @ Q + mu * np.eye(n)
        vals.append(A[n - 1, n - 1])
        n -= 1
    vals.append(A[0, 0])
    return np.sort(np.array(vals))


def cycle_laplacian_spectrum(n: int) -> np.ndarray:
    """Normalized-Laplacian eigenvalues of the n-cycle: 1 - cos(2 pi k / n)."""
    return np.sort(1.0 - np.cos(2.0 * np.pi * np.arange(n) / n))


def window_count_bruteforce(T: int, H: int, F: int, stride: int) -> int:
    count, t = 0, H
    while t + F <= T:
        count += 1
        t += stride
    return count


def finite_difference(f, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar numpy function."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        up = f(x)
        flat[i] = old - step
        down = f(x)
        flat[i] = old
        gf[i] = (up - down) / (2 * step)
    return g
