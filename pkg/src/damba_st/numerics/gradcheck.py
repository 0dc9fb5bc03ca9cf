"""Compare tape gradients against central finite differences."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, backward, no_grad

# denominators below this are treated as an absolute comparison
REL_FLOOR = 1e-8
# central differences carry roughly eps * |f| / step of roundoff per entry; gradient
# norms below this multiple of it are compared absolutely instead of relatively
FD_NOISE_FACTOR = 1e5


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    per_param: dict[str, float] = field(default_factory=dict)
    diagnostic: str = ""
    grad_norms: dict[str, tuple[float, float]] = field(default_factory=dict)  # (tape, fd)

    def worst(self) -> str:
        if not self.per_param:
            return ""
        return max(self.per_param, key=self.per_param.get)


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Check ``f``'s tape gradient w.r.t. each named parameter.

    ``f`` rebuilds the graph from the current parameter values on every call.
    The relative error of a parameter is ``|g_tape - g_fd| / max(|g_tape|, |g_fd|)``
    over its checked entries (Euclidean norms).  With ``max_entries`` only a random
    subset of each parameter's entries is perturbed.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    for p in params.values():
        p.grad = None
        if not p.data.flags.c_contiguous:  # perturbation below writes through a flat view
            p.data = np.ascontiguousarray(p.data)
    out = f()
    if not np.all(np.isfinite(out.data)):
        return GradCheckReport(False, float("inf"), diagnostic="f returned a non-finite value")
    backward(out)
    floor = max(REL_FLOOR, FD_NOISE_FACTOR * np.finfo(np.float64).eps * max(1.0, abs(float(out.data))) / step)
    tape = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for name, p in params.items()}

    rng = rng if rng is not None else np.random.default_rng(0)
    per_param: dict[str, float] = {}
    norms: dict[str, tuple[float, float]] = {}
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            numeric = np.empty(idx.size)
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + step
                fp = float(f().data)
                flat[i] = orig - step
                fm = float(f().data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    return GradCheckReport(False, float("inf"), per_param,
                                           f"non-finite f while perturbing {name}[{i}]")
                numeric[j] = (fp - fm) / (2.0 * step)
            analytic = tape[name].reshape(-1)[idx]
            denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
            per_param[name] = float(np.linalg.norm(analytic - numeric) / denom)
            norms[name] = (float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    worst = max(per_param.values(), default=0.0)
    return GradCheckReport(worst < tol, worst, per_param, grad_norms=norms)
