"""Finite-difference verification of analytic gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, float64_eval


def grad_check(fn: Callable[[Tensor], Tensor], point: Tensor,
               step: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference grads.

    ``fn`` maps one tensor to a scalar tensor. The analytic pass runs in
    the graph's native float32; the difference quotient re-evaluates the
    forward in float64 so the comparison is against an oracle that is
    not itself limited by storage precision. Error is
    max_i |a_i - n_i| / max(1, |n_i|). Non-finite values raise.
    """
    x = Tensor(np.array(point.data, dtype=np.float64).astype(np.float32),
               requires_grad=True)
    out = fn(x)
    if out.shape != ():
        raise ValueError(f"grad_check target must be scalar, got {out.shape}")
    out.backward()
    analytic = x.grad.astype(np.float64)

    base = np.array(point.data, dtype=np.float64)
    numeric = np.zeros_like(base)
    flat_n = numeric.reshape(-1)
    flat_b = base.reshape(-1)
    with float64_eval():
        for i in range(flat_b.size):
            orig = flat_b[i]
            flat_b[i] = orig + step
            hi = fn(Tensor(base)).item()
            flat_b[i] = orig - step
            lo = fn(Tensor(base)).item()
            flat_b[i] = orig
            flat_n[i] = (hi - lo) / (2.0 * step)
    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        raise FloatingPointError("grad_check: non-finite gradient encountered")
    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0
