"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    """``|a - n| / max(|a|, |n|, floor)`` in the 2-norm.

    ``floor`` keeps structurally zero gradients (e.g. a bias feeding batch
    norm) from turning round-off into a unit error.
    """
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_grad(fn: Callable[[], Tensor], x: Tensor, eps: float = 1e-6,
                 indices: Sequence[int] | None = None) -> np.ndarray:
    """Finite-difference gradient of scalar ``fn()`` w.r.t. entries of ``x``.

    Only ``indices`` (flat) are perturbed when given; other entries of the
    result are left at zero.
    """
    flat = x.data.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn().item()
        flat[i] = orig - eps
        lo = fn().item()
        flat[i] = orig
        out[i] = (hi - lo) / (2 * eps)
    return out.reshape(x.shape)


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-6,
                    max_entries: int | None = None, rng: np.random.Generator | None = None) -> dict[int, float]:
    """Compare backward gradients of ``fn()`` with central differences.

    Returns the relative error per input (by position).  ``max_entries``
    caps the number of perturbed entries per input, drawn with ``rng``.
    """
    for t in inputs:
        t.grad = None
    out = fn()
    out.backward()
    errors = {}
    for k, t in enumerate(inputs):
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        idx = None
        if max_entries is not None and t.data.size > max_entries:
            rng = rng or np.random.default_rng(0)
            idx = np.sort(rng.choice(t.data.size, size=max_entries, replace=False))
        numeric = numeric_grad(fn, t, eps, idx)
        if idx is not None:
            analytic = analytic.reshape(-1)[idx]
            numeric = numeric.reshape(-1)[idx]
        errors[k] = relative_error(analytic, numeric)
    return errors
