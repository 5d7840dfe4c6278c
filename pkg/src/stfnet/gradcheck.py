"""Finite-difference verification of vector-Jacobian rules.

The oracle is deliberately independent of the tape: it perturbs raw numpy
storage coordinate by coordinate and compares central differences against
whatever ``backward`` accumulated.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, backward, no_grad
from .errors import ContractError, NumericError


def grad_check(f, x, eps=1e-5, max_coords=None, rng=None):
    """Max relative error between analytic and numeric gradients of ``f`` at ``x``.

    ``f`` maps a Tensor to a scalar Tensor and is evaluated on ``x``
    itself, so ``x`` may equally be an input or a parameter that ``f``
    closes over.  ``eps`` must lie in [1e-7, 1e-4]; storage must be
    float64, anything coarser makes central differences meaningless.
    When ``max_coords`` is given, that many coordinates are sampled
    without replacement instead of sweeping all of them; pass ``rng``
    to control the sample.

    Relative error per coordinate: ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if not (1e-7 <= eps <= 1e-4):
        raise ContractError(f"eps {eps} outside [1e-7, 1e-4]")
    if not isinstance(x, Tensor):
        raise ContractError("grad_check needs a Tensor input")
    if x.dtype != np.float64:
        raise ContractError("grad_check requires float64 storage")

    saved_grad, saved_req = x.grad, x.requires_grad
    x.requires_grad = True
    x.grad = None
    try:
        out = f(x)
        if out.data.size != 1:
            raise ContractError(f"f must be scalar-valued, returned shape {out.shape}")
        if not np.isfinite(out.data).all():
            raise NumericError("f(x) is not finite")
        backward(out)
        analytic = (x.grad if x.grad is not None else np.zeros_like(x.data)).copy()
    finally:
        x.grad = saved_grad
        x.requires_grad = saved_req

    flat = x.data.reshape(-1)
    n = flat.size
    if max_coords is None or max_coords >= n:
        coords = range(n)
    else:
        rng = rng or np.random.default_rng(0)
        coords = rng.choice(n, size=max_coords, replace=False)

    analytic_flat = analytic.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in coords:
            old = flat[i]
            flat[i] = old + eps
            hi = float(f(x).data.reshape(()))
            flat[i] = old - eps
            lo = float(f(x).data.reshape(()))
            flat[i] = old
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError(f"non-finite value during perturbation of coord {i}")
            numeric = (hi - lo) / (2.0 * eps)
            a = float(analytic_flat[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if err > worst:
                worst = err
    return worst
