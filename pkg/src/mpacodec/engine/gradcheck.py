"""Central-difference verification of reverse-mode gradients."""

import numpy as np

from .tensor import Tensor, backward, no_grad


class EvaluationError(ArithmeticError):
    pass


def grad_check(f, params, eps=1e-5, max_entries=None, rng=None):
    """Largest relative disagreement between analytic and numeric gradients.

    ``f`` is a zero-argument callable returning a scalar Tensor built from
    ``params`` (float64 tensors with ``requires_grad``). The error for each
    entry is ``|analytic - numeric| / max(1, |numeric|)``. With ``max_entries``
    only a random subset of each parameter's entries is perturbed.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError(f"step {eps} outside [1e-6, 1e-4]")
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 parameters, got {p.dtype}")
        p.grad = None
    out = f()
    if not np.isfinite(out.data).all():
        raise EvaluationError("f is not finite at the check point")
    backward(out)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = rng.choice(flat.size, size=max_entries, replace=False)
        for i in entries:
            old = flat[i]
            flat[i] = old + eps
            hi = _value(f)
            flat[i] = old - eps
            lo = _value(f)
            flat[i] = old
            numeric = (hi - lo) / (2 * eps)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


def _value(f):
    with no_grad():
        v = f()
    v = v.data if isinstance(v, Tensor) else np.asarray(v)
    if not np.isfinite(v).all():
        raise EvaluationError("f is not finite near the check point")
    return float(v)
