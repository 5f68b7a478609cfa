"""Shared test helpers."""

import numpy as np

from vertseg.autodiff import Tensor


def central_diff(scalar_fn, x, step):
    """Central finite differences of scalar_fn (array -> float) at x."""
    x = np.asarray(x, dtype=float).copy()
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = scalar_fn(x)
        flat[i] = orig - step
        lo = scalar_fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def grad_match_fraction(graph_fn, x, step=1e-3, rtol=1e-3, atol=1e-7):
    """Fraction of input coordinates where the analytic gradient of the
    scalar `graph_fn(Tensor) -> Tensor` matches central differences.

    The numeric side re-evaluates the graph from plain arrays, so it is
    independent of the backward implementation it checks.
    """
    t = Tensor(np.asarray(x, dtype=float).copy(), requires_grad=True)
    graph_fn(t).backward()
    analytic = t.grad.copy()
    numeric = central_diff(lambda a: float(graph_fn(Tensor(a)).data), x, step)
    ok = np.abs(analytic - numeric) <= \
        rtol * np.maximum(np.abs(analytic), np.abs(numeric)) + atol
    return float(ok.mean())
