"""Shared test helpers: the cross-precision gradient check used for float32 paths."""

import numpy as np

from bathyfill.tensor import Tensor


def cross_precision_fd(build, arrays, eps=1e-5, samples_per_param=None, rng=None):
    """Check float32 analytic gradients against float64 central differences.

    ``build(params)`` constructs a scalar loss from a list of Tensors. The
    analytic gradient comes from the float32 graph; the numeric reference
    from finite differences of the exact float64 extension of the same
    function (float32 values are exactly representable in float64, so both
    graphs evaluate the same mathematical map at the same points).
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    p32 = [Tensor(a.astype(np.float32), requires_grad=True) for a in arrays]
    p64 = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    build(p32).backward()
    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for t32, t64 in zip(p32, p64):
        ana = np.zeros_like(arrays[0]) if t32.grad is None else t32.grad.astype(np.float64)
        if samples_per_param is None or samples_per_param >= t64.size:
            idxs = range(t64.size)
        else:
            idxs = rng.choice(t64.size, samples_per_param, replace=False)
        for i in idxs:
            where = np.unravel_index(i, t64.data.shape)
            saved = t64.data[where]
            t64.data[where] = saved + eps
            f_plus = build(p64).data.item()
            t64.data[where] = saved - eps
            f_minus = build(p64).data.item()
            t64.data[where] = saved
            numeric = (f_plus - f_minus) / (2.0 * eps)
            analytic = float(ana.reshape(-1)[i])
            worst = max(worst, abs(analytic - numeric) / (abs(analytic) + eps))
    return worst


def rand(shape, seed=0, scale=1.0, dtype=np.float64):
    return np.random.default_rng(seed).normal(0, scale, size=shape).astype(dtype)
