"""Central finite differences, the independent oracle for backward()."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, backward


def _scalar(value) -> float:
    if isinstance(value, Tensor):
        return float(value.data.reshape(-1)[0])
    return float(value)


def finite_difference_gradient(f: Callable[[Tensor], object], x: Tensor, h: float = 1e-5,
                               indices=None) -> Tensor:
    """Estimate d f / d x by ``(f(x + h e_i) - f(x - h e_i)) / 2h``.

    ``x`` is perturbed in place and restored. ``indices`` restricts the estimate
    to a subset of flat positions (the rest are left at zero).
    """
    flat = x.data.reshape(-1)
    est = np.zeros_like(flat)
    positions = range(flat.size) if indices is None else indices
    for i in positions:
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar(f(x))
        flat[i] = orig - h
        fm = _scalar(f(x))
        flat[i] = orig
        est[i] = (fp - fm) / (2.0 * h)
    return Tensor(est.reshape(x.shape))


def relative_error(analytic, numeric, floor: float = 1e-5) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps entries whose true gradient is ~0 from dividing rounding
    noise by zero. Central differences at h=1e-5 carry roughly 1e-10 of absolute
    noise on O(1) losses, so 1e-5 leaves two orders of margin.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max())


def check_gradients(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor], h: float = 1e-5,
                    sample: int | None = None, rng: np.random.Generator | None = None) -> dict[str, float]:
    """Per-parameter max relative error between ``backward()`` and central differences.

    ``loss_fn`` rebuilds the graph from the current parameter values. With
    ``sample`` only that many flat coordinates per parameter are probed.
    """
    for t in params.values():
        t.zero_grad()
    backward(loss_fn())
    errors = {}
    for name, t in params.items():
        analytic = t.grad.reshape(-1).copy()
        idx = np.arange(t.size)
        if sample is not None and t.size > sample:
            idx = np.sort((rng or np.random.default_rng(0)).choice(t.size, sample, replace=False))
        numeric = finite_difference_gradient(lambda _x: loss_fn(), t, h, idx).data.reshape(-1)
        errors[name] = relative_error(analytic[idx], numeric[idx])
    return errors
