"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import ShapeError

# fn(params) -> (scalar value, {name: gradient})
CheckFn = Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]]


def finite_diff_check(fn: CheckFn, params: dict[str, np.ndarray],
                      eps: float = 1e-6, max_coords: int | None = None,
                      seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    `fn` evaluates a scalar loss and its analytic gradients at the current
    parameter values; the parameter arrays are perturbed in place and
    restored. For large tensors, `max_coords` limits the probe to a seeded
    random sample of coordinates per parameter. A parameter with no analytic
    gradient is treated as having gradient zero. Returns 0.0 for a
    parameterless map.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    value, grads = fn(params)
    if np.size(value) != 1:
        raise ShapeError(f"finite_diff_check: fn must return a scalar, got size {np.size(value)}")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, arr in params.items():
        analytic = grads.get(name)
        aflat = None if analytic is None else np.asarray(analytic).reshape(-1)
        flat = arr.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(np.reshape(fn(params)[0], ()))
            flat[i] = orig - eps
            f_minus = float(np.reshape(fn(params)[0], ()))
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = 0.0 if aflat is None else float(aflat[i])
            rel = abs(a - numeric) / max(1e-12, abs(a) + abs(numeric))
            worst = max(worst, rel)
    return worst
