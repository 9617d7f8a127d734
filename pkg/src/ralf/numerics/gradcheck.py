"""Centered finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Parameter, Tensor


def numerical_grad(fn: Callable[[], Tensor], p: Parameter, index: tuple, step: float = 1e-5) -> float:
    orig = p.data[index]
    p.data[index] = orig + step
    up = float(fn().data)
    p.data[index] = orig - step
    down = float(fn().data)
    p.data[index] = orig
    return (up - down) / (2.0 * step)


def check_gradients(
    fn: Callable[[], Tensor],
    params: dict[str, Parameter],
    step: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    zero_atol: float = 1e-8,
) -> dict[str, float]:
    """Compare analytic and centered-difference gradients of a scalar ``fn``.

    The error for each parameter is ``max|a - n|`` over the checked
    coordinates divided by the parameter's gradient scale, the largest
    analytic entry over the whole parameter or numerical entry probed. With
    ``max_coords`` only a random subset of coordinates per parameter is
    probed; the scale still covers every coordinate, so a sample of
    near-zero entries is not judged against its own round-off.

    A parameter whose analytic and numerical gradients both stay below
    ``zero_atol`` (e.g. a key bias, which softmax shift-invariance makes
    identically zero) has no scale to be relative to; its error is the
    absolute deviation instead.
    """
    for p in params.values():
        p.grad = None
    loss = fn()
    loss.backward()
    analytic = {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}
    rng = rng or np.random.default_rng(0)
    errors: dict[str, float] = {}
    for name, p in params.items():
        flat = np.arange(p.size)
        if max_coords is not None and p.size > max_coords:
            flat = rng.choice(p.size, size=max_coords, replace=False)
        a_vals, n_vals = [], []
        for f in flat:
            idx = np.unravel_index(int(f), p.shape)
            a_vals.append(analytic[name][idx])
            n_vals.append(numerical_grad(fn, p, idx, step))
        a_arr, n_arr = np.array(a_vals), np.array(n_vals)
        scale = max(np.abs(analytic[name]).max(initial=0.0), np.abs(n_arr).max(initial=0.0))
        dev = float(np.abs(a_arr - n_arr).max(initial=0.0))
        errors[name] = dev if scale < zero_atol else dev / scale
    return errors
