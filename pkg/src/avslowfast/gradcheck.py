"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import functional as F
from .rng import stream
from .tensor import Tensor, backward, no_grad


def _scalarize(fn: Callable[..., Tensor], inputs: Sequence[Tensor]) -> Callable[[], Tensor]:
    # non-scalar graphs are reduced with a fixed random projection
    with no_grad():
        probe = fn(*inputs)
    if probe.size == 1:
        return lambda: fn(*inputs)
    weights = stream(0, "gradcheck-projection").standard_normal(probe.shape)
    return lambda: F.sum(F.mul(fn(*inputs), weights))


def gradcheck_errors(
    fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5, max_entries: int | None = None
) -> dict[int, float]:
    """Per-input max of |analytic - numeric| / max(1, |numeric|).

    Keys are positions in ``inputs``; inputs without ``requires_grad`` are
    skipped. ``max_entries`` caps the coordinates probed per input (a fixed
    random subset) for large parameter tensors.
    """
    objective = _scalarize(fn, inputs)
    checked = [i for i, t in enumerate(inputs) if t.requires_grad]
    for i in checked:
        inputs[i].grad = None
    loss = objective()
    analytic = backward(loss, [inputs[i] for i in checked])
    errors: dict[int, float] = {}
    with no_grad():
        for i, ga in zip(checked, analytic):
            flat = inputs[i].data.reshape(-1)
            coords = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                coords = np.sort(stream(i, "gradcheck-coords").choice(flat.size, max_entries, replace=False))
            numeric = np.empty(coords.size)
            for n, j in enumerate(coords):
                orig = flat[j]
                flat[j] = orig + eps
                up = objective().item()
                flat[j] = orig - eps
                down = objective().item()
                flat[j] = orig
                numeric[n] = (up - down) / (2.0 * eps)
            diff = np.abs(ga.reshape(-1)[coords] - numeric) / np.maximum(1.0, np.abs(numeric))
            errors[i] = float(diff.max()) if diff.size else 0.0
    return errors


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
              max_entries: int | None = None) -> float:
    """Max relative error over the probed elements of every differentiable input."""
    errors = gradcheck_errors(fn, inputs, eps, max_entries)
    return max(errors.values(), default=0.0)


KINK_TOL = 1e-4                 # one-sided slopes may differ this much (relative) before a kink is declared


def _probe(objective, checked, originals, d, step):
    for t, o, x in zip(checked, originals, d):
        t.data[...] = o + step * x
    up = objective().item()
    for t, o, x in zip(checked, originals, d):
        t.data[...] = o - step * x
    down = objective().item()
    for t, o in zip(checked, originals):
        t.data[...] = o
    return up, down


def directional_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], directions: int = 4,
                      eps: float = 1e-5, seed: int = 0) -> tuple[float, int]:
    """Gradient check along random joint directions of all differentiable inputs.

    Compares the analytic ``<grad, d>`` with a central difference along ``d``;
    suited to networks with too many parameters for per-coordinate probing.
    A direction whose forward and backward one-sided differences disagree
    crosses a kink (ReLU, max) within ``eps``; central differences are
    meaningless there, so the step is shrunk twice by 10x along the same
    direction and, failing that, the direction is replaced by a fresh draw.
    Both one-sided differences are numeric, so this cannot hide a wrong
    analytic gradient.
    Returns (max relative error, number of replaced directions).
    """
    objective = _scalarize(fn, inputs)
    checked = [t for t in inputs if t.requires_grad]
    for t in checked:
        t.grad = None
    loss = objective()
    base = loss.item()
    analytic = backward(loss, checked)
    worst, done, skipped = 0.0, 0, 0
    rng = stream(seed, "gradcheck-directions")
    with no_grad():
        while done < directions:
            if skipped > 4 * directions:
                return float("inf"), skipped
            d = [rng.standard_normal(t.shape) for t in checked]
            norm = np.sqrt(sum(float(np.sum(x * x)) for x in d))
            d = [x / norm for x in d]
            predicted = sum(float(np.sum(g * x)) for g, x in zip(analytic, d))
            originals = [t.data.copy() for t in checked]
            for step in (eps, eps / 10, eps / 100):
                up, down = _probe(objective, checked, originals, d, step)
                numeric = (up - down) / (2.0 * step)
                scale = max(1.0, abs(numeric))
                if abs((up - base) - (base - down)) / step <= KINK_TOL * scale:
                    break
            else:
                skipped += 1
                continue
            worst = max(worst, abs(predicted - numeric) / scale)
            done += 1
    return worst, skipped


def directional_error(fn: Callable[..., Tensor], inputs: Sequence[Tensor], directions: int = 4,
                      eps: float = 1e-5, seed: int = 0) -> float:
    """Max relative error of :func:`directional_check`."""
    return directional_check(fn, inputs, directions, eps, seed)[0]
