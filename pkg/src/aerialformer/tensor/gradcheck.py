"""Central finite-difference gradient checks."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .functional import record_relu_patterns
from .tensor import Tensor, backward, no_grad


def numerical_grad(f: Callable[[], Tensor], t: Tensor, step: float = 1e-5,
                   indices: Sequence[tuple[int, ...]] | None = None) -> np.ndarray:
    """d f()/d t by central differences; only ``indices`` are filled when given."""
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    positions = (range(flat.size) if indices is None
                 else [np.ravel_multi_index(ix, t.shape) for ix in indices])
    with no_grad():
        for i in positions:
            orig = flat[i]
            flat[i] = orig + step
            up = f().item()
            flat[i] = orig - step
            down = f().item()
            flat[i] = orig
            grad.reshape(-1)[i] = (up - down) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)``; 0 when both are zero."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def analytic_grads(f: Callable[[], Tensor], tensors: Sequence[Tensor]) -> list[np.ndarray]:
    for t in tensors:
        t.grad = None
    backward(f())
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


@dataclass
class SmoothSample:
    """Finite differences at entries whose +-step evaluations stay on one linear piece."""

    flat_indices: list[int] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    skipped: int = 0


def _evaluate(f):
    with record_relu_patterns() as patterns:
        value = f().item()
    return value, patterns


def smooth_numerical_grad(f: Callable[[], Tensor], t: Tensor, count: int, step: float = 1e-5,
                          rng: np.random.Generator | None = None) -> SmoothSample:
    """Central differences at up to ``count`` random entries of ``t``.

    An entry is rejected (and another drawn) when either perturbed evaluation
    switches any ReLU on or off relative to the unperturbed one: across a kink
    the function is not differentiable on the step interval, so the
    difference quotient does not estimate the derivative there.
    """
    rng = rng or np.random.default_rng(0)
    flat = t.data.reshape(-1)
    out = SmoothSample()
    with no_grad():
        _, base = _evaluate(f)
        for i in rng.permutation(flat.size):
            if len(out.values) == count:
                break
            orig = flat[i]
            flat[i] = orig + step
            up, p_up = _evaluate(f)
            flat[i] = orig - step
            down, p_down = _evaluate(f)
            flat[i] = orig
            if p_up != base or p_down != base:
                out.skipped += 1
                continue
            out.flat_indices.append(int(i))
            out.values.append((up - down) / (2.0 * step))
    return out


def check_gradients(f: Callable[[], Tensor], tensors: Sequence[Tensor], step: float = 1e-5,
                    max_entries: int | None = None, rng: np.random.Generator | None = None,
                    avoid_kinks: bool = False, report: dict | None = None) -> list[float]:
    """Relative error between tape and finite-difference gradients per tensor.

    With ``max_entries`` only that many randomly chosen entries per tensor
    are compared (on both sides). ``avoid_kinks`` draws entries through
    :func:`smooth_numerical_grad`; the number of rejected entries is added
    to ``report["skipped"]`` when a dict is passed.
    """
    rng = rng or np.random.default_rng(0)
    analytic = analytic_grads(f, tensors)
    errors = []
    for t, a in zip(tensors, analytic):
        if avoid_kinks:
            sample = smooth_numerical_grad(f, t, max_entries or t.size, step, rng)
            if report is not None:
                report["skipped"] = report.get("skipped", 0) + sample.skipped
                report["checked"] = report.get("checked", 0) + len(sample.values)
            errors.append(relative_error(a.reshape(-1)[sample.flat_indices],
                                         np.array(sample.values)))
        elif max_entries is not None and t.size > max_entries:
            flat_idx = rng.choice(t.size, size=max_entries, replace=False)
            idx = [np.unravel_index(i, t.shape) for i in flat_idx]
            num = numerical_grad(f, t, step, idx)
            sel = tuple(np.array(idx).T)
            errors.append(relative_error(a[sel], num[sel]))
        else:
            errors.append(relative_error(a, numerical_grad(f, t, step)))
    return errors
