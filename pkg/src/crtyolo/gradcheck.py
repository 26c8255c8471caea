"""Central-difference gradient verification."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidArgumentError, NonFiniteError
from .tensor import Tensor, detect_anomaly, no_grad


@dataclass
class GradcheckReport:
    max_abs_err: float
    max_rel_err: float
    checked: int
    worst_input: str

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol


def _flatten_outputs(out) -> list[Tensor]:
    if isinstance(out, Tensor):
        return [out]
    if isinstance(out, dict):
        out = list(out.values())
    flat: list[Tensor] = []
    for item in out:
        flat.extend(_flatten_outputs(item))
    return flat


def finite_diff_gradcheck(fn: Callable[..., object], inputs: Sequence[Tensor], epsilon: float = 1e-6,
                          seed: int = 0, max_elements: int | None = None, project: bool = True,
                          names: Sequence[str] | None = None) -> GradcheckReport:
    """Compare autodiff gradients of ``fn`` against central differences.

    ``fn(*inputs)`` may return a tensor or a (nested) sequence of tensors; it
    is reduced to a scalar as ``sum(out * R)`` with a fixed random ``R``
    (``project=False`` uses a plain sum). All inputs must be float64.

    Relative error per element is ``|a - n| / max(|a|, |n|, 1e-3 * max|n|)``;
    the floor keeps elements far below the tensor's gradient scale from being
    judged on round-off. Tensors larger than ``max_elements`` are checked on a
    seeded random subset of coordinates.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise InvalidArgumentError("gradcheck requires float64 inputs")
    names = list(names) if names is not None else [f"input{i}" for i in range(len(inputs))]
    rng = np.random.default_rng(seed)
    projections: list[np.ndarray] = []

    def scalar(out) -> Tensor:
        outs = _flatten_outputs(out)
        if not projections:
            for o in outs:
                projections.append(rng.standard_normal(o.shape) if project else np.ones(o.shape))
        total = None
        for o, r in zip(outs, projections):
            term = (o * Tensor(r)).sum()
            total = term if total is None else total + term
        return total

    saved = [t.requires_grad for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    try:
        with detect_anomaly():
            f = scalar(fn(*inputs))
            f.backward()
        analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]

        max_abs = 0.0
        max_rel = 0.0
        worst = names[0] if names else ""
        checked = 0
        for t, a_grad, name in zip(inputs, analytic, names):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_elements is not None and flat.size > max_elements:
                idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
            numeric = np.empty(len(idx))
            with no_grad():
                for j, i in enumerate(idx):
                    orig = flat[i]
                    flat[i] = orig + epsilon
                    fp = float(scalar(fn(*inputs)).data)
                    flat[i] = orig - epsilon
                    fm = float(scalar(fn(*inputs)).data)
                    flat[i] = orig
                    if not (np.isfinite(fp) and np.isfinite(fm)):
                        raise NonFiniteError(f"non-finite function value while perturbing {name}[{i}]")
                    numeric[j] = (fp - fm) / (2 * epsilon)
            a = a_grad.reshape(-1)[idx]
            abs_err = np.abs(a - numeric)
            floor = max(1e-3 * float(np.max(np.abs(numeric), initial=0.0)), 1e-12)
            rel_err = abs_err / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
            checked += len(idx)
            if abs_err.size:
                max_abs = max(max_abs, float(abs_err.max()))
                if float(rel_err.max()) > max_rel:
                    max_rel = float(rel_err.max())
                    worst = name
        return GradcheckReport(max_abs, max_rel, checked, worst)
    finally:
        for t, flag in zip(inputs, saved):
            t.requires_grad = flag
            t.grad = None
