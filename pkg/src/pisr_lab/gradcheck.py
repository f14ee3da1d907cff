"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from pisr_lab.tensor import Tensor, detect_anomaly, grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    per_input: list[float] = field(default_factory=list)
    n_probed: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-5,
    tolerance: float = 1e-4,
    probes: int | None = None,
    seed: int = 0,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare the tape gradient of scalar ``fn(*inputs)`` with central differences.

    Args:
      fn: maps Tensors (one per input) to a scalar Tensor.
      inputs: float64 arrays; they are never modified.
      eps: finite-difference step.
      tolerance: pass threshold on the maximum relative error.
      probes: if given, only this many randomly chosen coordinates per input
        are differenced (all coordinates when the input is smaller).
      seed: seeds the probe selection.
      floor: lower bound of the relative-error denominator.

    Raises:
      NonFiniteError: if any op along the way produced NaN/Inf.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    rng = np.random.default_rng(seed)
    with detect_anomaly():
        leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        out = fn(*leaves)
        if out.data.size != 1:
            raise ValueError(f"grad_check needs a scalar output, got shape {out.shape}")
        analytic = grad(out, leaves)

        def evaluate(i: int, flat_idx: int, delta: float) -> tuple[float, float]:
            args = [Tensor(a.copy()) for a in arrays]
            flat = args[i].data.reshape(-1)
            x0 = flat[flat_idx]
            flat[flat_idx] = x0 + delta
            # the step actually taken after rounding x0 + delta
            return float(fn(*args).data.reshape(-1)[0]), float(flat[flat_idx] - x0)

        def central(i: int, j: int) -> float:
            (f_hi, h_hi), (f_lo, h_lo) = evaluate(i, j, eps), evaluate(i, j, -eps)
            return (f_hi - f_lo) / (h_hi - h_lo)

        per_input = []
        total = 0
        for i, a in enumerate(arrays):
            n = a.size
            idx = np.arange(n) if probes is None or probes >= n else rng.choice(n, size=probes, replace=False)
            numeric = np.array([central(i, j) for j in idx])
            err = relative_error(analytic[i].reshape(-1)[idx], numeric, floor)
            per_input.append(float(err.max()) if err.size else 0.0)
            total += len(idx)
    return GradCheckReport(max(per_input, default=0.0), tolerance, per_input, total)


def _op_cases(rng: np.random.Generator):
    """(name, input shapes, scalar function) for every differentiable primitive."""
    from pisr_lab import tensor as T

    def probe(*shape):
        return Tensor(rng.standard_normal(shape))

    w34, w344, w4 = probe(3, 4), probe(3, 4, 4), probe(4)
    tgt = rng.standard_normal((3, 4))
    labels = rng.integers(0, 3, size=4)

    def dot(t, w):
        return T.sum(T.mul(t, w))

    return [
        ("matmul", [(3, 4), (4, 4)], lambda a, b: dot(T.matmul(a, b), w34)),
        ("conv2d_3x3", [(2, 4, 4), (3, 2, 3, 3), (3,)], lambda x, k, b: dot(T.conv2d(x, k, b), w344)),
        ("conv2d_1x1", [(2, 4, 4), (3, 2, 1, 1), (3,)], lambda x, k, b: dot(T.conv2d(x, k, b), w344)),
        ("softmax", [(3, 4)], lambda x: dot(T.softmax(x, 0), w34)),
        ("sigmoid", [(3, 4)], lambda x: dot(T.sigmoid(x), w34)),
        ("relu", [(3, 4)], lambda x: dot(T.relu(x), w34)),
        ("add", [(3, 4), (3, 1)], lambda a, b: dot(T.add(a, b), w34)),
        ("sub", [(3, 4), (1, 4)], lambda a, b: dot(T.sub(a, b), w34)),
        ("mul", [(3, 4), (3, 1)], lambda a, b: dot(T.mul(a, b), w34)),
        ("scale", [(3, 4)], lambda x: dot(T.scale(x, -2.5), w34)),
        ("reshape", [(4, 3)], lambda x: dot(T.reshape(x, (3, 4)), w34)),
        ("transpose", [(4, 3)], lambda x: dot(T.transpose(x), w34)),
        ("concat_rows", [(1, 4), (2, 4)], lambda a, b: dot(T.concat_rows([a, b]), w34)),
        ("take_rows", [(5, 4)], lambda x: dot(T.take_rows(x, [4, 0, 2]), w34)),
        ("sum", [(3, 4)], lambda x: dot(T.sum(x, axis=0), w4)),
        ("mean", [(3, 4)], lambda x: T.mean(T.mul(x, x))),
        ("sqrt", [(3, 4)], lambda x: T.sum(T.sqrt(T.add(T.mul(x, x), 0.5)))),
        ("rms_normalize_rows", [(3, 4)], lambda x: dot(T.rms_normalize_rows(x), w34)),
        ("cross_entropy", [(3, 4)], lambda x: T.cross_entropy(x, labels)),
        ("mse", [(3, 4)], lambda x: T.mse(x, tgt)),
        ("l1", [(3, 4)], lambda x: T.l1(x, tgt, mask=tgt > -0.5)),
    ]


def op_suite(seed: int = 0, tolerance: float = 1e-4) -> dict[str, GradCheckReport]:
    """Gradient check of every differentiable primitive on one random instance."""
    rng = np.random.default_rng(seed)
    reports = {}
    for name, shapes, fn in _op_cases(rng):
        inputs = [rng.standard_normal(s) for s in shapes]
        reports[name] = grad_check(fn, inputs, tolerance=tolerance)
    return reports
