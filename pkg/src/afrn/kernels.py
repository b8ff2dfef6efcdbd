"""Dense numeric kernels with explicit forward and backward passes.

Every differentiable kernel comes as a pair: ``op(...)`` computes the output
and ``op_backward(..., grad)`` maps an output gradient to input gradients.
All arrays are float64 numpy arrays. ``finite_diff_check`` validates any
forward/backward pair against central differences.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

KINK_EXCLUSION = 1e-4


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GradCheckError(RuntimeError):
    """Raised when a gradient check hits a non-finite intermediate."""


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {a.shape}")
    return a


def identity(n: int) -> np.ndarray:
    return np.eye(n, dtype=np.float64)


def ones_vector(n: int) -> np.ndarray:
    return np.ones(n, dtype=np.float64)


# --------------------------------------------------------------------------
# matmul

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def matmul_backward(a: np.ndarray, b: np.ndarray, grad: np.ndarray):
    """Return ``(grad @ b.T, a.T @ grad)``."""
    return grad @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ grad


# --------------------------------------------------------------------------
# hadamard

def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"hadamard shape mismatch: {a.shape} vs {b.shape}")
    return a * b


def hadamard_backward(a: np.ndarray, b: np.ndarray, grad: np.ndarray):
    return grad * b, grad * a


# --------------------------------------------------------------------------
# relu

def relu(a: np.ndarray) -> np.ndarray:
    return np.maximum(a, 0.0)


def relu_backward(a: np.ndarray, grad: np.ndarray) -> np.ndarray:
    # subgradient 0 at exactly 0
    return np.where(a > 0.0, grad, 0.0)


# --------------------------------------------------------------------------
# softmax over every entry jointly

def softmax_flat(logits: np.ndarray) -> np.ndarray:
    """Normalize ``exp(logits)`` over all entries of the trailing two axes.

    Leading axes are treated as a batch. This is the single place where the
    normalization domain is decided: swapping to a per-row softmax means
    reducing over ``axis=-1`` only.
    """
    z = np.asarray(logits, dtype=np.float64)
    axes = (-2, -1)
    shifted = z - z.max(axis=axes, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axes, keepdims=True)


def softmax_flat_backward(scores: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Jacobian-vector product of ``softmax_flat`` given its output."""
    inner = (grad * scores).sum(axis=(-2, -1), keepdims=True)
    return scores * (grad - inner)


# --------------------------------------------------------------------------
# gradient checking

@dataclass
class DiffOp:
    """A differentiable single-input operation.

    ``backward(x, y, gy)`` returns the gradient with respect to ``x``.
    ``kink_distance(x)``, when given, returns per-entry distance to the
    nearest non-smooth point; entries closer than ``KINK_EXCLUSION`` are
    skipped by the checker.
    """

    name: str
    forward: Callable[[np.ndarray], np.ndarray]
    backward: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    kink_distance: Optional[Callable[[np.ndarray], np.ndarray]] = None


@dataclass
class GradCheckReport:
    op_name: str
    max_rel_error: float
    passed: bool
    step: float
    tolerance: float
    checked: int = 0
    skipped: int = 0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" skipped={self.skipped}" if self.skipped else ""
        return (f"{status} {self.op_name}: max_rel_err={self.max_rel_error:.3e} "
                f"tol={self.tolerance:.0e} h={self.step:.0e} n={self.checked}{extra}")


def relative_errors(analytic: np.ndarray, numeric: np.ndarray,
                    scale: Optional[float] = None) -> np.ndarray:
    """Per-entry ``|a - n| / max(|a|, |n|, floor)``.

    The floor is 1e-3 of ``scale`` (default: the largest gradient magnitude in
    the tensor) and at least 1e-12, so entries far below the gradient's scale,
    exact zeros included, are compared at that scale instead of blowing up on
    round-off.
    """
    a = np.abs(analytic)
    n = np.abs(numeric)
    if scale is None:
        scale = max(float(a.max(initial=0.0)), float(n.max(initial=0.0)))
    floor = max(1e-3 * scale, 1e-12)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(a, n), floor)


def central_difference(f: Callable[[], object], x: np.ndarray, h0: float,
                       mask: Optional[np.ndarray] = None, name: str = "op") -> np.ndarray:
    """Numerical gradient of ``sum(f())`` wrt ``x`` (mutated in place and restored).

    ``f`` may return the objective's individual terms; they are differenced
    term by term so unaffected terms cancel exactly. The divisor is the step
    actually representable at ``x``. Entries where ``mask`` is False stay 0.
    """
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    mflat = None if mask is None else mask.reshape(-1)
    for idx in range(flat.size):
        if mflat is not None and not mflat[idx]:
            continue
        orig = flat[idx]
        h = h0 * max(1.0, abs(orig))
        flat[idx] = orig + h
        up = flat[idx]
        fp = np.asarray(f(), dtype=np.float64)
        flat[idx] = orig - h
        step = up - flat[idx]
        fm = np.asarray(f(), dtype=np.float64)
        flat[idx] = orig
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise GradCheckError(f"{name}: non-finite objective during finite differences")
        gflat[idx] = float(np.sum(fp - fm)) / step
    return grad


def finite_diff_check(op: DiffOp, x, tolerance: float = 1e-6, h: float = 1e-6,
                      seed: int = 0) -> GradCheckReport:
    """Compare ``op.backward`` with central differences of a random projection.

    The scalar objective is ``sum(R * op.forward(x))`` for a fixed random R.
    """
    x = np.array(x, dtype=np.float64, copy=True)
    if not np.all(np.isfinite(x)):
        raise GradCheckError(f"{op.name}: non-finite input")
    y = op.forward(x)
    if not np.all(np.isfinite(y)):
        raise GradCheckError(f"{op.name}: non-finite forward output")
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal(np.shape(y))
    analytic = np.asarray(op.backward(x, y, proj), dtype=np.float64)
    if not np.all(np.isfinite(analytic)):
        raise GradCheckError(f"{op.name}: non-finite analytic gradient")

    mask = None
    if op.kink_distance is not None:
        mask = op.kink_distance(x) > KINK_EXCLUSION
    skipped = 0 if mask is None else int((~mask).sum())

    work = x.copy()
    numeric = central_difference(lambda: proj * op.forward(work),
                                 work, h, mask, op.name)
    if mask is not None:
        analytic = np.where(mask, analytic, 0.0)
    checked = x.size - skipped
    err = float(relative_errors(analytic, numeric).max(initial=0.0)) if checked else 0.0
    return GradCheckReport(op.name, err, err <= tolerance, h, tolerance, checked, skipped)


def check_param_gradients(name: str, objective: Callable[[], float],
                          params: dict, analytic: dict, tolerance: float = 1e-5,
                          h: float = 1e-6) -> GradCheckReport:
    """Finite-difference check over several named arrays at once.

    ``objective`` must read the arrays in ``params`` live (they are perturbed
    in place). Reports the worst relative error over all of them.
    """
    pairs = {}
    for key, arr in params.items():
        a = np.asarray(analytic[key], dtype=np.float64)
        if a.shape != arr.shape:
            raise ShapeError(f"{name}: gradient for {key} has shape {a.shape}, "
                             f"parameter has {arr.shape}")
        if not np.all(np.isfinite(a)):
            raise GradCheckError(f"{name}: non-finite analytic gradient for {key}")
        pairs[key] = (a, central_difference(objective, arr, h, name=f"{name}[{key}]"))
    # one scale for the whole check: a parameter whose true gradient is
    # identically zero is judged against the others, not against its own noise
    scale = max((max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
                 for a, n in pairs.values()), default=0.0)
    worst = max((float(relative_errors(a, n, scale).max(initial=0.0))
                 for a, n in pairs.values()), default=0.0)
    checked = sum(a.size for a, _ in pairs.values())
    return GradCheckReport(name, worst, worst <= tolerance, h, tolerance, checked)


def kernel_ops() -> list:
    """The base kernels wrapped as single-input ``DiffOp`` objects.

    Binary kernels are checked wrt their first operand with the second one
    held fixed.
    """
    rng = np.random.default_rng(12345)
    b_mm = rng.uniform(-2, 2, size=(4, 3))
    b_hd = rng.uniform(-2, 2, size=(4, 4))
    return [
        DiffOp("matmul", lambda x: matmul(x, b_mm),
               lambda x, y, g: matmul_backward(x, b_mm, g)[0]),
        DiffOp("hadamard", lambda x: hadamard(x, b_hd),
               lambda x, y, g: hadamard_backward(x, b_hd, g)[0]),
        DiffOp("relu", relu, lambda x, y, g: relu_backward(x, g),
               kink_distance=np.abs),
        DiffOp("softmax_flat", softmax_flat,
               lambda x, y, g: softmax_flat_backward(y, g)),
    ]
