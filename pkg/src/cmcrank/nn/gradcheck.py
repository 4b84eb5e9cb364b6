"""Finite-difference gradient oracle for verifying the manual backward pass."""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np


def finite_difference_gradient(loss_fn: Callable[[], float],
                               arrays: Mapping[str, np.ndarray],
                               h: float = 1e-3) -> dict[str, np.ndarray]:
    """Central differences of ``loss_fn`` w.r.t. every coordinate in ``arrays``.

    ``loss_fn`` must be pure and deterministic, reading the (temporarily
    perturbed) arrays each call.  The divisor is the actually realized
    perturbation ``theta_plus - theta_minus``, which matters when the
    arrays are float32 and ``theta + h`` rounds.
    """
    grads: dict[str, np.ndarray] = {}
    for name, arr in arrays.items():
        grad = np.zeros(arr.size, dtype=np.float64)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            original = flat[i].copy()
            flat[i] = original + h
            theta_plus = float(flat[i])
            loss_plus = float(loss_fn())
            flat[i] = original - h
            theta_minus = float(flat[i])
            loss_minus = float(loss_fn())
            flat[i] = original
            grad[i] = (loss_plus - loss_minus) / (theta_plus - theta_minus)
        grads[name] = grad.reshape(arr.shape)
    return grads


def gradients_close(analytic: Mapping[str, np.ndarray],
                    numeric: Mapping[str, np.ndarray],
                    rel_tol: float = 1e-2, abs_tol: float = 1e-4) -> bool:
    """Per-coordinate check: |a - n| within abs_tol, or within rel_tol
    of the larger magnitude.  Returns True when every coordinate passes."""
    for name, a in analytic.items():
        n = numeric[name]
        err = np.abs(np.asarray(a, dtype=np.float64) - n)
        scale = np.maximum(np.abs(a), np.abs(n))
        if not np.all((err <= abs_tol) | (err <= rel_tol * scale)):
            return False
    return True
