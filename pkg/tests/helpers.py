"""Shared test oracles: finite differences and tolerance checks.

These stay independent of the library's backward pass -- they only ever call
forward code.
"""

import numpy as np

from saft.tensor import Tensor


def numeric_grad(f, param: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar f() w.r.t. param.data."""
    grad = np.zeros_like(param.data)
    flat = param.data.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(f().data)
        flat[i] = orig - step
        lo = float(f().data)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def assert_grad_close(analytic: np.ndarray, numeric: np.ndarray,
                      rel: float = 1e-4, abs_tol: float = 1e-6) -> None:
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    err = np.abs(analytic - numeric)
    tol = np.maximum(rel * np.maximum(np.abs(analytic), np.abs(numeric)), abs_tol)
    worst = float((err - tol).max())
    assert (err <= tol).all(), f"gradient mismatch, worst excess {worst:.3e}"
