"""Polynomial activation coefficients and their dense reference evaluation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import ShapeError, as_dense, spmm

__all__ = [
    "PtsCoefficients",
    "pts_dense_reference",
    "poly_eval",
    "taylor_init_sigmoid",
    "linear_init",
    "l2_penalty",
]

# sigma(x) = 1/2 + x/4 - x^3/48 + x^5/480 - 17 x^7/80640 + 31 x^9/1451520 - ...
_SIGMOID_TAYLOR = [0.5, 0.25, 0.0, -1.0 / 48, 0.0, 1.0 / 480, 0.0, -17.0 / 80640, 0.0,
                   31.0 / 1451520]


@dataclass
class PtsCoefficients:
    """Per-layer coefficient vectors ``[c0, c1, ..., cr]``.

    ``c0`` is stored even when the bias is disabled; in that case it is held
    at zero and never trained.
    """

    values: list[np.ndarray]
    bias: bool = True

    @property
    def r(self) -> int:
        return len(self.values[0]) - 1

    def copy(self) -> "PtsCoefficients":
        return PtsCoefficients([v.copy() for v in self.values], self.bias)


def poly_eval(z, coeffs, bias: bool = True) -> np.ndarray:
    """``c0 + sum_k c_k z**k`` elementwise (``c0`` skipped when ``bias`` is off)."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    out = np.full_like(z, coeffs[0] if bias else 0.0)
    power = np.ones_like(z)
    for ck in coeffs[1:]:
        power = power * z
        out = out + ck * power
    return out


def pts_dense_reference(cmat, x, w, coeffs, bias: bool = True) -> np.ndarray:
    """Exact ``c0 + sum_k c_k (C X W)^{.k}``; the oracle for sketched layers."""
    x = as_dense(x)
    w = as_dense(w)
    if x.shape[1] != w.shape[0] or np.shape(cmat)[1] != x.shape[0]:
        raise ShapeError(f"pts: C{np.shape(cmat)} X{x.shape} W{w.shape} do not chain")
    z = spmm(cmat, x @ w) if not isinstance(cmat, np.ndarray) else cmat @ (x @ w)
    return poly_eval(z, coeffs, bias)


def taylor_init_sigmoid(r: int, bias: bool = True) -> np.ndarray:
    """Length ``r + 1`` vector of sigmoid Taylor coefficients about 0."""
    if r < 1:
        raise ValueError("r must be at least 1")
    coeffs = np.zeros(r + 1)
    m = min(r + 1, len(_SIGMOID_TAYLOR))
    coeffs[:m] = _SIGMOID_TAYLOR[:m]
    if not bias:
        coeffs[0] = 0.0
    return coeffs


def linear_init(r: int) -> np.ndarray:
    coeffs = np.zeros(r + 1)
    coeffs[1] = 1.0
    return coeffs


def l2_penalty(coeffs, lam: float, bias: bool = True):
    """``lam * sum c_k^2`` and its gradient; ``c0`` counts only with the bias on."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    coeffs = np.asarray(coeffs, dtype=np.float64)
    mask = np.ones_like(coeffs)
    if not bias and coeffs.size > 1:
        mask[0] = 0.0
    return float(lam * np.sum(mask * coeffs**2)), 2.0 * lam * mask * coeffs
