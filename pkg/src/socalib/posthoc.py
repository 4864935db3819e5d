"""Post-hoc calibration: temperature, vector, and matrix scaling.

All three rescale held-out logits to minimize validation NLL, leaving the
trained network untouched. Temperature scaling divides every logit by one
scalar T (golden-section search on ln T, then a few Newton polish steps);
vector and matrix scaling fit an affine per-class map by full-batch
gradient descent with a backtracking line search. For models with an
unknown class the scalers operate on the full logit vector; downstream
metrics keep their own conventions.

Fitted scalers serialize to plain JSON-able dicts: {"kind": ..., "params":
{...}}.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .losses import softmax_stable

T_LOG_BOUNDS = (math.log(0.05), math.log(20.0))
_GOLDEN_TOL = 1e-6
_NEWTON_STEPS = 5
_GD_GRAD_TOL = 1e-6
_GD_MAX_ITERS = 5000
_ARMIJO_C = 1e-4


class DimensionMismatchError(ValueError):
    """Scaler and logits disagree on the number of classes."""


class FitDivergedError(RuntimeError):
    """The objective went non-finite during fitting."""


@dataclass(frozen=True)
class TemperatureScaler:
    t: float

    def __post_init__(self):
        if not (np.isfinite(self.t) and self.t > 0):
            raise ValueError("temperature must be positive and finite")


@dataclass(frozen=True)
class VectorScaler:
    scale: np.ndarray
    bias: np.ndarray


@dataclass(frozen=True)
class MatrixScaler:
    weight: np.ndarray
    bias: np.ndarray


Scaler = TemperatureScaler | VectorScaler | MatrixScaler


def nll(logits: np.ndarray, labels) -> float:
    """Mean negative log-likelihood via log-sum-exp (no clamping needed)."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    return float(np.mean(lse - z[np.arange(len(y)), y]))


def _check_fit_inputs(logits, labels):
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or z.shape[0] == 0:
        raise ValueError("need a nonempty (n, K) logit matrix")
    if y.shape != (z.shape[0],) or y.min() < 0 or y.max() >= z.shape[1]:
        raise ValueError("labels must index logit columns")
    return z, y


def fit_temperature(logits: np.ndarray, labels) -> TemperatureScaler:
    """Single-parameter recalibration: T minimizing NLL of softmax(z / T).

    ln T is bracketed in [ln 0.05, ln 20] by golden-section search down to
    an interval of 1e-6, then polished with 5 bounded Newton steps using
    the analytic first and second derivatives of NLL in ln T.
    """
    z, y = _check_fit_inputs(logits, labels)
    lo, hi = T_LOG_BOUNDS

    def f(u: float) -> float:
        return nll(z / math.exp(u), y)

    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while (b - a) > _GOLDEN_TOL:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    u = 0.5 * (a + b)

    # Newton in u = ln T:  dNLL/du = S/(nT) with S = sum(z_y - E_p[z]);
    # d2NLL/du2 = -dNLL/du + sum(Var_p[z]) / (nT^2).
    n = z.shape[0]
    rows = np.arange(n)
    for _ in range(_NEWTON_STEPS):
        t = math.exp(u)
        p = softmax_stable(z / t)
        ez = (p * z).sum(axis=1)
        ez2 = (p * z * z).sum(axis=1)
        var = np.maximum(ez2 - ez * ez, 0.0)
        g = float(np.sum(z[rows, y] - ez)) / (n * t)
        h = -g + float(np.sum(var)) / (n * t * t)
        if h <= 0 or not np.isfinite(h):
            break
        u = min(max(u - g / h, lo), hi)
    return TemperatureScaler(t=math.exp(u))


def _gd_fit(z, y, unpack, pack, grad_fn, theta0, reg_grad=None):
    """Full-batch gradient descent with Armijo backtracking.

    unpack(theta) -> transformed logits; grad_fn(p, resid) -> flat gradient.
    Stops when the gradient infinity norm drops below 1e-6 or after 5000
    iterations, whichever is first.
    """
    n, k = z.shape
    onehot = np.zeros((n, k))
    onehot[np.arange(n), y] = 1.0

    def objective(theta):
        return nll(unpack(theta), y) + (reg_grad.penalty(theta) if reg_grad else 0.0)

    theta = theta0
    fval = objective(theta)
    if not np.isfinite(fval):
        raise FitDivergedError("non-finite objective at init")
    step = 1.0
    for _ in range(_GD_MAX_ITERS):
        p = softmax_stable(unpack(theta))
        resid = (p - onehot) / n
        g = grad_fn(theta, resid)
        if reg_grad:
            g = g + reg_grad.grad(theta)
        gnorm = np.abs(g).max()
        if not np.isfinite(gnorm):
            raise FitDivergedError("non-finite gradient")
        if gnorm < _GD_GRAD_TOL:
            break
        gsq = float(np.dot(g, g))
        step = min(step * 2.0, 10.0)
        while True:
            cand = theta - step * g
            fcand = objective(cand)
            if np.isfinite(fcand) and fcand <= fval - _ARMIJO_C * step * gsq:
                theta, fval = cand, fcand
                break
            step *= 0.5
            if step < 1e-20:
                return pack(theta)  # flat landscape; nothing left to gain
    return pack(theta)


def fit_vector_scaling(logits: np.ndarray, labels) -> VectorScaler:
    """Per-class affine map scale * z + bias minimizing validation NLL."""
    z, y = _check_fit_inputs(logits, labels)
    n, k = z.shape
    if n < k:
        raise ValueError(f"need at least K={k} samples to fit")

    def unpack(theta):
        return z * theta[:k] + theta[k:]

    def grad_fn(theta, resid):
        return np.concatenate([(resid * z).sum(axis=0), resid.sum(axis=0)])

    theta0 = np.concatenate([np.ones(k), np.zeros(k)])
    out = _gd_fit(z, y, unpack, lambda th: th, grad_fn, theta0)
    return VectorScaler(scale=out[:k].copy(), bias=out[k:].copy())


class _MatrixReg:
    """Optional ridge pull of W toward the identity: lam * ||W - I||^2."""

    def __init__(self, lam: float, k: int):
        self.lam = lam
        self.k = k
        self.eye = np.eye(k).ravel()

    def penalty(self, theta):
        w = theta[: self.k * self.k]
        d = w - self.eye
        return self.lam * float(np.dot(d, d))

    def grad(self, theta):
        g = np.zeros_like(theta)
        w = theta[: self.k * self.k]
        g[: self.k * self.k] = 2.0 * self.lam * (w - self.eye)
        return g


def fit_matrix_scaling(
    logits: np.ndarray, labels, l2: float = 0.0
) -> MatrixScaler:
    """Full affine map W z + b minimizing validation NLL.

    ``l2`` adds an optional ridge penalty l2 * ||W - I||^2 (off by default)
    for when the unconstrained fit is too unstable to be useful.
    """
    z, y = _check_fit_inputs(logits, labels)
    n, k = z.shape
    if n < k:
        raise ValueError(f"need at least K={k} samples to fit")
    if n < k * k:
        warnings.warn(
            f"matrix scaling with n={n} < K^2={k * k} samples is"
            " under-determined; expect instability",
            stacklevel=2,
        )

    def unpack(theta):
        w = theta[: k * k].reshape(k, k)
        return z @ w.T + theta[k * k :]

    def grad_fn(theta, resid):
        return np.concatenate(
            [(resid.T @ z).ravel(), resid.sum(axis=0)]
        )

    theta0 = np.concatenate([np.eye(k).ravel(), np.zeros(k)])
    reg = _MatrixReg(l2, k) if l2 > 0 else None
    out = _gd_fit(z, y, unpack, lambda th: th, grad_fn, theta0, reg)
    return MatrixScaler(
        weight=out[: k * k].reshape(k, k).copy(), bias=out[k * k :].copy()
    )


def apply_scaler(scaler: Scaler, logits: np.ndarray) -> np.ndarray:
    """Scaled logits pushed through the stable softmax."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError("logits must be (n, K)")
    k = z.shape[1]
    if isinstance(scaler, TemperatureScaler):
        return softmax_stable(z / scaler.t)
    if isinstance(scaler, VectorScaler):
        if scaler.scale.shape != (k,) or scaler.bias.shape != (k,):
            raise DimensionMismatchError(
                f"vector scaler is {scaler.scale.shape[0]}-class, logits are {k}"
            )
        return softmax_stable(z * scaler.scale + scaler.bias)
    if isinstance(scaler, MatrixScaler):
        if scaler.weight.shape != (k, k) or scaler.bias.shape != (k,):
            raise DimensionMismatchError(
                f"matrix scaler is {scaler.weight.shape[0]}-class, logits are {k}"
            )
        return softmax_stable(z @ scaler.weight.T + scaler.bias)
    raise TypeError(f"not a scaler: {scaler!r}")


def scaler_to_dict(scaler: Scaler) -> dict:
    if isinstance(scaler, TemperatureScaler):
        return {"kind": "temperature", "params": {"t": scaler.t}}
    if isinstance(scaler, VectorScaler):
        return {
            "kind": "vector",
            "params": {
                "scale": scaler.scale.tolist(),
                "bias": scaler.bias.tolist(),
            },
        }
    if isinstance(scaler, MatrixScaler):
        return {
            "kind": "matrix",
            "params": {
                "weight": scaler.weight.tolist(),
                "bias": scaler.bias.tolist(),
            },
        }
    raise TypeError(f"not a scaler: {scaler!r}")


def scaler_from_dict(data: dict) -> Scaler:
    kind = data.get("kind")
    params = data.get("params", {})
    if kind == "temperature":
        return TemperatureScaler(t=float(params["t"]))
    if kind == "vector":
        return VectorScaler(
            scale=np.asarray(params["scale"], dtype=np.float64),
            bias=np.asarray(params["bias"], dtype=np.float64),
        )
    if kind == "matrix":
        return MatrixScaler(
            weight=np.asarray(params["weight"], dtype=np.float64),
            bias=np.asarray(params["bias"], dtype=np.float64),
        )
    raise ValueError(f"unknown scaler kind: {kind!r}")
