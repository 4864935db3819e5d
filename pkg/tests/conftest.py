"""Shared test oracles: finite differences and batch generators."""

import numpy as np


def central_diff_grad(f, z, h=1e-6):
    """Gradient of scalar f at z by central differences, one entry at a time.

    Independent of any analytic derivation; used as the reference that the
    hand-written gradients must match.
    """
    z = np.asarray(z, dtype=np.float64)
    g = np.zeros_like(z)
    for idx in np.ndindex(*z.shape):
        zp = z.copy()
        zp[idx] += h
        zm = z.copy()
        zm[idx] -= h
        g[idx] = (f(zp) - f(zm)) / (2.0 * h)
    return g


def grad_rel_error(analytic, reference):
    """Infinity-norm relative gradient error against a reference."""
    analytic = np.asarray(analytic, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    scale = max(np.abs(reference).max(), 1e-8)
    return float(np.abs(analytic - reference).max() / scale)


def random_logits(rng, n, k, scale=3.0):
    """Moderate-magnitude logits: softmax well away from hard saturation so
    finite differences stay well conditioned."""
    return scale * rng.standard_normal((n, k))
