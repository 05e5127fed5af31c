"""Trigamma function.

Upward recurrence ``psi1(x) = psi1(x + 1) + 1/x**2`` until the argument is
large enough for the asymptotic expansion

    psi1(x) ~ 1/x + 1/(2x^2) + sum_k B_2k / x^(2k+1)

to be accurate to well below 1e-12 relative.
"""

import numpy as np

# B_2k for k = 1..8
_BERNOULLI = (
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
    -3617.0 / 510.0,
)

_SHIFT_TO = 12.0


def _asymptotic(x):
    inv = 1.0 / x
    inv2 = inv * inv
    # Horner over B_2k * inv^(2k+1), innermost term first
    series = np.zeros_like(x)
    for b in reversed(_BERNOULLI):
        series = (series + b) * inv2
    return inv + 0.5 * inv2 + series * inv


def trigamma(x):
    """Second derivative of ``log Gamma`` for positive arguments.

    Accepts scalars or arrays and returns the same shape. Raises
    ``ValueError`` for nonpositive or non-finite input.
    """
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0):
        raise ValueError("trigamma is only defined here for finite x > 0")
    z = np.array(arr, copy=True)
    acc = np.zeros_like(z)
    small = z < _SHIFT_TO
    while np.any(small):
        acc = np.where(small, acc + 1.0 / (z * z), acc)
        z = np.where(small, z + 1.0, z)
        small = z < _SHIFT_TO
    out = acc + _asymptotic(z)
    return float(out) if out.ndim == 0 else out
