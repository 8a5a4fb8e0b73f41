"""The disparity group (0,1)^n.

Inverse depth lives in the open unit interval.  The group law

    x * y = x y / (1 - x - y + 2 x y)

has identity 1/2 and inverse 1 - x, and the chart ``exp(t) = sigmoid(4 t)``
is an isomorphism onto (R^n, +).  All operations are component-wise.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit, logit

from .lie import MatrixGroup

EPS_D = 1e-9


def clamp(x) -> np.ndarray:
    return np.clip(np.asarray(x, dtype=float), EPS_D, 1.0 - EPS_D)


def d_compose(x, y) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    # x + y is evaluated first so the result is exactly commutative.
    xy = x * y
    return clamp(xy / (1.0 - (x + y) + 2.0 * xy))


def d_inverse(x) -> np.ndarray:
    return clamp(1.0 - np.asarray(x, dtype=float))


def d_exp(t) -> np.ndarray:
    return clamp(expit(4.0 * np.asarray(t, dtype=float)))


def d_log(x) -> np.ndarray:
    return 0.25 * logit(clamp(x))


def d_exp_derivative(d) -> np.ndarray:
    """Derivative of the chart at ``d_log(d)``, i.e. 4 d (1 - d)."""
    d = np.asarray(d, dtype=float)
    return 4.0 * d * (1.0 - d)


class DisparityGroup(MatrixGroup):
    abelian = True

    def __init__(self, dim: int):
        self.dim = int(dim)

    def identity(self):
        return np.full(self.dim, 0.5)

    def compose(self, a, b):
        return d_compose(a, b)

    def inverse(self, a):
        return d_inverse(a)

    def exp(self, xi):
        return d_exp(self.check_vector(xi))

    def log(self, x):
        return d_log(x)

    def ad(self, xi):
        return np.zeros((self.dim, self.dim))
