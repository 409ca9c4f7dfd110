"""One-sided truncated normal draws."""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr

from .gibbs import _rtruncnorm

def rtruncnorm(mean: float, sd: float, sign: int, rng: np.random.Generator) -> float:
    """Draw from N(mean, sd^2) restricted to x > 0 (sign=+1) or x < 0 (sign=-1)."""
    if sd <= 0:
        raise ValueError("sd must be positive")
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    return float(_rtruncnorm(float(mean), float(sd), int(sign), rng))


def truncnorm_moments(mean: float, sd: float, sign: int) -> tuple[float, float]:
    """Mean and variance of the one-sided truncated normal (for checks)."""
    if sign < 0:
        m, v = truncnorm_moments(-mean, sd, 1)
        return -m, v
    alpha = -mean / sd
    lam = np.exp(-0.5 * alpha**2) / np.sqrt(2 * np.pi) / ndtr(-alpha)
    return mean + sd * lam, sd**2 * (1 + alpha * lam - lam**2)
