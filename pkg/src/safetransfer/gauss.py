"""Scalar Gaussian helpers used by the safety controller.

Everything here is a pure function of its arguments. Functions that take raw
``mu``/``sigma`` arrays broadcast with numpy so the controller can evaluate a
whole batch of visited states at once; the ``GaussParams`` entry points are the
scalar, validated surface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

__all__ = [
    "GaussParams",
    "TruncatedGauss",
    "normal_cdf",
    "trunc_prob",
    "tail_mass",
    "tail_mass_array",
    "gauss_kl",
    "mean_shift_from_kl",
    "intersection_area",
]

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GaussParams:
    mu: float
    sigma: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.mu) and math.isfinite(self.sigma)):
            raise ValueError(f"non-finite Gaussian parameters: {self}")
        if self.sigma <= 0.0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")

    def pdf(self, x: float) -> float:
        z = (x - self.mu) / self.sigma
        return math.exp(-0.5 * z * z - _LOG_SQRT_2PI) / self.sigma


@dataclass(frozen=True)
class TruncatedGauss:
    """Distribution of ``clip(T, -t_lim, t_lim)`` for ``T ~ N(mu, sigma^2)``.

    Mixed distribution: a density on the open interval plus two point masses
    sitting on the bounds.
    """

    base: GaussParams
    t_lim: float

    def __post_init__(self) -> None:
        if not self.t_lim > 0.0:
            raise ValueError(f"t_lim must be > 0, got {self.t_lim}")

    @property
    def lower_mass(self) -> float:
        return normal_cdf(-self.t_lim, self.base)

    @property
    def upper_mass(self) -> float:
        # 1 - F(t_lim) written without cancellation
        return float(ndtr((self.base.mu - self.t_lim) / self.base.sigma))


def normal_cdf(x, p: GaussParams):
    """CDF of ``N(p.mu, p.sigma^2)`` at ``x`` (scalar or array).

    Backed by Cephes ``ndtr``, which evaluates through erf/erfc and stays within
    a few ulp of the true value over the whole real line.
    """
    z = (np.asarray(x, dtype=float) - p.mu) / p.sigma
    out = ndtr(z)
    return float(out) if np.ndim(out) == 0 else out


def trunc_prob(d: TruncatedGauss, t: float) -> tuple[float, float]:
    """Return ``(density, point_mass)`` of the clipped torque at ``t``."""
    if t == -d.t_lim:
        return 0.0, d.lower_mass
    if t == d.t_lim:
        return 0.0, d.upper_mass
    if -d.t_lim < t < d.t_lim:
        return d.base.pdf(t), 0.0
    return 0.0, 0.0


def tail_mass_array(mu, sigma, t_lim):
    """Vectorised ``P(|T| >= t_lim)`` for ``T ~ N(mu, sigma^2)``."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    return ndtr((-t_lim - mu) / sigma) + ndtr((mu - t_lim) / sigma)


def tail_mass(p: GaussParams, t_lim: float) -> float:
    """Probability that an unclipped draw falls at or beyond the limit."""
    if not t_lim > 0.0:
        raise ValueError(f"t_lim must be > 0, got {t_lim}")
    return float(min(1.0, tail_mass_array(p.mu, p.sigma, t_lim)))


def gauss_kl(p1: GaussParams, p2: GaussParams) -> float:
    """KL(p1 || p2) in nats."""
    if p1 == p2:
        return 0.0
    return (
        math.log(p2.sigma / p1.sigma)
        + (p1.sigma**2 + (p1.mu - p2.mu) ** 2) / (2.0 * p2.sigma**2)
        - 0.5
    )


def mean_shift_from_kl(sigma: float, delta_kl: float) -> float:
    """Mean displacement between equal-variance Gaussians at KL ``delta_kl``."""
    if sigma <= 0.0 or delta_kl < 0.0:
        raise ValueError(f"need sigma > 0 and delta_kl >= 0, got {sigma}, {delta_kl}")
    return sigma * math.sqrt(2.0 * delta_kl)


def intersection_area(sigma: float, delta_kl: float) -> float:
    """Overlap of two equal-variance Gaussians whose KL is ``delta_kl``.

    The means sit ``sigma * sqrt(2 delta_kl)`` apart and the curves cross
    halfway, so the overlap is ``2 F(mu - sigma sqrt(delta_kl / 2))``. In
    standard units that is ``2 Phi(-sqrt(delta_kl / 2))``; neither the mean nor
    sigma survives.
    """
    if sigma <= 0.0 or delta_kl < 0.0:
        raise ValueError(f"need sigma > 0 and delta_kl >= 0, got {sigma}, {delta_kl}")
    return float(2.0 * ndtr(-math.sqrt(delta_kl / 2.0)))
