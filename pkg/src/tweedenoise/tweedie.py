"""Tweedie exponential-dispersion mathematics.

A Tweedie model has conditional variance ``V[mu] = phi * mu**rho``.  The
members used here:

    rho = 0   Gaussian,         phi = sigma^2
    rho = 1   Poisson (scaled), phi = zeta
    rho = 2   Gamma,            phi = 1/k      (shape alpha = beta = k)
    rho = 3   inverse Gaussian  (density only; never blindly estimated)

The density is handled through the saddle-point form

    p(y; mu, phi) ~= (2*pi*phi*y**rho)**(-1/2) * exp(-d(y, mu) / (2*phi))

with unit deviance

    d(y, mu) = 2 * [ y^(2-rho)/((1-rho)(2-rho))
                     - y*mu^(1-rho)/(1-rho) + mu^(2-rho)/(2-rho) ]

and the posterior mean of mu given a noisy y and the marginal score
l'(y) = d/dy log p(y) is

    xhat = y * (1 + (1-rho)*alpha)^(1/(1-rho)),
    alpha = phi * y^(rho-1) * (rho/(2y) + l'(y)),

which reduces exactly to the familiar special cases at rho = 0 and 2 and to
``y*exp(alpha)`` in the rho -> 1 limit.

All functions are elementwise over numpy arrays and pure.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DomainError, SingularEstimateError

# Intensities are clamped below at this floor before entering any formula
# with y^(rho-1), log(y) or 1/y in it.
EPS_Y = 1e-4

# |rho - b| below this routes to the analytic branch at b in {1, 2}; the
# generic deviance expression cancels catastrophically nearby.
BRANCH_EPS = 1e-6

# Batch Gamma denoising clamps (k - 1) - y*l'(y) below at this floor
# instead of raising per pixel.
GAMMA_DENOM_FLOOR = 1e-6


class ModelKind(str, Enum):
    GAUSSIAN = "gaussian"
    POISSON = "poisson"
    GAMMA = "gamma"
    INVERSE_GAUSSIAN = "invgauss"


# power-variance index per kind
MODEL_RHO = {
    ModelKind.GAUSSIAN: 0.0,
    ModelKind.POISSON: 1.0,
    ModelKind.GAMMA: 2.0,
    ModelKind.INVERSE_GAUSSIAN: 3.0,
}


@dataclass(frozen=True)
class TweedieParams:
    """The pair (rho, phi) of a power-variance dispersion model."""

    rho: float
    phi: float

    def validate(self, for_density: bool = False) -> "TweedieParams":
        # phi may be an array (one dispersion per pixel); rho stays scalar
        phi = np.asarray(self.phi)
        if not np.isfinite(self.rho) or not np.all(np.isfinite(phi)):
            raise DomainError(f"non-finite Tweedie params {self}")
        if np.any(phi <= 0):
            raise DomainError(f"phi must be positive, got {self.phi}")
        if for_density and 0.0 < self.rho < 1.0:
            # no EDM exists on (0,1); such values occur only as estimates
            raise DomainError(f"rho={self.rho} in (0,1) has no density")
        return self


@dataclass(frozen=True)
class NoiseModel:
    """A concrete noise family plus its level parameter.

    ``level`` is sigma^2 for Gaussian, zeta for Poisson, k for Gamma and
    phi for inverse Gaussian.
    """

    kind: ModelKind
    level: float

    def validate(self) -> "NoiseModel":
        kind = ModelKind(self.kind)
        if not np.isfinite(self.level) or self.level <= 0:
            raise DomainError(f"level must be finite and positive, got {self.level}")
        if kind is ModelKind.GAMMA and self.level <= 1:
            # the denoising formula divides by (k - 1) - y*l'(y)
            raise DomainError(f"Gamma requires k > 1, got {self.level}")
        return self

    @property
    def rho(self) -> float:
        return MODEL_RHO[ModelKind(self.kind)]

    @property
    def phi(self) -> float:
        kind = ModelKind(self.kind)
        if kind is ModelKind.GAMMA:
            return 1.0 / self.level
        return self.level

    @property
    def params(self) -> TweedieParams:
        return TweedieParams(self.rho, self.phi)


def _check_positive(name, x):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DomainError(f"{name} contains non-finite entries")
    if np.any(x <= 0):
        raise DomainError(f"{name} must be strictly positive")
    return x


def unit_deviance(y, mu, rho: float):
    """Unit deviance d(y, mu) of the rho-Tweedie family.

    Uses the analytic limits at rho in {0, 1, 2} and the generic power
    expression elsewhere; nonnegative, zero iff y == mu.
    """
    y = _check_positive("y", y)
    mu = _check_positive("mu", mu)
    if not np.isfinite(rho):
        raise DomainError(f"rho must be finite, got {rho}")
    if rho == 0.0:
        return np.square(y - mu)
    if abs(rho - 1.0) < BRANCH_EPS:
        return 2.0 * (y * np.log(y / mu) - (y - mu))
    if abs(rho - 2.0) < BRANCH_EPS:
        return 2.0 * (y / mu - np.log(y / mu) - 1.0)
    r1, r2 = 1.0 - rho, 2.0 - rho
    # difference-of-powers arrangement: exactly 0 at y == mu, no residue
    # from three-way cancellation
    return 2.0 * (
        y * (np.power(y, r1) - np.power(mu, r1)) / r1
        - (np.power(y, r2) - np.power(mu, r2)) / r2
    )


def saddle_density(y, params: TweedieParams, mu):
    """Saddle-point density (2*pi*phi*y^rho)^(-1/2) * exp(-d/(2*phi)).

    Computed through the log so that overflow degrades to 0 / +inf
    consistently with the sign of the exponent.
    """
    params.validate(for_density=True)
    y = _check_positive("y", y)
    mu = _check_positive("mu", mu)
    d = unit_deviance(y, mu, params.rho)
    log_norm = -0.5 * (np.log(2.0 * np.pi * params.phi) + params.rho * np.log(y))
    with np.errstate(over="ignore"):
        return np.exp(log_norm - d / (2.0 * params.phi))


def variance_function(mu, params: TweedieParams):
    """Conditional variance V[mu] = phi * mu**rho."""
    params.validate()
    mu = _check_positive("mu", mu)
    return params.phi * np.power(mu, params.rho)


def alpha_term(y, params: TweedieParams, score):
    """alpha(y, rho, phi) = phi * y^(rho-1) * (rho/(2y) + l'(y))."""
    params.validate()
    y = _check_positive("y", y)
    score = np.asarray(score, dtype=np.float64)
    return params.phi * np.power(y, params.rho - 1.0) * (params.rho / (2.0 * y) + score)


def posterior_mean_universal(y, params: TweedieParams, score):
    """Posterior mean y*(1 + (1-rho)*alpha)^(1/(1-rho)) for any rho.

    Near rho = 1 the L'Hospital limit y*exp(alpha) is used.  Raises
    :class:`SingularEstimateError` if the base of the fractional power is
    not positive at some pixel; see :func:`denoise_field` for the guarded
    batch variant.
    """
    a = alpha_term(y, params, score)
    y = np.asarray(y, dtype=np.float64)
    if params.rho == 0.0:
        # exponent 1/(1-rho) is exactly 1; the reduction to y + phi*l'(y)
        # is an algebraic identity and evaluating it directly keeps the
        # Gaussian case exact (no power/cancellation round-off)
        return y + params.phi * np.asarray(score, dtype=np.float64)
    if abs(params.rho - 1.0) < BRANCH_EPS:
        return y * np.exp(a)
    r1 = 1.0 - params.rho
    base = 1.0 + r1 * a
    bad = base <= 0.0
    if np.any(bad):
        idx = int(np.flatnonzero(np.atleast_1d(bad))[0])
        raise SingularEstimateError(
            f"non-positive fractional-power base at pixel {idx} "
            f"(rho={params.rho}, base={np.atleast_1d(base).ravel()[idx]:.3e})"
        )
    return y * np.power(base, 1.0 / r1)


def posterior_mean_special(y, model: NoiseModel, score):
    """Closed-form posterior means for the three denoising families.

    Gaussian:  y + sigma^2 * l'(y)
    Poisson:   (y + zeta/2) * exp(zeta * l'(y))
    Gamma:     k*y / ((k - 1) - y*l'(y))
    """
    model.validate()
    y = _check_positive("y", y)
    score = np.asarray(score, dtype=np.float64)
    kind = ModelKind(model.kind)
    if kind is ModelKind.GAUSSIAN:
        return y + model.level * score
    if kind is ModelKind.POISSON:
        with np.errstate(over="ignore"):
            return (y + model.level / 2.0) * np.exp(model.level * score)
    if kind is ModelKind.GAMMA:
        k = model.level
        denom = (k - 1.0) - y * score
        bad = denom <= GAMMA_DENOM_FLOOR
        if np.any(bad):
            idx = int(np.flatnonzero(np.atleast_1d(bad))[0])
            raise SingularEstimateError(
                f"Gamma denominator {np.atleast_1d(denom).ravel()[idx]:.3e} at or "
                f"below floor {GAMMA_DENOM_FLOOR} at pixel {idx}"
            )
        return k * y / denom
    raise DomainError(f"no denoising formula for {kind}")


def denoise_field(y, model: NoiseModel, score):
    """Batch posterior mean with the per-pixel singularity guards.

    Returns ``(xhat, n_singular)``.  Gamma denominators are clamped below
    at :data:`GAMMA_DENOM_FLOOR`; any remaining non-finite estimate falls
    back to the identity xhat = y.  Both events count as singular pixels.
    """
    model.validate()
    y = _check_positive("y", y)
    score = np.asarray(score, dtype=np.float64)
    kind = ModelKind(model.kind)
    n_singular = 0
    if kind is ModelKind.GAUSSIAN:
        xhat = y + model.level * score
    elif kind is ModelKind.POISSON:
        with np.errstate(over="ignore"):
            xhat = (y + model.level / 2.0) * np.exp(model.level * score)
    elif kind is ModelKind.GAMMA:
        k = model.level
        denom = (k - 1.0) - y * score
        clamped = denom < GAMMA_DENOM_FLOOR
        n_singular += int(np.count_nonzero(clamped))
        xhat = k * y / np.maximum(denom, GAMMA_DENOM_FLOOR)
    else:
        raise DomainError(f"no denoising formula for {kind}")
    bad = ~np.isfinite(xhat)
    if np.any(bad):
        n_singular += int(np.count_nonzero(bad))
        xhat = np.where(bad, y, xhat)
    return xhat, n_singular


def guarded_universal(y, params: TweedieParams, score):
    """Universal formula with the fractional-power guard.

    Pixels where 1 + (1-rho)*alpha <= 0 fall back to xhat = y; returns
    ``(xhat, n_fallback)``.
    """
    a = alpha_term(y, params, score)
    y = np.asarray(y, dtype=np.float64)
    if params.rho == 0.0:
        return y + params.phi * np.asarray(score, dtype=np.float64), 0
    if abs(params.rho - 1.0) < BRANCH_EPS:
        return y * np.exp(a), 0
    r1 = 1.0 - params.rho
    base = 1.0 + r1 * a
    bad = base <= 0.0
    with np.errstate(invalid="ignore"):
        xhat = y * np.power(np.where(bad, 1.0, base), 1.0 / r1)
    xhat = np.where(bad, y, xhat)
    return xhat, int(np.count_nonzero(bad))
