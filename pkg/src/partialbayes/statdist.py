"""Distribution kernels shared by the samplers and p-value formulas.

Everything here is a pure function or a frozen value object.  Heavy lifting
(incomplete beta / gamma functions and their inverses) is delegated to
``scipy.special``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

LOG2 = math.log(2.0)

# Scale that turns a unit-variance t8 variable into a plain t8 variable.
T8_DF = 8.0
T8_SCALE = math.sqrt(T8_DF / (T8_DF - 2.0))


def _reject_nan(x):
    if np.any(np.isnan(x)):
        raise ValueError("NaN input")


def std_normal_cdf(x):
    """Standard normal distribution function, accurate in both tails."""
    x = np.asarray(x, dtype=float)
    _reject_nan(x)
    out = special.ndtr(x)
    return out if out.ndim else float(out)


def std_normal_logcdf(x):
    x = np.asarray(x, dtype=float)
    _reject_nan(x)
    out = special.log_ndtr(x)
    return out if out.ndim else float(out)


def student_t_cdf(x, df):
    """Student-t distribution function via the regularized incomplete beta.

    Uses ``F(x) = 1 - I_{df/(df+x^2)}(df/2, 1/2) / 2`` for ``x > 0`` and the
    mirrored expression below zero, so the lower tail keeps full relative
    precision.
    """
    df = np.asarray(df, dtype=float)
    if np.any(df <= 0):
        raise ValueError("degrees of freedom must be positive")
    x = np.asarray(x, dtype=float)
    _reject_nan(x)
    tail = 0.5 * student_t_twosided_sf(x, df)
    out = np.where(x > 0, 1.0 - tail, tail)
    return out if out.ndim else float(out)


def student_t_twosided_sf(x, df):
    """P(|T| >= |x|) for T ~ t_df."""
    x = np.abs(np.asarray(x, dtype=float))
    df = np.asarray(df, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        arg = np.where(np.isinf(x), 0.0, df / (df + x * x))
    out = special.betainc(0.5 * df, 0.5, arg)
    return out if out.ndim else float(out)


def student_t_logpdf(x, df):
    x = np.asarray(x, dtype=float)
    return (
        special.gammaln(0.5 * (df + 1.0))
        - special.gammaln(0.5 * df)
        - 0.5 * math.log(df * math.pi)
        - 0.5 * (df + 1.0) * np.log1p(x * x / df)
    )


@dataclass(frozen=True)
class ScaledInvChiSq:
    """Scaled inverse chi-squared law ``nu * sigma2 / chi2_nu``."""

    nu: float
    sigma2: float

    def __post_init__(self):
        if not (self.nu > 0 and self.sigma2 > 0):
            raise ValueError(f"invalid ScaledInvChiSq({self.nu}, {self.sigma2})")

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x <= 0):
            raise ValueError("ScaledInvChiSq.logpdf requires x > 0")
        h = 0.5 * self.nu
        out = (
            h * math.log(h * self.sigma2)
            - special.gammaln(h)
            - (h + 1.0) * np.log(x)
            - h * self.sigma2 / x
        )
        return out if out.ndim else float(out)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            out = np.where(
                x > 0, special.gammaincc(0.5 * self.nu, 0.5 * self.nu * self.sigma2 / np.maximum(x, 1e-300)), 0.0
            )
        return out if out.ndim else float(out)

    def quantile(self, p):
        p = np.asarray(p, dtype=float)
        g = special.gammainccinv(0.5 * self.nu, p)
        with np.errstate(divide="ignore"):
            out = 0.5 * self.nu * self.sigma2 / g
        return out if out.ndim else float(out)

    def sample(self, rng: np.random.Generator, size=None):
        return self.nu * self.sigma2 / rng.chisquare(self.nu, size=size)

    def mean(self) -> float:
        if self.nu <= 2:
            return math.inf
        return self.nu * self.sigma2 / (self.nu - 2.0)

    def mode(self) -> float:
        return self.nu * self.sigma2 / (self.nu + 2.0)


def sample_variance_loglik(s2, sigma2, K):
    """Log-density of the sample variance ``S^2 ~ sigma2 * chi2_{K-1} / (K-1)``.

    At ``s2 = 0`` the density is infinite for ``K = 2``, equal to
    ``1/sigma2`` for ``K = 3`` and zero for ``K >= 4``.
    """
    if np.any(np.asarray(K) < 2):
        raise ValueError("need K >= 2 replicates")
    s2 = np.asarray(s2, dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float)
    d = np.asarray(K, dtype=float) - 1.0
    h = 0.5 * d
    with np.errstate(divide="ignore", invalid="ignore"):
        # (h-1)*log(s2) with the 0*log(0) = 0 convention for K = 3
        pow_term = np.where(h == 1.0, 0.0, (h - 1.0) * np.log(s2))
        out = (
            h * np.log(h / sigma2)
            - special.gammaln(h)
            + pow_term
            - h * s2 / sigma2
        )
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class Subbotin:
    """Generalized Gaussian (exponential power) law with shape ``xi``."""

    xi: float
    b: float
    theta: float = 0.0

    def __post_init__(self):
        if not (self.xi > 0 and self.b > 0):
            raise ValueError("Subbotin shape and scale must be positive")

    @classmethod
    def from_variance(cls, xi: float, sigma2: float, theta: float = 0.0) -> "Subbotin":
        return cls(xi, subbotin_scale_for_variance(xi, sigma2), theta)

    def logpdf(self, x):
        z = np.abs((np.asarray(x, dtype=float) - self.theta) / self.b)
        out = math.log(self.xi) - math.log(2.0 * self.b) - math.lgamma(1.0 / self.xi) - z**self.xi
        return out if np.ndim(out) else float(out)

    def variance(self) -> float:
        return self.b**2 * math.exp(math.lgamma(3.0 / self.xi) - math.lgamma(1.0 / self.xi))

    def sample(self, rng: np.random.Generator, size=None):
        # |Z/b|^xi ~ Gamma(1/xi), sign independent
        g = rng.standard_gamma(1.0 / self.xi, size=size)
        sign = np.where(rng.random(size=size) < 0.5, -1.0, 1.0)
        return self.theta + sign * self.b * g ** (1.0 / self.xi)


def subbotin_scale_for_variance(xi, sigma2):
    """Scale ``b`` such that the Subbotin(xi, b) variance equals ``sigma2``."""
    xi = np.asarray(xi, dtype=float)
    if np.any(xi <= 0):
        raise ValueError("Subbotin shape must be positive")
    ratio = np.exp(special.gammaln(1.0 / xi) - special.gammaln(3.0 / xi))
    out = np.sqrt(np.asarray(sigma2, dtype=float) * ratio)
    return out if out.ndim else float(out)


def t8_moment_primitive(t):
    """Antiderivative of ``x^2 f_{t8}(x)`` vanishing at 0 (limits +-2/3)."""
    t = np.asarray(t, dtype=float)
    with np.errstate(invalid="ignore"):
        q = t * t + 8.0
        r = t / np.sqrt(q)
        out = (2.0 / 3.0) * r**3 * (t**4 + 28.0 * t * t + 280.0) / (q * q)
        out = np.where(np.isinf(t), np.sign(t) * (2.0 / 3.0), out)
    return out if out.ndim else float(out)


def second_moment_segment(a, b):
    """Integral of ``x^2`` times the unit-variance t8 density over ``[a, b]``.

    Works on arrays of interval endpoints; ``b`` may be ``inf``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(a > b):
        raise ValueError("segment requires a <= b")
    out = (t8_moment_primitive(T8_SCALE * b) - t8_moment_primitive(T8_SCALE * a)) / T8_SCALE**2
    return out if np.ndim(out) else float(out)


class FoldedStdT8:
    """Absolute value of a t8 variable rescaled to unit variance."""

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x < 0):
            raise ValueError("folded distribution lives on x >= 0")
        # 2 F(s x) - 1 = 1 - P(|T| > s x)
        out = 1.0 - student_t_twosided_sf(T8_SCALE * x, T8_DF)
        return out if np.ndim(out) else float(out)

    def quantile(self, p):
        p = np.asarray(p, dtype=float)
        if np.any((p < 0) | (p > 1)):
            raise ValueError("probability outside [0, 1]")
        # upper tail of the unfolded t8 carries (1 - p) / 2
        with np.errstate(over="ignore"):
            out = -special.stdtrit(T8_DF, 0.5 * (1.0 - p)) / T8_SCALE
        out = np.where(p >= 1.0, np.inf, np.where(p <= 0.0, 0.0, out))
        return out if out.ndim else float(out)

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        out = np.where(x >= 0, LOG2 + math.log(T8_SCALE) + student_t_logpdf(T8_SCALE * x, T8_DF), -np.inf)
        return out if out.ndim else float(out)

    def cell_second_moments(self, edges):
        """``int x^2 g(x) dx`` of the folded density over consecutive cells."""
        edges = np.asarray(edges, dtype=float)
        return 2.0 * second_moment_segment(edges[:-1], edges[1:])

    def __eq__(self, other):
        return isinstance(other, FoldedStdT8)

    def __hash__(self):
        return hash(FoldedStdT8)

    def __repr__(self):
        return "FoldedStdT8()"
