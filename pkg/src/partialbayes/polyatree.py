"""Truncated Polya trees on the half-line and their symmetrization.

The partition at level ``j`` splits ``[0, inf)`` at the ``m / 2^j`` quantiles
of the folded unit-variance t8 base.  A realization is summarized by its
``2^J`` leaf weights ``p_l`` so that the half-line density is
``p_l * g0(x)`` on leaf ``l``.  Indices in this module are 0-based unless a
docstring says otherwise.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .statdist import LOG2, T8_DF, T8_SCALE, FoldedStdT8, student_t_logpdf

BETA_FLOOR = 1e-300
BETA_CEIL = float(np.nextafter(1.0, 0.0))
_T8_LOGCONST = LOG2 + math.log(T8_SCALE) + float(student_t_logpdf(0.0, T8_DF))


@dataclass(frozen=True)
class QuantileGrid:
    """Base quantiles ``x_0 = 0 < x_1 < ... < x_{2^J} = inf`` and cell moments."""

    depth: int
    edges: np.ndarray
    cell_m2: np.ndarray
    guide: np.ndarray
    guide_step: float

    @property
    def inner(self) -> np.ndarray:
        return self.edges[1:-1]


@lru_cache(maxsize=None)
def quantile_grid(depth: int) -> QuantileGrid:
    base = FoldedStdT8()
    edges = base.quantile(np.arange(2**depth + 1) / 2**depth)
    edges[0], edges[-1] = 0.0, np.inf
    edges.setflags(write=False)
    m2 = base.cell_second_moments(edges)
    m2.setflags(write=False)
    # guide[b] = number of inner edges <= b * step; lets a lookup start next
    # to the right cell and scan at most a couple of edges
    inner = edges[1:-1]
    step = 0.25 * float(np.min(np.diff(edges[:-1])))
    guide = np.searchsorted(inner, np.arange(int(inner[-1] / step) + 2) * step, side="right")
    guide.setflags(write=False)
    return QuantileGrid(depth, edges, m2, guide, step)


def base_logpdf_fast(x: np.ndarray) -> np.ndarray:
    """Folded unit-variance t8 log-density for ``x >= 0`` (no checks)."""
    t = T8_SCALE * np.asarray(x, dtype=float) / math.sqrt(T8_DF)
    big = t > 1e100
    with np.errstate(divide="ignore"):
        # log1p(t^2) = 2 log t once t^2 would overflow
        log_term = np.where(big, 2.0 * np.log(np.where(big, t, 1.0)), np.log1p(np.where(big, 0.0, t) ** 2))
    return _T8_LOGCONST - 0.5 * (T8_DF + 1.0) * log_term


def default_alpha(j: int, l: int, J: int) -> float:
    """Beta parameter for cell ``l`` (1-based) at level ``j`` (1-based)."""
    if not (1 <= j <= J and 1 <= l <= 2**j):
        raise ValueError(f"cell ({j}, {l}) outside a depth-{J} tree")
    return 20.0 * j * j if l <= 2**j - 2 else 0.1


@dataclass(frozen=True)
class PtParams:
    depth: int = 8
    alpha: tuple = None
    base: FoldedStdT8 = field(default_factory=FoldedStdT8)

    def __post_init__(self):
        if self.alpha is None:
            J = self.depth
            alpha = tuple(
                np.array([default_alpha(j, l, J) for l in range(1, 2**j + 1)]) for j in range(1, J + 1)
            )
            object.__setattr__(self, "alpha", alpha)
        if len(self.alpha) != self.depth:
            raise ValueError("alpha table depth mismatch")
        for j, a in enumerate(self.alpha, start=1):
            if a.shape != (2**j,) or np.any(a <= 0):
                raise ValueError(f"bad alpha row at level {j}")

    @property
    def grid(self) -> QuantileGrid:
        return quantile_grid(self.depth)


def leaf_index(j: int, x, base: FoldedStdT8 = FoldedStdT8()):
    """1-based cell of ``x`` at level ``j``: ``min(2^j, floor(2^j G0(x) + 1))``.

    Evaluated by binary search on the level-``j`` base quantiles, so a point
    sitting exactly on a quantile belongs to the cell on its right even when
    ``G0`` rounds just below the dyadic value.
    """
    x = np.asarray(x, dtype=float)
    if np.any(x < 0) or np.any(np.isnan(x)):
        raise ValueError("leaf_index needs x >= 0")
    if not isinstance(base, FoldedStdT8):
        out = np.minimum(2**j, np.floor(2**j * base.cdf(x) + 1.0)).astype(np.int64)
    else:
        out = np.searchsorted(quantile_grid(j).inner, x, side="right").astype(np.int64) + 1
    return out if out.ndim else int(out)


def cell_index(x, depth: int) -> np.ndarray:
    """0-based deepest-level cell via binary search on the base quantiles."""
    return np.searchsorted(quantile_grid(depth).inner, x, side="right")


@dataclass(frozen=True)
class PtRealization:
    """A drawn half-line density: split probabilities and derived leaf weights."""

    beta: tuple
    leaf_log_weight: np.ndarray
    second_moment: float

    @property
    def depth(self) -> int:
        return len(self.beta)

    @classmethod
    def from_betas(cls, beta: Sequence[np.ndarray]) -> "PtRealization":
        J = len(beta)
        beta = tuple(np.asarray(b, dtype=float) for b in beta)
        leaves = np.arange(2**J)
        logw = np.full(2**J, J * LOG2)
        for j, b in enumerate(beta, start=1):
            logw += np.log(b)[leaves >> (J - j)]
        logw.setflags(write=False)
        m2 = float(np.dot(np.exp(logw), quantile_grid(J).cell_m2))
        return cls(beta, logw, m2)

    @classmethod
    def flat(cls, depth: int = 8) -> "PtRealization":
        """All splits at 1/2, i.e. the base density itself."""
        return cls.from_betas([np.full(2**j, 0.5) for j in range(1, depth + 1)])

    def log_halfline_pdf(self, x):
        x = np.asarray(x, dtype=float)
        return self.leaf_log_weight[cell_index(x, self.depth)] + base_logpdf_fast(x)


def sample_prior(params: PtParams, rng: np.random.Generator) -> PtRealization:
    """Draw the split probabilities level by level; pairs sum to one exactly."""
    beta = []
    for a in params.alpha:
        left = rng.beta(a[0::2], a[1::2])
        left = np.clip(left, BETA_FLOOR, BETA_CEIL)
        b = np.empty_like(a)
        b[0::2] = left
        b[1::2] = 1.0 - left
        beta.append(b)
    return PtRealization.from_betas(beta)


def mean_realization(params: PtParams) -> PtRealization:
    """Realization whose density is the mean density under ``params``.

    Independent Beta splits give ``E[p_leaf] = prod E[beta]`` along the path.
    """
    beta = []
    for a in params.alpha:
        left = a[0::2] / (a[0::2] + a[1::2])
        b = np.empty_like(a)
        b[0::2] = left
        b[1::2] = 1.0 - left
        beta.append(b)
    return PtRealization.from_betas(beta)


def second_moment(real: PtRealization) -> float:
    return real.second_moment


@dataclass(frozen=True)
class SymmPtDensity:
    """Symmetrized density ``w(x) = w_half(|x| / scale) / (2 * scale)``."""

    realization: PtRealization
    scale: float = 1.0

    @property
    def second_moment(self) -> float:
        return self.scale**2 * self.realization.second_moment

    def standardized(self) -> "SymmPtDensity":
        return SymmPtDensity(self.realization, 1.0 / math.sqrt(self.realization.second_moment))

    def rescaled(self, tau: float) -> "SymmPtDensity":
        """Density of ``tau * X`` for ``X`` drawn from this density."""
        return SymmPtDensity(self.realization, self.scale * tau)

    def logpdf(self, x):
        x = np.abs(np.asarray(x, dtype=float)) / self.scale
        out = self.realization.log_halfline_pdf(x) - LOG2 - math.log(self.scale)
        return out if out.ndim else float(out)

    def pdf(self, x):
        return np.exp(self.logpdf(x))


def logpdf_symm(w: SymmPtDensity, x):
    return w.logpdf(x)


def posterior_update(params: PtParams, abs_data) -> PtParams:
    """Add per-cell counts of the (nonnegative) data to every alpha row."""
    x = np.asarray(abs_data, dtype=float).ravel()
    if np.any(x < 0):
        raise ValueError("posterior_update expects absolute values")
    J = params.depth
    leaves = cell_index(x, J)
    alpha = tuple(
        a + np.bincount(leaves >> (J - j), minlength=2**j) for j, a in enumerate(params.alpha, start=1)
    )
    return PtParams(J, alpha, params.base)


def write_density_csv(path, w: SymmPtDensity, grid) -> None:
    grid = np.asarray(grid, dtype=float)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(["x", "pdf"])
        for x, p in zip(grid, w.pdf(grid)):
            out.writerow([repr(float(x)), repr(float(p))])
