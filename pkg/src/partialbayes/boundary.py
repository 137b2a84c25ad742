"""Smoothed rejection boundaries for visualizing partially Bayes tests.

Each unit gets a threshold from its own null draws; a kernel smoother over a
scalar nuisance summary ``v`` (the sample variance) turns those into a
boundary curve ``t_alpha(v)``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np


def null_quantile_thresholds(null_draws, alpha: float) -> np.ndarray:
    """Per-unit empirical ``(1 - alpha)`` quantile of ``|draws|``.

    Parameters
    ----------
    null_draws : array_like, shape (n, B)
        Null draws of the test statistic, one row per unit.
    alpha : float
        Level in ``(0, 1]``.

    Returns
    -------
    ndarray, shape (n,)
        Thresholds computed with the linear-interpolation (type 7) quantile.
    """
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    draws = np.abs(np.atleast_2d(np.asarray(null_draws, dtype=float)))
    need = math.ceil(1.0 / alpha)
    if draws.shape[1] < need:
        raise ValueError(f"need at least {need} draws per unit at alpha={alpha}")
    return np.quantile(draws, 1.0 - alpha, axis=1, method="linear")


@dataclass(frozen=True)
class BoundaryFit:
    """Local-linear Gaussian-kernel fit of thresholds against a transform of ``v``.

    Attributes
    ----------
    alpha : float
        Level the thresholds were computed at.
    x, y : ndarray
        Transformed covariate and thresholds used for fitting.
    bandwidth : float
        Kernel standard deviation on the transformed scale.
    shift : float or None
        ``None`` for the plain log transform; otherwise the offset of the
        shifted-log fallback ``log(v - min(v) + shift)``.
    v_min, v_max : float
        Observed range of ``v``; predictions are clamped to it.
    knots : ndarray, shape (m, 2)
        ``(v, fitted threshold)`` at the distinct observed ``v``.
    """

    alpha: float
    x: np.ndarray
    y: np.ndarray
    bandwidth: float
    shift: float | None
    v_min: float
    v_max: float
    knots: np.ndarray

    def transform(self, v):
        v = np.asarray(v, dtype=float)
        if self.shift is None:
            return np.log(v)
        return np.log(v - self.v_min + self.shift)

    def predict(self, v):
        return predict(self, v)


def _silverman(x: np.ndarray) -> float:
    sd = float(np.std(x, ddof=1))
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    h = 0.9 * spread * x.size ** (-0.2)
    return h if h > 0 else 1.0


def _local_linear(x: np.ndarray, y: np.ndarray, h: float, at: np.ndarray) -> np.ndarray:
    at = np.atleast_1d(at)
    d = x[None, :] - at[:, None]
    logk = -0.5 * (d / h) ** 2
    k = np.exp(logk - logk.max(axis=1, keepdims=True))
    s0 = k.sum(axis=1)
    s1 = (k * d).sum(axis=1)
    s2 = (k * d * d).sum(axis=1)
    t0 = (k * y).sum(axis=1)
    t1 = (k * d * y).sum(axis=1)
    det = s0 * s2 - s1 * s1
    nw = t0 / s0
    # when the local design has no spread the fit falls back to the kernel average
    ok = det > 1e-12 * s0 * s2
    with np.errstate(divide="ignore", invalid="ignore"):
        ll = (s2 * t0 - s1 * t1) / det
    return np.where(ok, ll, nw)


def fit_boundary(v, thresholds, alpha: float) -> BoundaryFit:
    """Regress thresholds on ``log v`` with a Gaussian-kernel local-linear smoother.

    The bandwidth follows Silverman's rule of thumb on the transformed
    covariate.  If any ``v`` is nonpositive the transform becomes
    ``log(v - min(v) + shift)`` with ``shift`` one percent of the range
    (or 1 for a constant covariate).
    """
    v = np.asarray(v, dtype=float).ravel()
    y = np.asarray(thresholds, dtype=float).ravel()
    if v.size != y.size:
        raise ValueError("v and thresholds differ in length")
    if v.size < 10:
        raise ValueError("need at least 10 points to fit a boundary")
    if not (np.all(np.isfinite(v)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite input to fit_boundary")
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    v_min, v_max = float(v.min()), float(v.max())
    if v_min > 0:
        shift = None
        x = np.log(v)
    else:
        shift = 0.01 * (v_max - v_min) if v_max > v_min else 1.0
        x = np.log(v - v_min + shift)
    h = _silverman(x) if np.ptp(x) > 0 else 1.0
    uniq = np.unique(v)
    proto = BoundaryFit(alpha, x, y, h, shift, v_min, v_max, np.empty((0, 2)))
    fitted = np.maximum(_local_linear(x, y, h, proto.transform(uniq)), 0.0)
    return BoundaryFit(alpha, x, y, h, shift, v_min, v_max, np.column_stack([uniq, fitted]))


def predict(fit: BoundaryFit, v):
    """Evaluate the boundary; ``v`` outside the observed range is clamped."""
    if fit.x.size == 0:
        raise ValueError("empty boundary fit")
    v = np.asarray(v, dtype=float)
    vc = np.clip(v, fit.v_min, fit.v_max)
    out = np.maximum(_local_linear(fit.x, fit.y, fit.bandwidth, fit.transform(vc.ravel())), 0.0).reshape(v.shape)
    return out if out.ndim else float(out)


def boundary_grid(fit: BoundaryFit, points: int = 200) -> np.ndarray:
    """Evenly spaced grid on the transformed scale spanning the observed ``v``."""
    if fit.shift is None:
        return np.exp(np.linspace(math.log(fit.v_min), math.log(fit.v_max), points))
    return np.linspace(fit.v_min, fit.v_max, points)


def write_boundary_csv(path, fit: BoundaryFit, points: int = 200) -> None:
    grid = boundary_grid(fit, points)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(["v", "threshold"])
        for v, t in zip(grid, predict(fit, grid)):
            out.writerow([repr(float(v)), repr(float(t))])
