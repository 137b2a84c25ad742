"""Per-unit reductions of raw replicates into (test statistic, nuisance statistic)."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np


@dataclass(frozen=True)
class UnitDataset:
    id: Hashable
    z: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float)
        if z.ndim != 1 or z.size < 2:
            raise ValueError(f"unit {self.id!r}: need a vector of K >= 2 replicates")
        if not np.all(np.isfinite(z)):
            raise ValueError(f"unit {self.id!r}: non-finite replicate")
        object.__setattr__(self, "z", z)

    @property
    def k(self) -> int:
        return self.z.size


@dataclass(frozen=True)
class NormalSummary:
    """``t = sqrt(K) * mean`` and the unbiased sample variance ``s2``."""

    t: float
    s2: float
    k: int
    id: Hashable = None

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("need K >= 2")
        if self.s2 < 0:
            raise ValueError("sample variance must be nonnegative")

    @property
    def degenerate(self) -> bool:
        return self.s2 == 0.0


@dataclass(frozen=True)
class ConfigSummary:
    """Sample mean plus the configuration (residuals about the mean)."""

    zbar: float
    residuals: np.ndarray = field(repr=False)
    id: Hashable = None

    @property
    def k(self) -> int:
        return len(self.residuals)

    @property
    def s2(self) -> float:
        return float(np.dot(self.residuals, self.residuals) / (self.k - 1))

    def reconstruct(self) -> np.ndarray:
        return self.zbar + self.residuals


def _two_pass(z: np.ndarray):
    mean = math.fsum(z) / z.size
    dev = z - mean
    return mean, dev


def summarize_normal(d: UnitDataset) -> NormalSummary:
    mean, dev = _two_pass(d.z)
    s2 = math.fsum(dev * dev) / (d.k - 1)
    return NormalSummary(t=math.sqrt(d.k) * mean, s2=s2, k=d.k, id=d.id)


def summarize_config(d: UnitDataset) -> ConfigSummary:
    mean, dev = _two_pass(d.z)
    return ConfigSummary(zbar=mean, residuals=dev, id=d.id)


def summarize_normal_array(z: np.ndarray):
    """Vectorized version over an ``(n, K)`` array; returns ``(t, s2)``."""
    z = np.asarray(z, dtype=float)
    K = z.shape[1]
    mean = z.mean(axis=1)
    dev = z - mean[:, None]
    s2 = np.einsum("ij,ij->i", dev, dev) / (K - 1)
    return math.sqrt(K) * mean, s2


def summarize_config_array(z: np.ndarray):
    """Vectorized configuration statistic; returns ``(zbar, residuals)``."""
    z = np.asarray(z, dtype=float)
    mean = z.mean(axis=1)
    return mean, z - mean[:, None]


def normal_arrays(summaries: Sequence[NormalSummary]):
    t = np.array([s.t for s in summaries], dtype=float)
    s2 = np.array([s.s2 for s in summaries], dtype=float)
    k = np.array([s.k for s in summaries], dtype=np.int64)
    return t, s2, k


def config_arrays(configs: Sequence[ConfigSummary]):
    ks = {c.k for c in configs}
    if len(ks) != 1:
        raise ValueError("all units must share a common K for the configuration pipeline")
    zbar = np.array([c.zbar for c in configs], dtype=float)
    resid = np.vstack([c.residuals for c in configs])
    return zbar, resid
