"""Bitmask machinery: observed/unobserved partitions and zero imputation.

A bitmask ``b`` (1 = observed) together with an optional missingness vector
``m`` (1 = value absent from the record) splits the ``d`` features into
observed, unobserved, and missing sets. Unobserved means "present in the data
but hidden from the model", and is the set the model predicts. All functions
here are pure given an explicit rng.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class Bitmask:
    b: np.ndarray  # int8 vector, 1 = observed
    missing: np.ndarray | None = None  # int8 vector, 1 = absent

    def __post_init__(self):
        b = np.asarray(self.b, dtype=np.int8)
        object.__setattr__(self, "b", b)
        if self.missing is not None:
            m = np.asarray(self.missing, dtype=np.int8)
            if m.shape != b.shape:
                raise ConfigError("missing vector length differs from mask length")
            if np.any((b == 1) & (m == 1)):
                raise ConfigError("a missing feature cannot be observed")
            object.__setattr__(self, "missing", m)

    @property
    def d(self) -> int:
        return self.b.shape[0]

    @property
    def unobserved(self) -> np.ndarray:
        """Indices with b=0 and m=0."""
        free = self.b == 0
        if self.missing is not None:
            free &= self.missing == 0
        return np.nonzero(free)[0]

    @property
    def observed(self) -> np.ndarray:
        return np.nonzero(self.b == 1)[0]


@dataclass(frozen=True)
class MaskedInstance:
    """One data vector with its observation mask.

    ``values`` holds standardized continuous values and float category codes;
    hidden slots keep their true value (training needs it), the encoding step
    zeroes them out.
    """

    values: np.ndarray
    mask: Bitmask

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.mask.d,):
            raise ConfigError("values length differs from mask length")
        object.__setattr__(self, "values", v)


def sample_uniform_cardinality_mask(d: int, rng: np.random.Generator) -> Bitmask:
    """k ~ U{0, ..., d-1} observed features, a uniform random k-subset."""
    if d < 1:
        raise ConfigError("d must be >= 1")
    k = int(rng.integers(0, d))
    b = np.zeros(d, dtype=np.int8)
    if k > 0:
        b[rng.choice(d, size=k, replace=False)] = 1
    return Bitmask(b=b)


def sample_uniform_cardinality_masks(d: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """(n, d) batch of uniform-cardinality masks; one rng stream, row order fixed."""
    if d < 1:
        raise ConfigError("d must be >= 1")
    out = np.zeros((n, d), dtype=np.int8)
    ks = rng.integers(0, d, size=n)
    for i, k in enumerate(ks):
        if k > 0:
            out[i, rng.choice(d, size=int(k), replace=False)] = 1
    return out


def sample_bernoulli_mask(d: int, p: float, rng: np.random.Generator) -> Bitmask:
    """Each feature observed independently with probability p."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError("p must be in [0, 1]")
    return Bitmask(b=(rng.random(d) < p).astype(np.int8))


def restrict_to_available(mask: Bitmask, missing: np.ndarray) -> Bitmask:
    """Force missing features out of both the observed and unobserved sets."""
    missing = np.asarray(missing, dtype=np.int8)
    if missing.shape != mask.b.shape:
        raise ConfigError("missing vector length differs from mask length")
    b = np.where(missing == 1, np.int8(0), mask.b)
    return Bitmask(b=b, missing=missing)


def zero_impute(x: np.ndarray, mask: Bitmask | np.ndarray) -> np.ndarray:
    """Replace unobserved entries of x with zeros."""
    b = mask.b if isinstance(mask, Bitmask) else np.asarray(mask)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != b.shape:
        raise ConfigError("value vector length differs from mask length")
    return np.where(b == 1, x, 0.0)
