"""Feature schema: which columns are continuous, which are categorical.

The schema fixes the network input encoding. Continuous features occupy one
input slot holding the (standardized, zero-imputed) value; categorical
features occupy a one-hot block that is all zeros when the feature is
unobserved or missing. A bitmask of length ``n_features`` is appended after
the encoded values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"


@dataclass(frozen=True)
class Feature:
    name: str
    kind: str  # CONTINUOUS or CATEGORICAL
    categories: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in (CONTINUOUS, CATEGORICAL):
            raise ConfigError(f"feature {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == CATEGORICAL and len(self.categories) < 2:
            raise ConfigError(f"feature {self.name!r}: categorical needs >= 2 categories")

    @property
    def n_categories(self) -> int:
        return len(self.categories)

    @property
    def encoded_width(self) -> int:
        return 1 if self.kind == CONTINUOUS else self.n_categories


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple[Feature, ...]
    _offsets: tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        offsets = []
        pos = 0
        for f in self.features:
            offsets.append(pos)
            pos += f.encoded_width
        object.__setattr__(self, "_offsets", tuple(offsets))

    @property
    def n_features(self) -> int:
        return len(self.features)

    @property
    def encoded_width(self) -> int:
        return sum(f.encoded_width for f in self.features)

    def encoded_offset(self, j: int) -> int:
        return self._offsets[j]

    @property
    def continuous_indices(self) -> list[int]:
        return [j for j, f in enumerate(self.features) if f.kind == CONTINUOUS]

    @property
    def categorical_indices(self) -> list[int]:
        return [j for j, f in enumerate(self.features) if f.kind == CATEGORICAL]

    def is_continuous(self, j: int) -> bool:
        return self.features[j].kind == CONTINUOUS

    def to_dict(self) -> dict:
        return {
            "columns": [
                {"name": f.name, "kind": f.kind}
                if f.kind == CONTINUOUS
                else {"name": f.name, "kind": f.kind, "categories": list(f.categories)}
                for f in self.features
            ]
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        cols = d.get("columns")
        if not isinstance(cols, list) or not cols:
            raise ConfigError("schema must contain a non-empty 'columns' list")
        feats = []
        for i, c in enumerate(cols):
            try:
                feats.append(
                    Feature(
                        name=c.get("name", f"col{i}"),
                        kind=c["kind"],
                        categories=tuple(c.get("categories", ())),
                    )
                )
            except KeyError as e:
                raise ConfigError(f"schema column {i}: missing key {e}") from e
        return cls(features=tuple(feats))

    @classmethod
    def all_continuous(cls, names: list[str] | int) -> "FeatureSchema":
        if isinstance(names, int):
            names = [f"x{j}" for j in range(names)]
        return cls(features=tuple(Feature(name=n, kind=CONTINUOUS) for n in names))


@dataclass(frozen=True)
class Standardization:
    """Per-feature affine transform fitted on the training split.

    Categorical columns carry mean 0 / std 1 so they pass through unchanged.
    """

    mean: np.ndarray
    std: np.ndarray

    def standardize(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std

    def destandardize(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.std + self.mean

    @classmethod
    def identity(cls, d: int) -> "Standardization":
        return cls(mean=np.zeros(d), std=np.ones(d))


def encode_values(schema: FeatureSchema, values: np.ndarray, observed: np.ndarray) -> np.ndarray:
    """Zero-imputed network encoding of shape (n, encoded_width).

    ``values`` holds standardized continuous values and float category codes,
    shape (n, d). ``observed`` is the 0/1 mask of the same shape's columns,
    shape (n, d); unobserved slots encode as zeros.
    """
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    observed = np.atleast_2d(np.asarray(observed))
    if values.shape != observed.shape or values.shape[1] != schema.n_features:
        raise ConfigError(
            f"encode_values: got values {values.shape}, observed {observed.shape}, "
            f"schema width {schema.n_features}"
        )
    n = values.shape[0]
    out = np.zeros((n, schema.encoded_width), dtype=np.float64)
    for j, f in enumerate(schema.features):
        off = schema.encoded_offset(j)
        obs = observed[:, j].astype(bool)
        if f.kind == CONTINUOUS:
            out[obs, off] = values[obs, j]
        else:
            codes = values[obs, j].astype(np.int64)
            if codes.size and (codes.min() < 0 or codes.max() >= f.n_categories):
                raise ConfigError(f"feature {f.name!r}: category code out of range")
            rows = np.nonzero(obs)[0]
            out[rows, off + codes] = 1.0
    return out
