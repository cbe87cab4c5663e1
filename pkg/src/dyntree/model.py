"""Shared model state: input kinds, tree prior, and the growing data buffer.

A :class:`ModelSpec` bundles everything the tree machinery needs to know
about the inputs (per-dimension kind, observed support box, which dims feed
the linear leaf design) and about the response (leaf-model family, number of
classes, minimum leaf size).  Trees never store this; they reference it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

# Per-dimension input kinds.  Categorical inputs with >2 levels are one-hot
# expanded before they reach this layer, so only two kinds survive here.
KIND_ORDINAL = 0
KIND_CATEGORICAL = 1

LEAF_CONSTANT = "constant"
LEAF_LINEAR = "linear"
LEAF_MULTINOMIAL = "multinomial"

_LEAF_MODELS = (LEAF_CONSTANT, LEAF_LINEAR, LEAF_MULTINOMIAL)

#: Minimum child sizes per leaf model.  Linear leaves additionally require
#: ``n_active + 4`` points so the predictive dof ``n - q - 1`` is >= 3.
MIN_LEAF_BASE = {LEAF_CONSTANT: 5, LEAF_MULTINOMIAL: 5}
LINEAR_MIN_EXTRA = 4


@dataclass(frozen=True)
class TreePrior:
    """Depth-decaying split prior: p_split(depth) = alpha * (1 + depth)^-beta.

    ``alpha == 0`` yields the no-split null model and is explicitly allowed.
    """

    alpha: float = 0.95
    beta: float = 2.0

    def __post_init__(self):
        if not (0.0 <= self.alpha < 1.0):
            raise ConfigError(f"alpha must be in [0, 1), got {self.alpha}")
        if self.beta < 0.0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")


@dataclass(frozen=True)
class ModelSpec:
    """Immutable description of the modeling problem.

    Attributes:
        kinds: int8 array (p,), KIND_ORDINAL or KIND_CATEGORICAL per input.
        lo, hi: observed support box; the root node's bounding box.
        leaf_model: one of "constant", "linear", "multinomial".
        n_classes: number of response classes (0 for regression).
        prior: tree prior.
        names: column names for reports.
    """

    kinds: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    leaf_model: str = LEAF_CONSTANT
    n_classes: int = 0
    prior: TreePrior = field(default_factory=TreePrior)
    names: tuple = ()

    def __post_init__(self):
        if self.leaf_model not in _LEAF_MODELS:
            raise ConfigError(f"unknown leaf model {self.leaf_model!r}")
        if self.leaf_model == LEAF_MULTINOMIAL and self.n_classes < 2:
            raise ConfigError("multinomial leaves need n_classes >= 2")
        object.__setattr__(self, "kinds", np.asarray(self.kinds, dtype=np.int8))
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=np.float64))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=np.float64))
        if not self.names:
            object.__setattr__(
                self, "names", tuple(f"x{i + 1}" for i in range(self.n_dims))
            )

    @property
    def n_dims(self) -> int:
        return self.kinds.shape[0]

    @property
    def linear_active(self) -> np.ndarray:
        """Dims entering the linear leaf design: ordinal only.

        Categorical indicators are split-only; keeping them out of the
        within-leaf regression keeps the Gram matrices nonsingular.
        """
        return self.kinds == KIND_ORDINAL

    @property
    def n_active(self) -> int:
        return int(np.count_nonzero(self.linear_active))

    @property
    def min_leaf(self) -> int:
        if self.leaf_model == LEAF_LINEAR:
            return self.n_active + LINEAR_MIN_EXTRA
        return MIN_LEAF_BASE[self.leaf_model]

    def clamp(self, x: np.ndarray) -> np.ndarray:
        """Clamp a query point (or matrix) into the root box, per dimension."""
        return np.clip(x, self.lo, self.hi)

    def subset(self, keep: np.ndarray) -> "ModelSpec":
        """Spec restricted to a boolean mask of kept input dims."""
        keep = np.asarray(keep, dtype=bool)
        return ModelSpec(
            kinds=self.kinds[keep],
            lo=self.lo[keep],
            hi=self.hi[keep],
            leaf_model=self.leaf_model,
            n_classes=self.n_classes,
            prior=self.prior,
            names=tuple(n for n, k in zip(self.names, keep) if k),
        )


def spec_from_data(
    X: np.ndarray,
    y: np.ndarray,
    kinds=None,
    leaf_model: str = LEAF_CONSTANT,
    prior: TreePrior | None = None,
    names=(),
) -> ModelSpec:
    """Infer a ModelSpec from raw arrays.

    The support box is the observed per-dimension min/max.  Kinds default to
    ordinal everywhere; classification is inferred from integer responses
    when ``leaf_model == "multinomial"``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ConfigError("X must be 2-D")
    p = X.shape[1]
    if kinds is None:
        kinds = np.full(p, KIND_ORDINAL, dtype=np.int8)
    n_classes = 0
    if leaf_model == LEAF_MULTINOMIAL:
        n_classes = int(np.max(y)) + 1 if len(y) else 2
        n_classes = max(n_classes, 2)
    return ModelSpec(
        kinds=kinds,
        lo=X.min(axis=0) if len(X) else np.zeros(p),
        hi=X.max(axis=0) if len(X) else np.ones(p),
        leaf_model=leaf_model,
        n_classes=n_classes,
        prior=prior or TreePrior(),
        names=tuple(names),
    )


class DataBuffer:
    """Append-only storage for the observation stream.

    Leaf nodes reference rows by index, so rows must never move or mutate.
    """

    def __init__(self, n_dims: int, classification: bool = False, capacity: int = 64):
        self._X = np.empty((capacity, n_dims), dtype=np.float64)
        self._y = np.empty(
            capacity, dtype=np.int64 if classification else np.float64
        )
        self.t = 0

    @property
    def X(self) -> np.ndarray:
        return self._X[: self.t]

    @property
    def y(self) -> np.ndarray:
        return self._y[: self.t]

    def append(self, x: np.ndarray, y) -> int:
        if self.t == self._X.shape[0]:
            self._X = np.concatenate([self._X, np.empty_like(self._X)])
            self._y = np.concatenate([self._y, np.empty_like(self._y)])
        self._X[self.t] = x
        self._y[self.t] = y
        self.t += 1
        return self.t - 1

    def extend(self, X: np.ndarray, y: np.ndarray) -> None:
        for xi, yi in zip(X, y):
            self.append(xi, yi)
