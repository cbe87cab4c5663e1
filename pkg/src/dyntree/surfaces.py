"""Built-in synthetic response surfaces for tests, demos, and benchmarks."""
from __future__ import annotations

import numpy as np

from .model import KIND_CATEGORICAL, KIND_ORDINAL


def friedman(X: np.ndarray) -> np.ndarray:
    """Noiseless five-variable benchmark surface on [0,1]^p, p >= 5."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return (
        10.0 * np.sin(np.pi * X[:, 0] * X[:, 1])
        + 20.0 * (X[:, 2] - 0.5) ** 2
        + 10.0 * X[:, 3]
        + 5.0 * X[:, 4]
    )


def friedman_data(n: int, p: int = 10, noise: float = 1.0, seed: int = 0):
    """Uniform design on [0,1]^p with the benchmark response plus N(0, noise^2)."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(11,)))
    X = rng.random((n, p))
    y = friedman(X) + noise * rng.standard_normal(n)
    return X, y


class TuningSurface:
    """Synthetic kernel-tuning response: runtime over a mixed design space.

    Five inputs: two unroll-like ordinals in {1..30} and three binary flags.
    The noiseless mean has two basins in the ordinal plane (one global, one
    local) and flag effects that interact with the ordinals; observation
    noise is heteroskedastic, growing with the mean runtime.  Everything is
    deterministic given the seed handed to :meth:`observe`.
    """

    kinds = np.array(
        [KIND_ORDINAL, KIND_ORDINAL, KIND_CATEGORICAL, KIND_CATEGORICAL, KIND_CATEGORICAL],
        dtype=np.int8,
    )
    lo = np.array([1.0, 1.0, 0.0, 0.0, 0.0])
    hi = np.array([30.0, 30.0, 1.0, 1.0, 1.0])
    names = ("unroll_i", "unroll_j", "flag_scalar", "flag_parallel", "flag_vector")

    def full_design(self) -> np.ndarray:
        """All 2^3 * 30^2 = 7200 configurations, in row-major order."""
        u, v, b1, b2, b3 = np.meshgrid(
            np.arange(1, 31), np.arange(1, 31), [0, 1], [0, 1], [0, 1], indexing="ij"
        )
        return np.stack(
            [u.ravel(), v.ravel(), b1.ravel(), b2.ravel(), b3.ravel()], axis=1
        ).astype(np.float64)

    def true_mean(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        u, v, b1, b2, b3 = X.T
        basin_a = np.exp(-((u - 5.0) ** 2 / 14.0 + (v - 22.0) ** 2 / 26.0))
        basin_b = np.exp(-((u - 24.0) ** 2 / 50.0 + (v - 8.0) ** 2 / 50.0))
        return (
            0.45
            - 0.26 * basin_a
            - 0.21 * basin_b
            + 0.06 * b1
            + 0.035 * b2 * (0.2 + 0.8 * u / 30.0)
            + 0.03 * b3 * np.exp(-((v - 22.0) ** 2) / 26.0)
        )

    def noise_sd(self, X: np.ndarray) -> np.ndarray:
        f = self.true_mean(X)
        return 0.003 + 0.05 * np.clip((f - 0.19) / 0.45, 0.0, 1.0)

    def observe(self, X: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return self.true_mean(X) + self.noise_sd(X) * rng.standard_normal(len(X))

    # -- failure-pattern variants for constraint-violation studies ----------

    def failures_random(self, rate: float, seed: int) -> np.ndarray:
        """Uniformly random failure labels over the full design."""
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(12,)))
        return rng.random(len(self.full_design())) < rate

    def failures_box(self, threshold: float = 25.0) -> np.ndarray:
        """Failures planted where the first ordinal exceeds the threshold."""
        return self.full_design()[:, 0] > threshold
