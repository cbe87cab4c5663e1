"""Leaf response models: constant mean, linear mean, and multinomial.

Each model keeps conjugate sufficient statistics supporting exact rank-1
updates, exact merges, a closed-form log marginal likelihood, and a proper
posterior predictive once the leaf holds enough points:

* constant  -- reference prior pi(mu, s2) ~ 1/s2; predictive is Student-t
  with dof n-1, location ybar, scale^2 = ssr*(1+1/n)/(n-1) where
  ssr = sum(y^2) - (sum y)^2 / n.
* linear    -- reference prior pi(a, b, s2) ~ 1/s2 on an intercept plus a
  plane over the active (ordinal) inputs; sufficient statistics are held in
  centered (Welford) form so the Gram matrix stays well conditioned under
  sequential updates.  Predictive is Student-t with dof n-q-1.
* multinomial -- Dirichlet(1/C) smoothing; predictive class probability is
  (count_c + 1/C) / (n + 1).

The sequential predictive is the exact ratio of consecutive marginals, so
summing log predictives over any ordering of a leaf's points reproduces the
closed-form marginal (chain rule); tests rely on this identity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, UndefinedPredictiveError
from .model import LEAF_CONSTANT, LEAF_LINEAR, LEAF_MULTINOMIAL, ModelSpec

LOG_PI = math.log(math.pi)

#: Floor applied to predictive scale^2 so duplicated or perfectly-fit data
#: cannot produce -inf log predictives.
VARIANCE_FLOOR = 1e-12

#: Relative jitter added to a near-singular Gram matrix before giving up.
GRAM_JITTER = 1e-10


@dataclass(frozen=True)
class PredictiveMoments:
    """Location/scale/dof of a leaf predictive (plus class probs, if any).

    ``variance`` is the Student-t scale^2, not the moment variance: the scale
    stays finite for dof <= 2 and is what the variance-reduction and
    sensitivity computations integrate.
    """

    mean: float
    variance: float
    dof: float
    probs: np.ndarray | None = None


def _student_t_logpdf(x, dof, loc, scale2):
    z2 = (x - loc) ** 2 / scale2
    return (
        math.lgamma((dof + 1.0) / 2.0)
        - math.lgamma(dof / 2.0)
        - 0.5 * math.log(dof * math.pi * scale2)
        - 0.5 * (dof + 1.0) * math.log1p(z2 / dof)
    )


class ConstantStats:
    """Sufficient statistics {n, sum_y, sum_yy} for a constant-mean leaf."""

    __slots__ = ("n", "sum_y", "sum_yy", "_lm")

    def __init__(self, n=0, sum_y=0.0, sum_yy=0.0):
        self.n = int(n)
        self.sum_y = float(sum_y)
        self.sum_yy = float(sum_yy)
        self._lm = None

    @classmethod
    def from_values(cls, y):
        y = np.asarray(y, dtype=np.float64)
        return cls(len(y), float(y.sum()), float(np.square(y).sum()))

    def update(self, x, y) -> "ConstantStats":
        return ConstantStats(self.n + 1, self.sum_y + y, self.sum_yy + y * y)

    def merge(self, other: "ConstantStats") -> "ConstantStats":
        return ConstantStats(
            self.n + other.n, self.sum_y + other.sum_y, self.sum_yy + other.sum_yy
        )

    @property
    def mean(self) -> float:
        return self.sum_y / self.n

    @property
    def residual_ss(self) -> float:
        return max(self.sum_yy - self.sum_y * self.sum_y / self.n, 0.0)

    def _require(self, n_min=2):
        if self.n < n_min:
            raise UndefinedPredictiveError(
                f"constant leaf needs >= {n_min} points, has {self.n}"
            )

    def scale2(self) -> float:
        self._require()
        return max(self.residual_ss * (1.0 + 1.0 / self.n) / (self.n - 1), VARIANCE_FLOOR)

    def predictive_moments(self, x=None) -> PredictiveMoments:
        self._require()
        return PredictiveMoments(self.mean, self.scale2(), float(self.n - 1))

    def log_predictive(self, x, y) -> float:
        m = self.predictive_moments()
        return float(_student_t_logpdf(y, m.dof, m.mean, m.variance))

    def log_marginal(self) -> float:
        if self._lm is not None:
            return self._lm
        self._require()
        nu = self.n - 1
        ssr = max(self.residual_ss, VARIANCE_FLOOR)
        self._lm = (
            -0.5 * nu * LOG_PI
            - 0.5 * math.log(self.n)
            + math.lgamma(0.5 * nu)
            - 0.5 * nu * math.log(ssr)
        )
        return self._lm

    def sample_mean(self, rng: np.random.Generator) -> float:
        """One draw from the posterior of the leaf mean."""
        self._require()
        sd = np.sqrt(max(self.residual_ss, VARIANCE_FLOOR) / (self.n * (self.n - 1)))
        return self.mean + sd * rng.standard_t(self.n - 1)

    def mean_rows(self, X_rows) -> np.ndarray:
        return np.full(len(X_rows), self.mean)

    def moments_rows(self, X_rows):
        m = self.predictive_moments()
        k = len(X_rows)
        return np.full(k, m.mean), np.full(k, m.variance), np.full(k, m.dof)


class LinearStats:
    """Centered sufficient statistics for a linear-mean leaf.

    Fields: point count ``n``, predictor means ``x_mean`` over the q active
    dims, response mean ``y_mean``, centered Gram ``gram`` (q x q), centered
    cross-products ``cross`` (q,), and total response sum of squares about
    the mean ``syy``.  Updates use Welford recurrences; merges use the exact
    pooled form, so merge(a, b) equals recomputation from raw points.
    """

    __slots__ = ("n", "x_mean", "y_mean", "gram", "cross", "syy", "_lm")

    def __init__(self, n, x_mean, y_mean, gram, cross, syy):
        self.n = int(n)
        self.x_mean = np.asarray(x_mean, dtype=np.float64)
        self.y_mean = float(y_mean)
        self.gram = np.asarray(gram, dtype=np.float64)
        self.cross = np.asarray(cross, dtype=np.float64)
        self.syy = float(syy)
        self._lm = None

    @classmethod
    def from_values(cls, X_active, y):
        X_active = np.atleast_2d(np.asarray(X_active, dtype=np.float64))
        y = np.asarray(y, dtype=np.float64)
        n, q = X_active.shape
        if n == 0:
            return cls(0, np.zeros(q), 0.0, np.zeros((q, q)), np.zeros(q), 0.0)
        xm = X_active.mean(axis=0)
        ym = float(y.mean())
        Xc = X_active - xm
        yc = y - ym
        return cls(n, xm, ym, Xc.T @ Xc, Xc.T @ yc, float(yc @ yc))

    def update(self, x_active, y) -> "LinearStats":
        x = np.asarray(x_active, dtype=np.float64)
        n1 = self.n + 1
        dx = x - self.x_mean
        xm = self.x_mean + dx / n1
        dy = y - self.y_mean
        ym = self.y_mean + dy / n1
        # (x - xm_new) = dx * n/(n+1); keeps the rank-1 term symmetric.
        gram = self.gram + np.outer(dx, dx) * (self.n / n1)
        cross = self.cross + dx * (y - ym)
        syy = self.syy + dy * (y - ym)
        return LinearStats(n1, xm, ym, gram, cross, syy)

    def merge(self, other: "LinearStats") -> "LinearStats":
        if self.n == 0:
            return other
        if other.n == 0:
            return self
        n = self.n + other.n
        w = self.n * other.n / n
        dx = self.x_mean - other.x_mean
        dy = self.y_mean - other.y_mean
        xm = (self.n * self.x_mean + other.n * other.x_mean) / n
        ym = (self.n * self.y_mean + other.n * other.y_mean) / n
        gram = self.gram + other.gram + w * np.outer(dx, dx)
        cross = self.cross + other.cross + w * dx * dy
        syy = self.syy + other.syy + w * dy * dy
        return LinearStats(n, xm, ym, gram, cross, syy)

    @property
    def q(self) -> int:
        return self.x_mean.shape[0]

    @property
    def dof(self) -> int:
        return self.n - self.q - 1

    def _require(self):
        if self.dof < 1:
            raise UndefinedPredictiveError(
                f"linear leaf needs >= {self.q + 2} points, has {self.n}"
            )

    def _chol(self):
        """Cholesky factor of the Gram matrix, with one jittered retry."""
        if self.q == 0:
            return np.zeros((0, 0))
        try:
            return np.linalg.cholesky(self.gram)
        except np.linalg.LinAlgError:
            bump = GRAM_JITTER * max(np.trace(self.gram) / max(self.q, 1), 1.0)
            try:
                return np.linalg.cholesky(self.gram + bump * np.eye(self.q))
            except np.linalg.LinAlgError as exc:
                raise NumericalError("singular Gram matrix in linear leaf") from exc

    def _solve(self, L, b):
        z = np.linalg.solve(L, b)
        return np.linalg.solve(L.T, z)

    def coefficients(self) -> np.ndarray:
        """Least-squares plane slopes on the active dims."""
        if self.q == 0:
            return np.zeros(0)
        return self._solve(self._chol(), self.cross)

    def fit_ss(self) -> float:
        """Regression sum of squares explained by the plane."""
        if self.q == 0:
            return 0.0
        return float(self.cross @ self.coefficients())

    @property
    def residual_ss(self) -> float:
        return max(self.syy - self.fit_ss(), 0.0)

    def mean_at(self, x_active) -> float:
        return float(
            self.y_mean + (np.asarray(x_active) - self.x_mean) @ self.coefficients()
        )

    def predictive_moments(self, x_active) -> PredictiveMoments:
        self._require()
        L = self._chol()
        beta = self._solve(L, self.cross) if self.q else np.zeros(0)
        xc = np.asarray(x_active, dtype=np.float64) - self.x_mean
        rss = max(self.syy - float(self.cross @ beta), 0.0)
        lev = float(xc @ self._solve(L, xc)) if self.q else 0.0
        scale2 = max(rss / self.dof * (1.0 + 1.0 / self.n + lev), VARIANCE_FLOOR)
        return PredictiveMoments(self.y_mean + float(xc @ beta), scale2, float(self.dof))

    def log_predictive(self, x_active, y) -> float:
        m = self.predictive_moments(x_active)
        return float(_student_t_logpdf(y, m.dof, m.mean, m.variance))

    def log_marginal(self) -> float:
        if self._lm is not None:
            return self._lm
        self._require()
        nu = self.dof
        L = self._chol()
        logdet = 2.0 * float(np.sum(np.log(np.diag(L)))) if self.q else 0.0
        rss = max(self.residual_ss, VARIANCE_FLOOR)
        self._lm = (
            -0.5 * nu * LOG_PI
            - 0.5 * math.log(self.n)
            - 0.5 * logdet
            + math.lgamma(0.5 * nu)
            - 0.5 * nu * math.log(rss)
        )
        return self._lm

    def sample_plane(self, rng: np.random.Generator):
        """Posterior draw of (intercept at x_mean, slopes)."""
        self._require()
        L = self._chol()
        beta_hat = self._solve(L, self.cross) if self.q else np.zeros(0)
        rss = max(self.syy - float(self.cross @ beta_hat), VARIANCE_FLOOR)
        sigma2 = rss / rng.chisquare(self.dof)
        a = rng.normal(self.y_mean, np.sqrt(sigma2 / self.n))
        if self.q == 0:
            return a, beta_hat
        # beta | sigma2 ~ N(beta_hat, sigma2 * G^-1); G = L L^T.
        z = rng.standard_normal(self.q)
        beta = beta_hat + np.sqrt(sigma2) * np.linalg.solve(L.T, z)
        return a, beta

    def mean_rows(self, X_active_rows) -> np.ndarray:
        Xc = np.asarray(X_active_rows, dtype=np.float64) - self.x_mean
        return self.y_mean + Xc @ self.coefficients()

    def moments_rows(self, X_active_rows):
        self._require()
        L = self._chol()
        beta = self._solve(L, self.cross) if self.q else np.zeros(0)
        Xc = np.asarray(X_active_rows, dtype=np.float64) - self.x_mean
        rss = max(self.syy - float(self.cross @ beta), 0.0)
        if self.q:
            Z = np.linalg.solve(L, Xc.T)
            lev = np.square(Z).sum(axis=0)
        else:
            lev = np.zeros(len(Xc))
        scale2 = np.maximum(
            rss / self.dof * (1.0 + 1.0 / self.n + lev), VARIANCE_FLOOR
        )
        return (
            self.y_mean + Xc @ beta,
            scale2,
            np.full(len(Xc), float(self.dof)),
        )


class MultinomialStats:
    """Per-class counts with Dirichlet(1/C) smoothing."""

    __slots__ = ("counts", "_lm")

    def __init__(self, counts):
        self.counts = np.asarray(counts, dtype=np.int64)
        self._lm = None

    @classmethod
    def from_values(cls, classes, n_classes):
        classes = np.asarray(classes, dtype=np.int64)
        return cls(np.bincount(classes, minlength=n_classes))

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    def update(self, x, cls) -> "MultinomialStats":
        counts = self.counts.copy()
        counts[int(cls)] += 1
        return MultinomialStats(counts)

    def merge(self, other: "MultinomialStats") -> "MultinomialStats":
        return MultinomialStats(self.counts + other.counts)

    def probs(self) -> np.ndarray:
        c = self.n_classes
        return (self.counts + 1.0 / c) / (self.n + 1.0)

    def entropy(self) -> float:
        p = self.probs()
        return float(-(p * np.log(p)).sum())

    def predictive_moments(self, x=None) -> PredictiveMoments:
        p = self.probs()
        return PredictiveMoments(float(np.argmax(p)), 0.0, float(self.n), probs=p)

    def log_predictive(self, x, cls) -> float:
        return float(np.log(self.probs()[int(cls)]))

    def log_marginal(self) -> float:
        if self._lm is not None:
            return self._lm
        a = 1.0 / self.n_classes
        base = math.lgamma(a)
        self._lm = -math.lgamma(1.0 + self.n) + sum(
            math.lgamma(a + int(c)) - base for c in self.counts
        )
        return self._lm

    def sample_probs(self, rng: np.random.Generator) -> np.ndarray:
        return rng.dirichlet(self.counts + 1.0 / self.n_classes)


def stats_from_rows(spec: ModelSpec, X: np.ndarray, y: np.ndarray, rows: np.ndarray):
    """Build the sufficient statistics of the spec's leaf model from raw rows."""
    if spec.leaf_model == LEAF_CONSTANT:
        return ConstantStats.from_values(y[rows])
    if spec.leaf_model == LEAF_LINEAR:
        return LinearStats.from_values(X[np.ix_(rows, np.flatnonzero(spec.linear_active))], y[rows])
    return MultinomialStats.from_values(y[rows], spec.n_classes)


def active_x(spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    """Project a full input vector onto the linear-active dims."""
    return np.asarray(x)[spec.linear_active]


def leaf_update(spec: ModelSpec, stats, x, y):
    """Rank-1 update with the correct projection for the leaf model."""
    if isinstance(stats, LinearStats):
        return stats.update(active_x(spec, x), y)
    return stats.update(x, y)


def leaf_log_predictive(spec: ModelSpec, stats, x, y) -> float:
    if isinstance(stats, LinearStats):
        return stats.log_predictive(active_x(spec, x), y)
    return stats.log_predictive(x, y)


# Spec-level operation aliases: thin functional forms over the methods.
def update_stats(stats, x, y):
    return stats.update(x, y)


def merge_stats(a, b):
    return a.merge(b)


def log_predictive(stats, x, y) -> float:
    return stats.log_predictive(x, y)


def predictive_moments(stats, x=None) -> PredictiveMoments:
    return stats.predictive_moments(x)


def leaf_log_marginal(stats) -> float:
    return stats.log_marginal()
