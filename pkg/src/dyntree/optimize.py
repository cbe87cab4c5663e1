"""Space-filling subsampling and sequential expected-improvement search.

Minimization convention throughout: responses are runtimes, smaller is
better; maximize by negating the response at ingestion.  The acquisition is
the closed-form expected improvement under each particle's Student-t leaf
predictive, averaged over particles.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy import stats as sps

from . import smc as _smc
from .errors import ConfigError, DataError
from .model import KIND_ORDINAL, ModelSpec


# ---------------------------------------------------------------------------
# Maximin subsampling


def _normalized(points: np.ndarray, weights=None) -> np.ndarray:
    """Range-normalize each column; 0/1 categorical columns become mismatch
    indicators under squared Euclidean distance."""
    Z = np.asarray(points, dtype=np.float64).copy()
    span = Z.max(axis=0) - Z.min(axis=0)
    live = span > 0
    Z[:, live] = (Z[:, live] - Z[:, live].min(axis=0)) / span[live]
    Z[:, ~live] = 0.0
    if weights is not None:
        Z *= np.sqrt(np.asarray(weights, dtype=np.float64))
    return Z


def maxmin_subsample(points, size: int, weights=None, seed=None) -> np.ndarray:
    """Greedy maximin subset: start from the farthest pair, then repeatedly
    add the point with the largest minimum distance to the chosen set.

    Distance is range-normalized (weighted) squared Euclidean, which on 0/1
    categorical encodings is exactly a mismatch count.  The greedy procedure
    is deterministic (ties break at the lowest index); ``seed`` is accepted
    for interface stability and currently unused.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if size < 2:
        raise ConfigError("subsample size must be >= 2")
    if size > n:
        raise ConfigError(f"cannot pick {size} of {n} points")
    if size == n:
        return np.arange(n)
    Z = _normalized(points, weights)
    # farthest pair, chunked to bound memory
    best = (-1.0, 0, 1)
    chunk = max(1, int(2e7) // max(n, 1))
    sq = np.einsum("ij,ij->i", Z, Z)
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        d2 = sq[s:e, None] + sq[None, :] - 2.0 * Z[s:e] @ Z.T
        np.fill_diagonal(d2[:, s:e], -np.inf)
        flat = int(np.argmax(d2))
        i, j = divmod(flat, n)
        val = float(d2[i, j])
        if val > best[0]:
            best = (val, s + i, j)
    chosen = [min(best[1], best[2]), max(best[1], best[2])]
    mind2 = np.minimum(
        np.einsum("ij,ij->i", Z - Z[chosen[0]], Z - Z[chosen[0]]),
        np.einsum("ij,ij->i", Z - Z[chosen[1]], Z - Z[chosen[1]]),
    )
    mind2[chosen] = -np.inf
    while len(chosen) < size:
        nxt = int(np.argmax(mind2))
        chosen.append(nxt)
        d2 = np.einsum("ij,ij->i", Z - Z[nxt], Z - Z[nxt])
        mind2 = np.minimum(mind2, d2)
        mind2[nxt] = -np.inf
    return np.asarray(chosen, dtype=np.int64)


# ---------------------------------------------------------------------------
# Expected improvement


def _t_ei(mu, s, dof, y_best):
    """Closed-form E[max(y_best - Y, 0)] for Y ~ mu + s * T_dof (dof > 1)."""
    z = (y_best - mu) / s
    return (y_best - mu) * sps.t.cdf(z, dof) + s * (dof + z * z) / (dof - 1.0) * sps.t.pdf(z, dof)


def _t_ei_quadrature(mu, s, dof, y_best, span=1e6):
    """Numeric positive-part mean improvement; covers dof <= 1 where the
    closed form is unavailable (integration truncated at ``span`` scale
    units below the improvement threshold)."""
    z = (y_best - mu) / s
    val, _ = integrate.quad(
        lambda u: (z - u) * sps.t.pdf(u, dof), z - span, z, limit=200
    )
    return s * val


def expected_improvement(cloud, candidates, y_best: float) -> np.ndarray:
    """Per-candidate EI, averaged over the cloud's particles."""
    candidates = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    if len(candidates) == 0:
        return np.zeros(0)
    spec = cloud.spec
    Xq = spec.clamp(candidates)
    acc = np.zeros(len(Xq))
    for tr, cnt in cloud.unique_trees():
        mu, s2, dof = _smc.tree_moments(tr, Xq, spec)
        s = np.sqrt(s2)
        ei = np.empty(len(Xq))
        ok = dof > 1.0
        if ok.any():
            ei[ok] = _t_ei(mu[ok], s[ok], dof[ok], y_best)
        for i in np.flatnonzero(~ok):
            ei[i] = _t_ei_quadrature(mu[i], s[i], dof[i], y_best)
        acc += cnt * ei
    return acc / cloud.n_particles


# ---------------------------------------------------------------------------
# Candidate pool and the sequential loop


@dataclass
class CandidatePool:
    """Finite set of unevaluated configurations plus an optional subset
    filter (per-dimension bounds or pinned values; never a transform)."""

    points: np.ndarray
    available: np.ndarray = field(default=None)
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        if self.available is None:
            self.available = np.ones(len(self.points), dtype=bool)
        self.available = np.asarray(self.available, dtype=bool).copy()

    def constrain(self, bounds: dict) -> "CandidatePool":
        """Apply {dim: (lo, hi)} or {dim: value} filters to availability."""
        keep = self.available.copy()
        for d, b in bounds.items():
            col = self.points[:, d]
            if np.isscalar(b):
                keep &= col == b
            else:
                lo, hi = b
                keep &= (col >= lo) & (col <= hi)
        return CandidatePool(self.points, keep, list(self.history))

    def remaining(self) -> np.ndarray:
        return np.flatnonzero(self.available)

    def mark_evaluated(self, idx: int, y: float) -> None:
        self.available[idx] = False
        self.history.append((self.points[idx].copy(), float(y)))


@dataclass
class OptimizationResult:
    x_star: np.ndarray
    predicted_mean: float
    evaluated: list  # [(index, x, y, ei)] in visit order
    y_best_trace: np.ndarray
    exhausted_early: bool


def _best_observed(history) -> float:
    """Smallest per-configuration mean of the observed responses."""
    agg: dict[tuple, list] = {}
    for x, y in history:
        agg.setdefault(tuple(x), []).append(y)
    return min(float(np.mean(v)) for v in agg.values())


def sequential_optimize(
    pool: CandidatePool,
    cloud,
    budget: int,
    observer,
    evaluation_set=None,
) -> OptimizationResult:
    """EI-driven sequential search over a finite candidate pool.

    Each step evaluates EI on all remaining candidates, picks the argmax
    (ties broken by lower predicted mean, then lower index), observes the
    response via ``observer(x)``, feeds it to the cloud, and refreshes the
    incumbent.  Finishes by reporting the argmin of the predicted mean over
    ``evaluation_set`` (defaults to the full pool).
    """
    if budget < 0:
        raise ConfigError("budget must be >= 0")
    if pool.history:
        y_best = _best_observed(pool.history)
    elif cloud.data.t:
        y_best = float(np.min(cloud.data.y))
    else:
        raise ConfigError("no observations to seed the incumbent")
    evaluated = []
    trace = [y_best]
    exhausted = False
    for _ in range(budget):
        idx = pool.remaining()
        if len(idx) == 0:
            exhausted = True
            break
        cands = pool.points[idx]
        ei = expected_improvement(cloud, cands, y_best)
        pred, _, _ = cloud.predictive_mixture(cands)
        pick = np.lexsort((idx, pred, -ei))[0]
        gi = int(idx[pick])
        x = pool.points[gi]
        y = float(observer(x))
        pool.mark_evaluated(gi, y)
        evaluated.append((gi, x.copy(), y, float(ei[pick])))
        cloud.update(x, y)
        y_best = min(y_best, _best_observed(pool.history))
        trace.append(y_best)
    eval_pts = pool.points if evaluation_set is None else np.atleast_2d(evaluation_set)
    pred, _, _ = cloud.predictive_mixture(eval_pts)
    k = int(np.argmin(pred))
    return OptimizationResult(
        x_star=eval_pts[k].copy(),
        predicted_mean=float(pred[k]),
        evaluated=evaluated,
        y_best_trace=np.asarray(trace),
        exhausted_early=exhausted,
    )


# ---------------------------------------------------------------------------
# Observers


class FunctionObserver:
    """Observer backed by a response function plus optional noise."""

    def __init__(self, fn, rng=None):
        self.fn = fn
        self.rng = rng

    def __call__(self, x) -> float:
        if self.rng is None:
            return float(self.fn(np.asarray(x)[None, :])[0])
        return float(self.fn(np.asarray(x)[None, :], self.rng)[0])


class ReplayObserver:
    """Observer replaying recorded (configuration, response) rows.

    Responses for each configuration are consumed in file order; asking for
    a configuration with no remaining recorded runs is a data error.
    """

    def __init__(self, X, y):
        self._store: dict[tuple, list] = {}
        for x, v in zip(np.asarray(X, dtype=np.float64), np.asarray(y, dtype=np.float64)):
            self._store.setdefault(tuple(x), []).append(float(v))

    def __call__(self, x) -> float:
        key = tuple(np.asarray(x, dtype=np.float64))
        runs = self._store.get(key)
        if not runs:
            raise DataError(f"no recorded runs left for configuration {key}")
        return runs.pop(0)
