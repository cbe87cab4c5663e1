"""Variable importance, relevance probabilities, and backward selection.

A split's contribution is the drop in integrated predictive uncertainty it
buys: for regression the weighted predictive variance of the parent minus
that of its children, for classification the same with predictive entropy.
Weights are either the exact bounding-box volumes ("area" method) or the
node point counts ("count" method, the default): the data points act as a
Monte Carlo sample of each rectangle.  The parent's leaf model is refit from
the exact merge of its children's sufficient statistics.

Per-variable importance is the sum of these drops over the internal nodes
splitting on that variable; a particle cloud then yields a posterior sample
of importance vectors, and the fraction of samples above zero is the
relevance probability driving backward selection.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import smc as _smc
from . import tree as _tr
from .errors import ConfigError
from .leaves import ConstantStats, LinearStats, MultinomialStats
from .model import LEAF_LINEAR, ModelSpec

METHOD_COUNT = "count"
METHOD_AREA = "area"


# ---------------------------------------------------------------------------
# Closed-form integrals over boxes


def quad_box_integral(g_inv: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> float:
    """Integral of x^T G^-1 x over the box [lo, hi].

    Equals |A| * ( sum_i g_ii (b_i^3 - a_i^3) / (3 (b_i - a_i))
                 + sum_{i<j} g_ij (b_i + a_i)(b_j + a_j) / 2 ).
    """
    g = np.asarray(g_inv, dtype=np.float64)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if np.any(hi <= lo):
        raise ValueError("degenerate box: need hi > lo on every dimension")
    vol = float(np.prod(hi - lo))
    diag = np.diag(g)
    quad = float(np.sum(diag * (hi**3 - lo**3) / (3.0 * (hi - lo))))
    s = hi + lo
    off = np.triu(g, k=1)
    quad += float(s @ off @ s) / 2.0
    return vol * quad


def linear_leaf_variance_integral(stats: LinearStats, lo, hi) -> float:
    """Integral of the linear-leaf predictive scale^2 over a box.

    The box is given in the original coordinates of the active predictors
    and is shifted by the leaf means before the quadratic term, matching the
    centered Gram convention.
    """
    stats._require()
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    vol = float(np.prod(hi - lo))
    base = stats.residual_ss / stats.dof
    if stats.q == 0:
        return base * vol * (1.0 + 1.0 / stats.n)
    L = stats._chol()
    g_inv = np.linalg.inv(L.T) @ np.linalg.inv(L)
    quad = quad_box_integral(g_inv, lo - stats.x_mean, hi - stats.x_mean)
    return base * (vol * (1.0 + 1.0 / stats.n) + quad)


# ---------------------------------------------------------------------------
# Node-level uncertainty integrals


def _leaf_integral(stats, rows, X, spec, lo, hi, method) -> float:
    if method == METHOD_COUNT:
        if isinstance(stats, ConstantStats):
            return stats.n * stats.scale2()
        if isinstance(stats, MultinomialStats):
            return stats.n * stats.entropy()
        act = np.flatnonzero(spec.linear_active)
        _, s2, _ = stats.moments_rows(X[np.ix_(rows, act)])
        return float(s2.sum())
    # area method: volume over non-degenerate dims (degenerate dims, e.g. a
    # constant column, contribute factor one so the method stays usable)
    span = hi - lo
    live = span > 0
    if isinstance(stats, ConstantStats):
        return float(np.prod(span[live])) * stats.scale2()
    if isinstance(stats, MultinomialStats):
        return float(np.prod(span[live])) * stats.entropy()
    act = spec.linear_active
    inactive = live & ~act
    vol_inactive = float(np.prod(span[inactive]))
    a = np.flatnonzero(act)
    return vol_inactive * linear_leaf_variance_integral(stats, lo[a], hi[a])


def delta_node(root: _tr.Node, node_id: int, spec: ModelSpec, X: np.ndarray,
               method: str = METHOD_COUNT) -> float:
    """Reduction in integrated predictive uncertainty at one internal node."""
    node, _ = _tr.node_by_id(root, node_id)
    if node.is_leaf:
        raise ConfigError(f"node {node_id} is a leaf")
    lo, hi = _tr.node_box(root, node_id, spec)
    return _delta(node, spec, X, lo, hi, method)


def _delta(node: _tr.Node, spec: ModelSpec, X, lo, hi, method) -> float:
    llo, lhi = lo, hi.copy()
    lhi[node.dim] = node.threshold
    rlo, rhi = lo.copy(), hi
    rlo[node.dim] = node.threshold
    sl, sr = _tr.merged_stats(node.left), _tr.merged_stats(node.right)
    rl, rr = _tr.collect_rows(node.left), _tr.collect_rows(node.right)
    parent = sl.merge(sr)
    rows = np.concatenate([rl, rr])
    return (
        _leaf_integral(parent, rows, X, spec, lo, hi, method)
        - _leaf_integral(sl, rl, X, spec, llo, lhi, method)
        - _leaf_integral(sr, rr, X, spec, rlo, rhi, method)
    )


def importance(root: _tr.Node, spec: ModelSpec, X: np.ndarray,
               method: str = METHOD_COUNT) -> np.ndarray:
    """Per-variable importance: summed uncertainty reduction of its splits.

    Variables never split on score exactly zero.  Individual terms may be
    negative; they are kept as-is so the posterior sample is honest about
    small or harmful splits.
    """
    if method not in (METHOD_COUNT, METHOD_AREA):
        raise ConfigError(f"unknown importance method {method!r}")
    out = np.zeros(spec.n_dims)

    def rec(node, lo, hi):
        # post-order fold returning (merged stats, rows) while accumulating
        if node.is_leaf:
            return node.stats, node.rows
        llo, lhi = lo, hi.copy()
        lhi[node.dim] = node.threshold
        rlo, rhi = lo.copy(), hi
        rlo[node.dim] = node.threshold
        sl, rl = rec(node.left, llo, lhi)
        sr, rr = rec(node.right, rlo, rhi)
        merged = sl.merge(sr)
        rows = np.concatenate([rl, rr])
        d = (
            _leaf_integral(merged, rows, X, spec, lo, hi, method)
            - _leaf_integral(sl, rl, X, spec, llo, lhi, method)
            - _leaf_integral(sr, rr, X, spec, rlo, rhi, method)
        )
        out[node.dim] += d
        return merged, rows

    rec(root, spec.lo.copy(), spec.hi.copy())
    return out


# ---------------------------------------------------------------------------
# Relevance over particle clouds


@dataclass
class RelevanceReport:
    """Posterior importance samples pooled over particles and repetitions."""

    samples: np.ndarray  # (reps * particles, p)
    p_positive: np.ndarray  # (p,)
    mean: np.ndarray  # (p,)
    method: str
    names: tuple

    def quantiles(self, qs=(0.05, 0.25, 0.5, 0.75, 0.95)) -> np.ndarray:
        return np.quantile(self.samples, qs, axis=0)


def relevance(clouds, method: str = METHOD_COUNT) -> RelevanceReport:
    """Pooled importance samples and P(importance > 0) per variable."""
    if not clouds:
        raise ConfigError("need at least one cloud")
    spec = clouds[0].spec
    blocks = []
    for cloud in clouds:
        X = cloud.data.X
        sample = np.empty((cloud.n_particles, spec.n_dims))
        fill = 0
        for tr, cnt in cloud.unique_trees():
            j = importance(tr, spec, X, method)
            sample[fill : fill + cnt] = j
            fill += cnt
        blocks.append(sample)
    samples = np.concatenate(blocks, axis=0)
    return RelevanceReport(
        samples=samples,
        p_positive=(samples > 0).mean(axis=0),
        mean=samples.mean(axis=0),
        method=method,
        names=spec.names,
    )


# ---------------------------------------------------------------------------
# Backward selection


@dataclass
class SelectionRound:
    active: tuple  # names entering the round
    proposed_drop: tuple  # names proposed for removal
    bf_trace: np.ndarray  # mean cumulative log BF, active over reduced
    final_log_bf: float
    accepted: bool
    p_positive: dict


@dataclass
class SelectionResult:
    selected: tuple  # names of the surviving variables
    keep_mask: np.ndarray
    rounds: list


def backward_select(
    X,
    y,
    spec: ModelSpec,
    n_particles=1000,
    reps=5,
    seed=0,
    threshold=0.5,
    max_rounds=10,
    method=METHOD_COUNT,
    bf_margin=0.0,
) -> SelectionResult:
    """Iteratively drop variables with relevance below the threshold.

    Each round refits on the reduced set (same repetition data orders, so the
    marginal-likelihood traces pair up) and accepts the drop only when the
    final mean log Bayes factor of the larger model over the reduced one is
    at most ``bf_margin``: no evidence left for the extra variables.
    """
    if not (0.0 <= threshold < 1.0):
        raise ConfigError("threshold must be in [0, 1)")
    X = np.asarray(X, dtype=np.float64)
    active = np.ones(spec.n_dims, dtype=bool)
    clouds = _smc.run_repetitions(
        X, y, spec, n_particles=n_particles, reps=reps, seed=seed
    )
    rounds = []
    for _ in range(max_rounds):
        rel = relevance(clouds, method)
        sub_names = rel.names
        drop_local = rel.p_positive < threshold
        if not drop_local.any():
            break
        keep_local = ~drop_local
        if not keep_local.any():
            break  # refuse to drop everything; keep the round's full set
        idx_active = np.flatnonzero(active)
        new_active = active.copy()
        new_active[idx_active[drop_local]] = False
        reduced_spec = spec.subset(new_active)
        reduced = _smc.run_repetitions(
            X[:, new_active], y, reduced_spec, n_particles=n_particles, reps=reps, seed=seed
        )
        traces = [
            _smc.bayes_factor(c_full, c_red) for c_full, c_red in zip(clouds, reduced)
        ]
        mean_trace = np.mean(traces, axis=0)
        final = float(mean_trace[-1])
        accepted = final <= bf_margin
        rounds.append(
            SelectionRound(
                active=sub_names,
                proposed_drop=tuple(np.array(sub_names)[drop_local]),
                bf_trace=mean_trace,
                final_log_bf=final,
                accepted=accepted,
                p_positive=dict(zip(sub_names, rel.p_positive)),
            )
        )
        if not accepted:
            break
        active = new_active
        clouds = reduced
    return SelectionResult(
        selected=tuple(np.array(spec.names)[active]),
        keep_mask=active,
        rounds=rounds,
    )
