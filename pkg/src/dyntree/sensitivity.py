"""Global and localized input sensitivity via paired Monte Carlo designs.

First-order and total indices come from the column-mixing estimator: two
designs M and M' are drawn from the input uncertainty distribution, M'_j is
M' with column j swapped in from M, and products of predicted responses over
these designs estimate the conditional second moments.  Predictions at M
paired with M'_j share only coordinate j (first-order); predictions at M'
paired with M'_j share everything but j (total).  All moments use 1/m, the
cross-moments 1/(m-1).  Model uncertainty enters by repeating the whole
computation on a posterior realization of each particle's mean surface.

Main-effect curves reuse M and M': for each input, the posterior mean
predictions are sorted along that coordinate, smoothed by a moving average,
and read off on a fixed grid.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import smc as _smc
from .errors import ConfigError
from .model import KIND_CATEGORICAL, LEAF_LINEAR, LEAF_MULTINOMIAL, ModelSpec

UNIFORM = "uniform"
FIXED = "fixed"
CATEGORICAL = "categorical"

#: Particles whose predicted-response variance falls below this floor get
#: flagged and excluded from summaries (indices are 0/0 there).
VARIANCE_GUARD = 1e-12


@dataclass(frozen=True)
class Margin:
    """One input's marginal: uniform(lo, hi), fixed(value), or categorical."""

    kind: str
    lo: float = 0.0
    hi: float = 1.0
    value: float = 0.0
    levels: tuple = ()
    weights: tuple = ()

    def __post_init__(self):
        if self.kind == UNIFORM and not self.lo < self.hi:
            raise ConfigError("uniform margin needs lo < hi")
        if self.kind == CATEGORICAL:
            if not self.levels:
                raise ConfigError("categorical margin needs levels")
            w = np.asarray(self.weights if self.weights else
                           [1.0 / len(self.levels)] * len(self.levels))
            if len(w) != len(self.levels) or abs(w.sum() - 1.0) > 1e-9 or (w < 0).any():
                raise ConfigError("categorical weights must be a distribution")
            object.__setattr__(self, "weights", tuple(float(x) for x in w))

    @property
    def support(self):
        if self.kind == UNIFORM:
            return self.lo, self.hi
        if self.kind == FIXED:
            return self.value, self.value
        return min(self.levels), max(self.levels)


def uniform(lo, hi) -> Margin:
    return Margin(UNIFORM, lo=float(lo), hi=float(hi))


def fixed(value) -> Margin:
    return Margin(FIXED, value=float(value))


def categorical(levels, weights=()) -> Margin:
    return Margin(CATEGORICAL, levels=tuple(float(v) for v in levels),
                  weights=tuple(weights))


@dataclass(frozen=True)
class UncertaintyDist:
    """Independent product of per-input marginals; restrictable per input."""

    margins: tuple

    @classmethod
    def from_spec(cls, spec: ModelSpec) -> "UncertaintyDist":
        ms = []
        for k in range(spec.n_dims):
            if spec.kinds[k] == KIND_CATEGORICAL:
                lv = (spec.lo[k], spec.hi[k])
                ms.append(categorical(lv if lv[0] != lv[1] else (lv[0],)))
            elif spec.lo[k] == spec.hi[k]:
                ms.append(fixed(spec.lo[k]))
            else:
                ms.append(uniform(spec.lo[k], spec.hi[k]))
        return cls(tuple(ms))

    @property
    def n_dims(self) -> int:
        return len(self.margins)

    def restrict(self, dim: int, lo=None, hi=None, value=None) -> "UncertaintyDist":
        """New distribution with one margin narrowed or pinned."""
        ms = list(self.margins)
        cur = ms[dim]
        if value is not None:
            ms[dim] = fixed(value)
        elif cur.kind == UNIFORM:
            ms[dim] = uniform(cur.lo if lo is None else lo, cur.hi if hi is None else hi)
        else:
            raise ConfigError("range restriction applies to uniform margins only")
        return UncertaintyDist(tuple(ms))


def lhs_design(dist: UncertaintyDist, m: int, rng: np.random.Generator) -> np.ndarray:
    """Size-m design respecting the distribution.

    Uniform margins get a Latin hypercube column (one jittered point per of m
    equal strata, randomly permuted); fixed margins are constant; categorical
    margins are sampled independently from their weights.
    """
    if m < 2:
        raise ConfigError("design size m must be >= 2")
    out = np.empty((m, dist.n_dims))
    for k, mg in enumerate(dist.margins):
        if mg.kind == UNIFORM:
            strata = (rng.permutation(m) + rng.random(m)) / m
            out[:, k] = mg.lo + strata * (mg.hi - mg.lo)
        elif mg.kind == FIXED:
            out[:, k] = mg.value
        else:
            lv = np.asarray(mg.levels)
            out[:, k] = lv[rng.choice(len(lv), size=m, p=np.asarray(mg.weights))]
    return out


def mix_design(m_prime: np.ndarray, m_main: np.ndarray, j: int) -> np.ndarray:
    """M' with column j replaced by column j of M."""
    if m_prime.shape != m_main.shape:
        raise ConfigError("designs must have identical shapes")
    out = m_prime.copy()
    out[:, j] = m_main[:, j]
    return out


# ---------------------------------------------------------------------------
# Posterior mean-surface realizations


def _assignments(tree, Xq, cache):
    key = id(tree)
    got = cache.get(key)
    if got is None:
        got = _smc.leaf_index_map(tree, Xq)
        cache[key] = (got, tree)  # keep the tree alive while cached
        return got
    return got[0]


def _sampled_surface(tree, Xq, spec, rng, cache, class_c=None):
    """One posterior realization of the mean (or class-prob) surface."""
    lvs, assign = _assignments(tree, Xq, cache)
    out = np.empty(len(Xq))
    act = np.flatnonzero(spec.linear_active)
    for k, lf in enumerate(lvs):
        rows = np.flatnonzero(assign == k)
        if spec.leaf_model == LEAF_MULTINOMIAL:
            val = lf.stats.sample_probs(rng)[class_c]
            out[rows] = val
        elif spec.leaf_model == LEAF_LINEAR:
            a, beta = lf.stats.sample_plane(rng)
            if len(rows):
                out[rows] = a + (Xq[np.ix_(rows, act)] - lf.stats.x_mean) @ beta
        else:
            out[rows] = lf.stats.sample_mean(rng)
    return out


def _mean_surface(tree, Xq, spec, class_c=None):
    if spec.leaf_model == LEAF_MULTINOMIAL:
        lvs, assign = _smc.leaf_index_map(tree, Xq)
        probs = np.stack([lf.stats.probs()[class_c] for lf in lvs])
        return probs[assign]
    return _smc.tree_mean(tree, Xq, spec)


# ---------------------------------------------------------------------------
# Indices


@dataclass
class SensitivityResult:
    """Posterior samples of first-order (S) and total (T) indices."""

    s: np.ndarray  # (samples, p)
    t: np.ndarray  # (samples, p)
    flagged: np.ndarray  # (samples,) True where predicted variance collapsed
    m: int
    seed: int
    names: tuple
    class_label: int | None = None

    @property
    def valid_s(self) -> np.ndarray:
        return self.s[~self.flagged]

    @property
    def valid_t(self) -> np.ndarray:
        return self.t[~self.flagged]

    def mean_s(self) -> np.ndarray:
        return self.valid_s.mean(axis=0)

    def mean_t(self) -> np.ndarray:
        return self.valid_t.mean(axis=0)

    def quantiles(self, which="s", qs=(0.05, 0.5, 0.95)) -> np.ndarray:
        arr = self.valid_s if which == "s" else self.valid_t
        return np.quantile(arr, qs, axis=0)


def _eval_stack(dist, m, rng):
    """M, M', and the p mixed designs, stacked into one (m*(p+2), p) matrix."""
    M = lhs_design(dist, m, rng)
    Mp = lhs_design(dist, m, rng)
    blocks = [M, Mp] + [mix_design(Mp, M, j) for j in range(dist.n_dims)]
    return M, Mp, np.concatenate(blocks, axis=0)


def _indices_from_values(vals: np.ndarray, m: int, p: int):
    """Index estimates from predicted values over the stacked designs."""
    y_m = vals[:m]
    y_mp = vals[m : 2 * m]
    e_hat = y_m.mean()
    v_hat = y_m @ y_m / m - e_hat * e_hat
    if v_hat < VARIANCE_GUARD:
        return None
    s = np.empty(p)
    t = np.empty(p)
    for j in range(p):
        y_j = vals[(2 + j) * m : (3 + j) * m]
        # rows of M and M'_j share only coordinate j
        s[j] = (y_m @ y_j / (m - 1) - e_hat * e_hat) / v_hat
        # rows of M' and M'_j share all coordinates but j
        t[j] = 1.0 - (y_mp @ y_j / (m - 1) - e_hat * e_hat) / v_hat
    return s, t


def sensitivity_indices(
    clouds,
    dist: UncertaintyDist,
    m: int = 1000,
    seed: int = 0,
    class_label: int | None = None,
    threads: int = 1,
) -> SensitivityResult:
    """Posterior sample of S and T indices under the given uncertainty.

    Each repetition draws its own pair of designs; each particle contributes
    one realization of the mean surface (sampled leaf parameters, no
    observation noise).  Classification clouds analyze one class-probability
    surface at a time via ``class_label``.

    Needs no refit: restricting ``dist`` and calling again reuses the clouds.
    """
    if not clouds:
        raise ConfigError("need at least one cloud")
    spec = clouds[0].spec
    if spec.leaf_model == LEAF_MULTINOMIAL and class_label is None:
        raise ConfigError("classification sensitivity needs class_label")
    if dist.n_dims != spec.n_dims:
        raise ConfigError("uncertainty distribution dimension mismatch")
    p = spec.n_dims
    total = sum(c.n_particles for c in clouds)
    S = np.full((total, p), np.nan)
    T = np.full((total, p), np.nan)
    flagged = np.ones(total, dtype=bool)
    base = 0
    for cloud in clouds:
        rep = getattr(cloud, "rep", 0)
        rng_design = np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(905, rep))
        )
        _, _, stack = _eval_stack(dist, m, rng_design)
        stack = spec.clamp(stack)
        cache = {}
        slot_tree = []
        k = 0
        for tr, cnt in cloud.unique_trees():
            _assignments(tr, stack, cache)  # warm the shared assignment
            slot_tree.extend([tr] * cnt)
        offs = base

        def work(i, tr=None):
            tr = slot_tree[i]
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=seed, spawn_key=(906, rep, i))
            )
            vals = _sampled_surface(tr, stack, spec, rng, cache, class_label)
            got = _indices_from_values(vals, m, p)
            if got is not None:
                S[offs + i], T[offs + i] = got
                flagged[offs + i] = False

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as ex:
                list(ex.map(work, range(cloud.n_particles)))
        else:
            for i in range(cloud.n_particles):
                work(i)
        base += cloud.n_particles
    return SensitivityResult(S, T, flagged, m, seed, spec.names, class_label)


def function_sensitivity(f, dist: UncertaintyDist, m: int, seed: int = 0) -> SensitivityResult:
    """Indices for a known response function: a single perfect surface.

    Used to validate the estimator against functions with known indices; the
    design pipeline is identical to the cloud-based path.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(905, 0)))
    _, _, stack = _eval_stack(dist, m, rng)
    got = _indices_from_values(np.asarray(f(stack), dtype=np.float64), m, dist.n_dims)
    p = dist.n_dims
    if got is None:
        return SensitivityResult(
            np.full((1, p), np.nan), np.full((1, p), np.nan),
            np.ones(1, bool), m, seed, tuple(f"x{i+1}" for i in range(p)),
        )
    s, t = got
    return SensitivityResult(
        s[None, :], t[None, :], np.zeros(1, bool), m, seed,
        tuple(f"x{i+1}" for i in range(p)),
    )


# ---------------------------------------------------------------------------
# Main effects


@dataclass
class MainEffectCurves:
    """Smoothed conditional-mean curves per input with posterior bands."""

    grid: np.ndarray  # (p, G)
    mean: np.ndarray  # (p, G)
    lo: np.ndarray  # (p, G) 5% curve
    hi: np.ndarray  # (p, G) 95% curve
    degenerate: np.ndarray  # (p,) True where the margin is a single point
    window: int
    m: int
    names: tuple = ()


def default_window(m: int) -> int:
    w = max(3, int(round(2 * m / 25)))
    return w if w % 2 == 1 else w + 1


def _moving_average(v: np.ndarray, w: int) -> np.ndarray:
    h = w // 2
    c = np.concatenate([[0.0], np.cumsum(v)])
    n = len(v)
    iu = np.minimum(np.arange(n) + h + 1, n)
    il = np.maximum(np.arange(n) - h, 0)
    return (c[iu] - c[il]) / (iu - il)


def main_effects(
    clouds,
    dist: UncertaintyDist,
    m: int = 1000,
    window: int | None = None,
    seed: int = 0,
    grid_size: int = 100,
    class_label: int | None = None,
) -> MainEffectCurves:
    """Per-input conditional mean curves from the sensitivity designs.

    Uses the posterior mean predictions (not sampled realizations): each
    particle's scatter of 2m (coordinate, prediction) pairs is sorted,
    smoothed with a centered moving average, and evaluated on a fixed grid
    by nearest sorted neighbor.  Curves are summarized across particles by
    mean and 5/95% quantiles.
    """
    if not clouds:
        raise ConfigError("need at least one cloud")
    spec = clouds[0].spec
    if window is None:
        window = default_window(m)
    if window < 3 or window % 2 == 0:
        raise ConfigError("window must be odd and >= 3")
    p = spec.n_dims
    total = sum(c.n_particles for c in clouds)
    grid = np.empty((p, grid_size))
    degenerate = np.zeros(p, dtype=bool)
    for j, mg in enumerate(dist.margins):
        a, b = mg.support
        if a == b:
            degenerate[j] = True
            grid[j] = a
        else:
            grid[j] = np.linspace(a, b, grid_size)
    curves = np.empty((total, p, grid_size))
    fill = 0
    for cloud in clouds:
        rep = getattr(cloud, "rep", 0)
        rng_design = np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(905, rep))
        )
        M = lhs_design(dist, m, rng_design)
        Mp = lhs_design(dist, m, rng_design)
        pts = spec.clamp(np.concatenate([M, Mp], axis=0))
        xs_all = pts  # coordinates used for sorting are the clamped ones
        for tr, cnt in cloud.unique_trees():
            vals = _mean_surface(tr, pts, spec, class_label)
            cur = np.empty((p, grid_size))
            for j in range(p):
                if degenerate[j]:
                    cur[j] = vals.mean()
                    continue
                o = np.argsort(xs_all[:, j], kind="stable")
                sx = xs_all[o, j]
                sm = _moving_average(vals[o], window)
                pos = np.searchsorted(sx, grid[j])
                pos = np.clip(pos, 1, len(sx) - 1)
                pick = np.where(
                    np.abs(grid[j] - sx[pos - 1]) <= np.abs(sx[pos] - grid[j]),
                    pos - 1,
                    pos,
                )
                cur[j] = sm[pick]
            curves[fill : fill + cnt] = cur
            fill += cnt
    return MainEffectCurves(
        grid=grid,
        mean=curves.mean(axis=0),
        lo=np.quantile(curves, 0.05, axis=0),
        hi=np.quantile(curves, 0.95, axis=0),
        degenerate=degenerate,
        window=window,
        m=m,
        names=spec.names,
    )
