"""Particle learning for sequential trees.

Each observation triggers resample-then-propagate: particles are resampled
proportionally to the one-step-ahead predictive density of the new response,
then each survivor samples one local move -- stay, prune the parent of the
leaf owning the new point, or one of the feasible splits of that leaf --
with probability proportional to exp(tree log prior + tree log marginal
likelihood), the new observation included.  Only the subtree touched by the
move differs across candidates, so scores are computed over that
neighborhood and the rest of the tree cancels.

Trees are immutable with structural sharing, so particles that pick the same
move from the same ancestor share one tree object; the per-step move
enumeration is likewise computed once per distinct ancestor.  Reproducibility
contract: one uniform draw per particle slot per step from a slot-indexed
stream, plus one multinomial draw per step from a cloud-level stream, so
results depend only on the master seed and the data order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from . import leaves as _lv
from . import tree as _tr
from .errors import ConfigError
from .model import (
    LEAF_CONSTANT,
    LEAF_LINEAR,
    LEAF_MULTINOMIAL,
    DataBuffer,
    ModelSpec,
    TreePrior,
)

LOG_PI = _lv.LOG_PI
_FLOOR = _lv.VARIANCE_FLOOR


@dataclass
class Particle:
    """View of one posterior sample: a tree plus its slot-local RNG stream."""

    tree: _tr.Node
    rng: np.random.Generator


class _MoveSet:
    """Move distribution at one propagation site.

    Index 0 is stay; index 1 is prune when available; the rest map onto the
    leaf's grow table (dims/thrs/lprs arrays).
    """

    __slots__ = ("cdf", "grow_off", "dims", "thrs", "lprs")

    def __init__(self, cdf, grow_off, dims, thrs, lprs):
        self.cdf = cdf
        self.grow_off = grow_off
        self.dims = dims
        self.thrs = thrs
        self.lprs = lprs


# ---------------------------------------------------------------------------
# Lookup tables: log-marginals are evaluated for every candidate cut of every
# propagated leaf, so gammaln/log of small integers are precomputed.

_GLH = np.empty(0)  # _GLH[k] = gammaln(k / 2)
_LOGI = np.empty(0)  # _LOGI[k] = log(max(k, 1))
_GLA: dict[int, np.ndarray] = {}  # per class count: gammaln(1/C + k)


def _ensure_tables(nmax: int, n_classes: int = 0) -> None:
    global _GLH, _LOGI
    need = 2 * nmax + 8
    if len(_GLH) < need:
        ks = np.arange(max(need, 4096))
        _GLH = gammaln(ks / 2.0)
        _LOGI = np.log(np.maximum(ks, 1))
    if n_classes and (
        n_classes not in _GLA or len(_GLA[n_classes]) < nmax + 4
    ):
        ks = np.arange(max(nmax + 4, 4096))
        _GLA[n_classes] = gammaln(1.0 / n_classes + ks)


def _marg_constant_arr(n, sy, syy):
    """Reference-prior constant-leaf log marginal; ``n`` integer-valued."""
    ssr = np.maximum(syy - sy * sy / n, _FLOOR)
    nu = n - 1.0
    return -0.5 * nu * LOG_PI - 0.5 * _LOGI[n] + _GLH[n - 1] - 0.5 * nu * np.log(ssr)


def _marg_multinomial_arr(counts):
    c = counts.shape[-1]
    n = counts.sum(axis=-1)
    tab = _GLA[c]
    return -_GLH[2 * (1 + n)] + (tab[counts] - tab[0]).sum(axis=-1)


def _rule_log_priors(xs):
    """Per-dimension log rule prior from column-sorted leaf values."""
    k = (xs[1:] > xs[:-1]).sum(axis=0)
    d_avail = int((k >= 1).sum())
    with np.errstate(divide="ignore"):
        return np.where(k >= 1, -np.log(float(max(d_avail, 1))) - np.log(k), -np.inf)


def _grow_table_constant(Xa, ya, min_child):
    """Feasible cuts of a constant leaf: split dim, threshold, summed child
    log marginals, and the rule log prior of each cut.

    ``ya`` should be pre-centered; the marginal is shift invariant, and
    centering keeps the prefix-sum cancellation benign.
    """
    n, p = Xa.shape
    if n < 2 * min_child:
        return None
    order = np.argsort(Xa, axis=0, kind="stable")
    xs = np.take_along_axis(Xa, order, axis=0)
    left = np.arange(1, n)
    feas = (left >= min_child) & (left <= n - min_child)
    ok = (xs[1:] > xs[:-1]) & feas[:, None]
    if not ok.any():
        return None
    lpr = _rule_log_priors(xs)
    ys = ya[order]
    cy = np.cumsum(ys, axis=0)
    cyy = np.cumsum(ys * ys, axis=0)
    ii, dd = np.nonzero(ok)
    nl = ii + 1
    nr = n - nl
    syl = cy[ii, dd]
    syyl = cyy[ii, dd]
    marg = _marg_constant_arr(nl, syl, syyl) + _marg_constant_arr(
        nr, cy[-1, dd] - syl, cyy[-1, dd] - syyl
    )
    thr = 0.5 * (xs[ii + 1, dd] + xs[ii, dd])
    return dd, thr, marg, lpr[dd]


def _grow_table_multinomial(Xa, codes, n_classes, min_child):
    n, p = Xa.shape
    if n < 2 * min_child:
        return None
    order = np.argsort(Xa, axis=0, kind="stable")
    xs = np.take_along_axis(Xa, order, axis=0)
    left = np.arange(1, n)
    feas = (left >= min_child) & (left <= n - min_child)
    ok = (xs[1:] > xs[:-1]) & feas[:, None]
    if not ok.any():
        return None
    lpr = _rule_log_priors(xs)
    onehot = np.eye(n_classes, dtype=np.int64)[codes]
    coh = np.cumsum(onehot[order], axis=0)  # (n, p, C)
    ii, dd = np.nonzero(ok)
    cl = coh[ii, dd]
    cr = coh[-1, dd] - cl
    marg = _marg_multinomial_arr(cl) + _marg_multinomial_arr(cr)
    thr = 0.5 * (xs[ii + 1, dd] + xs[ii, dd])
    return dd, thr, marg, lpr[dd]


def _marg_linear_batch(n, G, c, syy, q, scale_guard):
    """Reference-prior linear marginals for a batch of child candidates.

    Children whose centered Gram is (numerically) singular are flagged
    invalid rather than scored: a flat prior cannot identify the plane there.
    """
    diag = np.einsum("kii->ki", G)
    ok = (diag > scale_guard * n[:, None]).all(axis=1) if q else np.ones(len(n), bool)
    sign, logdet = np.linalg.slogdet(G)
    ok &= sign > 0
    marg = np.full(len(n), -np.inf)
    if not ok.any():
        return marg, ok
    idx = np.flatnonzero(ok)
    try:
        sol = np.linalg.solve(G[idx], c[idx][..., None])[..., 0]
    except np.linalg.LinAlgError:
        ok[:] = False
        return marg, ok
    rss = np.maximum(syy[idx] - np.einsum("ki,ki->k", c[idx], sol), _FLOOR)
    ni = n[idx]
    nu = ni - q - 1.0
    marg[idx] = (
        -0.5 * nu * LOG_PI
        - 0.5 * _LOGI[ni]
        - 0.5 * logdet[idx]
        + _GLH[ni - q - 1]
        - 0.5 * nu * np.log(rss)
    )
    return marg, ok


def _grow_table_linear(Xa, ya, active, ranges, min_child):
    n, p = Xa.shape
    if n < 2 * min_child:
        return None
    act = np.flatnonzero(active)
    q = act.size
    if q == 0:
        return _grow_table_constant(Xa, ya - ya.mean(), min_child)
    Xact = Xa[:, act] - Xa[:, act].mean(axis=0)
    yc = ya - ya.mean()
    # Per-dim singularity guard: child per-dim scatter below this fraction of
    # the squared support range marks the Gram as singular.
    scale_guard = 1e-12 * np.maximum(ranges[act] ** 2, 1e-300)
    left = np.arange(1, n)
    feas = (left >= min_child) & (left <= n - min_child)
    orders = [np.argsort(Xa[:, d], kind="stable") for d in range(p)]
    xs_all = [Xa[o, d] for d, o in enumerate(orders)]
    k_per_dim = np.array([(xs[1:] > xs[:-1]).sum() for xs in xs_all])
    d_avail = int((k_per_dim >= 1).sum())
    out_d, out_t, out_m, out_r = [], [], [], []
    for d in range(p):
        xs = xs_all[d]
        ok = (xs[1:] > xs[:-1]) & feas
        if not ok.any():
            continue
        o = orders[d]
        idx = np.flatnonzero(ok)
        Xs = Xact[o]
        ys = yc[o]
        cX = np.cumsum(Xs, axis=0)
        cXX = np.cumsum(Xs[:, :, None] * Xs[:, None, :], axis=0)
        cXy = np.cumsum(Xs * ys[:, None], axis=0)
        cy = np.cumsum(ys)
        cyy = np.cumsum(ys * ys)
        nl = idx + 1
        nr = n - nl
        nlf = nl.astype(np.float64)
        nrf = nr.astype(np.float64)
        cXl = cX[idx]
        GL = cXX[idx] - np.einsum("ki,kj->kij", cXl, cXl) / nlf[:, None, None]
        cyl = cy[idx]
        cl = cXy[idx] - cXl * (cyl / nlf)[:, None]
        syyl = cyy[idx] - cyl * cyl / nlf
        cXr = cX[-1] - cXl
        GR = (cXX[-1] - cXX[idx]) - np.einsum("ki,kj->kij", cXr, cXr) / nrf[:, None, None]
        cyr = cy[-1] - cyl
        cr = (cXy[-1] - cXy[idx]) - cXr * (cyr / nrf)[:, None]
        syyr = (cyy[-1] - cyy[idx]) - cyr * cyr / nrf
        mL, okL = _marg_linear_batch(nl, GL, cl, syyl, q, scale_guard)
        mR, okR = _marg_linear_batch(nr, GR, cr, syyr, q, scale_guard)
        keep = okL & okR
        if not keep.any():
            continue
        kk = np.flatnonzero(keep)
        out_d.append(np.full(len(kk), d))
        out_t.append(0.5 * (xs[idx[kk] + 1] + xs[idx[kk]]))
        out_m.append(mL[kk] + mR[kk])
        out_r.append(
            np.full(len(kk), -np.log(float(d_avail)) - np.log(float(k_per_dim[d])))
        )
    if not out_d:
        return None
    return (
        np.concatenate(out_d),
        np.concatenate(out_t),
        np.concatenate(out_m),
        np.concatenate(out_r),
    )


# ---------------------------------------------------------------------------
# Particle cloud


class ParticleCloud:
    """N tree particles plus the sequential log-predictive trace."""

    def __init__(self, spec: ModelSpec, X0, y0, n_particles: int, seed):
        X0 = np.asarray(X0, dtype=np.float64)
        if len(X0) < spec.min_leaf:
            raise ConfigError(
                f"initialization prefix of {len(X0)} points is below the "
                f"minimum leaf size {spec.min_leaf}"
            )
        self.spec = spec
        self.n_particles = int(n_particles)
        if self.n_particles < 1:
            raise ConfigError("need at least one particle")
        self.data = DataBuffer(
            spec.n_dims, classification=spec.leaf_model == LEAF_MULTINOMIAL
        )
        for xi, yi in zip(X0, np.asarray(y0)):
            self.data.append(spec.clamp(xi), yi)
        _ensure_tables(4096, spec.n_classes)
        root = _tr.single_leaf_tree(
            spec, self.data.X, self.data.y, np.arange(self.data.t)
        )
        self.trees = [root] * self.n_particles
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        children = ss.spawn(self.n_particles + 1)
        self._resample_rng = np.random.default_rng(children[0])
        self.streams = [np.random.default_rng(c) for c in children[1:]]
        self.trace: list[float] = []
        self.t_init = self.data.t
        self.degenerate_steps = 0
        self.seed = seed
        # depth-indexed log split/stay probabilities (depth > 64 never occurs
        # at realistic minimum leaf sizes)
        depths = np.arange(96)
        with np.errstate(divide="ignore"):
            self._lsplit = np.log(
                np.clip(spec.prior.alpha * (1.0 + depths) ** (-spec.prior.beta), 0.0, None)
            )
            self._lstay = np.log(
                1.0 - spec.prior.alpha * (1.0 + depths) ** (-spec.prior.beta)
            )

    # -- basic views --------------------------------------------------------

    @property
    def t(self) -> int:
        return self.data.t

    def particle(self, i: int) -> Particle:
        return Particle(self.trees[i], self.streams[i])

    def unique_trees(self):
        """Distinct tree objects with their particle multiplicities."""
        seen = {}
        for tr in self.trees:
            ent = seen.get(id(tr))
            if ent is None:
                seen[id(tr)] = [tr, 1]
            else:
                ent[1] += 1
        return [(tr, cnt) for tr, cnt in seen.values()]

    def log_marginal(self) -> float:
        """Sum of the trace: log marginal of the streamed data given the
        initialization prefix."""
        return float(np.sum(self.trace))

    # -- update -------------------------------------------------------------

    def update(self, x, y) -> "ParticleCloud":
        spec = self.spec
        x = spec.clamp(np.asarray(x, dtype=np.float64))
        n = self.n_particles

        # 1. one-step-ahead predictive weights, computed once per unique tree
        groups: dict[int, list[int]] = {}
        trees = self.trees
        for i in range(n):
            tid = id(trees[i])
            g = groups.get(tid)
            if g is None:
                groups[tid] = [i]
            else:
                g.append(i)
        logw = np.empty(n)
        site = {}
        xl = x.tolist()  # plain floats make the descents cheap
        for tid, idxs in groups.items():
            tr = trees[idxs[0]]
            leaf, path = _tr.descend(tr, xl)
            site[tid] = (tr, leaf, path)
            logw[idxs] = _lv.leaf_log_predictive(spec, leaf.stats, x, y)

        self.trace.append(float(logsumexp(logw) - np.log(n)))
        row = self.data.append(x, y)

        # 2. multinomial resampling; uniform fallback when weights degenerate
        wmax = logw.max()
        if not np.isfinite(wmax):
            probs = np.full(n, 1.0 / n)
            self.degenerate_steps += 1
        else:
            w = np.exp(logw - wmax)
            probs = w / w.sum()
        counts = self._resample_rng.multinomial(n, probs)

        # 3. propagate: one uniform per slot stream (stream positions depend
        #    only on the step count), enumeration shared per ancestor,
        #    resulting trees shared per (ancestor, move)
        us = np.fromiter((g.random() for g in self.streams), np.float64, count=n)
        new_trees = [None] * n
        enums: dict[int, _MoveSet] = {}
        results: dict[tuple, _tr.Node] = {}
        slot = 0
        for a in np.flatnonzero(counts):
            c = int(counts[a])
            anc = trees[a]
            tid = id(anc)
            ms = enums.get(tid)
            if ms is None:
                ms = self._enumerate(site[tid])
                enums[tid] = ms
            last = len(ms.cdf) - 1
            ks = np.searchsorted(ms.cdf, us[slot : slot + c], side="right")
            for k in ks:
                k = int(k)
                if k > last:
                    k = last
                key = (tid, k)
                res = results.get(key)
                if res is None:
                    res = self._apply(site[tid], ms, k, x, y, row)
                    results[key] = res
                new_trees[slot] = res
                slot += 1
        self.trees = new_trees
        return self

    def update_batch(self, X, ys) -> "ParticleCloud":
        for xi, yi in zip(np.asarray(X, dtype=np.float64), np.asarray(ys)):
            self.update(xi, yi)
        return self

    # -- move scoring -------------------------------------------------------

    def _enumerate(self, st) -> _MoveSet:
        """Move distribution at the leaf owning the incoming point.

        Weights follow the update contract: tree process prior times the
        tree marginal likelihood over the data seen so far; the new
        observation is deposited into the winning tree afterwards.  Only the
        parent's subtree differs across moves, so scoring is local.  The
        grow table is a pure function of the leaf and is memoized on it.
        """
        spec = self.spec
        prior = spec.prior
        tr, leaf, path = st
        depth = len(path)
        lsplit, lstay = self._lsplit, self._lstay

        stay = lstay[depth] + leaf.stats.log_marginal()
        prune = None
        shared = 0.0
        if path:
            # stay/grow keep the parent split (structure + rule prior) and
            # the sibling subtree; prune collapses all of it into one leaf
            parent, went_left = path[-1]
            shared = (
                lsplit[depth - 1]
                + parent.log_prule
                + self._subtree_score(parent.right if went_left else parent.left, depth)
            )
            merged = _tr.merged_stats(parent)
            prune = lstay[depth - 1] + merged.log_marginal()
            stay += shared

        table = None
        if prior.alpha > 0.0:
            table = leaf.gtab
            if table is None:
                table = self._grow_table(leaf)
                leaf.gtab = table
        if table is not None:
            dims, thrs, margs, lprs = table
            k = len(dims)
        else:
            dims = thrs = lprs = None
            k = 0

        grow_off = 1 if prune is None else 2
        s = np.empty(grow_off + k)
        s[0] = stay
        if prune is not None:
            s[1] = prune
        if k:
            s[grow_off:] = (
                shared + lsplit[depth] + 2.0 * lstay[depth + 1] + margs + lprs
            )
        smax = s.max()
        if not np.isfinite(smax):
            p = np.zeros(len(s))
            p[0] = 1.0  # stay is always available
        else:
            p = np.exp(s - smax)
            p /= p.sum()
        cdf = np.cumsum(p)
        cdf[-1] = 1.0
        return _MoveSet(cdf, grow_off, dims, thrs, lprs)

    def _grow_table(self, leaf):
        spec = self.spec
        Xa = self.data.X[leaf.rows]
        ya = self.data.y[leaf.rows]
        if spec.leaf_model == LEAF_CONSTANT:
            return _grow_table_constant(Xa, ya - ya.mean(), spec.min_leaf)
        if spec.leaf_model == LEAF_MULTINOMIAL:
            return _grow_table_multinomial(Xa, ya, spec.n_classes, spec.min_leaf)
        return _grow_table_linear(
            Xa, ya, spec.linear_active, spec.hi - spec.lo, spec.min_leaf
        )

    def _subtree_score(self, node, depth) -> float:
        """Log process prior plus log marginal contribution of a subtree."""
        lsplit, lstay = self._lsplit, self._lstay
        total = 0.0
        stack = [(node, depth)]
        while stack:
            nd, d = stack.pop()
            if nd.is_leaf:
                total += lstay[d] + nd.stats.log_marginal()
            else:
                total += lsplit[d] + nd.log_prule
                stack.append((nd.left, d + 1))
                stack.append((nd.right, d + 1))
        return total

    @staticmethod
    def _insert_row(rows: np.ndarray, row: int) -> np.ndarray:
        pos = int(np.searchsorted(rows, row))
        out = np.empty(len(rows) + 1, dtype=np.int64)
        out[:pos] = rows[:pos]
        out[pos] = row
        out[pos + 1 :] = rows[pos:]
        return out

    def _apply(self, st, ms: _MoveSet, k: int, x, y, row) -> _tr.Node:
        spec = self.spec
        tr, leaf, path = st
        X, Y = self.data.X, self.data.y
        if k == 0:  # stay
            rows_all = self._insert_row(leaf.rows, row)
            new = _tr.make_leaf(rows_all, _lv.leaf_update(spec, leaf.stats, x, y))
            return _tr._rebuild(path, new)
        if k < ms.grow_off:  # prune
            parent, _ = path[-1]
            rows = self._insert_row(_tr.collect_rows(parent), row)
            stats = _lv.leaf_update(spec, _tr.merged_stats(parent), x, y)
            return _tr._rebuild(path[:-1], _tr.make_leaf(rows, stats))
        g = k - ms.grow_off
        d, thr = int(ms.dims[g]), float(ms.thrs[g])
        rows_all = self._insert_row(leaf.rows, row)
        go_left = X[rows_all, d] <= thr
        rl, rr = rows_all[go_left], rows_all[~go_left]
        node = _tr.make_split(
            d,
            thr,
            _tr.make_leaf(rl, _lv.stats_from_rows(spec, X, Y, rl)),
            _tr.make_leaf(rr, _lv.stats_from_rows(spec, X, Y, rr)),
            log_prule=float(ms.lprs[g]),
        )
        return _tr._rebuild(path, node)

    # -- prediction ---------------------------------------------------------

    def predictive_mixture(self, Xq):
        """Per-row mixture mean, mean scale^2, and between-particle variance
        of leaf means, averaged over particles (regression clouds)."""
        Xq = self.spec.clamp(np.atleast_2d(np.asarray(Xq, dtype=np.float64)))
        m = len(Xq)
        acc_mu = np.zeros(m)
        acc_mu2 = np.zeros(m)
        acc_s2 = np.zeros(m)
        for tr, cnt in self.unique_trees():
            mu, s2, _ = tree_moments(tr, Xq, self.spec)
            acc_mu += cnt * mu
            acc_mu2 += cnt * mu * mu
            acc_s2 += cnt * s2
        n = self.n_particles
        mean = acc_mu / n
        return mean, acc_s2 / n, np.maximum(acc_mu2 / n - mean * mean, 0.0)

    def class_probs(self, Xq):
        """Mixture class probabilities for classification clouds."""
        Xq = self.spec.clamp(np.atleast_2d(np.asarray(Xq, dtype=np.float64)))
        out = np.zeros((len(Xq), self.spec.n_classes))
        for tr, cnt in self.unique_trees():
            lvs, assign = leaf_index_map(tr, Xq)
            probs = np.stack([lf.stats.probs() for lf in lvs])
            out += cnt * probs[assign]
        return out / self.n_particles

    # -- integrity ----------------------------------------------------------

    def check_invariants(self):
        """Row-partition and sufficient-statistic conservation for every
        unique tree; used by tests as a periodic spot check."""
        spec = self.spec
        all_rows = np.arange(self.data.t)
        full = _lv.stats_from_rows(spec, self.data.X, self.data.y, all_rows)
        for tr, _ in self.unique_trees():
            rows = _tr.collect_rows(tr)
            assert np.array_equal(rows, all_rows), "leaf rows do not partition the data"
            merged = _tr.merged_stats(tr)
            assert merged.n == full.n
            if spec.leaf_model == LEAF_MULTINOMIAL:
                assert np.array_equal(merged.counts, full.counts)
            elif spec.leaf_model == LEAF_CONSTANT:
                np.testing.assert_allclose(merged.sum_y, full.sum_y, rtol=1e-9)
                np.testing.assert_allclose(merged.sum_yy, full.sum_yy, rtol=1e-9)
            else:
                np.testing.assert_allclose(merged.syy, full.syy, rtol=1e-9, atol=1e-9)


# ---------------------------------------------------------------------------
# Tree evaluation helpers (shared by sensitivity / optimization / prediction)


def leaf_index_map(root: _tr.Node, Xq: np.ndarray):
    """Pre-order leaf list plus per-row leaf index for a query matrix."""
    m = len(Xq)
    assign = np.empty(m, dtype=np.int64)
    lvs = []
    stack = [(root, np.arange(m))]
    while stack:
        node, idx = stack.pop()
        if node.is_leaf:
            assign[idx] = len(lvs)
            lvs.append(node)
        else:
            mask = Xq[idx, node.dim] <= node.threshold
            stack.append((node.right, idx[~mask]))
            stack.append((node.left, idx[mask]))
    return lvs, assign


def tree_moments(root: _tr.Node, Xq: np.ndarray, spec: ModelSpec):
    """Leaf predictive (mean, scale^2, dof) at each query row."""
    lvs, assign = leaf_index_map(root, Xq)
    mu = np.empty(len(Xq))
    s2 = np.empty(len(Xq))
    dof = np.empty(len(Xq))
    act = spec.linear_active
    for k, lf in enumerate(lvs):
        rows = np.flatnonzero(assign == k)
        if len(rows) == 0:
            continue
        if spec.leaf_model == LEAF_LINEAR:
            mk, sk, dk = lf.stats.moments_rows(Xq[np.ix_(rows, np.flatnonzero(act))])
        else:
            mk, sk, dk = lf.stats.moments_rows(Xq[rows])
        mu[rows], s2[rows], dof[rows] = mk, sk, dk
    return mu, s2, dof


def tree_mean(root: _tr.Node, Xq: np.ndarray, spec: ModelSpec):
    """Leaf predictive mean at each query row (posterior mean surface)."""
    lvs, assign = leaf_index_map(root, Xq)
    out = np.empty(len(Xq))
    act = np.flatnonzero(spec.linear_active)
    for k, lf in enumerate(lvs):
        rows = np.flatnonzero(assign == k)
        if len(rows) == 0:
            continue
        if spec.leaf_model == LEAF_LINEAR:
            out[rows] = lf.stats.mean_rows(Xq[np.ix_(rows, act)])
        elif spec.leaf_model == LEAF_CONSTANT:
            out[rows] = lf.stats.mean
        else:
            raise ConfigError("tree_mean is for regression leaf models")
    return out


# ---------------------------------------------------------------------------
# Driving functions


def init_cloud(spec: ModelSpec, X0, y0, n_particles=1000, seed=0) -> ParticleCloud:
    """All particles start as the single-leaf tree holding the prefix."""
    return ParticleCloud(spec, X0, y0, n_particles, seed)


def default_prefix(spec: ModelSpec) -> int:
    return max(2 * spec.min_leaf, 10)


def fit_cloud(X, y, spec: ModelSpec, n_particles=1000, seed=0, prefix=None) -> ParticleCloud:
    """Initialize on a prefix of the rows, then stream the remainder."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    k = default_prefix(spec) if prefix is None else int(prefix)
    k = min(k, len(X))
    cloud = init_cloud(spec, X[:k], y[:k], n_particles, seed)
    cloud.update_batch(X[k:], y[k:])
    return cloud


def repetition_order(seed, rep: int, n: int) -> np.ndarray:
    """Shuffled row order for one repetition; depends only on (seed, rep)."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(901, rep)))
    return rng.permutation(n)


def _fit_one_rep(args):
    X, y, spec, n_particles, seed, r, shuffle, prefix = args
    order = repetition_order(seed, r, len(X)) if shuffle else np.arange(len(X))
    cloud_seed = np.random.SeedSequence(entropy=seed, spawn_key=(902, r))
    cloud = fit_cloud(X[order], y[order], spec, n_particles, cloud_seed, prefix)
    cloud.order = order
    cloud.rep = r
    return cloud


def run_repetitions(
    X,
    y,
    spec: ModelSpec,
    n_particles=1000,
    reps=5,
    seed=0,
    shuffle=True,
    prefix=None,
    workers=1,
) -> list[ParticleCloud]:
    """Independent SMC passes, each on its own shuffled order and seed.

    The row order for repetition r depends only on (seed, r), never on the
    spec, so paired model comparisons see identical data sequences.  With
    ``workers > 1`` repetitions run in separate processes; results are
    identical to the serial path.
    """
    if reps < 1:
        raise ConfigError("need at least one repetition")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    jobs = [(X, y, spec, n_particles, seed, r, shuffle, prefix) for r in range(reps)]
    if workers > 1 and reps > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=min(workers, reps)) as ex:
            return list(ex.map(_fit_one_rep, jobs))
    return [_fit_one_rep(j) for j in jobs]


def log_marginal(cloud: ParticleCloud) -> float:
    return cloud.log_marginal()


def bayes_factor(cloud_a: ParticleCloud, cloud_b: ParticleCloud) -> np.ndarray:
    """Cumulative log Bayes factor trace of A over B (B is the null).

    Both clouds must have consumed the same data sequence in the same order.
    """
    if len(cloud_a.trace) != len(cloud_b.trace):
        raise ConfigError("Bayes factor requires equal-length traces")
    return np.cumsum(np.asarray(cloud_a.trace) - np.asarray(cloud_b.trace))


# ---------------------------------------------------------------------------
# Prior split simulation


@dataclass
class PriorSimResult:
    """Prior splitting behavior by sample size: for each t and input, the
    mean number of splits and the probability of at least one split."""

    t: np.ndarray
    mean_splits: np.ndarray  # (n, p)
    prob_split: np.ndarray  # (n, p)


class _PriorNode:
    __slots__ = ("depth", "values", "wants_split", "dim", "threshold", "left", "right")

    def __init__(self, depth, rng, prior):
        self.depth = depth
        self.values = []
        self.wants_split = rng.random() < p_split_value(depth, prior)
        self.dim = -1
        self.threshold = 0.0
        self.left = None
        self.right = None


def p_split_value(depth, prior: TreePrior) -> float:
    return _tr.p_split(depth, prior)


def _try_split(node: _PriorNode, rng, prior, counter, min_child=1):
    """Split a leaf that wants to, as soon as any dimension offers a cut."""
    while node.wants_split and node.dim < 0:
        V = np.asarray(node.values)
        avail = []
        for d in range(V.shape[1]):
            thr, _ = _tr.candidate_splits(V[:, d], min_child)
            if len(thr):
                avail.append((d, thr))
        if not avail:
            return
        d, thr = avail[int(rng.integers(len(avail)))]
        t = float(thr[int(rng.integers(len(thr)))])
        node.dim, node.threshold = d, t
        counter[d] += 1
        node.left = _PriorNode(node.depth + 1, rng, prior)
        node.right = _PriorNode(node.depth + 1, rng, prior)
        for v in node.values:
            (node.left if v[d] <= t else node.right).values.append(v)
        node.values = []
        for child in (node.left, node.right):
            _try_split(child, rng, prior, counter, min_child)
        return


def prior_split_simulation(
    n: int,
    p: int,
    prior: TreePrior,
    reps: int = 1000,
    design_sampler=None,
    seed: int = 0,
) -> PriorSimResult:
    """Forward-sample trees from the depth prior alone as data accrues.

    Each leaf draws its split decision once, from p_split at its depth, and
    executes the split as soon as the covariates seen in that leaf offer a
    cut point (dimension chosen uniformly among those with candidates, then
    threshold uniformly among that dimension's midpoints).  Responses play no
    role.  Curves stabilize once trees can realize their drawn shapes.
    """
    sum_splits = np.zeros((n, p))
    sum_any = np.zeros((n, p))
    for r in range(reps):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(903, r)))
        design = (
            design_sampler(rng, n, p) if design_sampler is not None else rng.random((n, p))
        )
        root = _PriorNode(0, rng, prior)
        counter = np.zeros(p)
        for t in range(n):
            x = design[t]
            node = root
            while node.dim >= 0:
                node = node.left if x[node.dim] <= node.threshold else node.right
            node.values.append(x)
            _try_split(node, rng, prior, counter)
            sum_splits[t] += counter
            sum_any[t] += counter > 0
    return PriorSimResult(
        t=np.arange(1, n + 1),
        mean_splits=sum_splits / reps,
        prob_split=sum_any / reps,
    )
