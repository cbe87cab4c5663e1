"""Tree structure, split bookkeeping, depth prior, and geometric queries.

Nodes are immutable after construction; every structural change (grow,
prune, deposit) path-copies from the root so concurrent readers and
particle clouds can share subtrees freely.  Node identifiers use the heap
path encoding: root is 1, the left child of node i is 2i and the right
child 2i + 1, so an id doubles as the route from the root.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidMoveError
from .model import ModelSpec, TreePrior
from . import leaves as _leaves

ROOT_ID = 1


@dataclass(frozen=True)
class SplitRule:
    """Axis-aligned split: left child takes x[dim] <= threshold."""

    dim: int
    threshold: float


class Node:
    """A tree node; a leaf iff ``dim < 0``.

    Leaves carry the sorted row indices of their data plus the leaf-model
    sufficient statistics.  Internal nodes carry the split, the two children,
    and ``log_prule``: the log probability of having drawn this split rule
    uniformly (dimension first, then threshold) from the candidates available
    when the node was created.  That factor is part of the tree process prior
    used in move weights.
    """

    __slots__ = ("dim", "threshold", "left", "right", "rows", "stats", "log_prule",
                 "gtab")

    def __init__(self, dim=-1, threshold=0.0, left=None, right=None, rows=None,
                 stats=None, log_prule=0.0):
        self.dim = dim
        self.threshold = threshold
        self.left = left
        self.right = right
        self.rows = rows
        self.stats = stats
        self.log_prule = log_prule
        self.gtab = None  # memoized grow table; derived, never persisted

    @property
    def is_leaf(self) -> bool:
        return self.dim < 0

    @property
    def split(self) -> SplitRule | None:
        return None if self.is_leaf else SplitRule(self.dim, self.threshold)

    def __getstate__(self):
        return (self.dim, self.threshold, self.left, self.right, self.rows,
                self.stats, self.log_prule)

    def __setstate__(self, state):
        (self.dim, self.threshold, self.left, self.right, self.rows,
         self.stats, self.log_prule) = state
        self.gtab = None


def make_leaf(rows: np.ndarray, stats) -> Node:
    return Node(rows=np.asarray(rows, dtype=np.int64), stats=stats)


def make_split(dim: int, threshold: float, left: Node, right: Node,
               log_prule: float = 0.0) -> Node:
    return Node(dim=int(dim), threshold=float(threshold), left=left, right=right,
                log_prule=log_prule)


def rule_log_prior(X_node: np.ndarray, dim: int) -> float:
    """Log probability of drawing a split on ``dim`` uniformly: dimension
    uniform among those with at least one distinct-value gap, then threshold
    uniform among that dimension's gaps."""
    distinct = [len(np.unique(X_node[:, d])) - 1 for d in range(X_node.shape[1])]
    d_avail = sum(1 for k in distinct if k >= 1)
    k = distinct[dim]
    if k < 1 or d_avail < 1:
        return -np.inf
    return -float(np.log(d_avail)) - float(np.log(k))


def single_leaf_tree(spec: ModelSpec, X: np.ndarray, y: np.ndarray, rows) -> Node:
    rows = np.sort(np.asarray(rows, dtype=np.int64))
    return make_leaf(rows, _leaves.stats_from_rows(spec, X, y, rows))


# ---------------------------------------------------------------------------
# Traversal


def descend(root: Node, x: np.ndarray):
    """Route x to its leaf; returns (leaf, path) where path lists
    (internal node, went_left) pairs from the root down."""
    node = root
    path = []
    while not node.is_leaf:
        left = x[node.dim] <= node.threshold
        path.append((node, left))
        node = node.left if left else node.right
    return node, path


def leaf_for(root: Node, x: np.ndarray, spec: ModelSpec) -> int:
    """Heap id of the unique leaf owning x (clamped into the root box)."""
    x = spec.clamp(np.asarray(x, dtype=np.float64))
    node = root
    hid = ROOT_ID
    while not node.is_leaf:
        if x[node.dim] <= node.threshold:
            node, hid = node.left, 2 * hid
        else:
            node, hid = node.right, 2 * hid + 1
    return hid


def node_by_id(root: Node, hid: int):
    """Node at a heap id plus its path; raises KeyError when absent."""
    if hid < 1:
        raise KeyError(hid)
    route = bin(hid)[3:]  # drop '0b1'
    node = root
    path = []
    for bit in route:
        if node.is_leaf:
            raise KeyError(hid)
        left = bit == "0"
        path.append((node, left))
        node = node.left if left else node.right
    return node, path


def iter_nodes(root: Node, lo=None, hi=None):
    """Pre-order traversal yielding (node, heap id, depth, lo, hi).

    Boxes are derived on the fly from the root box; pass spec.lo/spec.hi to
    get bounding rectangles, or leave None to skip box bookkeeping.
    """
    stack = [(root, ROOT_ID, 0, lo, hi)]
    while stack:
        node, hid, depth, blo, bhi = stack.pop()
        yield node, hid, depth, blo, bhi
        if not node.is_leaf:
            if blo is not None:
                llo, lhi = blo, bhi.copy()
                lhi[node.dim] = node.threshold
                rlo, rhi = blo.copy(), bhi
                rlo[node.dim] = node.threshold
            else:
                llo = lhi = rlo = rhi = None
            stack.append((node.right, 2 * hid + 1, depth + 1, rlo, rhi))
            stack.append((node.left, 2 * hid, depth + 1, llo, lhi))


def leaf_nodes(root: Node):
    return [n for n, *_ in iter_nodes(root) if n.is_leaf]


def n_leaves(root: Node) -> int:
    return len(leaf_nodes(root))


def collect_rows(node: Node) -> np.ndarray:
    """Sorted union of the data rows under a subtree."""
    if node.is_leaf:
        return node.rows
    parts = []
    stack = [node]
    while stack:
        nd = stack.pop()
        if nd.is_leaf:
            parts.append(nd.rows)
        else:
            stack.append(nd.left)
            stack.append(nd.right)
    out = np.concatenate(parts)
    out.sort()
    return out


def merged_stats(node: Node):
    """Pooled sufficient statistics of every leaf under a subtree."""
    acc = None
    stack = [node]
    while stack:
        nd = stack.pop()
        if nd.is_leaf:
            acc = nd.stats if acc is None else acc.merge(nd.stats)
        else:
            stack.append(nd.left)
            stack.append(nd.right)
    return acc


# ---------------------------------------------------------------------------
# Prior


def p_split(depth: int, prior: TreePrior) -> float:
    """Probability that a node at the given depth is split."""
    return prior.alpha * (1.0 + depth) ** (-prior.beta)


def _log_or_neginf(v: float) -> float:
    return float(np.log(v)) if v > 0.0 else -np.inf


def log_p_split(depth: int, prior: TreePrior) -> float:
    return _log_or_neginf(p_split(depth, prior))


def log_p_stay(depth: int, prior: TreePrior) -> float:
    return _log_or_neginf(1.0 - p_split(depth, prior))


def tree_log_prior(root: Node, prior: TreePrior) -> float:
    """Unnormalized log prior: sum of log p_split over internal nodes plus
    log(1 - p_split) over leaves."""
    total = 0.0
    for node, _, depth, _, _ in iter_nodes(root):
        total += log_p_stay(depth, prior) if node.is_leaf else log_p_split(depth, prior)
    return total


# ---------------------------------------------------------------------------
# Candidate splits


def candidate_splits(values: np.ndarray, min_child: int):
    """Candidate thresholds for one dimension of a leaf's data.

    Thresholds sit at midpoints of consecutive distinct observed values, and
    only cuts leaving at least ``min_child`` points on each side survive.
    Returns (thresholds, left_counts) over the sorted values.
    """
    v = np.sort(np.asarray(values, dtype=np.float64))
    n = len(v)
    if n < 2 * min_child:
        return np.empty(0), np.empty(0, dtype=np.int64)
    left = np.arange(1, n)
    ok = (v[1:] > v[:-1]) & (left >= min_child) & (n - left >= min_child)
    return (v[1:][ok] + v[:-1][ok]) / 2.0, left[ok]


def enumerate_grow_moves(leaf: Node, X: np.ndarray, spec: ModelSpec, min_child=None):
    """All feasible splits of a leaf: list of (SplitRule, n_left, n_right)."""
    if not leaf.is_leaf:
        raise InvalidMoveError("grow target must be a leaf")
    if min_child is None:
        min_child = spec.min_leaf
    out = []
    Xl = X[leaf.rows]
    for d in range(spec.n_dims):
        thr, nl = candidate_splits(Xl[:, d], min_child)
        for t, k in zip(thr, nl):
            out.append((SplitRule(d, float(t)), int(k), int(len(leaf.rows) - k)))
    return out


# ---------------------------------------------------------------------------
# Structural edits (path-copying)


def _rebuild(path, new_node: Node) -> Node:
    for node, went_left in reversed(path):
        if went_left:
            new_node = make_split(node.dim, node.threshold, new_node, node.right)
        else:
            new_node = make_split(node.dim, node.threshold, node.left, new_node)
    return new_node


def split_leaf(leaf: Node, rule: SplitRule, spec: ModelSpec, X: np.ndarray, y: np.ndarray) -> Node:
    """Partition a leaf's rows by a rule; child stats recomputed from raw data."""
    go_left = X[leaf.rows, rule.dim] <= rule.threshold
    rl, rr = leaf.rows[go_left], leaf.rows[~go_left]
    if len(rl) == 0 or len(rr) == 0:
        raise InvalidMoveError("split leaves an empty child")
    return make_split(
        rule.dim,
        rule.threshold,
        make_leaf(rl, _leaves.stats_from_rows(spec, X, y, rl)),
        make_leaf(rr, _leaves.stats_from_rows(spec, X, y, rr)),
        log_prule=rule_log_prior(X[leaf.rows], rule.dim),
    )


def apply_grow(root: Node, leaf_id: int, rule: SplitRule, spec: ModelSpec,
               X: np.ndarray, y: np.ndarray) -> Node:
    """New tree with the given leaf split by the rule."""
    leaf, path = node_by_id(root, leaf_id)
    if not leaf.is_leaf:
        raise InvalidMoveError(f"node {leaf_id} is not a leaf")
    lo, hi = _box_of(root, leaf_id, spec)
    if not (lo[rule.dim] < rule.threshold < hi[rule.dim]):
        raise InvalidMoveError("threshold outside the leaf's bounding interval")
    return _rebuild(path, split_leaf(leaf, rule, spec, X, y))


def apply_prune(root: Node, leaf_id: int) -> Node:
    """New tree with the partition above the given node removed.

    The node's parent becomes a leaf whose statistics are the exact merge of
    every leaf under it (sibling subtree included).
    """
    if leaf_id == ROOT_ID:
        raise InvalidMoveError("cannot prune above the root")
    node, path = node_by_id(root, leaf_id)
    parent, _ = path[-1]
    rows = collect_rows(parent)
    return _rebuild(path[:-1], make_leaf(rows, merged_stats(parent)))


def deposit(root: Node, x: np.ndarray, y, row: int, spec: ModelSpec) -> Node:
    """Route one observation to its leaf and update that leaf's statistics."""
    leaf, path = descend(root, spec.clamp(np.asarray(x, dtype=np.float64)))
    pos = np.searchsorted(leaf.rows, row)
    rows = np.insert(leaf.rows, pos, row)
    return _rebuild(path, make_leaf(rows, _leaves.leaf_update(spec, leaf.stats, x, y)))


def _box_of(root: Node, hid: int, spec: ModelSpec):
    lo, hi = spec.lo.copy(), spec.hi.copy()
    node = root
    for bit in bin(hid)[3:]:
        if bit == "0":
            hi[node.dim] = min(hi[node.dim], node.threshold)
            node = node.left
        else:
            lo[node.dim] = max(lo[node.dim], node.threshold)
            node = node.right
    return lo, hi


def node_box(root: Node, hid: int, spec: ModelSpec):
    """Bounding rectangle [lo, hi] of a node, derived from the root box."""
    node_by_id(root, hid)  # existence check
    return _box_of(root, hid, spec)
