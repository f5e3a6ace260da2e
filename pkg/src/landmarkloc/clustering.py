"""Ground-plane landmark clustering.

A clustering-feature (CF) tree summarizes the 2D points: branching factor
50, absorption threshold starting at 1% of the bounding-box diagonal and
doubling whenever the tree overflows its entry budget. The leaf summaries
are then merged agglomeratively under Ward linkage until exactly
``lambda_l`` clusters remain.

Everything is deterministic given the input order: nearest-entry and
merge-pair ties resolve to the first (lowest) index, and final labels are
assigned by each cluster's lowest member point index.
"""

from __future__ import annotations

import numpy as np

from .errors import TooFewPoints

BRANCHING_FACTOR = 50
_BASE_LEAF_BUDGET = 2048
_MIN_THRESHOLD = 1e-300


class _Node:
    """One CF-tree node; entry arrays are preallocated at branching + 1 so a
    split can stage the overflowing entry in place."""

    __slots__ = ("leaf", "size", "n", "lsx", "lsy", "ss", "cx", "cy",
                 "children", "members")

    def __init__(self, leaf: bool):
        cap = BRANCHING_FACTOR + 1
        self.leaf = leaf
        self.size = 0
        self.n = np.zeros(cap)
        self.lsx = np.zeros(cap)
        self.lsy = np.zeros(cap)
        self.ss = np.zeros(cap)
        self.cx = np.zeros(cap)
        self.cy = np.zeros(cap)
        self.children: list["_Node"] | None = None if leaf else []
        self.members: list[list[int]] | None = [] if leaf else None

    def set_entry(self, j, n, lsx, lsy, ss):
        self.n[j] = n
        self.lsx[j] = lsx
        self.lsy[j] = lsy
        self.ss[j] = ss
        self.cx[j] = lsx / n
        self.cy[j] = lsy / n

    def add_to_entry(self, j, n, lsx, lsy, ss):
        self.n[j] += n
        self.lsx[j] += lsx
        self.lsy[j] += lsy
        self.ss[j] += ss
        self.cx[j] = self.lsx[j] / self.n[j]
        self.cy[j] = self.lsy[j] / self.n[j]

    def totals(self):
        k = self.size
        return (float(self.n[:k].sum()), float(self.lsx[:k].sum()),
                float(self.lsy[:k].sum()), float(self.ss[:k].sum()))


class _CFTree:
    def __init__(self, threshold: float):
        self.threshold_sq = threshold * threshold
        self.root = _Node(leaf=True)
        self.leaf_entry_count = 0

    # -- insertion ---------------------------------------------------------

    def insert(self, n, lsx, lsy, ss, members: list[int]):
        """Insert a CF (a raw point has n == 1). ``members`` lists the point
        indices the CF summarizes."""
        cfx = lsx / n
        cfy = lsy / n
        node = self.root
        path: list[tuple[_Node, int]] = []
        while not node.leaf:
            k = node.size
            dx = node.cx[:k] - cfx
            dy = node.cy[:k] - cfy
            j = int(np.argmin(dx * dx + dy * dy))
            node.add_to_entry(j, n, lsx, lsy, ss)
            path.append((node, j))
            node = node.children[j]

        k = node.size
        if k > 0:
            dx = node.cx[:k] - cfx
            dy = node.cy[:k] - cfy
            j = int(np.argmin(dx * dx + dy * dy))
            mn = node.n[j] + n
            mx = node.lsx[j] + lsx
            my = node.lsy[j] + lsy
            ms = node.ss[j] + ss
            radius_sq = max(ms / mn - (mx * mx + my * my) / (mn * mn), 0.0)
            if radius_sq <= self.threshold_sq:
                node.set_entry(j, mn, mx, my, ms)
                node.members[j].extend(members)
                return

        node.set_entry(k, n, lsx, lsy, ss)
        node.members.append(list(members))
        node.size = k + 1
        self.leaf_entry_count += 1
        if node.size > BRANCHING_FACTOR:
            self._split_upward(node, path)

    def _split_upward(self, node: _Node, path: list[tuple[_Node, int]]):
        while True:
            left, right = _split_node(node)
            if not path:
                new_root = _Node(leaf=False)
                for child in (left, right):
                    j = new_root.size
                    new_root.set_entry(j, *child.totals())
                    new_root.children.append(child)
                    new_root.size = j + 1
                self.root = new_root
                return
            parent, j = path.pop()
            parent.children[j] = left
            parent.set_entry(j, *left.totals())
            k = parent.size
            parent.set_entry(k, *right.totals())
            parent.children.append(right)
            parent.size = k + 1
            if parent.size <= BRANCHING_FACTOR:
                return
            node = parent

    # -- traversal ----------------------------------------------------------

    def leaf_entries(self):
        """All leaf CFs in left-to-right tree order as
        (n, lsx, lsy, ss, members) tuples."""
        out = []
        stack = [self.root]
        while stack:
            node = stack.pop()
            if node.leaf:
                for j in range(node.size):
                    out.append((node.n[j], node.lsx[j], node.lsy[j],
                                node.ss[j], node.members[j]))
            else:
                # preserve left-to-right order under the LIFO stack
                stack.extend(reversed(node.children[:node.size]))
        return out


def _split_node(node: _Node) -> tuple[_Node, _Node]:
    """Split an overflowing node on its farthest entry pair; every entry
    joins the nearer seed (ties go to the first seed)."""
    k = node.size
    cx = node.cx[:k]
    cy = node.cy[:k]
    dx = cx[:, None] - cx[None, :]
    dy = cy[:, None] - cy[None, :]
    d2 = dx * dx + dy * dy
    flat = int(np.argmax(d2))
    s1, s2 = divmod(flat, k)
    if s1 > s2:
        s1, s2 = s2, s1
    to_second = d2[:, s2] < d2[:, s1]

    left = _Node(leaf=node.leaf)
    right = _Node(leaf=node.leaf)
    for j in range(k):
        dst = right if to_second[j] else left
        i = dst.size
        dst.set_entry(i, node.n[j], node.lsx[j], node.lsy[j], node.ss[j])
        if node.leaf:
            dst.members.append(node.members[j])
        else:
            dst.children.append(node.children[j])
        dst.size = i + 1
    # a farthest pair guarantees both sides are non-empty
    return left, right


def _build_tree(xs, ys, sqs, threshold: float, budget: int) -> _CFTree:
    """Grow a CF tree over all points, doubling the threshold and rebuilding
    from the current leaf summaries whenever the entry budget overflows."""
    tree = _CFTree(threshold)
    for i in range(len(xs)):
        tree.insert(1.0, xs[i], ys[i], sqs[i], [i])
        if tree.leaf_entry_count > budget:
            entries = tree.leaf_entries()
            while True:
                threshold *= 2.0
                rebuilt = _CFTree(threshold)
                for n, lsx, lsy, ss, members in entries:
                    rebuilt.insert(n, lsx, lsy, ss, members)
                if rebuilt.leaf_entry_count <= budget:
                    break
                entries = rebuilt.leaf_entries()
            tree = rebuilt
    return tree


def _ward_merge(counts: np.ndarray, cents: np.ndarray,
                members: list[list[int]], target: int):
    """Agglomerate CF summaries under Ward linkage until ``target`` remain.

    Ward distance between weighted centroids:
    d(a, b) = n_a n_b / (n_a + n_b) * ||c_a - c_b||^2.
    """
    m = counts.astype(np.float64).copy()
    c = cents.astype(np.float64).copy()
    groups = [list(g) for g in members]
    nloc = len(m)
    active = np.ones(nloc, dtype=bool)

    diff = c[:, None, :] - c[None, :, :]
    dist = (diff * diff).sum(axis=2)
    weight = m[:, None] * m[None, :] / (m[:, None] + m[None, :])
    d = weight * dist
    np.fill_diagonal(d, np.inf)

    rowmin = d.min(axis=1)
    rowarg = d.argmin(axis=1)

    remaining = nloc
    while remaining > target:
        i = int(np.argmin(rowmin))
        j = int(rowarg[i])
        if i > j:
            i, j = j, i
        total = m[i] + m[j]
        c[i] = (m[i] * c[i] + m[j] * c[j]) / total
        m[i] = total
        groups[i].extend(groups[j])
        groups[j] = []
        active[j] = False
        remaining -= 1

        d[j, :] = np.inf
        d[:, j] = np.inf
        rowmin[j] = np.inf

        idx = np.flatnonzero(active)
        other = idx[idx != i]
        if len(other):
            dd = c[other] - c[i]
            vals = (m[other] * m[i] / (m[other] + m[i])) * (dd * dd).sum(axis=1)
            d[i, other] = vals
            d[other, i] = vals
        d[i, i] = np.inf
        rowmin[i] = d[i].min()
        rowarg[i] = int(d[i].argmin())

        stale = active.copy()
        stale[i] = False
        stale &= (rowarg == i) | (rowarg == j)
        sidx = np.flatnonzero(stale)
        if len(sidx):
            rowmin[sidx] = d[sidx].min(axis=1)
            rowarg[sidx] = d[sidx].argmin(axis=1)
        fresh = active.copy()
        fresh[i] = False
        fresh[sidx] = False
        fidx = np.flatnonzero(fresh)
        if len(fidx):
            better = d[fidx, i] < rowmin[fidx]
            rowmin[fidx[better]] = d[fidx[better], i]
            rowarg[fidx[better]] = i

    return [groups[k] for k in np.flatnonzero(active)]


def cluster_landmarks(points2d, lambda_l: int, seed: int = 0) -> np.ndarray:
    """Partition ground-plane points into exactly ``lambda_l`` clusters.

    Returns an int64 label array over [1, lambda_l]; every label is
    non-empty. ``seed`` is accepted for interface stability; the procedure
    is deterministic given the input order alone.
    """
    pts = np.asarray(points2d, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points2d must have shape (n, 2)")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points2d must be finite")
    lambda_l = int(lambda_l)
    if lambda_l < 1:
        raise ValueError("lambda_l must be positive")
    n = len(pts)
    if n < lambda_l:
        raise TooFewPoints(f"{n} points cannot form {lambda_l} clusters")

    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    diagonal = float(np.linalg.norm(hi - lo))
    threshold = 0.01 * diagonal
    budget = max(_BASE_LEAF_BUDGET, 4 * lambda_l)

    xs = pts[:, 0]
    ys = pts[:, 1]
    sqs = xs * xs + ys * ys

    tree = _build_tree(xs, ys, sqs, threshold, budget)
    entries = tree.leaf_entries()

    # too coarse for the requested cluster count: retry at finer thresholds
    while len(entries) < lambda_l and threshold > _MIN_THRESHOLD:
        threshold *= 0.25
        tree = _build_tree(xs, ys, sqs, threshold, budget)
        entries = tree.leaf_entries()

    if len(entries) < lambda_l:
        # coincident points were absorbed at any threshold; peel singletons
        # off the largest summaries, lowest point index first
        entries = [[e[0], e[1], e[2], e[3], sorted(e[4])] for e in entries]
        while len(entries) < lambda_l:
            donor = max(range(len(entries)),
                        key=lambda k: (len(entries[k][4]), -min(entries[k][4])))
            if len(entries[donor][4]) < 2:
                raise TooFewPoints(
                    f"cannot form {lambda_l} non-empty clusters")
            idx = entries[donor][4].pop(0)
            x, y, sq = xs[idx], ys[idx], sqs[idx]
            entries[donor][0] -= 1.0
            entries[donor][1] -= x
            entries[donor][2] -= y
            entries[donor][3] -= sq
            entries.append([1.0, x, y, sq, [idx]])

    counts = np.array([e[0] for e in entries])
    cents = np.array([[e[1] / e[0], e[2] / e[0]] for e in entries])
    member_lists = [e[4] for e in entries]

    if len(entries) > lambda_l:
        clusters = _ward_merge(counts, cents, member_lists, lambda_l)
    else:
        clusters = member_lists

    clusters.sort(key=min)
    labels = np.zeros(n, dtype=np.int64)
    for label, group in enumerate(clusters, start=1):
        labels[group] = label
    return labels
