"""Static speculation trees, suffix masks, and the batch-keyed dispatcher.

A tree never stores the root: the root is the last committed token and
carries no draft token. Node i's parent is another node index or ROOT (-1).
Flattened order is breadth-first with children in expansion-priority order,
so parents always precede children and masks are lower-triangular.
"""

from dataclasses import dataclass, field

import numpy as np

ROOT = -1


class TreeError(ValueError):
    pass


@dataclass(frozen=True)
class TreeSpec:
    parent: tuple  # per-node parent index, ROOT for depth-1 nodes
    tag: str = ""
    depth: tuple = field(init=False)

    def __post_init__(self):
        depth = []
        for i, p in enumerate(self.parent):
            if p == ROOT:
                depth.append(1)
            elif 0 <= p < i:
                depth.append(depth[p] + 1)
            else:
                raise TreeError(f"node {i}: parent {p} must precede it or be ROOT")
        object.__setattr__(self, "depth", tuple(depth))

    @property
    def n_nodes(self):
        return len(self.parent)

    @property
    def max_depth(self):
        return max(self.depth) if self.parent else 0

    def children(self, i):
        """Child indices of node i (or of ROOT) in priority order."""
        return [j for j, p in enumerate(self.parent) if p == i]

    def ancestors_or_self(self, i):
        chain = []
        while i != ROOT:
            chain.append(i)
            i = self.parent[i]
        return chain[::-1]


EMPTY_TREE = TreeSpec((), tag="none")


def build_chain(length):
    if length < 1:
        raise TreeError("chain length must be >= 1")
    return TreeSpec(tuple(range(-1, length - 1)), tag=f"chain:{length}")


def build_full_tree(depth, branching, max_nodes=4096):
    """Complete n-ary tree of the given depth: sum of branching**d nodes."""
    if depth < 1 or branching < 1:
        raise TreeError("depth and branching must be >= 1")
    n = sum(branching**d for d in range(1, depth + 1))
    if n > max_nodes:
        raise TreeError(f"full tree would have {n} nodes (max {max_nodes})")
    parent = []
    prev_level = [ROOT]
    for _ in range(depth):
        level = []
        for p in prev_level:
            for _ in range(branching):
                level.append(len(parent))
                parent.append(p)
        prev_level = level
    return TreeSpec(tuple(parent), tag=f"full:{depth},{branching}")


def parse_tree(text):
    """Parse the tree config format: chain:L, full:D,BF, or nodes:[parents]."""
    text = text.strip()
    if text.startswith("chain:"):
        return build_chain(int(text[6:]))
    if text.startswith("full:"):
        d, bf = text[5:].split(",")
        return build_full_tree(int(d), int(bf))
    if text.startswith("nodes:"):
        body = text[6:].strip()
        if not (body.startswith("[") and body.endswith("]")):
            raise TreeError(f"bad nodes spec: {text!r}")
        parents = tuple(int(t) for t in body[1:-1].split(",") if t.strip())
        return TreeSpec(parents, tag=text)
    raise TreeError(f"unknown tree spec: {text!r}")


def suffix_mask(tree):
    """Ancestor-or-self closure as an (n, n) boolean matrix."""
    n = tree.n_nodes
    mask = np.zeros((n, n), dtype=bool)
    for i in range(n):
        p = tree.parent[i]
        if p != ROOT:
            mask[i] = mask[p]
        mask[i, i] = True
    return mask


def paths(tree):
    """Root-to-leaf node-index paths, ordered by child priority."""
    kids = {ROOT: []}
    for i in range(tree.n_nodes):
        kids.setdefault(i, [])
        kids[tree.parent[i]].append(i)
    out = []

    def walk(i, trail):
        if not kids[i]:
            out.append(trail)
            return
        for c in kids[i]:
            walk(c, trail + [c])

    for c in kids[ROOT]:
        walk(c, [c])
    return out


def subtree(tree, keep):
    """Reindexed tree over the kept node indices plus the old->new mapping.

    ``keep`` must be ancestor-closed; raises otherwise.
    """
    keep = sorted(keep)
    remap = {old: new for new, old in enumerate(keep)}
    parent = []
    for old in keep:
        p = tree.parent[old]
        if p == ROOT:
            parent.append(ROOT)
        elif p in remap:
            parent.append(remap[p])
        else:
            raise TreeError(f"kept node {old} lost its parent {p}")
    return TreeSpec(tuple(parent), tag=tree.tag), remap


@dataclass(frozen=True)
class DispatchTable:
    """Ordered (max_batch_size, TreeSpec) thresholds; the last entry is the catch-all."""

    entries: tuple  # of (int | None, TreeSpec)

    def __post_init__(self):
        if not self.entries:
            raise TreeError("dispatch table must be nonempty")
        prev = 0
        for i, (thr, _tree) in enumerate(self.entries):
            last = i == len(self.entries) - 1
            if thr is None:
                if not last:
                    raise TreeError("open threshold only allowed on the final entry")
                continue
            if thr <= prev:
                raise TreeError("thresholds must be strictly increasing")
            prev = thr


def dispatch(table, batch_size):
    """First entry whose threshold covers batch_size; the final entry always does."""
    if batch_size < 1:
        raise TreeError("batch_size must be >= 1")
    for thr, tree in table.entries:
        if thr is None or batch_size <= thr:
            return tree
    return table.entries[-1][1]
