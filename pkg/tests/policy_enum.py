"""Bounded exhaustive enumeration of access-policy trees for gate tests.

"All policy trees of depth <= 3" is unbounded (arity and attribute reuse are
free), so the exhaustive family is pinned as: gates of arity 2 or 3, depth
up to 3, at most ``max_leaves`` leaves, children in canonical order, crossed
with every assignment of the attribute alphabet to the leaves.  That yields
a few thousand distinct trees over 4 attributes.
"""

from itertools import combinations_with_replacement, product

from abedash.abekit import Gate, Leaf


def _shapes(depth: int, max_leaves: int):
    """Tree shapes as nested tuples: "L" or (k, (child, ...)); leaf counts
    attached."""
    if depth == 1:
        return [("L", 1)]
    smaller = _shapes(depth - 1, max_leaves)
    out = list(smaller)
    for arity in (2, 3):
        for combo in combinations_with_replacement(smaller, arity):
            leaves = sum(c[1] for c in combo)
            if leaves > max_leaves:
                continue
            for k in range(1, arity + 1):
                out.append(((k, tuple(c[0] for c in combo)), leaves))
    # dedupe shapes that also appear at smaller depth
    seen = set()
    unique = []
    for shape, leaves in out:
        if shape not in seen:
            seen.add(shape)
            unique.append((shape, leaves))
    return unique


def _fill(shape, attrs_iter):
    if shape == "L":
        return Leaf(next(attrs_iter))
    k, children = shape
    return Gate(k, tuple(_fill(c, attrs_iter) for c in children))


def enumerate_policies(attributes, max_depth: int = 3, max_leaves: int = 4):
    """Yield every tree in the bounded family over ``attributes``."""
    for shape, leaves in _shapes(max_depth, max_leaves):
        for assignment in product(attributes, repeat=leaves):
            yield _fill(shape, iter(assignment))


def all_subsets(attributes):
    attrs = list(attributes)
    for mask in range(1 << len(attrs)):
        yield frozenset(a for i, a in enumerate(attrs) if mask >> i & 1)
