"""Pure-Python vote kernel, used when the compiled extension is unavailable."""

from collections import Counter
from itertools import chain


def count_votes(local_sets, threshold):
    """Return the frozenset of objects contained in at least ``threshold`` sets."""
    n = len(local_sets)
    if threshold > n:
        return frozenset()
    if threshold <= 1:
        return frozenset().union(*local_sets)
    if threshold == n:
        ordered = sorted(local_sets, key=len)
        return frozenset(ordered[0]).intersection(*ordered[1:])
    counts = Counter(chain.from_iterable(local_sets))
    return frozenset(o for o, v in counts.items() if v >= threshold)
