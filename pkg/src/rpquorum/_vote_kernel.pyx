# cython: language_level=3
"""Compiled vote kernel.

Objects are decided the first time they are seen: membership is tested
only in the remaining sets, with early exit once the outcome is fixed, so
no per-object counters are allocated.
"""

from cpython.set cimport PySet_Add, PySet_Contains


def count_votes(local_sets, Py_ssize_t threshold):
    """Return the frozenset of objects contained in at least ``threshold`` sets."""
    cdef list sets = [s if isinstance(s, (set, frozenset)) else frozenset(s) for s in local_sets]
    cdef Py_ssize_t n = len(sets)
    cdef Py_ssize_t i, j, votes
    cdef set seen, accepted
    cdef object cur, o

    if threshold > n:
        return frozenset()
    if threshold <= 1:
        return frozenset().union(*sets)
    if threshold == n:
        sets.sort(key=len)
        return frozenset(sets[0]).intersection(*sets[1:])

    seen = set()
    accepted = set()
    for i in range(n - threshold + 1):
        cur = sets[i]
        for o in cur:
            if PySet_Contains(seen, o):
                continue
            PySet_Add(seen, o)
            # o is absent from sets[0:i], so only sets[i:] can vote for it
            votes = 1
            j = i + 1
            while j < n and votes < threshold and votes + (n - j) >= threshold:
                if PySet_Contains(sets[j], o):
                    votes += 1
                j += 1
            if votes >= threshold:
                PySet_Add(accepted, o)
    return frozenset(accepted)
