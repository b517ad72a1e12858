# cython: language_level=3, boundscheck=False, wraparound=False
"""C topic-matching kernel: the hot path of every publish is one call per
registered subscription, so this loop is compiled.  Semantics are identical
to son.broker._matching_py.match_segments."""


def match_segments(tuple pattern, tuple topic):
    cdef Py_ssize_t plen = len(pattern)
    cdef Py_ssize_t tlen = len(topic)
    cdef Py_ssize_t n, i
    cdef object p, t

    if <str> pattern[plen - 1] == "#":
        n = plen - 1
        if tlen < n:
            return False
    else:
        n = plen
        if tlen != n:
            return False

    for i in range(n):
        p = pattern[i]
        t = topic[i]
        # Identity first: segments are interned at parse time.
        if p is t:
            continue
        if <str> p == "*":
            continue
        if <str> p != <str> t:
            return False
    return True
