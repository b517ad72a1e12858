"""Pure Python topic-matching kernel (fallback for the C extension)."""

from __future__ import annotations


def match_segments(pattern: tuple[str, ...], topic: tuple[str, ...]) -> bool:
    """Unify a pattern against a topic, segment by segment.

    A literal matches itself, '*' matches exactly one segment and a terminal
    '#' matches any remaining suffix, including the empty one.
    """
    if pattern[-1] == "#":
        n = len(pattern) - 1
        if len(topic) < n:
            return False
    else:
        n = len(pattern)
        if len(topic) != n:
            return False
    for i in range(n):
        p = pattern[i]
        if p is not topic[i] and p != "*" and p != topic[i]:
            return False
    return True
