"""Independent reference implementations the tests check against.

These deliberately use different algorithms from the production code: the
matcher enumerates wildcard expansions, the placement oracle recomputes
remaining capacity from scratch at every step, and the ledger oracle replays
an operation log sequentially.
"""

from __future__ import annotations

import itertools
import math

from son.resources import Resources


def oracle_topic_matches(pattern: tuple[str, ...], topic: tuple[str, ...]) -> bool:
    """Brute force: expand '#' into every possible number of '*' segments and
    compare the resulting fixed-length patterns element-wise."""
    if "#" in pattern:
        i = pattern.index("#")
        if i != len(pattern) - 1:
            return False
        head = pattern[:i]
        for k in range(0, len(topic) - len(head) + 1):
            candidate = head + ("*",) * k
            if oracle_topic_matches(candidate, topic):
                return True
        return False
    if len(pattern) != len(topic):
        return False
    return all(p == "*" or p == t for p, t in zip(pattern, topic))


def enumerate_topics(alphabet: str, max_len: int) -> list[tuple[str, ...]]:
    out = []
    for length in range(1, max_len + 1):
        out.extend(itertools.product(alphabet, repeat=length))
    return out


def enumerate_patterns(alphabet: str, max_len: int) -> list[tuple[str, ...]]:
    """All valid patterns over alphabet + wildcards: '*' anywhere, '#' only
    terminal."""
    symbols = list(alphabet) + ["*"]
    out: list[tuple[str, ...]] = []
    for length in range(1, max_len + 1):
        for combo in itertools.product(symbols, repeat=length):
            out.append(combo)
        if length == 1:
            out.append(("#",))
        else:
            for combo in itertools.product(symbols, repeat=length - 1):
                out.append(combo + ("#",))
    return out


def oracle_first_fit(
    units: list[Resources], pops: list[tuple[str, Resources]]
) -> list[str] | None:
    """Sequential first-fit recomputing remaining capacity from scratch per
    step.  Returns None when some unit does not fit anywhere."""
    placed: list[tuple[str, Resources]] = []
    assignment: list[str] = []
    for unit in units:
        chosen = None
        for pop_id, capacity in sorted(pops, key=lambda p: p[0]):
            already = Resources()
            for target, resources in placed:
                if target == pop_id:
                    already = already + resources
            remaining = capacity - already
            if unit.fits_within(remaining):
                chosen = pop_id
                break
        if chosen is None:
            return None
        placed.append((chosen, unit))
        assignment.append(chosen)
    return assignment


def oracle_argmax_latency(pops: list[tuple[str, float]]) -> str:
    """The PoP at minimum latency; ties go to the lexicographically smallest
    id (mirrors the score tie-break for `score = -latency_ms`)."""
    best = None
    for pop_id, latency in sorted(pops, key=lambda p: p[0]):
        if best is None or -latency > best[1]:
            best = (pop_id, -latency)
    assert best is not None
    return best[0]


def sine_sample(base: float, amplitude: float, period: int, t: int) -> float:
    return min(1.0, max(0.0, base + amplitude * math.sin(2.0 * math.pi * t / period)))


def oracle_ledger(ops: list[tuple[str, str, Resources]]) -> dict[str, Resources]:
    """Replays an (op, pop, resources) log; op is 'alloc' or 'release'."""
    used: dict[str, Resources] = {}
    for op, pop_id, resources in ops:
        current = used.get(pop_id, Resources())
        used[pop_id] = current + resources if op == "alloc" else current - resources
    return used


def oracle_default_scaling(
    samples: list[tuple[float, float]],
    now: float,
    replicas: int,
    max_replicas: int,
    window_s: float = 60.0,
) -> int:
    """Offline evaluation of the default scaling thresholds: returns the next
    replica count (may equal the current one)."""
    recent = [v for t, v in samples if t > now - window_s]
    if not recent:
        return replicas
    average = sum(recent) / len(recent)
    if average > 0.8:
        return min(max_replicas, replicas + 1)
    if average < 0.2:
        return max(1, replicas - 1)
    return replicas
