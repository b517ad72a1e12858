"""Hierarchical topic addresses and wildcard subscription patterns.

Topics are dot-joined segments (``service.instances.create``).  Patterns add
``*`` (exactly one segment) and a terminal ``#`` (any suffix, including the
empty one).  The four reserved top-level segments of the control plane are
``platform``, ``infrastructure``, ``service`` and ``function``.
"""

from __future__ import annotations

import re
import sys
from dataclasses import dataclass

from son.errors import PlatformError

SINGLE_WILDCARD = "*"
MULTI_WILDCARD = "#"

TOP_LEVELS = ("platform", "infrastructure", "service", "function")

_SEGMENT_RE = re.compile(r"[a-z0-9_-]+\Z")


class TopicError(PlatformError):
    """Malformed topic or pattern text."""


@dataclass(frozen=True)
class Topic:
    segments: tuple[str, ...]

    def __str__(self) -> str:
        return ".".join(self.segments)


@dataclass(frozen=True)
class Pattern:
    segments: tuple[str, ...]

    def __str__(self) -> str:
        return ".".join(self.segments)

    @property
    def is_exact(self) -> bool:
        """True when the pattern contains no wildcard (matches one topic only)."""
        return not any(s in (SINGLE_WILDCARD, MULTI_WILDCARD) for s in self.segments)


def parse_topic(text: str | Topic) -> Topic:
    if isinstance(text, Topic):
        return text
    segments = _split(text)
    for seg in segments:
        if not _SEGMENT_RE.match(seg):
            raise TopicError(f"invalid topic segment {seg!r} in {text!r}")
    return Topic(segments)


def parse_pattern(text: str | Pattern) -> Pattern:
    if isinstance(text, Pattern):
        return text
    segments = _split(text)
    for i, seg in enumerate(segments):
        if seg == MULTI_WILDCARD:
            if i != len(segments) - 1:
                raise TopicError(f"'#' only allowed as last segment: {text!r}")
        elif seg != SINGLE_WILDCARD and not _SEGMENT_RE.match(seg):
            raise TopicError(f"invalid pattern segment {seg!r} in {text!r}")
    return Pattern(segments)


def _split(text: str) -> tuple[str, ...]:
    if not isinstance(text, str) or not text:
        raise TopicError(f"empty topic/pattern: {text!r}")
    parts = text.split(".")
    if any(p == "" for p in parts):
        raise TopicError(f"empty segment in {text!r}")
    # Interning makes the identity fast path in the matcher kernels effective.
    return tuple(sys.intern(p) for p in parts)


def pattern_covers(granted: Pattern, requested: Pattern) -> bool:
    """True when every topic matched by `requested` is matched by `granted`.

    Conservative: may answer False for exotic but equivalent pattern pairs,
    never True when a topic could leak through.
    """
    return _covers(granted.segments, requested.segments)


def _covers(g: tuple[str, ...], r: tuple[str, ...]) -> bool:
    if g and g[0] == MULTI_WILDCARD:
        return True
    if not g:
        return not r
    if not r:
        return False
    if r[0] == MULTI_WILDCARD:
        # r matches arbitrarily long suffixes; only a '#' in g could cover.
        return False
    if g[0] == SINGLE_WILDCARD or g[0] == r[0]:
        return _covers(g[1:], r[1:])
    return False


def patterns_intersect(a: Pattern, b: Pattern) -> bool:
    """True when some topic is matched by both patterns."""
    return _intersects(a.segments, b.segments)


def _intersects(a: tuple[str, ...], b: tuple[str, ...]) -> bool:
    if not a:
        return not b or b == (MULTI_WILDCARD,)
    if not b:
        return not a or a == (MULTI_WILDCARD,)
    if a[0] == MULTI_WILDCARD or b[0] == MULTI_WILDCARD:
        return True
    if a[0] == SINGLE_WILDCARD or b[0] == SINGLE_WILDCARD or a[0] == b[0]:
        return _intersects(a[1:], b[1:])
    return False
