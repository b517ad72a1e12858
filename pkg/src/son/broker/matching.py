"""Selects the topic-matching kernel at import time.

Prefers the compiled extension; falls back to the pure Python implementation
when the extension is missing or SON_PURE_PYTHON is set in the environment.
"""

from __future__ import annotations

import os

from son.broker.topics import Pattern, Topic, parse_pattern, parse_topic

if os.environ.get("SON_PURE_PYTHON"):
    from son.broker._matching_py import match_segments

    BACKEND = "python"
else:
    try:
        from son.broker._matching_c import match_segments  # type: ignore[no-redef]

        BACKEND = "c"
    except ImportError:
        from son.broker._matching_py import match_segments  # type: ignore[no-redef]

        BACKEND = "python"


def topic_matches(pattern: Pattern | str, topic: Topic | str) -> bool:
    """True iff `topic` unifies with `pattern` under the wildcard rules."""
    return match_segments(parse_pattern(pattern).segments, parse_topic(topic).segments)
