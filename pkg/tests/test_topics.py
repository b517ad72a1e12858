from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from son.broker.matching import topic_matches
from son.broker.topics import (
    Pattern,
    Topic,
    TopicError,
    parse_pattern,
    parse_topic,
    pattern_covers,
    patterns_intersect,
)

from .oracles import enumerate_patterns, enumerate_topics, oracle_topic_matches


class TestParsing:
    def test_topic_segments(self):
        assert parse_topic("service.instances.create").segments == (
            "service",
            "instances",
            "create",
        )

    def test_invalid_topics(self):
        for bad in ("", "a..b", ".a", "a.", "Upper.case", "sp ace", "a.#"):
            with pytest.raises(TopicError):
                parse_topic(bad)

    def test_hash_only_terminal(self):
        with pytest.raises(TopicError):
            parse_pattern("service.#.create")
        assert parse_pattern("service.#").segments == ("service", "#")

    def test_render(self):
        assert str(parse_pattern("a.*.#")) == "a.*.#"


class TestMatching:
    def test_exact_match(self):
        topic = "platform.management.plugin.register"
        assert topic_matches(topic, topic)

    def test_generic_service_subscription(self):
        assert topic_matches("service.#", "service.instances.create")

    def test_single_wildcard(self):
        assert topic_matches("*.monitoring.*", "function.monitoring.cpu")
        assert not topic_matches("*.monitoring.*", "function.monitoring.cpu.raw")

    def test_hash_matches_empty_suffix(self):
        assert topic_matches("service.#", "service")

    def test_exact_pattern_special_case(self):
        # wildcard-free patterns match exactly one topic
        for pattern in enumerate_patterns("ab", 3):
            if any(s in ("*", "#") for s in pattern):
                continue
            for topic in enumerate_topics("ab", 3):
                assert topic_matches(Pattern(pattern), Topic(topic)) == (pattern == topic)

    def test_small_exhaustive_equivalence(self):
        patterns = enumerate_patterns("ab", 3)
        topics = enumerate_topics("ab", 3)
        for pattern in patterns:
            for topic in topics:
                assert topic_matches(Pattern(pattern), Topic(topic)) == oracle_topic_matches(
                    pattern, topic
                ), f"disagreement on {pattern} vs {topic}"

    @given(
        pattern=st.lists(st.sampled_from(["a", "b", "c", "*"]), min_size=1, max_size=5),
        use_hash=st.booleans(),
        topic=st.lists(st.sampled_from(["a", "b", "c"]), min_size=1, max_size=6),
    )
    @settings(max_examples=300)
    def test_property_equivalence(self, pattern, use_hash, topic):
        pattern = tuple(pattern) + (("#",) if use_hash else ())
        topic = tuple(topic)
        assert topic_matches(Pattern(pattern), Topic(topic)) == oracle_topic_matches(
            pattern, topic
        )


class TestCoverage:
    def test_identical_patterns_cover(self):
        p = parse_pattern("service.#")
        assert pattern_covers(p, p)

    def test_hash_covers_star(self):
        assert pattern_covers(parse_pattern("service.#"), parse_pattern("service.instances.*"))
        assert not pattern_covers(parse_pattern("service.instances.*"), parse_pattern("service.#"))

    def test_star_covers_literal(self):
        assert pattern_covers(parse_pattern("service.*"), parse_pattern("service.create"))
        assert not pattern_covers(parse_pattern("service.create"), parse_pattern("service.*"))

    @given(
        granted=st.lists(st.sampled_from(["a", "b", "*"]), min_size=1, max_size=4),
        g_hash=st.booleans(),
        requested=st.lists(st.sampled_from(["a", "b", "*"]), min_size=1, max_size=4),
        r_hash=st.booleans(),
    )
    @settings(max_examples=300)
    def test_coverage_soundness(self, granted, g_hash, requested, r_hash):
        """If covers says yes, no topic matched by `requested` escapes
        `granted` (exhaustive over a small topic universe)."""
        g = Pattern(tuple(granted) + (("#",) if g_hash else ()))
        r = Pattern(tuple(requested) + (("#",) if r_hash else ()))
        if not pattern_covers(g, r):
            return
        for topic in enumerate_topics("ab", 5):
            if oracle_topic_matches(r.segments, topic):
                assert oracle_topic_matches(g.segments, topic)

    def test_intersection_examples(self):
        assert patterns_intersect(parse_pattern("platform.#"), parse_pattern("platform.management.#"))
        assert patterns_intersect(parse_pattern("a.*"), parse_pattern("*.b"))
        assert not patterns_intersect(parse_pattern("a.b"), parse_pattern("a.c"))

    @given(
        a=st.lists(st.sampled_from(["a", "b", "*"]), min_size=1, max_size=4),
        a_hash=st.booleans(),
        b=st.lists(st.sampled_from(["a", "b", "*"]), min_size=1, max_size=4),
        b_hash=st.booleans(),
    )
    @settings(max_examples=300)
    def test_intersection_completeness(self, a, a_hash, b, b_hash):
        """If some topic matches both patterns, intersect must say yes."""
        pa = Pattern(tuple(a) + (("#",) if a_hash else ()))
        pb = Pattern(tuple(b) + (("#",) if b_hash else ()))
        witnessed = any(
            oracle_topic_matches(pa.segments, t) and oracle_topic_matches(pb.segments, t)
            for t in enumerate_topics("ab", 5)
        )
        if witnessed:
            assert patterns_intersect(pa, pb)
