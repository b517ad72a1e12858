from __future__ import annotations

import random
import threading
import time

import pytest

from son.broker.core import (
    MessageBroker,
    PermissionDenied,
    PermissionSet,
    RequestTimeout,
    UnknownClient,
)


@pytest.fixture
def broker():
    b = MessageBroker()
    yield b
    b.close()


def open_permissions() -> PermissionSet:
    return PermissionSet.from_texts(["#"], ["#"])


class TestPublishSubscribe:
    def test_zero_subscribers_fanout_zero(self, broker):
        broker.register_client("a", open_permissions())
        receipt = broker.publish("a", "service.x", {"n": 1})
        assert receipt.fanout == 0

    def test_two_subscribers_fanout_two(self, broker):
        broker.register_client("a", open_permissions())
        for name in ("s1", "s2"):
            broker.register_client(name, open_permissions())
            broker.subscribe(name, "service.#")
        receipt = broker.publish("a", "service.instances.create", {})
        assert receipt.fanout == 2

    def test_delivery_to_inbox(self, broker):
        broker.register_client("a", open_permissions())
        broker.register_client("s", open_permissions())
        broker.subscribe("s", "service.#")
        broker.publish("a", "service.x", {"v": 42})
        broker.flush()
        inbox = broker._clients["s"].inbox
        assert len(inbox) == 1
        assert inbox[0].payload == {"v": 42}
        assert inbox[0].sender == "a"

    def test_payload_isolation(self, broker):
        broker.register_client("a", open_permissions())
        broker.register_client("s", open_permissions())
        broker.subscribe("s", "service.#")
        payload = {"mutable": [1]}
        broker.publish("a", "service.x", payload)
        payload["mutable"].append(2)
        broker.flush()
        assert broker._clients["s"].inbox[0].payload == {"mutable": [1]}

    def test_unknown_client(self, broker):
        with pytest.raises(UnknownClient):
            broker.publish("ghost", "service.x", {})
        with pytest.raises(UnknownClient):
            broker.subscribe("ghost", "service.#")

    def test_sequence_numbers_per_sender_topic(self, broker):
        broker.register_client("a", open_permissions())
        broker.register_client("s", open_permissions())
        broker.subscribe("s", "#")
        broker.publish("a", "service.x", {})
        broker.publish("a", "service.y", {})
        broker.publish("a", "service.x", {})
        broker.flush()
        got = [(m.topic, m.sequence_no) for m in broker._clients["s"].inbox]
        assert got == [("service.x", 1), ("service.y", 1), ("service.x", 2)]


class TestPermissions:
    def test_deny_by_default(self, broker):
        broker.register_client("locked", PermissionSet())
        with pytest.raises(PermissionDenied):
            broker.publish("locked", "service.x", {})
        with pytest.raises(PermissionDenied):
            broker.subscribe("locked", "service.#")

    def test_partial_grant(self, broker):
        broker.register_client(
            "p", PermissionSet.from_texts(publish=["service.#"], subscribe=["function.#"])
        )
        broker.publish("p", "service.x", {})
        with pytest.raises(PermissionDenied):
            broker.publish("p", "function.x", {})
        broker.subscribe("p", "function.monitoring.#")
        with pytest.raises(PermissionDenied):
            broker.subscribe("p", "service.#")

    def test_denied_publish_produces_no_delivery(self, broker):
        broker.register_client("s", open_permissions())
        broker.subscribe("s", "#")
        broker.register_client("denied", PermissionSet())
        with pytest.raises(PermissionDenied):
            broker.publish("denied", "service.x", {})
        broker.flush()
        assert broker._clients["s"].inbox == []

    def test_subscriber_only_receives_granted_topics(self, broker):
        broker.register_client("a", open_permissions())
        broker.register_client(
            "s", PermissionSet.from_texts(subscribe=["service.instances.#"])
        )
        broker.subscribe("s", "service.instances.#")
        broker.publish("a", "service.instances.create", {})
        broker.publish("a", "service.placement.request", {})
        broker.flush()
        topics = [m.topic for m in broker._clients["s"].inbox]
        assert topics == ["service.instances.create"]


class TestOrdering:
    def test_concurrent_publishers_fifo_per_sender_topic(self, broker):
        publishers = [f"pub-{i}" for i in range(4)]
        for p in publishers:
            broker.register_client(p, open_permissions())
        broker.register_client("sub", open_permissions())
        broker.subscribe("sub", "service.#")
        topics = ["service.t0", "service.t1"]

        def publish_many(client):
            rng = random.Random(client)
            for _ in range(50):
                broker.publish(client, rng.choice(topics), {})

        threads = [threading.Thread(target=publish_many, args=(p,)) for p in publishers]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        broker.flush()
        seen: dict[tuple[str, str], int] = {}
        for message in broker._clients["sub"].inbox:
            key = (message.sender, message.topic)
            assert message.sequence_no > seen.get(key, 0), "sequence went backwards"
            seen[key] = message.sequence_no


class TestRequestReply:
    def test_roundtrip(self, broker):
        broker.register_client("asker", open_permissions())
        broker.register_client("responder", open_permissions())

        def handler(message):
            broker.respond("responder", message, {"answer": message.payload["n"] * 2})

        broker.subscribe("responder", "service.math.double", handler)
        reply = broker.request("asker", "service.math.double", {"n": 21}, timeout=5)
        assert reply == {"answer": 42}

    def test_request_from_inside_handler(self, broker):
        """A client may call request() while handling a message without
        deadlocking its own dispatcher."""
        broker.register_client("front", open_permissions())
        broker.register_client("middle", open_permissions())
        broker.register_client("back", open_permissions())

        def back_handler(message):
            broker.respond("back", message, {"result": "done"})

        def middle_handler(message):
            inner = broker.request("middle", "service.back", {}, timeout=5)
            broker.respond("middle", message, inner)

        broker.subscribe("back", "service.back", back_handler)
        broker.subscribe("middle", "service.middle", middle_handler)
        assert broker.request("front", "service.middle", {}, timeout=5) == {"result": "done"}

    def test_timeout(self, broker):
        broker.register_client("asker", open_permissions())
        with pytest.raises(RequestTimeout):
            broker.request("asker", "service.void", {}, timeout=0.1)

    def test_late_reply_discarded(self, broker):
        broker.register_client("asker", open_permissions())
        broker.register_client("slow", open_permissions())
        captured = []
        broker.subscribe("slow", "service.slow", captured.append)
        with pytest.raises(RequestTimeout):
            broker.request("asker", "service.slow", {}, timeout=0.05)
        broker.flush()
        delivered = broker.respond("slow", captured[0], {"too": "late"})
        assert delivered is False
        assert broker.dropped_reply_count == 1


class TestReroute:
    def test_operator_only(self, broker):
        broker.register_client("plain", open_permissions())
        with pytest.raises(PermissionDenied):
            broker.add_reroute("plain", "service.placement.#", "service.placement.v2")

    def test_rewrite_applied(self, broker):
        broker.register_client("op", operator=True)
        broker.register_client("a", open_permissions())
        broker.register_client("s", open_permissions())
        broker.subscribe("s", "service.#")
        broker.add_reroute("op", "service.placement.#", "service.placement.v2")
        receipt = broker.publish("a", "service.placement.request", {})
        assert receipt.topic == "service.placement.v2.request"
        broker.flush()
        assert broker._clients["s"].inbox[0].topic == "service.placement.v2.request"

    def test_identity_without_rules(self, broker):
        broker.register_client("a", open_permissions())
        receipt = broker.publish("a", "service.placement.request", {})
        assert receipt.topic == "service.placement.request"

    def test_first_rule_wins_no_cascade(self, broker):
        broker.register_client("op", operator=True)
        broker.register_client("a", open_permissions())
        broker.add_reroute("op", "service.placement.#", "service.v2")
        broker.add_reroute("op", "service.placement.request", "service.v3")
        # second rule overlaps but the first registered one applies
        receipt = broker.publish("a", "service.placement.request", {})
        assert receipt.topic == "service.v2.request"
        # and the rewrite result is not re-matched against the rules
        broker.add_reroute("op", "service.v2.#", "service.v4")
        receipt = broker.publish("a", "service.placement.request", {})
        assert receipt.topic == "service.v2.request"

    def test_pattern_must_be_literal_prefix(self, broker):
        broker.register_client("op", operator=True)
        with pytest.raises(Exception):
            broker.add_reroute("op", "service.*.request", "service.v2")


class TestLifetime:
    def test_unregister_drops_subscriptions(self, broker):
        broker.register_client("a", open_permissions())
        broker.register_client("s", open_permissions())
        broker.subscribe("s", "service.#")
        broker.unregister_client("s")
        receipt = broker.publish("a", "service.x", {})
        assert receipt.fanout == 0

    def test_pending_request_times_out_after_responder_removed(self, broker):
        broker.register_client("asker", open_permissions())
        broker.register_client("gone", open_permissions())
        block = threading.Event()

        def never_responds(message):
            block.wait(1)

        broker.subscribe("gone", "service.q", never_responds)
        result = {}

        def ask():
            try:
                broker.request("asker", "service.q", {}, timeout=0.3)
            except RequestTimeout:
                result["timeout"] = True

        thread = threading.Thread(target=ask)
        thread.start()
        time.sleep(0.05)
        broker.unregister_client("gone")
        block.set()
        thread.join()
        assert result.get("timeout") is True

    def test_receipt_counters(self, broker):
        broker.register_client("a", open_permissions())
        before = broker.published_count
        broker.publish("a", "service.x", {})
        broker.publish("a", "service.y", {})
        assert broker.published_count == before + 2
