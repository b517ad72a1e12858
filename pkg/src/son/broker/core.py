"""In-process asynchronous message broker.

The sole control-plane transport between platform plugins: hierarchical
topics, wildcard subscriptions, per-client permissions, per-(sender, topic)
in-order delivery, correlation-id request/reply and operator reroute rules.
"""

from __future__ import annotations

import json
import logging
import threading
import uuid
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from son.broker.matching import match_segments
from son.broker.topics import (
    MULTI_WILDCARD,
    SINGLE_WILDCARD,
    Pattern,
    Topic,
    parse_pattern,
    parse_topic,
    pattern_covers,
)
from son.errors import PlatformError

log = logging.getLogger(__name__)


class BrokerError(PlatformError):
    pass


class PermissionDenied(BrokerError):
    pass


class UnknownClient(BrokerError):
    pass


class RequestTimeout(BrokerError):
    pass


@dataclass(frozen=True)
class Message:
    """One delivered control-plane message."""

    topic: str
    payload: Any
    sender: str
    sequence_no: int
    correlation_id: Optional[str] = None
    reply_to: Optional[str] = None

    @property
    def topic_segments(self) -> tuple[str, ...]:
        return parse_topic(self.topic).segments


@dataclass(frozen=True)
class PermissionSet:
    """Publish/subscribe grants for one client.  Empty sets deny everything."""

    publish_allow: tuple[Pattern, ...] = ()
    subscribe_allow: tuple[Pattern, ...] = ()

    def allows_publish(self, topic: Topic) -> bool:
        return any(match_segments(p.segments, topic.segments) for p in self.publish_allow)

    def allows_subscribe(self, requested: Pattern) -> bool:
        return any(pattern_covers(g, requested) for g in self.subscribe_allow)

    @classmethod
    def from_texts(
        cls, publish: list[str] | tuple[str, ...] = (), subscribe: list[str] | tuple[str, ...] = ()
    ) -> "PermissionSet":
        return cls(
            publish_allow=tuple(parse_pattern(p) for p in publish),
            subscribe_allow=tuple(parse_pattern(p) for p in subscribe),
        )


@dataclass(frozen=True)
class Receipt:
    """Returned by publish: effective (possibly rewritten) topic and fan-out."""

    topic: str
    fanout: int
    sequence_no: int


@dataclass
class _Subscription:
    sub_id: str
    client_id: str
    pattern: Pattern
    handler: Optional[Callable[[Message], None]]


@dataclass
class _RerouteRule:
    rule_id: str
    pattern: Pattern
    rewrite_prefix: tuple[str, ...]
    # Number of literal segments the prefix replaces.
    strip: int


class _Waiter:
    __slots__ = ("event", "reply")

    def __init__(self) -> None:
        self.event = threading.Event()
        self.reply: Optional[Message] = None


class _Client:
    def __init__(self, client_id: str, permissions: PermissionSet, operator: bool) -> None:
        self.client_id = client_id
        self.permissions = permissions
        self.operator = operator
        self.queue: deque[tuple[_Subscription, Message]] = deque()
        self.inbox: list[Message] = []
        self.cv = threading.Condition()
        self.closed = False
        self.thread: Optional[threading.Thread] = None


class MessageBroker:
    """Topic-based publish/subscribe hub with permission enforcement.

    Each registered client gets a dedicated dispatcher thread consuming its
    queue, so per-subscriber delivery order is exactly enqueue order.  The
    broker lock makes sequence assignment and enqueueing atomic, which gives
    strictly increasing sequence numbers per (sender, topic) at every
    subscriber even under concurrent publishers.
    """

    def __init__(self, name: str = "broker") -> None:
        self.name = name
        self._lock = threading.RLock()
        self._clients: dict[str, _Client] = {}
        self._subscriptions: dict[str, _Subscription] = {}
        self._sequences: dict[tuple[str, str], int] = {}
        self._reroutes: list[_RerouteRule] = []
        self._waiters: dict[str, _Waiter] = {}
        self._pending = 0
        self._idle = threading.Condition()
        self.published_count = 0
        self.delivered_count = 0
        self.dropped_reply_count = 0

    # -- client lifecycle -------------------------------------------------

    def register_client(
        self, client_id: str, permissions: PermissionSet | None = None, operator: bool = False
    ) -> None:
        with self._lock:
            if client_id in self._clients:
                raise BrokerError(f"client {client_id!r} already registered")
            client = _Client(client_id, permissions or PermissionSet(), operator)
            self._clients[client_id] = client
        thread = threading.Thread(
            target=self._dispatch_loop, args=(client,), name=f"{self.name}:{client_id}", daemon=True
        )
        client.thread = thread
        thread.start()

    def set_permissions(self, client_id: str, permissions: PermissionSet) -> None:
        with self._lock:
            self._require_client(client_id).permissions = permissions

    def unregister_client(self, client_id: str) -> None:
        """Removes the client, its subscriptions and any queued deliveries."""
        with self._lock:
            client = self._clients.pop(client_id, None)
            if client is None:
                return
            for sub_id in [s for s, sub in self._subscriptions.items() if sub.client_id == client_id]:
                del self._subscriptions[sub_id]
        with client.cv:
            dropped = len(client.queue)
            client.queue.clear()
            client.closed = True
            client.cv.notify_all()
        if dropped:
            self._settle(dropped)

    def has_client(self, client_id: str) -> bool:
        with self._lock:
            return client_id in self._clients

    # -- subscribe / publish ----------------------------------------------

    def subscribe(
        self,
        client_id: str,
        pattern: str | Pattern,
        handler: Optional[Callable[[Message], None]] = None,
    ) -> str:
        pat = parse_pattern(pattern)
        with self._lock:
            client = self._require_client(client_id)
            if not client.operator and not client.permissions.allows_subscribe(pat):
                raise PermissionDenied(f"{client_id} may not subscribe to {pat}")
            sub_id = uuid.uuid4().hex
            self._subscriptions[sub_id] = _Subscription(sub_id, client_id, pat, handler)
            return sub_id

    def unsubscribe(self, sub_id: str) -> None:
        with self._lock:
            self._subscriptions.pop(sub_id, None)

    def publish(
        self,
        client_id: str,
        topic: str | Topic,
        payload: Any,
        correlation_id: Optional[str] = None,
        reply_to: Optional[str] = None,
    ) -> Receipt:
        top = parse_topic(topic)
        payload = _json_roundtrip(payload)
        with self._lock:
            client = self._require_client(client_id)
            if not client.operator and not client.permissions.allows_publish(top):
                raise PermissionDenied(f"{client_id} may not publish to {top}")
            effective = self._apply_reroute(top)
            key = (client_id, str(effective))
            seq = self._sequences.get(key, 0) + 1
            self._sequences[key] = seq
            message = Message(
                topic=str(effective),
                payload=payload,
                sender=client_id,
                sequence_no=seq,
                correlation_id=correlation_id,
                reply_to=reply_to,
            )
            self.published_count += 1
            fanout = self._enqueue(effective, message)
        return Receipt(topic=str(effective), fanout=fanout, sequence_no=seq)

    # -- request / reply ---------------------------------------------------

    def request(
        self, client_id: str, topic: str | Topic, payload: Any, timeout: float = 10.0
    ) -> Any:
        """Publishes a request and blocks for the first matching reply.

        Replies are routed directly to the waiter (never through subscription
        queues), so a client may issue requests from inside its own message
        handler without deadlocking its dispatcher.
        """
        top = parse_topic(topic)
        with self._lock:
            client = self._require_client(client_id)
            exact = Pattern(top.segments)
            if not client.operator and not client.permissions.allows_subscribe(exact):
                raise PermissionDenied(f"{client_id} may not receive replies on {top}")
        correlation_id = uuid.uuid4().hex
        waiter = _Waiter()
        with self._lock:
            self._waiters[correlation_id] = waiter
        try:
            self.publish(
                client_id, top, payload, correlation_id=correlation_id, reply_to=str(top)
            )
            if not waiter.event.wait(timeout):
                raise RequestTimeout(f"no reply on {top} within {timeout}s")
            assert waiter.reply is not None
            return waiter.reply.payload
        finally:
            with self._lock:
                self._waiters.pop(correlation_id, None)

    def respond(self, client_id: str, request: Message, payload: Any) -> bool:
        """Sends a reply for `request`.  Returns False when the waiter is gone
        (timed out replies are discarded)."""
        if request.reply_to is None or request.correlation_id is None:
            raise BrokerError("message is not a request")
        top = parse_topic(request.reply_to)
        payload = _json_roundtrip(payload)
        with self._lock:
            client = self._require_client(client_id)
            if not client.operator and not client.permissions.allows_publish(top):
                raise PermissionDenied(f"{client_id} may not publish to {top}")
            self.published_count += 1
            waiter = self._waiters.get(request.correlation_id)
            if waiter is None:
                self.dropped_reply_count += 1
                return False
            key = (client_id, str(top))
            seq = self._sequences.get(key, 0) + 1
            self._sequences[key] = seq
            waiter.reply = Message(
                topic=str(top),
                payload=payload,
                sender=client_id,
                sequence_no=seq,
                correlation_id=request.correlation_id,
            )
            waiter.event.set()
            return True

    # -- operator reroute ---------------------------------------------------

    def add_reroute(
        self, client_id: str, pattern: str | Pattern, rewrite_prefix: str
    ) -> str:
        """Operator-only topic rewrite: the literal prefix of `pattern` is
        replaced by `rewrite_prefix` on matching publishes.  At most one rule
        (the first registered) applies per message; rewrites never cascade.
        """
        with self._lock:
            client = self._require_client(client_id)
            if not client.operator:
                raise PermissionDenied("reroute rules are operator-only")
            pat = parse_pattern(pattern)
            literals = [s for s in pat.segments if s not in (SINGLE_WILDCARD, MULTI_WILDCARD)]
            if len(literals) != len(pat.segments) - (pat.segments[-1] == MULTI_WILDCARD):
                raise BrokerError("reroute pattern must be literal segments plus optional '#'")
            prefix = parse_topic(rewrite_prefix).segments
            rule = _RerouteRule(
                rule_id=uuid.uuid4().hex,
                pattern=pat,
                rewrite_prefix=prefix,
                strip=len(literals),
            )
            self._reroutes.append(rule)
            return rule.rule_id

    def remove_reroute(self, client_id: str, rule_id: str) -> None:
        with self._lock:
            client = self._require_client(client_id)
            if not client.operator:
                raise PermissionDenied("reroute rules are operator-only")
            self._reroutes = [r for r in self._reroutes if r.rule_id != rule_id]

    # -- draining / shutdown -------------------------------------------------

    def flush(self, timeout: float = 30.0) -> bool:
        """Blocks until every queue is empty and no handler is running."""
        with self._idle:
            return self._idle.wait_for(lambda: self._pending == 0, timeout)

    def close(self) -> None:
        with self._lock:
            clients = list(self._clients)
        for client_id in clients:
            self.unregister_client(client_id)

    # -- internals -------------------------------------------------------------

    def _require_client(self, client_id: str) -> _Client:
        client = self._clients.get(client_id)
        if client is None:
            raise UnknownClient(f"unknown client {client_id!r}")
        return client

    def _apply_reroute(self, topic: Topic) -> Topic:
        for rule in self._reroutes:
            if match_segments(rule.pattern.segments, topic.segments):
                return Topic(rule.rewrite_prefix + topic.segments[rule.strip :])
        return topic

    def _enqueue(self, topic: Topic, message: Message) -> int:
        fanout = 0
        for sub in self._subscriptions.values():
            if not match_segments(sub.pattern.segments, topic.segments):
                continue
            client = self._clients.get(sub.client_id)
            if client is None:
                continue
            with client.cv:
                client.queue.append((sub, message))
                client.cv.notify()
            with self._idle:
                self._pending += 1
            fanout += 1
        return fanout

    def _settle(self, count: int) -> None:
        with self._idle:
            self._pending -= count
            if self._pending == 0:
                self._idle.notify_all()

    def _dispatch_loop(self, client: _Client) -> None:
        while True:
            with client.cv:
                while not client.queue and not client.closed:
                    client.cv.wait()
                if client.closed:
                    return
                sub, message = client.queue.popleft()
            try:
                if sub.handler is not None:
                    sub.handler(message)
                else:
                    client.inbox.append(message)
                with self._lock:
                    self.delivered_count += 1
            except Exception:
                log.exception(
                    "handler error in %s for topic %s", client.client_id, message.topic
                )
            finally:
                self._settle(1)


def _json_roundtrip(payload: Any) -> Any:
    """Copies the payload through JSON: isolates subscribers from shared
    mutation and enforces the structured-document contract."""
    if payload is None:
        return None
    return json.loads(json.dumps(payload))
