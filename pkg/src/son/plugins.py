"""Plugin manager: registration, permission grants and liveness tracking.

Plugins declare the topic patterns they want; the manager grants the subset
the operator policy allows, registers a broker client for them and watches
heartbeats.  Plugins can be added and removed at runtime.
"""

from __future__ import annotations

import logging
import threading
import time
import uuid
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import yaml

from son import wire
from son.broker.core import MessageBroker, Message, PermissionSet
from son.broker.topics import Pattern, parse_pattern, pattern_covers, patterns_intersect
from son.errors import PlatformError

log = logging.getLogger(__name__)


class PolicyViolation(PlatformError):
    def __init__(self, pattern: Pattern | str):
        super().__init__(f"pattern {pattern} is not permitted by operator policy")
        self.pattern = str(pattern)


class UnknownPlugin(PlatformError):
    pass


class PluginState(str, Enum):
    REGISTERED = "REGISTERED"
    RUNNING = "RUNNING"
    SUSPECT = "SUSPECT"
    DEREGISTERED = "DEREGISTERED"


@dataclass(frozen=True)
class PolicyRule:
    pattern: Pattern
    effect: str  # "allow" | "deny"


#: Default operator policy: the service, function and infrastructure trees are
#: open to plugins, the platform tree is reserved except for the plugin
#: registration plumbing and slice admission control.
DEFAULT_POLICY = (
    PolicyRule(parse_pattern("platform.management.plugin.#"), "allow"),
    PolicyRule(parse_pattern("platform.slicing.#"), "allow"),
    PolicyRule(parse_pattern("platform.#"), "deny"),
    PolicyRule(parse_pattern("service.#"), "allow"),
    PolicyRule(parse_pattern("function.#"), "allow"),
    PolicyRule(parse_pattern("infrastructure.#"), "allow"),
)


def load_policy(text: str) -> tuple[PolicyRule, ...]:
    """Parses the operator policy file: a YAML list of {pattern, effect}."""
    data = yaml.safe_load(text)
    if not isinstance(data, list):
        raise PlatformError("policy file must be a list of {pattern, effect}")
    rules = []
    for item in data:
        effect = str(item.get("effect", "")).lower()
        if effect not in ("allow", "deny"):
            raise PlatformError(f"bad policy effect {item.get('effect')!r}")
        rules.append(PolicyRule(parse_pattern(str(item["pattern"])), effect))
    return tuple(rules)


@dataclass(frozen=True)
class PluginManifest:
    name: str
    version: str = "0.1.0"
    wants_publish: tuple[str, ...] = ()
    wants_subscribe: tuple[str, ...] = ()
    executive: Optional[str] = None  # "PLACEMENT" | "SCALING" for executive plugins

    def __post_init__(self) -> None:
        if not self.name:
            raise PlatformError("plugin name must be non-empty")
        for pat in (*self.wants_publish, *self.wants_subscribe):
            parse_pattern(pat)


@dataclass
class PluginRecord:
    plugin_id: str
    manifest: PluginManifest
    granted: PermissionSet
    state: PluginState
    registered_at: float
    last_heartbeat: float


class PluginManager:
    """Controls which plugins exist and what they may say on the broker."""

    #: Missed-interval thresholds: silent > 3 intervals marks a plugin
    #: SUSPECT, silent > 6 deregisters it.
    SUSPECT_AFTER_INTERVALS = 3
    EVICT_AFTER_INTERVALS = 6

    def __init__(
        self,
        broker: MessageBroker,
        policy: tuple[PolicyRule, ...] = DEFAULT_POLICY,
        heartbeat_interval: float = 2.0,
        clock: Callable[[], float] = time.monotonic,
    ) -> None:
        self.broker = broker
        self.policy = policy
        self.heartbeat_interval = heartbeat_interval
        self.clock = clock
        self._lock = threading.RLock()
        self._records: dict[str, PluginRecord] = {}
        # The manager itself listens for heartbeat messages on the broker.
        self._client_id = "plugin-manager"
        broker.register_client(self._client_id, operator=True)
        broker.subscribe(self._client_id, wire.PLUGIN_HEARTBEAT, self._on_heartbeat)

    # -- registration -------------------------------------------------------

    def register(self, manifest: PluginManifest) -> tuple[str, PermissionSet]:
        granted_pub = self._grant(manifest.wants_publish)
        granted_sub = self._grant(manifest.wants_subscribe)
        granted = PermissionSet(publish_allow=granted_pub, subscribe_allow=granted_sub)
        with self._lock:
            plugin_id = f"{manifest.name}.{uuid.uuid4().hex[:8]}"
            now = self.clock()
            self._records[plugin_id] = PluginRecord(
                plugin_id=plugin_id,
                manifest=manifest,
                granted=granted,
                state=PluginState.REGISTERED,
                registered_at=now,
                last_heartbeat=now,
            )
        self.broker.register_client(plugin_id, granted)
        log.info("registered plugin %s", plugin_id)
        return plugin_id, granted

    def _grant(self, wanted: tuple[str, ...]) -> tuple[Pattern, ...]:
        """Grants the requested patterns the policy allows.

        An allow rule grants a request it fully covers; a deny rule that even
        intersects a request is an explicit blacklist and fails registration.
        Requests no rule decides are silently dropped (deny by default).
        """
        granted = []
        for text in wanted:
            requested = parse_pattern(text)
            for rule in self.policy:
                if rule.effect == "allow" and pattern_covers(rule.pattern, requested):
                    granted.append(requested)
                    break
                if rule.effect == "deny" and patterns_intersect(rule.pattern, requested):
                    raise PolicyViolation(requested)
        return tuple(granted)

    def reload_policy(self, policy: tuple[PolicyRule, ...]) -> None:
        with self._lock:
            self.policy = policy

    # -- liveness -------------------------------------------------------------

    def heartbeat(self, plugin_id: str) -> None:
        with self._lock:
            record = self._records.get(plugin_id)
            if record is None or record.state is PluginState.DEREGISTERED:
                raise UnknownPlugin(plugin_id)
            record.last_heartbeat = self.clock()
            if record.state in (PluginState.REGISTERED, PluginState.SUSPECT):
                record.state = PluginState.RUNNING

    def _on_heartbeat(self, message: Message) -> None:
        plugin_id = (message.payload or {}).get("plugin_id")
        try:
            self.heartbeat(plugin_id)
        except UnknownPlugin:
            log.warning("heartbeat from unknown plugin %r", plugin_id)

    def evict_stale(self, now: Optional[float] = None) -> list[str]:
        """Advances liveness states; returns ids deregistered this sweep."""
        now = self.clock() if now is None else now
        suspect_after = self.SUSPECT_AFTER_INTERVALS * self.heartbeat_interval
        evict_after = self.EVICT_AFTER_INTERVALS * self.heartbeat_interval
        evicted = []
        with self._lock:
            for record in self._records.values():
                if record.state is PluginState.DEREGISTERED:
                    continue
                silent = now - record.last_heartbeat
                if silent > evict_after:
                    record.state = PluginState.DEREGISTERED
                    evicted.append(record.plugin_id)
                elif silent > suspect_after:
                    if record.state in (PluginState.RUNNING, PluginState.REGISTERED):
                        record.state = PluginState.SUSPECT
        for plugin_id in evicted:
            self.broker.unregister_client(plugin_id)
            log.warning("evicted stale plugin %s", plugin_id)
        return evicted

    def deregister(self, plugin_id: str) -> None:
        """Idempotent removal: drops subscriptions and in-flight deliveries."""
        with self._lock:
            record = self._records.get(plugin_id)
            if record is None or record.state is PluginState.DEREGISTERED:
                return
            record.state = PluginState.DEREGISTERED
        self.broker.unregister_client(plugin_id)

    # -- introspection ---------------------------------------------------------

    def record(self, plugin_id: str) -> PluginRecord:
        with self._lock:
            record = self._records.get(plugin_id)
            if record is None:
                raise UnknownPlugin(plugin_id)
            return record

    def running_plugins(self) -> list[PluginRecord]:
        with self._lock:
            return [r for r in self._records.values() if r.state is not PluginState.DEREGISTERED]


class BasePlugin:
    """Convenience base for in-process MANO plugins.

    Subclasses define `manifest` and call :meth:`connect`; helpers wrap the
    broker client bound to the granted permissions.
    """

    manifest: PluginManifest

    def __init__(self) -> None:
        self.plugin_id: Optional[str] = None
        self.granted: Optional[PermissionSet] = None
        self._broker: Optional[MessageBroker] = None

    def connect(self, manager: PluginManager) -> str:
        self.plugin_id, self.granted = manager.register(self.manifest)
        self._broker = manager.broker
        self.send_heartbeat()
        self.on_connect()
        return self.plugin_id

    def on_connect(self) -> None:
        """Subclasses declare their subscriptions here."""

    def send_heartbeat(self) -> None:
        self.publish(wire.PLUGIN_HEARTBEAT, {"plugin_id": self.plugin_id})

    # broker helpers ------------------------------------------------------

    def subscribe(self, pattern: str, handler) -> str:
        return self._broker.subscribe(self.plugin_id, pattern, handler)

    def publish(self, topic: str, payload) -> None:
        self._broker.publish(self.plugin_id, topic, payload)

    def request(self, topic: str, payload, timeout: float = 10.0):
        return self._broker.request(self.plugin_id, topic, payload, timeout)

    def respond(self, message: Message, payload) -> bool:
        return self._broker.respond(self.plugin_id, message, payload)
