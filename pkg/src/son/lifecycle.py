"""Service and function lifecycle management.

Instantiation, scaling and termination run as message-based sagas: every step
is a broker request with a compensating action, executed by a per-instance
worker so operations on one instance serialize while different instances
progress concurrently.  Instance records persist as an append-only log of
snapshots, one document per state transition.
"""

from __future__ import annotations

import json
import logging
import threading
import time
import uuid
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional

from son import wire
from son.broker.core import Message
from son.descriptors import (
    FunctionDescriptor,
    Identity,
    ServiceDescriptor,
    resolve_chain,
    validate_service,
)
from son.errors import PlatformError
from son.executive import PlacementUnit
from son.plugins import BasePlugin, PluginManifest
from son.resources import Resources

log = logging.getLogger(__name__)


class LifecycleError(PlatformError):
    pass


class UnknownService(LifecycleError):
    pass


class UnknownInstance(LifecycleError):
    pass


class InvalidTarget(LifecycleError):
    pass


class InvalidState(LifecycleError):
    pass


class ScaleFailed(LifecycleError):
    pass


class StepFailed(LifecycleError):
    """A saga step failed or timed out; compensations have run."""


class InstanceState(str, Enum):
    REQUESTED = "REQUESTED"
    VALIDATED = "VALIDATED"
    PLACED = "PLACED"
    DEPLOYING = "DEPLOYING"
    RUNNING = "RUNNING"
    SCALING = "SCALING"
    TERMINATING = "TERMINATING"
    TERMINATED = "TERMINATED"
    ERROR = "ERROR"


TERMINAL_STATES = (InstanceState.TERMINATED, InstanceState.ERROR)
STABLE_STATES = (InstanceState.RUNNING, InstanceState.TERMINATED, InstanceState.ERROR)

#: The legal transition edges of the instance state machine.
ALLOWED_TRANSITIONS: frozenset[tuple[InstanceState, InstanceState]] = frozenset(
    [
        (InstanceState.REQUESTED, InstanceState.VALIDATED),
        (InstanceState.VALIDATED, InstanceState.PLACED),
        (InstanceState.PLACED, InstanceState.DEPLOYING),
        (InstanceState.DEPLOYING, InstanceState.RUNNING),
        (InstanceState.RUNNING, InstanceState.SCALING),
        (InstanceState.SCALING, InstanceState.RUNNING),
        (InstanceState.RUNNING, InstanceState.TERMINATING),
        (InstanceState.TERMINATING, InstanceState.TERMINATED),
    ]
    + [
        (state, InstanceState.ERROR)
        for state in InstanceState
        if state not in TERMINAL_STATES
    ]
)


@dataclass
class FunctionInstanceRecord:
    function_instance_id: str
    vnf: Identity
    pop_id: str
    allocation_id: str
    replica_index: int

    def to_dict(self) -> dict:
        return {
            "function_instance_id": self.function_instance_id,
            "vnf": str(self.vnf),
            "pop_id": self.pop_id,
            "allocation_id": self.allocation_id,
            "replica_index": self.replica_index,
        }


@dataclass
class RemoteHandle:
    child_id: str
    remote_instance_id: str


@dataclass
class ServiceInstanceRecord:
    instance_id: str
    service: Identity
    package_id: str
    owner: str
    state: InstanceState = InstanceState.REQUESTED
    placement: dict[str, str] = field(default_factory=dict)  # vnf identity -> PoP id
    function_instances: list[FunctionInstanceRecord] = field(default_factory=list)
    slice_id: Optional[str] = None
    error_cause: Optional[str] = None
    remote: Optional[RemoteHandle] = None
    chain_id: Optional[str] = None
    pop_restriction: Optional[tuple[str, ...]] = None

    def replicas_of(self, vnf_name: str) -> list[FunctionInstanceRecord]:
        return sorted(
            (f for f in self.function_instances if f.vnf.name == vnf_name),
            key=lambda f: f.replica_index,
        )

    def replica_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for f in self.function_instances:
            counts[f.vnf.name] = counts.get(f.vnf.name, 0) + 1
        return counts

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "service": str(self.service),
            "package_id": self.package_id,
            "owner": self.owner,
            "state": self.state.value,
            "placement": dict(self.placement),
            "function_instances": [f.to_dict() for f in self.function_instances],
            "slice_id": self.slice_id,
            "error_cause": self.error_cause,
            "remote": (
                {"child_id": self.remote.child_id, "remote_instance_id": self.remote.remote_instance_id}
                if self.remote
                else None
            ),
            "chain_id": self.chain_id,
        }


class InstanceRepository:
    """Record store with an append-only snapshot log (one JSON document per
    transition) under ``<log_dir>/instances/``."""

    def __init__(self, log_dir: Optional[Path] = None):
        self._lock = threading.RLock()
        self._records: dict[str, ServiceInstanceRecord] = {}
        self._log_dir = None
        if log_dir is not None:
            self._log_dir = Path(log_dir) / "instances"
            self._log_dir.mkdir(parents=True, exist_ok=True)

    def add(self, record: ServiceInstanceRecord) -> None:
        with self._lock:
            self._records[record.instance_id] = record
        self.log_snapshot(record)

    def get(self, instance_id: str) -> ServiceInstanceRecord:
        with self._lock:
            record = self._records.get(instance_id)
        if record is None:
            raise UnknownInstance(instance_id)
        return record

    def all(self) -> list[ServiceInstanceRecord]:
        with self._lock:
            return list(self._records.values())

    def log_snapshot(self, record: ServiceInstanceRecord) -> None:
        if self._log_dir is None:
            return
        path = self._log_dir / f"{record.instance_id}.log"
        with self._lock:
            with path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")


@dataclass
class InstantiateOptions:
    slice_id: Optional[str] = None
    pop_restriction: Optional[tuple[str, ...]] = None


class ServiceLifecycleManager(BasePlugin):
    """Drives instantiate/scale/terminate sagas over the broker.

    Commands arrive as requests; the handler validates quickly, replies, and
    hands the saga to a worker thread.  A per-instance lock serializes all
    work touching one instance.
    """

    manifest = PluginManifest(
        name="service-lifecycle",
        wants_publish=("service.#", "function.#", "infrastructure.#", "platform.slicing.#"),
        wants_subscribe=("service.#", "function.#", "infrastructure.#", "platform.slicing.#"),
    )

    COMPENSATION_RETRIES = 3

    def __init__(
        self,
        repository: InstanceRepository,
        resolve_service: Callable[[str], tuple[ServiceDescriptor, dict[str, FunctionDescriptor]]],
        step_timeout: float = 10.0,
        delegate_deploy: Optional[Callable[[ServiceInstanceRecord, str], RemoteHandle]] = None,
        delegate_terminate: Optional[Callable[[ServiceInstanceRecord], None]] = None,
        nested_slice_target: Optional[Callable[[str], Optional[str]]] = None,
    ):
        super().__init__()
        self.repo = repository
        self.resolve_service = resolve_service
        self.step_timeout = step_timeout
        self.delegate_deploy = delegate_deploy
        self.delegate_terminate = delegate_terminate
        # Maps a slice id to the pseudo-PoP of its nested platform, if any.
        self.nested_slice_target = nested_slice_target or (lambda slice_id: None)
        self._locks: dict[str, threading.RLock] = {}
        self._locks_guard = threading.Lock()
        self._active = 0
        self._idle = threading.Condition()
        self._stable = threading.Condition()

    def on_connect(self) -> None:
        self.subscribe(wire.SERVICE_CREATE, self._on_create)
        self.subscribe(wire.SERVICE_TERMINATE, self._on_terminate)
        self.subscribe(wire.SERVICE_SCALE, self._on_scale)

    # -- public operations (also reachable via broker requests) -------------

    def instantiate(
        self, service_key: str, owner: str, package_id: str = "", options: InstantiateOptions | None = None
    ) -> str:
        options = options or InstantiateOptions()
        nsd, vnfds = self._resolve(service_key)
        record = ServiceInstanceRecord(
            instance_id=uuid.uuid4().hex,
            service=nsd.identity,
            package_id=package_id,
            owner=owner,
            slice_id=options.slice_id,
            pop_restriction=options.pop_restriction or nsd.placement_requirements,
        )
        self.repo.add(record)
        self._publish_event(record, "created")
        self._spawn(record.instance_id, self._run_instantiate, record, nsd, vnfds)
        return record.instance_id

    def terminate(self, instance_id: str, timeout: Optional[float] = None) -> None:
        record = self.repo.get(instance_id)
        self.wait_stable(instance_id, timeout or self.step_timeout * 4)
        with self._instance_lock(instance_id):
            self._run_terminate(record)

    def scale(self, instance_id: str, vnf_name: str, target: int, timeout: Optional[float] = None) -> None:
        record = self.repo.get(instance_id)
        if target < 1:
            raise InvalidTarget(f"target replica count must be ≥ 1, got {target}")
        self.wait_stable(instance_id, timeout or self.step_timeout * 4)
        with self._instance_lock(instance_id):
            self._run_scale(record, vnf_name, target)

    def wait_stable(self, instance_id: str, timeout: float = 30.0) -> InstanceState:
        """Blocks until the instance reaches RUNNING, TERMINATED or ERROR."""
        record = self.repo.get(instance_id)
        deadline = time.monotonic() + timeout
        with self._stable:
            while record.state not in STABLE_STATES:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise StepFailed(f"instance {instance_id} not stable within {timeout}s")
                self._stable.wait(remaining)
        return record.state

    def wait_idle(self, timeout: float = 30.0) -> bool:
        """Blocks until no saga worker is active."""
        with self._idle:
            return self._idle.wait_for(lambda: self._active == 0, timeout)

    # -- broker handlers ------------------------------------------------------

    def _on_create(self, message: Message) -> None:
        payload = message.payload or {}
        try:
            options = InstantiateOptions(
                slice_id=payload.get("options", {}).get("slice_id"),
                pop_restriction=(
                    tuple(payload["options"]["pop_restriction"])
                    if payload.get("options", {}).get("pop_restriction")
                    else None
                ),
            )
            instance_id = self.instantiate(
                service_key=payload.get("service", ""),
                owner=payload.get("owner", ""),
                package_id=payload.get("package_id", ""),
                options=options,
            )
            self.respond(message, {"ok": True, "instance_id": instance_id})
        except PlatformError as exc:
            self.respond(message, {"ok": False, "error": type(exc).__name__, "detail": str(exc)})

    def _on_terminate(self, message: Message) -> None:
        payload = message.payload or {}
        self._spawn_reply(message, self.terminate, payload.get("instance_id", ""))

    def _on_scale(self, message: Message) -> None:
        payload = message.payload or {}
        self._spawn_reply(
            message,
            self.scale,
            payload.get("instance_id", ""),
            payload.get("vnf", ""),
            int(payload.get("target", 0)),
        )

    def _spawn_reply(self, message: Message, fn, *args) -> None:
        def job() -> None:
            try:
                fn(*args)
                self.respond(message, {"ok": True})
            except PlatformError as exc:
                self.respond(
                    message, {"ok": False, "error": type(exc).__name__, "detail": str(exc)}
                )

        self._spawn_raw(job)

    # -- sagas ------------------------------------------------------------------

    def _run_instantiate(
        self,
        record: ServiceInstanceRecord,
        nsd: ServiceDescriptor,
        vnfds: dict[str, FunctionDescriptor],
    ) -> None:
        compensations: list[tuple[str, Callable[[], None]]] = []
        try:
            report = validate_service(nsd, vnfds.values())
            if not report.ok:
                raise StepFailed(
                    "validation failed: " + "; ".join(f.message for f in report.errors)
                )
            self._transition(record, InstanceState.VALIDATED)

            units = [
                PlacementUnit(ref.name, vnfds[ref.name].total_resources)
                for ref in nsd.function_refs
            ]
            total = Resources()
            for unit in units:
                total = total + unit.resources

            restriction = record.pop_restriction
            if record.slice_id is not None:
                self._slice_admit(record.slice_id, total)
                compensations.append(
                    ("slice-release", lambda: self._slice_release(record.slice_id, total))
                )
                nested = self.nested_slice_target(record.slice_id)
                if nested is not None:
                    restriction = (nested,)

            placement, delegated_to = self._request_placement(record, units, restriction)
            by_name = {ref.name: ref for ref in nsd.function_refs}
            record.placement = {
                str(by_name[unit.vnf_name]): pop for unit, pop in zip(units, placement)
            }
            self._transition(record, InstanceState.PLACED)
            self._transition(record, InstanceState.DEPLOYING)

            if delegated_to is not None:
                if self.delegate_deploy is None:
                    raise StepFailed("placement chose a child platform but delegation is not wired")
                remote = self.delegate_deploy(record, delegated_to)
                record.remote = remote
                compensations.append(("remote-terminate", lambda: self._remote_terminate(record)))
            else:
                for unit, pop_id in zip(units, placement):
                    fir = self._deploy_replica(record, by_name[unit.vnf_name], unit.resources, pop_id, 0)
                    compensations.append(
                        ("release-" + fir.function_instance_id,
                         self._release_compensation(record, fir))
                    )
                chain_id = self._install_chain(record, nsd, vnfds)
                if chain_id is not None:
                    record.chain_id = chain_id
                    compensations.append(("uninstall-chain", lambda: self._remove_chain(record)))

            self._transition(record, InstanceState.RUNNING)
        except Exception as exc:
            log.info("instantiate %s failed: %s", record.instance_id, exc)
            self._compensate(compensations)
            record.error_cause = str(exc)
            self._transition(record, InstanceState.ERROR)

    def _run_terminate(self, record: ServiceInstanceRecord) -> None:
        if record.state in (InstanceState.TERMINATED, InstanceState.ERROR):
            return
        if record.state is not InstanceState.RUNNING:
            raise InvalidState(f"cannot terminate instance in state {record.state.value}")
        self._transition(record, InstanceState.TERMINATING)
        try:
            if record.remote is not None:
                self._remote_terminate(record)
            else:
                self._remove_chain(record)
                released = Resources()
                for fir in list(record.function_instances):
                    self._release_replica(record, fir)
                    released = released + self._vnf_resources(record, fir)
                if record.slice_id is not None and not released.is_zero():
                    self._slice_release(record.slice_id, released)
            self._transition(record, InstanceState.TERMINATED)
        except Exception as exc:
            record.error_cause = str(exc)
            self._transition(record, InstanceState.ERROR)

    def _run_scale(self, record: ServiceInstanceRecord, vnf_name: str, target: int) -> None:
        if record.state is not InstanceState.RUNNING:
            raise InvalidState(f"cannot scale instance in state {record.state.value}")
        if record.remote is not None:
            raise InvalidState("delegated instances are scaled by the child platform")
        nsd, vnfds = self._resolve(str(record.service))
        if vnf_name not in vnfds:
            raise InvalidTarget(f"service has no function named {vnf_name!r}")
        current = record.replicas_of(vnf_name)
        if target == len(current):
            return
        vnfd = vnfds[vnf_name]
        per_replica = vnfd.total_resources
        self._transition(record, InstanceState.SCALING)
        try:
            if target > len(current):
                delta = target - len(current)
                added: list[FunctionInstanceRecord] = []
                admitted = False
                try:
                    if record.slice_id is not None:
                        self._slice_admit(record.slice_id, per_replica * delta)
                        admitted = True
                    units = [PlacementUnit(vnf_name, per_replica) for _ in range(delta)]
                    placement, delegated_to = self._request_placement(
                        record, units, record.pop_restriction
                    )
                    if delegated_to is not None:
                        raise StepFailed("scale-out cannot delegate to a child platform")
                    next_index = len(current)
                    for offset, pop_id in enumerate(placement):
                        added.append(
                            self._deploy_replica(
                                record, vnfd.identity, per_replica, pop_id, next_index + offset
                            )
                        )
                except Exception as exc:
                    for fir in reversed(added):
                        self._with_retries(self._release_compensation(record, fir))
                    if admitted:
                        self._with_retries(
                            lambda: self._slice_release(record.slice_id, per_replica * delta)
                        )
                    raise ScaleFailed(str(exc)) from exc
            else:
                for fir in reversed(current[target:]):
                    self._release_replica(record, fir)
                if record.slice_id is not None:
                    self._slice_release(record.slice_id, per_replica * (len(current) - target))
        finally:
            self._transition(record, InstanceState.RUNNING)

    # -- saga steps ---------------------------------------------------------------

    def _request_placement(
        self,
        record: ServiceInstanceRecord,
        units: list[PlacementUnit],
        restriction: Optional[tuple[str, ...]],
    ) -> tuple[list[str], Optional[str]]:
        reply = self.request(
            wire.PLACEMENT_REQUEST,
            {
                "service": str(record.service),
                "service_uid": record.instance_id,
                "units": [
                    {"vnf": u.vnf_name, "resources": u.resources.to_dict()} for u in units
                ],
                "restriction": list(restriction) if restriction else None,
            },
            timeout=self.step_timeout,
        )
        if not reply.get("ok"):
            raise StepFailed(f"placement failed: {reply.get('detail', reply.get('error'))}")
        return list(reply["placement"]), reply.get("delegated_to")

    def _deploy_replica(
        self,
        record: ServiceInstanceRecord,
        vnf: Identity,
        resources: Resources,
        pop_id: str,
        replica_index: int,
    ) -> FunctionInstanceRecord:
        function_instance_id = uuid.uuid4().hex
        reply = self.request(
            wire.FUNCTION_DEPLOY,
            {
                "pop_id": pop_id,
                "vnf": str(vnf),
                "resources": resources.to_dict(),
                "instance_id": record.instance_id,
                "function_instance_id": function_instance_id,
            },
            timeout=self.step_timeout,
        )
        if not reply.get("ok"):
            raise StepFailed(f"deploy failed on {pop_id}: {reply.get('detail', reply.get('error'))}")
        fir = FunctionInstanceRecord(
            function_instance_id=function_instance_id,
            vnf=vnf,
            pop_id=pop_id,
            allocation_id=reply["allocation_id"],
            replica_index=replica_index,
        )
        record.function_instances.append(fir)
        self.repo.log_snapshot(record)
        return fir

    def _release_replica(self, record: ServiceInstanceRecord, fir: FunctionInstanceRecord) -> None:
        reply = self.request(
            wire.FUNCTION_RELEASE, {"allocation_id": fir.allocation_id}, timeout=self.step_timeout
        )
        if not reply.get("ok"):
            raise StepFailed(f"release failed: {reply.get('detail', reply.get('error'))}")
        if fir in record.function_instances:
            record.function_instances.remove(fir)
        self.repo.log_snapshot(record)

    def _release_compensation(
        self, record: ServiceInstanceRecord, fir: FunctionInstanceRecord
    ) -> Callable[[], None]:
        return lambda: self._release_replica(record, fir)

    def _install_chain(
        self,
        record: ServiceInstanceRecord,
        nsd: ServiceDescriptor,
        vnfds: dict[str, FunctionDescriptor],
    ) -> Optional[str]:
        hops = []
        primaries = {f.vnf.name: f for f in record.function_instances if f.replica_index == 0}
        for hop in resolve_chain(nsd, vnfds.values()):
            if hop.is_service_boundary:
                continue
            fir = primaries[hop.vnf.name]
            hops.append(
                {
                    "pop_id": fir.pop_id,
                    "function_instance_id": fir.function_instance_id,
                    "connection_point": hop.cp,
                    "allocation_id": fir.allocation_id,
                }
            )
        if not hops:
            return None
        reply = self.request(wire.CHAIN_INSTALL, {"hops": hops}, timeout=self.step_timeout)
        if not reply.get("ok"):
            raise StepFailed(f"chain install failed: {reply.get('detail', reply.get('error'))}")
        return reply["chain_id"]

    def _remove_chain(self, record: ServiceInstanceRecord) -> None:
        if record.chain_id is None:
            return
        reply = self.request(
            wire.CHAIN_REMOVE, {"chain_id": record.chain_id}, timeout=self.step_timeout
        )
        if reply.get("ok"):
            record.chain_id = None

    def _slice_admit(self, slice_id: str, resources: Resources) -> None:
        reply = self.request(
            wire.SLICE_ADMIT,
            {"slice_id": slice_id, "resources": resources.to_dict()},
            timeout=self.step_timeout,
        )
        if not reply.get("ok"):
            raise StepFailed(f"slice admission error: {reply.get('detail', reply.get('error'))}")
        if not reply.get("admitted"):
            raise StepFailed(f"slice {slice_id} rejected the request: {reply.get('detail', '')}")

    def _slice_release(self, slice_id: str, resources: Resources) -> None:
        self.request(
            wire.SLICE_RELEASE,
            {"slice_id": slice_id, "resources": resources.to_dict()},
            timeout=self.step_timeout,
        )

    def _remote_terminate(self, record: ServiceInstanceRecord) -> None:
        if self.delegate_terminate is not None:
            self.delegate_terminate(record)

    def _vnf_resources(self, record: ServiceInstanceRecord, fir: FunctionInstanceRecord) -> Resources:
        _, vnfds = self._resolve(str(record.service))
        vnfd = vnfds.get(fir.vnf.name)
        return vnfd.total_resources if vnfd else Resources()

    # -- plumbing -----------------------------------------------------------------

    def _resolve(
        self, service_key: str
    ) -> tuple[ServiceDescriptor, dict[str, FunctionDescriptor]]:
        try:
            return self.resolve_service(service_key)
        except KeyError as exc:
            raise UnknownService(service_key) from exc

    def _compensate(self, compensations: list[tuple[str, Callable[[], None]]]) -> None:
        for name, fn in reversed(compensations):
            self._with_retries(fn, name)

    def _with_retries(self, fn: Callable[[], None], name: str = "compensation") -> None:
        for attempt in range(1, self.COMPENSATION_RETRIES + 1):
            try:
                fn()
                return
            except Exception as exc:
                log.warning("%s attempt %d failed: %s", name, attempt, exc)
        log.error("%s abandoned after %d attempts", name, self.COMPENSATION_RETRIES)

    def _transition(self, record: ServiceInstanceRecord, state: InstanceState) -> None:
        if (record.state, state) not in ALLOWED_TRANSITIONS:
            raise LifecycleError(f"illegal transition {record.state.value} -> {state.value}")
        record.state = state
        self.repo.log_snapshot(record)
        self._publish_event(record, state.value)
        with self._stable:
            self._stable.notify_all()

    def _publish_event(self, record: ServiceInstanceRecord, event: str) -> None:
        self.publish(
            wire.SERVICE_EVENTS,
            {
                "instance_id": record.instance_id,
                "service": str(record.service),
                "state": record.state.value,
                "event": event,
                "error_cause": record.error_cause,
            },
        )

    def _instance_lock(self, instance_id: str) -> threading.RLock:
        with self._locks_guard:
            lock = self._locks.get(instance_id)
            if lock is None:
                lock = threading.RLock()
                self._locks[instance_id] = lock
            return lock

    def _spawn(self, instance_id: str, fn, *args) -> None:
        lock = self._instance_lock(instance_id)

        def job() -> None:
            with lock:
                fn(*args)

        self._spawn_raw(job)

    def _spawn_raw(self, job: Callable[[], None]) -> None:
        with self._idle:
            self._active += 1

        def run() -> None:
            try:
                job()
            except Exception:
                log.exception("lifecycle worker crashed")
            finally:
                with self._idle:
                    self._active -= 1
                    if self._active == 0:
                        self._idle.notify_all()

        threading.Thread(target=run, daemon=True).start()


class FunctionLifecycleManager(BasePlugin):
    """Infrastructure adaptor plugin: executes per-function deploy/release and
    chain install/remove against the emulated VIM."""

    manifest = PluginManifest(
        name="function-lifecycle",
        wants_publish=("function.#", "infrastructure.#"),
        wants_subscribe=("function.#", "infrastructure.#"),
    )

    def __init__(self, vim) -> None:
        super().__init__()
        self.vim = vim
        self._fault: Optional[Callable[[str], bool]] = None

    def on_connect(self) -> None:
        self.subscribe(wire.FUNCTION_DEPLOY, self._on_deploy)
        self.subscribe(wire.FUNCTION_RELEASE, self._on_release)
        self.subscribe(wire.CHAIN_INSTALL, self._on_chain_install)
        self.subscribe(wire.CHAIN_REMOVE, self._on_chain_remove)

    def set_fault_injector(self, fault: Optional[Callable[[str], bool]]) -> None:
        """Test hook: `fault(op)` returning True fails that operation."""
        self._fault = fault

    def _on_deploy(self, message: Message) -> None:
        payload = message.payload or {}
        try:
            if self._fault is not None and self._fault("deploy"):
                raise StepFailed("injected deploy fault")
            allocation = self.vim.allocate(
                payload["pop_id"],
                Resources.from_dict(payload["resources"]),
                owner=payload.get("instance_id", ""),
            )
            self.respond(message, {"ok": True, "allocation_id": allocation.allocation_id})
        except (PlatformError, KeyError) as exc:
            self.respond(message, {"ok": False, "error": type(exc).__name__, "detail": str(exc)})

    def _on_release(self, message: Message) -> None:
        payload = message.payload or {}
        self.vim.release(payload.get("allocation_id", ""))
        self.respond(message, {"ok": True})

    def _on_chain_install(self, message: Message) -> None:
        from son.infrastructure import ChainHopInstallation

        payload = message.payload or {}
        try:
            if self._fault is not None and self._fault("chain"):
                raise StepFailed("injected chain fault")
            hops = [
                ChainHopInstallation(
                    pop_id=h["pop_id"],
                    function_instance_id=h["function_instance_id"],
                    connection_point=h["connection_point"],
                )
                for h in payload.get("hops", [])
            ]
            allocation_ids = {
                h["function_instance_id"]: h.get("allocation_id", "")
                for h in payload.get("hops", [])
            }
            chain = self.vim.install_chain(
                hops,
                live_check=lambda fid: self.vim.allocation(allocation_ids.get(fid, "")) is not None,
            )
            self.respond(message, {"ok": True, "chain_id": chain.chain_id})
        except (PlatformError, KeyError) as exc:
            self.respond(message, {"ok": False, "error": type(exc).__name__, "detail": str(exc)})

    def _on_chain_remove(self, message: Message) -> None:
        payload = message.payload or {}
        self.vim.uninstall_chain(payload.get("chain_id", ""))
        self.respond(message, {"ok": True})
