"""Emulated multi-PoP infrastructure adaptor.

Capacity accounting with atomic per-PoP admission, allocation lifecycle,
forwarding-chain bookkeeping and deterministic synthetic monitoring.  Function
instances are simulated resource allocations; no packets flow.
"""

from __future__ import annotations

import math
import random
import threading
import uuid
from dataclasses import dataclass, field
from typing import Callable, Optional

import yaml

from son import wire
from son.errors import PlatformError
from son.resources import Resources

USER_REFERENCE = "user"


class InfrastructureError(PlatformError):
    pass


class UnknownPoP(InfrastructureError):
    pass


class InsufficientCapacity(InfrastructureError):
    def __init__(self, pop_id: str, deficit: Resources):
        super().__init__(f"PoP {pop_id} lacks {deficit.to_dict()}")
        self.pop_id = pop_id
        self.deficit = deficit


class DanglingHop(InfrastructureError):
    def __init__(self, function_instance_id: str):
        super().__init__(f"chain hop references dead function instance {function_instance_id}")
        self.function_instance_id = function_instance_id


@dataclass
class PoP:
    """One point of presence: capacity totals, usage and latency map."""

    pop_id: str
    capacity: Resources
    used: Resources = field(default_factory=Resources)
    latency_ms: dict[str, float] = field(default_factory=dict)

    def free(self) -> Resources:
        return self.capacity - self.used

    def latency_to(self, target: str) -> float:
        if target == self.pop_id:
            return 0.0
        return float(self.latency_ms.get(target, math.inf))


@dataclass(frozen=True)
class Allocation:
    allocation_id: str
    pop_id: str
    resources: Resources
    owner: str
    created_at: float


@dataclass(frozen=True)
class ChainHopInstallation:
    pop_id: str
    function_instance_id: str
    connection_point: str


@dataclass(frozen=True)
class ChainInstallation:
    chain_id: str
    hops: tuple[ChainHopInstallation, ...]


@dataclass(frozen=True)
class WorkloadProfile:
    """Synthetic load shape: clamp(base + amplitude*sin(2*pi*t/period) + noise, 0, 1).

    Noise is drawn per tick from a generator keyed on (seed, instance, tick),
    so identical seeds reproduce identical streams.
    """

    metric: str = "cpu_load"
    base: float = 0.5
    amplitude: float = 0.0
    period_ticks: int = 1
    noise_seed: int = 0
    noise_amplitude: float = 0.0

    def value_at(self, tick: int, instance_key: str) -> float:
        value = self.base
        if self.amplitude and self.period_ticks > 0:
            value += self.amplitude * math.sin(2.0 * math.pi * tick / self.period_ticks)
        if self.noise_amplitude:
            rng = random.Random(f"{self.noise_seed}:{instance_key}:{tick}")
            value += rng.uniform(-self.noise_amplitude, self.noise_amplitude)
        return min(1.0, max(0.0, value))

    @classmethod
    def from_dict(cls, data: dict) -> "WorkloadProfile":
        return cls(
            metric=str(data.get("metric", "cpu_load")),
            base=float(data.get("base", 0.5)),
            amplitude=float(data.get("amplitude", 0.0)),
            period_ticks=int(data.get("period_ticks", 1)),
            noise_seed=int(data.get("noise_seed", 0)),
            noise_amplitude=float(data.get("noise_amplitude", 0.0)),
        )


@dataclass(frozen=True)
class InfrastructureSnapshot:
    """Immutable copy of the full utilization state."""

    pops: tuple[PoP, ...]
    allocations: tuple[Allocation, ...]
    chains: tuple[ChainInstallation, ...]

    def utilization(self) -> dict[str, dict]:
        """Per-PoP used vector: the canonical comparison projection."""
        return {p.pop_id: p.used.to_dict() for p in self.pops}


class EmulatedVim:
    """Virtual infrastructure manager over emulated PoPs.

    Admission is an atomic test-and-set under the owning PoP's lock, so
    concurrent allocations can never oversubscribe a PoP.
    """

    def __init__(self, pops: list[PoP], publish: Optional[Callable[[str, dict], None]] = None):
        self._pops: dict[str, PoP] = {}
        self._locks: dict[str, threading.Lock] = {}
        for pop in pops:
            if pop.pop_id in self._pops:
                raise InfrastructureError(f"duplicate PoP id {pop.pop_id}")
            pop.latency_ms.setdefault(pop.pop_id, 0.0)
            self._pops[pop.pop_id] = pop
            self._locks[pop.pop_id] = threading.Lock()
        _mirror_latencies(self._pops)
        self._allocations: dict[str, Allocation] = {}
        self._chains: dict[str, ChainInstallation] = {}
        self._profiles: dict[str, WorkloadProfile] = {}
        self._table_lock = threading.RLock()
        self._publish = publish
        self.tick_index = 0
        self.logical_time = 0.0

    # -- capacity ------------------------------------------------------------

    def pops(self) -> list[PoP]:
        return list(self._pops.values())

    def pop(self, pop_id: str) -> PoP:
        pop = self._pops.get(pop_id)
        if pop is None:
            raise UnknownPoP(pop_id)
        return pop

    def allocate(self, pop_id: str, resources: Resources, owner: str) -> Allocation:
        pop = self.pop(pop_id)
        if resources.any_negative() or resources.is_zero():
            raise InfrastructureError("allocation resources must be strictly positive")
        with self._locks[pop_id]:
            free = pop.free()
            if not resources.fits_within(free):
                raise InsufficientCapacity(pop_id, resources.deficit_against(free))
            pop.used = pop.used + resources
        allocation = Allocation(
            allocation_id=uuid.uuid4().hex,
            pop_id=pop_id,
            resources=resources,
            owner=owner,
            created_at=self.logical_time,
        )
        with self._table_lock:
            self._allocations[allocation.allocation_id] = allocation
        return allocation

    def release(self, allocation_id: str) -> None:
        """Idempotent: releasing an unknown or already-released id is a no-op."""
        with self._table_lock:
            allocation = self._allocations.pop(allocation_id, None)
        if allocation is None:
            return
        pop = self._pops[allocation.pop_id]
        with self._locks[allocation.pop_id]:
            pop.used = pop.used - allocation.resources

    def allocation(self, allocation_id: str) -> Optional[Allocation]:
        with self._table_lock:
            return self._allocations.get(allocation_id)

    # -- chains ----------------------------------------------------------------

    def install_chain(
        self, hops: list[ChainHopInstallation], live_check: Callable[[str], bool]
    ) -> ChainInstallation:
        for hop in hops:
            if not live_check(hop.function_instance_id):
                raise DanglingHop(hop.function_instance_id)
        chain = ChainInstallation(chain_id=uuid.uuid4().hex, hops=tuple(hops))
        with self._table_lock:
            self._chains[chain.chain_id] = chain
        return chain

    def uninstall_chain(self, chain_id: str) -> None:
        with self._table_lock:
            self._chains.pop(chain_id, None)

    # -- monitoring ----------------------------------------------------------

    def attach_profile(self, instance_id: str, profile: WorkloadProfile) -> None:
        with self._table_lock:
            self._profiles[instance_id] = profile

    def detach_profile(self, instance_id: str) -> None:
        with self._table_lock:
            self._profiles.pop(instance_id, None)

    def tick(self, dt: float = 1.0) -> list[tuple[str, str, float]]:
        """Advances the logical clock one tick and emits one metric sample per
        profiled instance.  Returns the (instance, metric, value) triples."""
        with self._table_lock:
            tick = self.tick_index
            self.tick_index += 1
            self.logical_time += dt
            timestamp = self.logical_time
            profiles = list(self._profiles.items())
        emitted = []
        for instance_id, profile in profiles:
            value = profile.value_at(tick, instance_id)
            emitted.append((instance_id, profile.metric, value))
            if self._publish is not None:
                self._publish(
                    wire.monitoring_topic(instance_id, profile.metric),
                    {"timestamp": timestamp, "value": value},
                )
        if self._publish is not None:
            self._publish(
                wire.CLOCK_TICK, {"tick": tick, "timestamp": timestamp, "dt": dt}
            )
        return emitted

    # -- snapshots --------------------------------------------------------------

    def snapshot(self) -> InfrastructureSnapshot:
        with self._table_lock:
            pops = tuple(
                PoP(
                    pop_id=p.pop_id,
                    capacity=p.capacity,
                    used=p.used,
                    latency_ms=dict(p.latency_ms),
                )
                for p in self._pops.values()
            )
            return InfrastructureSnapshot(
                pops=pops,
                allocations=tuple(self._allocations.values()),
                chains=tuple(self._chains.values()),
            )

    def total_free(self) -> Resources:
        total = Resources()
        for pop in self._pops.values():
            total = total + pop.free()
        return total

    def total_capacity(self) -> Resources:
        total = Resources()
        for pop in self._pops.values():
            total = total + pop.capacity
        return total


def _mirror_latencies(pops: dict[str, PoP]) -> None:
    for pop in pops.values():
        for target, value in list(pop.latency_ms.items()):
            if target in pops:
                other = pops[target]
                existing = other.latency_ms.get(pop.pop_id)
                if existing is None:
                    other.latency_ms[pop.pop_id] = value
                elif existing != value and target != pop.pop_id:
                    raise InfrastructureError(
                        f"asymmetric latency between {pop.pop_id} and {target}"
                    )


def load_topology(text: str) -> list[PoP]:
    """Parses the topology file: a YAML document with a `pops` list."""
    data = yaml.safe_load(text)
    if not isinstance(data, dict) or not isinstance(data.get("pops"), list):
        raise InfrastructureError("topology file must contain a 'pops' list")
    pops = []
    for item in data["pops"]:
        if not isinstance(item, dict) or "id" not in item:
            raise InfrastructureError("each PoP needs an 'id'")
        capacity = Resources.from_dict(item.get("capacity", {}))
        if capacity.any_negative() or capacity.is_zero():
            raise InfrastructureError(f"PoP {item['id']} has no capacity")
        latency = {
            str(k): float(v) for k, v in (item.get("latency_ms") or {}).items()
        }
        pops.append(PoP(pop_id=str(item["id"]), capacity=capacity, latency_ms=latency))
    return pops


def dump_topology(pops: list[PoP]) -> str:
    return yaml.safe_dump(
        {
            "pops": [
                {
                    "id": p.pop_id,
                    "capacity": p.capacity.to_dict(),
                    "latency_ms": {k: v for k, v in p.latency_ms.items() if k != p.pop_id},
                }
                for p in pops
            ]
        },
        sort_keys=False,
    )
