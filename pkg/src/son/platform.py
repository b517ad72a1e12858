"""Assembles one service platform instance.

A platform is a broker, a plugin manager and the core MANO plugins (lifecycle
managers, executives, monitoring, slicing) around an emulated infrastructure,
fronted by a gatekeeper.  Platforms nest: a NESTED slice spawns a capacity-
bound child platform and registers it through the recursion interface, and
any platform can register remote children by endpoint address.
"""

from __future__ import annotations

import logging
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from son.broker.core import MessageBroker
from son.descriptors import Identity
from son.errors import PlatformError
from son.executive import (
    InstanceScalingView,
    PlacementExecutive,
    PopView,
    ScalingExecutive,
)
from son.gatekeeper import (
    Catalogue,
    ChildrenManager,
    Gatekeeper,
    Principal,
    PrincipalRegistry,
    Role,
)
from son.http import LocalEndpoint
from son.infrastructure import EmulatedVim, PoP
from son.lifecycle import (
    FunctionLifecycleManager,
    InstanceRepository,
    InstanceState,
    ServiceLifecycleManager,
)
from son.monitoring import MonitoringStore
from son.plugins import DEFAULT_POLICY, PluginManager, PolicyRule
from son.resources import Resources
from son.slicing import NestedSpawn, SliceManager

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PlatformConfig:
    step_timeout_s: float = 10.0
    heartbeat_interval_s: float = 2.0
    max_replicas: int = 5
    delegation_timeout_s: float = 30.0


class ServicePlatform:
    """One complete platform instance (and, recursively, its children)."""

    def __init__(
        self,
        pops: list[PoP],
        principals: Optional[list[Principal]] = None,
        config: PlatformConfig = PlatformConfig(),
        policy: tuple[PolicyRule, ...] = DEFAULT_POLICY,
        data_dir: Optional[Path] = None,
        platform_id: Optional[str] = None,
    ):
        self.platform_id = platform_id or f"platform-{uuid.uuid4().hex[:10]}"
        self.config = config
        self.operator_token = uuid.uuid4().hex
        self.developer_token = uuid.uuid4().hex
        base_principals = [
            Principal("operator", Role.OPERATOR, self.operator_token),
            Principal("developer", Role.DEVELOPER, self.developer_token),
        ]
        self.principals = PrincipalRegistry(base_principals + list(principals or []))

        self.broker = MessageBroker(name=self.platform_id)
        self.plugin_manager = PluginManager(
            self.broker, policy=policy, heartbeat_interval=config.heartbeat_interval_s
        )
        self.repo = InstanceRepository(data_dir)
        self.catalogue = Catalogue()
        self.children = ChildrenManager(
            self.platform_id, self.catalogue, deploy_timeout=config.delegation_timeout_s
        )

        # Infrastructure adaptor plugin; the VIM publishes its monitoring and
        # clock stream through the adaptor's broker client.
        self.flm = FunctionLifecycleManager(vim=None)
        self.flm.connect(self.plugin_manager)
        self.vim = EmulatedVim(pops, publish=self.flm.publish)
        self.flm.vim = self.vim

        self.monitoring = MonitoringStore()
        self.monitoring.connect(self.plugin_manager)

        self.placement = PlacementExecutive(
            local_view_provider=self._local_views,
            pseudo_view_provider=self.children.pseudo_views,
        )
        self.placement.connect(self.plugin_manager)

        self.scaling = ScalingExecutive(
            instances_provider=self._scaling_views,
            max_replicas=config.max_replicas,
            request_timeout=config.step_timeout_s * 3,
        )
        self.scaling.connect(self.plugin_manager)

        self.slices = SliceManager(
            platform_capacity=self.vim.total_capacity, spawn_nested=self._spawn_nested
        )
        self.slices.connect(self.plugin_manager)

        self.slm = ServiceLifecycleManager(
            repository=self.repo,
            resolve_service=self.catalogue.resolve_service,
            step_timeout=config.step_timeout_s,
            delegate_deploy=self.children.delegate,
            delegate_terminate=self.children.terminate_remote,
            nested_slice_target=self.slices.nested_pseudo_pop,
        )
        self.slm.connect(self.plugin_manager)

        self.gatekeeper = Gatekeeper(
            platform_id=self.platform_id,
            principals=self.principals,
            catalogue=self.catalogue,
            repository=self.repo,
            monitoring=self.monitoring,
            children=self.children,
            slice_manager=self.slices,
            local_free=self.vim.total_free,
            local_capacity=self.vim.total_capacity,
            onboard_placement=self.placement.onboard,
            onboard_scaling=self.scaling.onboard,
            request_timeout=max(30.0, config.step_timeout_s * 6),
        )
        self.gatekeeper.connect(self.plugin_manager)

        # Privileged client for operator actions on the broker (reroute rules).
        self.operator_client = f"operator.{uuid.uuid4().hex[:6]}"
        self.broker.register_client(self.operator_client, operator=True)

        self._nested: list[ServicePlatform] = []
        self._closed = False

    # -- views the executives need ------------------------------------------

    def _local_views(self) -> list[PopView]:
        views = []
        for pop in self.vim.pops():
            free = pop.free()
            views.append(
                PopView(
                    pop_id=pop.pop_id,
                    cpu_free=free.cpu_cores,
                    mem_free=free.memory_mb,
                    storage_free=free.storage_gb,
                    latency_ms=tuple(sorted(pop.latency_ms.items())),
                )
            )
        return views

    def _scaling_views(self) -> list[InstanceScalingView]:
        views = []
        for record in self.repo.all():
            if record.state is not InstanceState.RUNNING or record.remote is not None:
                continue
            functions: dict[str, list[str]] = {}
            for fir in record.function_instances:
                functions.setdefault(fir.vnf.name, []).append(fir.function_instance_id)
            views.append(
                InstanceScalingView(
                    instance_id=record.instance_id,
                    service_key=str(record.service),
                    vnf_replicas=record.replica_counts(),
                    function_instances=functions,
                )
            )
        return sorted(views, key=lambda v: v.instance_id)

    # -- nesting ----------------------------------------------------------------

    def _spawn_nested(self, slice_id: str, quota: Resources) -> NestedSpawn:
        """Spawns an in-process child platform bound to the slice quota and
        registers it as a pseudo-PoP through the recursion interface."""
        child_token = uuid.uuid4().hex
        child = ServicePlatform(
            pops=[PoP(pop_id=f"{slice_id}-pop", capacity=quota, latency_ms={"user": 0.0})],
            principals=[Principal(f"parent-{self.platform_id}", Role.PLATFORM, child_token)],
            config=self.config,
            platform_id=f"{self.platform_id}.{slice_id}",
        )
        self._nested.append(child)
        record = self.children.register(LocalEndpoint(child.gatekeeper), child_token)

        def live_instances() -> int:
            return sum(
                1
                for r in child.repo.all()
                if r.state not in (InstanceState.TERMINATED, InstanceState.ERROR)
            )

        def close() -> None:
            self.children.deregister(record.child_id)
            child.close()
            if child in self._nested:
                self._nested.remove(child)

        return NestedSpawn(
            child_id=record.child_id,
            pseudo_pop_id=ChildrenManager.PSEUDO_PREFIX + record.child_id,
            close=close,
            live_instances=live_instances,
        )

    # -- time and quiescence --------------------------------------------------------

    def tick(self, dt: float = 1.0) -> None:
        """Advances the emulated clock one tick: emits metrics and lets the
        scaling executive react."""
        self.vim.tick(dt)

    def drain(self, timeout: float = 30.0) -> bool:
        """Blocks until the broker and every lifecycle worker (including those
        of nested children) are quiescent."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            remaining = max(0.05, deadline - time.monotonic())
            settled = self.broker.flush(remaining) and self.slm.wait_idle(remaining)
            for child in list(self._nested):
                settled = child.drain(max(0.05, deadline - time.monotonic())) and settled
            if settled and self.broker.flush(0.05) and self.slm.wait_idle(0.05):
                return True
        return False

    def heartbeat_all(self) -> None:
        for plugin in (
            self.flm, self.monitoring, self.placement, self.scaling, self.slices,
            self.slm, self.gatekeeper,
        ):
            plugin.send_heartbeat()

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        for child in list(self._nested):
            child.close()
        self._nested.clear()
        self.broker.close()

    def __enter__(self) -> "ServicePlatform":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()

    # -- convenience for embedding and tests -----------------------------------------

    def local_endpoint(self) -> LocalEndpoint:
        return LocalEndpoint(self.gatekeeper)

    def find_instance(self, instance_id: str):
        return self.repo.get(instance_id)

    def utilization(self) -> dict[str, dict]:
        return self.vim.snapshot().utilization()

    def record_ledger(self) -> dict[str, Resources]:
        """Per-PoP resource usage derived purely from live instance records;
        must equal the infrastructure's own accounting at quiescence."""
        ledger: dict[str, Resources] = {p.pop_id: Resources() for p in self.vim.pops()}
        for record in self.repo.all():
            if record.state in (InstanceState.TERMINATED, InstanceState.ERROR):
                continue
            for fir in record.function_instances:
                allocation = self.vim.allocation(fir.allocation_id)
                if allocation is not None:
                    ledger[fir.pop_id] = ledger[fir.pop_id] + allocation.resources
        return ledger
