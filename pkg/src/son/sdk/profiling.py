"""Desk-scale profiling: deploy a workspace service on an embedded platform,
drive it with a synthetic workload and report metric statistics, the replica
timeline and every strategy rule firing.

One profiling tick is one metric collection cycle; the logical seconds it
advances equal the profiled metric's declared collection interval, so window
averages in scaling rules see the cadence the descriptor promises.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from son.descriptors import FunctionDescriptor, parse_descriptor
from son.errors import PlatformError
from son.infrastructure import PoP, WorkloadProfile
from son.lifecycle import InstanceState
from son.packaging import PackageMode, build_package, package_id
from son.platform import PlatformConfig, ServicePlatform
from son.resources import Resources
from son.sdk.workspace import Workspace


class ProfilingError(PlatformError):
    pass


@dataclass(frozen=True)
class MetricStats:
    samples: int
    minimum: float
    maximum: float
    mean: float
    p95: float


@dataclass
class ProfilingReport:
    duration_ticks: int
    metric_stats: dict[str, MetricStats] = field(default_factory=dict)
    replica_timeline: list[tuple[int, int]] = field(default_factory=list)
    firings: list[dict] = field(default_factory=list)
    final_state: str = ""
    wall_seconds: float = 0.0

    def deterministic_dict(self) -> dict:
        """Everything except wall-clock time: the reproducible projection."""
        return {
            "duration_ticks": self.duration_ticks,
            "metric_stats": {
                name: {
                    "samples": s.samples,
                    "min": s.minimum,
                    "max": s.maximum,
                    "mean": s.mean,
                    "p95": s.p95,
                }
                for name, s in sorted(self.metric_stats.items())
            },
            "replica_timeline": [list(entry) for entry in self.replica_timeline],
            "firings": self.firings,
            "final_state": self.final_state,
        }

    def to_dict(self) -> dict:
        doc = self.deterministic_dict()
        doc["wall_seconds"] = self.wall_seconds
        return doc


def nearest_rank_p95(values: list[float]) -> float:
    ordered = sorted(values)
    rank = math.ceil(0.95 * len(ordered))
    return ordered[max(0, rank - 1)]


def _stats(values: list[float]) -> MetricStats:
    return MetricStats(
        samples=len(values),
        minimum=min(values),
        maximum=max(values),
        mean=sum(values) / len(values),
        p95=nearest_rank_p95(values),
    )


DEFAULT_PROFILE_TOPOLOGY = [
    PoP(
        pop_id="profile-a",
        capacity=Resources(cpu_cores=16, memory_mb=16384, storage_gb=200),
        latency_ms={"user": 5.0, "profile-b": 2.0},
    ),
    PoP(
        pop_id="profile-b",
        capacity=Resources(cpu_cores=16, memory_mb=16384, storage_gb=200),
        latency_ms={"user": 10.0},
    ),
]


def load_profile(path: Path | str) -> WorkloadProfile:
    data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise ProfilingError("profile file must be a mapping")
    return WorkloadProfile.from_dict(data)


def run_profile(
    workspace: Workspace,
    profile: WorkloadProfile,
    duration_ticks: int,
    topology: Optional[list[PoP]] = None,
) -> ProfilingReport:
    """Runs the profiling loop against an embedded in-process platform."""
    if duration_ticks <= 0:
        raise ProfilingError("profiling duration must be at least one tick")

    dt = _collection_interval(workspace, profile.metric)
    archive = build_package(workspace.root, PackageMode.FAT)

    started = time.monotonic()
    with ServicePlatform(
        pops=list(topology or DEFAULT_PROFILE_TOPOLOGY),
        config=PlatformConfig(step_timeout_s=10.0),
    ) as platform:
        from son.sdk.client import PlatformClient

        client = PlatformClient(platform.local_endpoint(), platform.developer_token)
        upload = client.upload_package(archive)
        instance_id = client.instantiate(upload["package_id"])
        platform.drain()
        record = platform.find_instance(instance_id)
        if record.state is not InstanceState.RUNNING:
            raise ProfilingError(
                f"service did not reach RUNNING: {record.error_cause or record.state.value}"
            )

        report = ProfilingReport(duration_ticks=duration_ticks)
        profiled: set[str] = set()
        for tick in range(duration_ticks):
            for fir in list(record.function_instances):
                if fir.function_instance_id not in profiled:
                    platform.vim.attach_profile(fir.function_instance_id, profile)
                    profiled.add(fir.function_instance_id)
            platform.tick(dt=dt)
            platform.drain()
            report.replica_timeline.append((tick, len(record.function_instances)))

        fids = sorted(profiled)
        for metric in platform.monitoring.metrics_for(fids):
            values = [v for _, v in platform.monitoring.query(fids, metric)]
            if values:
                report.metric_stats[metric] = _stats(values)
        report.firings = [
            {
                "tick": f.tick,
                "vnf": f.vnf_name,
                "from": f.previous,
                "to": f.target,
                "tier": f.tier,
                "rule_index": f.rule_index,
            }
            for f in platform.scaling.firings
            if f.instance_id == instance_id
        ]
        client.terminate(instance_id)
        platform.drain()
        report.final_state = platform.find_instance(instance_id).state.value
        report.wall_seconds = time.monotonic() - started
        return report


def _collection_interval(workspace: Workspace, metric: str) -> float:
    for path in sorted(workspace.descriptor_dir.glob("*.yml")):
        try:
            descriptor = parse_descriptor(path.read_text(encoding="utf-8"))
        except PlatformError:
            continue
        if isinstance(descriptor, FunctionDescriptor):
            for spec in descriptor.monitoring:
                if spec.metric_name == metric:
                    return spec.collection_interval_s
    return 1.0
