"""Monitoring repository plugin: consumes the metric stream and stores
time-ordered samples per (function instance, metric) for later queries."""

from __future__ import annotations

import threading
from typing import Optional

from son import wire
from son.broker.core import Message
from son.plugins import BasePlugin, PluginManifest


class MonitoringStore(BasePlugin):
    manifest = PluginManifest(
        name="monitoring-manager",
        wants_publish=("function.monitoring.#",),
        wants_subscribe=("function.monitoring.#",),
    )

    def __init__(self) -> None:
        super().__init__()
        self._lock = threading.RLock()
        self._series: dict[tuple[str, str], list[tuple[float, float]]] = {}

    def on_connect(self) -> None:
        self.subscribe(f"{wire.MONITORING_PREFIX}.#", self._on_metric)

    def _on_metric(self, message: Message) -> None:
        parts = message.topic.split(".")
        if len(parts) < 4:
            return
        instance_id, metric = parts[2], parts[3]
        payload = message.payload or {}
        sample = (float(payload.get("timestamp", 0.0)), float(payload.get("value", 0.0)))
        with self._lock:
            self._series.setdefault((instance_id, metric), []).append(sample)

    def query(
        self,
        function_instance_ids: list[str],
        metric: str,
        time_from: Optional[float] = None,
        time_to: Optional[float] = None,
    ) -> list[tuple[float, float]]:
        """Stored samples for the given function instances, time-ordered."""
        with self._lock:
            merged: list[tuple[float, float]] = []
            for fid in function_instance_ids:
                merged.extend(self._series.get((fid, metric), []))
        merged.sort(key=lambda s: s[0])
        return [
            s
            for s in merged
            if (time_from is None or s[0] >= time_from)
            and (time_to is None or s[0] <= time_to)
        ]

    def metrics_for(self, function_instance_ids: list[str]) -> list[str]:
        ids = set(function_instance_ids)
        with self._lock:
            return sorted({m for (fid, m) in self._series if fid in ids})
