"""Exchangeable slice manager plugin: flat and nested slice management.

A FLAT slice is a quota the manager enforces on every admission.  A NESTED
slice spawns a whole child platform bound to the quota and registered through
the recursion interface; the child's own capacity bound then enforces the
quota, so admission is always delegated.
"""

from __future__ import annotations

import logging
import threading
import uuid
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from son import wire
from son.broker.core import Message
from son.errors import PlatformError
from son.plugins import BasePlugin, PluginManifest
from son.resources import Resources

log = logging.getLogger(__name__)


class SlicingError(PlatformError):
    pass


class UnknownSlice(SlicingError):
    pass


class QuotaExceedsCapacity(SlicingError):
    pass


class SliceNotEmpty(SlicingError):
    pass


class SpawnFailed(SlicingError):
    pass


class SliceMode(str, Enum):
    FLAT = "FLAT"
    NESTED = "NESTED"


@dataclass
class Slice:
    slice_id: str
    quota: Resources
    mode: SliceMode
    tenant: str
    used: Resources = field(default_factory=Resources)
    nested_child_id: Optional[str] = None
    nested_pseudo_pop: Optional[str] = None


@dataclass(frozen=True)
class NestedSpawn:
    """What the platform hands back when it spawns a nested child platform."""

    child_id: str
    pseudo_pop_id: str
    close: Callable[[], None]
    live_instances: Callable[[], int]


class SliceManager(BasePlugin):
    """Quota accounting per slice, linearizable admission, nested spawning."""

    manifest = PluginManifest(
        name="slice-manager",
        wants_publish=("platform.slicing.#",),
        wants_subscribe=("platform.slicing.#",),
    )

    def __init__(
        self,
        platform_capacity: Callable[[], Resources],
        spawn_nested: Optional[Callable[[str, Resources], NestedSpawn]] = None,
    ):
        super().__init__()
        self._capacity = platform_capacity
        self._spawn_nested = spawn_nested
        self._lock = threading.RLock()
        self._slices: dict[str, Slice] = {}
        self._spawns: dict[str, NestedSpawn] = {}
        # Live instance counts per FLAT slice, maintained by admission/release.
        self._flat_holdings: dict[str, int] = {}

    def on_connect(self) -> None:
        self.subscribe(wire.SLICE_ADMIT, self._on_admit)
        self.subscribe(wire.SLICE_RELEASE, self._on_release)

    # -- operator API ----------------------------------------------------------

    def create_slice(
        self, quota: Resources, mode: SliceMode | str, tenant: str, slice_id: Optional[str] = None
    ) -> Slice:
        mode = SliceMode(mode)
        with self._lock:
            unsliced = self._capacity() - self._total_quota()
            if not quota.fits_within(unsliced):
                raise QuotaExceedsCapacity(
                    f"quota {quota.to_dict()} exceeds unsliced capacity {unsliced.to_dict()}"
                )
            slice_ = Slice(
                slice_id=slice_id or f"slice-{uuid.uuid4().hex[:8]}",
                quota=quota,
                mode=mode,
                tenant=tenant,
            )
            if mode is SliceMode.NESTED:
                if self._spawn_nested is None:
                    raise SpawnFailed("platform cannot spawn nested slice platforms")
                try:
                    spawn = self._spawn_nested(slice_.slice_id, quota)
                except PlatformError as exc:
                    raise SpawnFailed(str(exc)) from exc
                slice_.nested_child_id = spawn.child_id
                slice_.nested_pseudo_pop = spawn.pseudo_pop_id
                self._spawns[slice_.slice_id] = spawn
            self._slices[slice_.slice_id] = slice_
            return slice_

    def delete_slice(self, slice_id: str) -> None:
        with self._lock:
            slice_ = self._require(slice_id)
            if slice_.mode is SliceMode.FLAT:
                if self._flat_holdings.get(slice_id, 0) > 0 or not slice_.used.is_zero():
                    raise SliceNotEmpty(f"slice {slice_id} still holds resources")
            else:
                spawn = self._spawns.get(slice_id)
                if spawn is not None and spawn.live_instances() > 0:
                    raise SliceNotEmpty(f"nested platform of {slice_id} is not drained")
                if spawn is not None:
                    spawn.close()
                    del self._spawns[slice_id]
            del self._slices[slice_id]

    def get(self, slice_id: str) -> Slice:
        with self._lock:
            return self._require(slice_id)

    def all_slices(self) -> list[Slice]:
        with self._lock:
            return list(self._slices.values())

    def nested_pseudo_pop(self, slice_id: str) -> Optional[str]:
        with self._lock:
            slice_ = self._slices.get(slice_id)
            return slice_.nested_pseudo_pop if slice_ else None

    # -- admission -----------------------------------------------------------------

    def admit(self, slice_id: str, requested: Resources) -> tuple[bool, Optional[Resources]]:
        """FLAT: admitted iff used + requested fits the quota (and `used` is
        updated).  NESTED: always delegated, the child's capacity enforces.

        Returns (admitted, deficit-when-rejected)."""
        with self._lock:
            slice_ = self._require(slice_id)
            if slice_.mode is SliceMode.NESTED:
                return True, None
            headroom = slice_.quota - slice_.used
            if not requested.fits_within(headroom):
                return False, requested.deficit_against(headroom)
            slice_.used = slice_.used + requested
            self._flat_holdings[slice_id] = self._flat_holdings.get(slice_id, 0) + 1
            return True, None

    def release(self, slice_id: str, released: Resources) -> None:
        with self._lock:
            slice_ = self._slices.get(slice_id)
            if slice_ is None or slice_.mode is SliceMode.NESTED:
                return
            slice_.used = slice_.used - released
            if slice_.used.any_negative():
                log.warning("slice %s released below zero; clamping", slice_id)
                slice_.used = Resources(
                    max(0, slice_.used.cpu_cores),
                    max(0, slice_.used.memory_mb),
                    max(0, slice_.used.storage_gb),
                )
            holding = self._flat_holdings.get(slice_id, 0)
            self._flat_holdings[slice_id] = max(0, holding - 1)

    # -- broker handlers ---------------------------------------------------------

    def _on_admit(self, message: Message) -> None:
        payload = message.payload or {}
        try:
            admitted, deficit = self.admit(
                payload.get("slice_id", ""), Resources.from_dict(payload.get("resources", {}))
            )
            reply: dict = {"ok": True, "admitted": admitted}
            if deficit is not None:
                reply["detail"] = f"quota deficit {deficit.to_dict()}"
            self.respond(message, reply)
        except PlatformError as exc:
            self.respond(message, {"ok": False, "error": type(exc).__name__, "detail": str(exc)})

    def _on_release(self, message: Message) -> None:
        payload = message.payload or {}
        self.release(
            payload.get("slice_id", ""), Resources.from_dict(payload.get("resources", {}))
        )
        self.respond(message, {"ok": True})

    # -- internals --------------------------------------------------------------------

    def _require(self, slice_id: str) -> Slice:
        slice_ = self._slices.get(slice_id)
        if slice_ is None:
            raise UnknownSlice(slice_id)
        return slice_

    def _total_quota(self) -> Resources:
        total = Resources()
        for slice_ in self._slices.values():
            total = total + slice_.quota
        return total
