"""Gatekeeper: the authenticated entry point of a platform.

Serves package upload and on-boarding, service management, monitoring access,
slice administration and the recursion interface through which parent
platforms delegate whole services to children.  Every platform instance
serves this same API.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from son import dsl, wire
from son.descriptors import (
    ExecutiveKind,
    FunctionDescriptor,
    ManagerKind,
    ServiceDescriptor,
    parse_descriptor,
    validate_service,
)
from son.errors import PlatformError
from son.http import ApiRequest, ApiResponse, Endpoint, EndpointError, resolve_endpoint
from son.lifecycle import (
    InstanceRepository,
    RemoteHandle,
    ServiceInstanceRecord,
    UnknownInstance,
)
from son.packaging import (
    EntryKind,
    PackageMode,
    classify_entry,
    package_id as compute_package_id,
    verify_package,
    _decode_archive,
)
from son.plugins import BasePlugin, PluginManifest
from son.resources import Resources

log = logging.getLogger(__name__)


class AuthFailed(PlatformError):
    pass


class Forbidden(PlatformError):
    pass


class UnknownPackage(PlatformError):
    pass


class ChildUnreachable(PlatformError):
    pass


class RemoteError(PlatformError):
    pass


class SsmRejected(PlatformError):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class Role(str, Enum):
    DEVELOPER = "DEVELOPER"
    OPERATOR = "OPERATOR"
    PLATFORM = "PLATFORM"


@dataclass(frozen=True)
class Principal:
    principal_id: str
    role: Role
    token: str


class PrincipalRegistry:
    """Static bearer tokens from operator configuration."""

    def __init__(self, principals: list[Principal]):
        self._by_token: dict[str, Principal] = {}
        for p in principals:
            if p.token in self._by_token:
                raise PlatformError(f"duplicate token for principal {p.principal_id}")
            self._by_token[p.token] = p

    def authenticate(self, token: Optional[str]) -> Principal:
        if not token or token not in self._by_token:
            raise AuthFailed("missing or invalid bearer token")
        return self._by_token[token]


# ---------------------------------------------------------------------------
# catalogue
# ---------------------------------------------------------------------------

@dataclass
class CataloguePackage:
    package_id: str
    archive: bytes
    mode: PackageMode
    owner: str
    services: dict[str, ServiceDescriptor]
    functions: dict[str, FunctionDescriptor]
    programs: dict[str, str]
    status: str = "OK"  # OK | DEGRADED
    degraded_reason: Optional[str] = None


class Catalogue:
    """Platform-specific store of uploaded packages and their artifacts."""

    def __init__(self) -> None:
        self._lock = threading.RLock()
        self._packages: dict[str, CataloguePackage] = {}
        self._service_index: dict[str, str] = {}  # service identity -> package id

    def add(self, package: CataloguePackage) -> None:
        with self._lock:
            self._packages[package.package_id] = package
            for key in package.services:
                self._service_index[key] = package.package_id

    def get(self, package_id: str) -> CataloguePackage:
        with self._lock:
            package = self._packages.get(package_id)
        if package is None:
            raise UnknownPackage(package_id)
        return package

    def has(self, package_id: str) -> bool:
        with self._lock:
            return package_id in self._packages

    def resolve_service(
        self, service_key: str
    ) -> tuple[ServiceDescriptor, dict[str, FunctionDescriptor]]:
        """Lookup used by the lifecycle manager; KeyError when absent."""
        with self._lock:
            package_id = self._service_index.get(service_key)
            if package_id is None:
                raise KeyError(service_key)
            package = self._packages[package_id]
            nsd = package.services[service_key]
            vnfds = {
                ref.name: package.functions[ref.name]
                for ref in nsd.function_refs
                if ref.name in package.functions
            }
            return nsd, vnfds


# ---------------------------------------------------------------------------
# child platforms (recursion interface)
# ---------------------------------------------------------------------------

@dataclass
class ChildPlatformRecord:
    child_id: str
    endpoint: Endpoint
    credentials: str
    delegated: set[str] = field(default_factory=set)
    live: bool = True


class ChildrenManager:
    """Registered child platforms surface as pseudo-PoPs whose capacity is the
    child's advertised aggregate free capacity, refreshed on every poll."""

    PSEUDO_PREFIX = "child:"

    def __init__(self, platform_id: str, catalogue: Catalogue, deploy_timeout: float = 30.0):
        self.platform_id = platform_id
        self.catalogue = catalogue
        self.deploy_timeout = deploy_timeout
        self.poll_interval = 0.02
        self._lock = threading.RLock()
        self._children: dict[str, ChildPlatformRecord] = {}

    def register(self, endpoint: Endpoint | str, credentials: str) -> ChildPlatformRecord:
        endpoint = resolve_endpoint(endpoint)
        info = self._probe(endpoint, credentials)
        child_id = info.get("platform_id")
        if not child_id:
            raise ChildUnreachable("child did not report a platform id")
        # Recursion forms a tree: reject a registration that would close a
        # cycle through the id path.
        if child_id == self.platform_id or self.platform_id in info.get("descendants", []):
            raise PlatformError(
                f"registering {child_id} under {self.platform_id} would create a cycle"
            )
        record = ChildPlatformRecord(child_id=child_id, endpoint=endpoint, credentials=credentials)
        with self._lock:
            self._children[child_id] = record
        return record

    def get(self, child_id: str) -> ChildPlatformRecord:
        with self._lock:
            record = self._children.get(child_id)
        if record is None:
            raise ChildUnreachable(f"no registered child platform {child_id}")
        return record

    def deregister(self, child_id: str) -> None:
        with self._lock:
            self._children.pop(child_id, None)

    def child_ids(self) -> list[str]:
        with self._lock:
            return sorted(self._children)

    def descendant_ids(self) -> list[str]:
        """This platform's transitive child ids, freshly polled."""
        out: set[str] = set()
        for child_id in self.child_ids():
            record = self.get(child_id)
            out.add(child_id)
            try:
                info = self._probe(record.endpoint, record.credentials)
                out.update(info.get("descendants", []))
            except PlatformError:
                continue
        return sorted(out)

    def aggregate_free(self) -> Resources:
        total = Resources()
        for child_id in self.child_ids():
            record = self.get(child_id)
            try:
                info = self._probe(record.endpoint, record.credentials)
                total = total + Resources.from_dict(info.get("free", {}))
            except PlatformError:
                continue
        return total

    def pseudo_views(self) -> list:
        from son.executive import PopView

        views = []
        for child_id in self.child_ids():
            record = self.get(child_id)
            try:
                info = self._probe(record.endpoint, record.credentials)
            except PlatformError:
                continue
            free = Resources.from_dict(info.get("free", {}))
            views.append(
                PopView(
                    pop_id=self.PSEUDO_PREFIX + child_id,
                    cpu_free=free.cpu_cores,
                    mem_free=free.memory_mb,
                    storage_free=free.storage_gb,
                    pseudo_child_id=child_id,
                )
            )
        return views

    # -- delegation ---------------------------------------------------------

    def delegate(self, record: ServiceInstanceRecord, child_id: str) -> RemoteHandle:
        """Forwards the same gatekeeper API calls to the child: upload the
        package if absent, instantiate, poll to completion."""
        child = self.get(child_id)
        if not record.package_id:
            raise RemoteError("delegation requires the package in the catalogue")
        package = self.catalogue.get(record.package_id)
        self._send(
            child,
            ApiRequest(
                method="POST", path="/packages", token=child.credentials, body=package.archive
            ),
            expect=(200, 201, 409),
        )
        response = self._send(
            child,
            ApiRequest(
                method="POST",
                path="/instances",
                token=child.credentials,
                body=_json_body(
                    {
                        "package_id": record.package_id,
                        "service": str(record.service),
                        "options": {},
                    }
                ),
            ),
            expect=(200, 201),
        )
        remote_instance_id = response.body.get("instance_id")
        deadline = time.monotonic() + self.deploy_timeout
        while True:
            status = self._send(
                child,
                ApiRequest(
                    method="GET",
                    path=f"/instances/{remote_instance_id}",
                    token=child.credentials,
                ),
                expect=(200,),
            ).body
            state = status.get("state")
            if state == "RUNNING":
                break
            if state in ("ERROR", "TERMINATED"):
                raise RemoteError(
                    f"child {child_id} failed to deploy: {status.get('error_cause') or state}"
                )
            if time.monotonic() > deadline:
                raise RemoteError(f"child {child_id} did not reach RUNNING in time")
            time.sleep(self.poll_interval)
        with self._lock:
            child.delegated.add(remote_instance_id)
        return RemoteHandle(child_id=child_id, remote_instance_id=remote_instance_id)

    def terminate_remote(self, record: ServiceInstanceRecord) -> None:
        assert record.remote is not None
        child = self.get(record.remote.child_id)
        self._send(
            child,
            ApiRequest(
                method="DELETE",
                path=f"/instances/{record.remote.remote_instance_id}",
                token=child.credentials,
            ),
            expect=(200,),
        )
        with self._lock:
            child.delegated.discard(record.remote.remote_instance_id)

    def remote_status(self, record: ServiceInstanceRecord) -> Optional[dict]:
        assert record.remote is not None
        try:
            child = self.get(record.remote.child_id)
            return self._send(
                child,
                ApiRequest(
                    method="GET",
                    path=f"/instances/{record.remote.remote_instance_id}",
                    token=child.credentials,
                ),
                expect=(200,),
            ).body
        except PlatformError:
            return None

    def remote_metrics(
        self, record: ServiceInstanceRecord, metric: str, time_from: str, time_to: str
    ) -> list:
        assert record.remote is not None
        child = self.get(record.remote.child_id)
        query = {"name": metric}
        if time_from:
            query["from"] = time_from
        if time_to:
            query["to"] = time_to
        body = self._send(
            child,
            ApiRequest(
                method="GET",
                path=f"/instances/{record.remote.remote_instance_id}/metrics",
                token=child.credentials,
                query=query,
            ),
            expect=(200,),
        ).body
        return body.get("series", [])

    def _probe(self, endpoint: Endpoint, credentials: str) -> dict:
        try:
            response = endpoint.send(
                ApiRequest(method="GET", path="/platform/info", token=credentials)
            )
        except EndpointError as exc:
            raise ChildUnreachable(str(exc)) from exc
        if not response.ok:
            raise ChildUnreachable(f"liveness probe failed with status {response.status}")
        return response.body or {}

    def _send(self, child: ChildPlatformRecord, request: ApiRequest, expect: tuple) -> ApiResponse:
        try:
            response = child.endpoint.send(request)
        except EndpointError as exc:
            raise ChildUnreachable(str(exc)) from exc
        if response.status not in expect:
            detail = response.body if not isinstance(response.body, bytes) else ""
            raise RemoteError(f"child {child.child_id} answered {response.status}: {detail}")
        return response


def _json_body(doc: dict) -> bytes:
    import json

    return json.dumps(doc).encode("utf-8")


# ---------------------------------------------------------------------------
# the gatekeeper itself
# ---------------------------------------------------------------------------

_STATUS_BY_ERROR = {
    AuthFailed: 401,
    Forbidden: 403,
    UnknownPackage: 404,
    UnknownInstance: 404,
    ChildUnreachable: 502,
    RemoteError: 502,
}


class Gatekeeper(BasePlugin):
    """Routes authenticated API requests to the platform components.

    Every endpoint authenticates before any side effect; ownership is
    enforced for instance-scoped resources (operators see everything).
    """

    manifest = PluginManifest(
        name="gatekeeper",
        wants_publish=("service.#",),
        wants_subscribe=("service.#",),
    )

    def __init__(
        self,
        platform_id: str,
        principals: PrincipalRegistry,
        catalogue: Catalogue,
        repository: InstanceRepository,
        monitoring,
        children: ChildrenManager,
        slice_manager,
        local_free: Callable[[], Resources],
        local_capacity: Callable[[], Resources],
        onboard_placement: Callable[[dsl.SsmProgram, str], object],
        onboard_scaling: Callable[[dsl.SsmProgram, str, Optional[str]], object],
        request_timeout: float = 30.0,
    ):
        super().__init__()
        self.platform_id = platform_id
        self.principals = principals
        self.catalogue = catalogue
        self.repo = repository
        self.monitoring = monitoring
        self.children = children
        self.slices = slice_manager
        self.local_free = local_free
        self.local_capacity = local_capacity
        self.onboard_placement = onboard_placement
        self.onboard_scaling = onboard_scaling
        self.request_timeout = request_timeout

    # -- request routing -------------------------------------------------------

    def handle(self, request: ApiRequest) -> ApiResponse:
        try:
            principal = self.principals.authenticate(request.token)
            return self._route(principal, request)
        except PlatformError as exc:
            status = 400
            for error_type, code in _STATUS_BY_ERROR.items():
                if isinstance(exc, error_type):
                    status = code
                    break
            else:
                from son.lifecycle import InvalidState, InvalidTarget
                from son.packaging import PackageError
                from son.slicing import QuotaExceedsCapacity, SliceNotEmpty, UnknownSlice

                if isinstance(exc, (InvalidState, InvalidTarget, SliceNotEmpty, QuotaExceedsCapacity)):
                    status = 409
                elif isinstance(exc, UnknownSlice):
                    status = 404
                elif isinstance(exc, PackageError):
                    status = 422
            return ApiResponse(status, {"error": type(exc).__name__, "detail": str(exc)})
        except Exception as exc:  # pragma: no cover - defensive
            log.exception("gatekeeper internal error")
            return ApiResponse(500, {"error": "InternalError", "detail": str(exc)})

    def _route(self, principal: Principal, request: ApiRequest) -> ApiResponse:
        method, path = request.method.upper(), request.path.rstrip("/") or "/"
        parts = [p for p in path.split("/") if p]

        if method == "GET" and parts == ["platform", "info"]:
            return self._info()
        if method == "POST" and parts == ["packages"]:
            return self._upload(principal, request.body or b"")
        if method == "POST" and parts == ["instances"]:
            return self._instantiate(principal, request.json())
        if method == "GET" and len(parts) == 2 and parts[0] == "instances":
            return self._status(principal, parts[1])
        if method == "DELETE" and len(parts) == 2 and parts[0] == "instances":
            return self._terminate(principal, parts[1])
        if method == "GET" and len(parts) == 3 and parts[0] == "instances" and parts[2] == "metrics":
            return self._metrics(principal, parts[1], request.query)
        if method == "POST" and parts == ["children"]:
            return self._register_child(principal, request.json())
        if method == "POST" and parts == ["slices"]:
            return self._create_slice(principal, request.json())
        if method == "GET" and parts == ["slices"]:
            return self._list_slices(principal)
        if method == "DELETE" and len(parts) == 2 and parts[0] == "slices":
            return self._delete_slice(principal, parts[1])
        return ApiResponse(404, {"error": "NotFound", "detail": path})

    # -- handlers ------------------------------------------------------------------

    def _info(self) -> ApiResponse:
        free = self.local_free() + self.children.aggregate_free()
        capacity = self.local_capacity()
        return ApiResponse(
            200,
            {
                "platform_id": self.platform_id,
                "free": free.to_dict(),
                "capacity": capacity.to_dict(),
                "descendants": self.children.descendant_ids(),
            },
        )

    def _upload(self, principal: Principal, archive: bytes) -> ApiResponse:
        manifest = verify_package(archive)
        _, files = _decode_archive(archive)
        services: dict[str, ServiceDescriptor] = {}
        functions: dict[str, FunctionDescriptor] = {}
        programs: dict[str, str] = {}
        for entry in manifest.entries:
            if entry.kind is EntryKind.DESCRIPTOR and entry.path in files:
                descriptor = parse_descriptor(files[entry.path].decode("utf-8"))
                if isinstance(descriptor, ServiceDescriptor):
                    services[str(descriptor.identity)] = descriptor
                else:
                    functions[descriptor.name] = descriptor
            elif entry.kind is EntryKind.SSM_PROGRAM and entry.path in files:
                programs[entry.path] = files[entry.path].decode("utf-8")
        if not services:
            raise UnknownPackage("package contains no service descriptor")
        for nsd in services.values():
            report = validate_service(nsd, functions.values())
            if not report.ok:
                from son.packaging import ValidationFailed

                raise ValidationFailed(report)

        pid = compute_package_id(archive)
        package = CataloguePackage(
            package_id=pid,
            archive=archive,
            mode=manifest.mode,
            owner=principal.principal_id,
            services=services,
            functions=functions,
            programs=programs,
        )
        try:
            self._onboard_managers(package)
        except PlatformError as exc:
            package.status = "DEGRADED"
            package.degraded_reason = str(exc)
            log.warning("package %s degraded: %s", pid, exc)
        self.catalogue.add(package)
        body = {"package_id": pid, "status": package.status}
        if package.degraded_reason:
            body["ssm_rejected"] = package.degraded_reason
        return ApiResponse(201, body)

    def _onboard_managers(self, package: CataloguePackage) -> None:
        """On-boards every declared manager program; any rejection degrades
        the whole package to DEFAULT strategies."""
        for service_key, nsd in package.services.items():
            for ref in nsd.ssm_refs:
                source = package.programs.get(ref.program_artifact)
                if source is None:
                    raise SsmRejected(f"program artifact {ref.program_artifact!r} not in package")
                kind = (
                    dsl.ProgramKind.PLACEMENT
                    if ref.executive is ExecutiveKind.PLACEMENT
                    else dsl.ProgramKind.SCALING
                )
                program = dsl.parse_ssm(source, kind)
                if kind is dsl.ProgramKind.PLACEMENT:
                    self.onboard_placement(program, service_key)
                else:
                    self.onboard_scaling(program, service_key, None)
            for ref_identity in nsd.function_refs:
                vnfd = package.functions.get(ref_identity.name)
                if vnfd is None:
                    continue
                for fsm in vnfd.fsm_refs:
                    if fsm.executive is not ExecutiveKind.SCALING:
                        raise SsmRejected(
                            "function-specific managers must target the scaling executive"
                        )
                    source = package.programs.get(fsm.program_artifact)
                    if source is None:
                        raise SsmRejected(
                            f"program artifact {fsm.program_artifact!r} not in package"
                        )
                    program = dsl.parse_ssm(source, dsl.ProgramKind.SCALING)
                    self.onboard_scaling(program, service_key, vnfd.name)

    def _instantiate(self, principal: Principal, body: dict) -> ApiResponse:
        package = self.catalogue.get(str(body.get("package_id", "")))
        self._check_package_access(principal, package)
        service_key = body.get("service")
        if service_key is None:
            service_key = sorted(package.services)[0]
        if service_key not in package.services:
            raise UnknownPackage(f"package has no service {service_key}")
        options = body.get("options") or {}
        reply = self.request(
            wire.SERVICE_CREATE,
            {
                "service": service_key,
                "package_id": package.package_id,
                "owner": principal.principal_id,
                "options": {
                    "slice_id": options.get("slice_id"),
                    "pop_restriction": options.get("pop_restriction"),
                },
            },
            timeout=self.request_timeout,
        )
        if not reply.get("ok"):
            return ApiResponse(
                409 if reply.get("error") == "InvalidState" else 400,
                {"error": reply.get("error"), "detail": reply.get("detail")},
            )
        return ApiResponse(201, {"instance_id": reply["instance_id"]})

    def _status(self, principal: Principal, instance_id: str) -> ApiResponse:
        record = self.repo.get(instance_id)
        self._check_instance_access(principal, record)
        body = {
            "instance_id": record.instance_id,
            "service": str(record.service),
            "package_id": record.package_id,
            "state": record.state.value,
            "placement": dict(record.placement),
            "replicas": record.replica_counts(),
            "slice_id": record.slice_id,
            "error_cause": record.error_cause,
        }
        if record.remote is not None:
            remote = self.children.remote_status(record)
            body["remote"] = {
                "child_id": record.remote.child_id,
                "remote_instance_id": record.remote.remote_instance_id,
                "remote_state": remote.get("state") if remote else None,
            }
        return ApiResponse(200, body)

    def _terminate(self, principal: Principal, instance_id: str) -> ApiResponse:
        record = self.repo.get(instance_id)
        self._check_instance_access(principal, record)
        reply = self.request(
            wire.SERVICE_TERMINATE, {"instance_id": instance_id}, timeout=self.request_timeout
        )
        if not reply.get("ok"):
            return ApiResponse(409, {"error": reply.get("error"), "detail": reply.get("detail")})
        return ApiResponse(200, {"ok": True, "state": self.repo.get(instance_id).state.value})

    def _metrics(self, principal: Principal, instance_id: str, query: dict) -> ApiResponse:
        record = self.repo.get(instance_id)
        self._check_instance_access(principal, record)
        metric = query.get("name", "")
        time_from = query.get("from", "")
        time_to = query.get("to", "")
        if record.remote is not None:
            series = self.children.remote_metrics(record, metric, time_from, time_to)
        else:
            fids = [f.function_instance_id for f in record.function_instances]
            series = [
                [t, v]
                for t, v in self.monitoring.query(
                    fids,
                    metric,
                    float(time_from) if time_from else None,
                    float(time_to) if time_to else None,
                )
            ]
        return ApiResponse(200, {"instance_id": instance_id, "metric": metric, "series": series})

    def _register_child(self, principal: Principal, body: dict) -> ApiResponse:
        self._require_operator(principal)
        endpoint = body.get("endpoint", "")
        record = self.children.register(endpoint, str(body.get("credentials", "")))
        return ApiResponse(201, {"child_id": record.child_id})

    def register_child(self, endpoint: Endpoint | str, credentials: str) -> ChildPlatformRecord:
        """In-process registration path used by nested slices and tests."""
        return self.children.register(endpoint, credentials)

    def _create_slice(self, principal: Principal, body: dict) -> ApiResponse:
        self._require_operator(principal)
        slice_ = self.slices.create_slice(
            quota=Resources.from_dict(body.get("quota", {})),
            mode=str(body.get("mode", "FLAT")).upper(),
            tenant=str(body.get("tenant", principal.principal_id)),
        )
        return ApiResponse(
            201,
            {
                "slice_id": slice_.slice_id,
                "mode": slice_.mode.value,
                "quota": slice_.quota.to_dict(),
                "tenant": slice_.tenant,
                "nested_child_id": slice_.nested_child_id,
            },
        )

    def _list_slices(self, principal: Principal) -> ApiResponse:
        self._require_operator(principal)
        return ApiResponse(
            200,
            {
                "slices": [
                    {
                        "slice_id": s.slice_id,
                        "mode": s.mode.value,
                        "quota": s.quota.to_dict(),
                        "used": s.used.to_dict(),
                        "tenant": s.tenant,
                    }
                    for s in self.slices.all_slices()
                ]
            },
        )

    def _delete_slice(self, principal: Principal, slice_id: str) -> ApiResponse:
        self._require_operator(principal)
        self.slices.delete_slice(slice_id)
        return ApiResponse(200, {"ok": True})

    # -- access control ---------------------------------------------------------

    def _require_operator(self, principal: Principal) -> None:
        if principal.role is not Role.OPERATOR:
            raise Forbidden("operator role required")

    def _check_instance_access(self, principal: Principal, record) -> None:
        if principal.role is Role.OPERATOR:
            return
        if record.owner != principal.principal_id:
            raise Forbidden(f"instance {record.instance_id} belongs to another principal")

    def _check_package_access(self, principal: Principal, package: CataloguePackage) -> None:
        if principal.role is Role.OPERATOR:
            return
        if package.owner != principal.principal_id and principal.role is not Role.PLATFORM:
            raise Forbidden("package belongs to another principal")
