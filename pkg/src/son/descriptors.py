"""Network service and function descriptors: model, parsing, validation.

Descriptors are YAML documents with a required top-level key
``descriptor_kind: service|function`` (schema in docs/schema.md).  Unknown
fields are preserved on the parsed object and written back on serialization,
but never interpreted.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Union

import yaml

from son.errors import PlatformError
from son.resources import Resources

_VERSION_RE = re.compile(r"\d+\.\d+\.\d+\Z")
_THRESHOLD_OPERATORS = ("<", "<=", ">", ">=")


class DescriptorSyntaxError(PlatformError):
    """The document is not well-formed YAML."""

    def __init__(self, line: int, column: int, reason: str):
        super().__init__(f"syntax error at line {line}, column {column}: {reason}")
        self.line = line
        self.column = column


class SchemaError(PlatformError):
    """The document is well-formed but violates the descriptor schema."""

    def __init__(self, path: str, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = path
        self.reason = reason


class UnresolvedEndpoint(PlatformError):
    pass


@dataclass(frozen=True, order=True)
class Identity:
    """Exact-match (vendor, name, version) identity of a descriptor."""

    vendor: str
    name: str
    version: str

    def __str__(self) -> str:
        return f"{self.vendor}.{self.name}.{self.version}"

    def to_dict(self) -> dict:
        return {"vendor": self.vendor, "name": self.name, "version": self.version}


@dataclass(frozen=True)
class MonitoringMetricSpec:
    metric_name: str
    unit: str = ""
    collection_interval_s: float = 1.0
    threshold: Optional[tuple[str, float]] = None  # (operator, value)


class ManagerKind(str, Enum):
    FSM = "FSM"
    SSM = "SSM"


class ExecutiveKind(str, Enum):
    PLACEMENT = "PLACEMENT"
    SCALING = "SCALING"


@dataclass(frozen=True)
class ManagerRef:
    kind: ManagerKind
    executive: ExecutiveKind
    program_artifact: str


@dataclass(frozen=True)
class DeploymentUnit:
    image_ref: str
    resources: Resources


@dataclass(frozen=True)
class Endpoint:
    """A forwarding-graph or link endpoint: `vnf:cp` or a service-level `cp`."""

    vnf: Optional[str]
    cp: str

    def __str__(self) -> str:
        return self.cp if self.vnf is None else f"{self.vnf}:{self.cp}"

    @property
    def is_service_level(self) -> bool:
        return self.vnf is None


@dataclass(frozen=True)
class FunctionDescriptor:
    vendor: str
    name: str
    version: str
    deployment_units: tuple[DeploymentUnit, ...]
    connection_points: tuple[str, ...]
    monitoring: tuple[MonitoringMetricSpec, ...] = ()
    fsm_refs: tuple[ManagerRef, ...] = ()
    extras: tuple[tuple[str, object], ...] = ()

    @property
    def identity(self) -> Identity:
        return Identity(self.vendor, self.name, self.version)

    @property
    def total_resources(self) -> Resources:
        total = Resources()
        for du in self.deployment_units:
            total = total + du.resources
        return total


@dataclass(frozen=True)
class ServiceDescriptor:
    vendor: str
    name: str
    version: str
    function_refs: tuple[Identity, ...]
    connection_points: tuple[str, ...] = ()
    virtual_links: tuple[tuple[Endpoint, Endpoint], ...] = ()
    forwarding_graph: tuple[Endpoint, ...] = ()
    monitoring: tuple[MonitoringMetricSpec, ...] = ()
    ssm_refs: tuple[ManagerRef, ...] = ()
    placement_requirements: Optional[tuple[str, ...]] = None
    extras: tuple[tuple[str, object], ...] = ()

    @property
    def identity(self) -> Identity:
        return Identity(self.vendor, self.name, self.version)


Descriptor = Union[FunctionDescriptor, ServiceDescriptor]


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_FUNCTION_KEYS = {
    "descriptor_kind",
    "vendor",
    "name",
    "version",
    "deployment_units",
    "connection_points",
    "monitoring",
    "fsm_refs",
}

_SERVICE_KEYS = {
    "descriptor_kind",
    "vendor",
    "name",
    "version",
    "functions",
    "connection_points",
    "virtual_links",
    "forwarding_graph",
    "monitoring",
    "ssm_refs",
    "placement_requirements",
}


def parse_descriptor(text: str) -> Descriptor:
    """Parses a descriptor document, checking every local invariant."""
    try:
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        line = (mark.line + 1) if mark else 1
        column = (mark.column + 1) if mark else 1
        raise DescriptorSyntaxError(line, column, exc.problem or str(exc)) from exc
    except yaml.YAMLError as exc:
        raise DescriptorSyntaxError(1, 1, str(exc)) from exc
    if not isinstance(data, dict):
        raise SchemaError("$", "descriptor must be a mapping")
    kind = data.get("descriptor_kind")
    if kind == "function":
        return _parse_function(data)
    if kind == "service":
        return _parse_service(data)
    raise SchemaError("descriptor_kind", f"must be 'service' or 'function', got {kind!r}")


def _parse_identity(data: dict, path: str = "") -> tuple[str, str, str]:
    vendor = _require_str(data, "vendor", path)
    name = _require_str(data, "name", path)
    version = _require_str(data, "version", path)
    if not _VERSION_RE.match(version):
        raise SchemaError(_join(path, "version"), "must be MAJOR.MINOR.PATCH")
    return vendor, name, version


def _parse_function(data: dict) -> FunctionDescriptor:
    vendor, name, version = _parse_identity(data)
    units_raw = data.get("deployment_units")
    if not isinstance(units_raw, list) or not units_raw:
        raise SchemaError("deployment_units", "at least one deployment unit required")
    units = []
    for i, unit in enumerate(units_raw):
        path = f"deployment_units[{i}]"
        if not isinstance(unit, dict):
            raise SchemaError(path, "must be a mapping")
        image_ref = _require_str(unit, "image_ref", path)
        units.append(DeploymentUnit(image_ref, _parse_resources(unit.get("resources"), path)))
    cps = _parse_cp_list(data.get("connection_points"), "connection_points")
    monitoring = _parse_monitoring(data.get("monitoring", []))
    fsm_refs = _parse_manager_refs(data.get("fsm_refs", []), ManagerKind.FSM, "fsm_refs")
    return FunctionDescriptor(
        vendor=vendor,
        name=name,
        version=version,
        deployment_units=tuple(units),
        connection_points=cps,
        monitoring=monitoring,
        fsm_refs=fsm_refs,
        extras=_extras(data, _FUNCTION_KEYS),
    )


def _parse_service(data: dict) -> ServiceDescriptor:
    vendor, name, version = _parse_identity(data)
    funcs_raw = data.get("functions")
    if not isinstance(funcs_raw, list) or not funcs_raw:
        raise SchemaError("functions", "a service must reference at least one function")
    refs = []
    for i, ref in enumerate(funcs_raw):
        path = f"functions[{i}]"
        if not isinstance(ref, dict):
            raise SchemaError(path, "must be a mapping")
        refs.append(Identity(*_parse_identity(ref, path)))
    cps = _parse_cp_list(data.get("connection_points", []), "connection_points")

    links = []
    for i, link in enumerate(data.get("virtual_links") or []):
        path = f"virtual_links[{i}]"
        if not isinstance(link, list) or len(link) != 2:
            raise SchemaError(path, "must be a pair [endpoint_a, endpoint_b]")
        a, b = (_parse_endpoint(side, path) for side in link)
        if a == b:
            raise SchemaError(path, "self-loop link")
        links.append((a, b))

    graph = tuple(
        _parse_endpoint(ep, f"forwarding_graph[{i}]")
        for i, ep in enumerate(data.get("forwarding_graph") or [])
    )
    seen: set[Endpoint] = set()
    for i, ep in enumerate(graph):
        if ep in seen:
            raise SchemaError(f"forwarding_graph[{i}]", f"duplicate endpoint {ep}")
        seen.add(ep)

    placement = data.get("placement_requirements")
    if placement is not None:
        if not isinstance(placement, list) or not all(isinstance(p, str) for p in placement):
            raise SchemaError("placement_requirements", "must be a list of PoP ids")
        placement = tuple(placement)

    return ServiceDescriptor(
        vendor=vendor,
        name=name,
        version=version,
        function_refs=tuple(refs),
        connection_points=cps,
        virtual_links=tuple(links),
        forwarding_graph=graph,
        monitoring=_parse_monitoring(data.get("monitoring", [])),
        ssm_refs=_parse_manager_refs(data.get("ssm_refs", []), ManagerKind.SSM, "ssm_refs"),
        placement_requirements=placement,
        extras=_extras(data, _SERVICE_KEYS),
    )


def _parse_resources(raw, path: str) -> Resources:
    if not isinstance(raw, dict):
        raise SchemaError(_join(path, "resources"), "must be a mapping")
    res = Resources.from_dict(raw)
    if res.cpu_cores < 1:
        raise SchemaError(_join(path, "resources.cpu_cores"), "must be ≥ 1")
    if res.memory_mb < 1:
        raise SchemaError(_join(path, "resources.memory_mb"), "must be ≥ 1")
    if res.storage_gb < 0:
        raise SchemaError(_join(path, "resources.storage_gb"), "must be ≥ 0")
    return res


def _parse_cp_list(raw, path: str) -> tuple[str, ...]:
    if raw is None:
        raw = []
    if not isinstance(raw, list) or not all(isinstance(c, str) and c for c in raw):
        raise SchemaError(path, "must be a list of non-empty names")
    if len(set(raw)) != len(raw):
        raise SchemaError(path, "connection point names must be unique")
    return tuple(raw)


def _parse_monitoring(raw) -> tuple[MonitoringMetricSpec, ...]:
    specs = []
    for i, item in enumerate(raw or []):
        path = f"monitoring[{i}]"
        if not isinstance(item, dict):
            raise SchemaError(path, "must be a mapping")
        metric = _require_str(item, "metric", path)
        interval = item.get("interval_s", 1.0)
        if not isinstance(interval, (int, float)) or interval <= 0:
            raise SchemaError(_join(path, "interval_s"), "must be > 0")
        threshold = None
        if "threshold" in item and item["threshold"] is not None:
            th = item["threshold"]
            op = th.get("operator") if isinstance(th, dict) else None
            if op not in _THRESHOLD_OPERATORS:
                raise SchemaError(
                    _join(path, "threshold.operator"),
                    f"must be one of {', '.join(_THRESHOLD_OPERATORS)}",
                )
            try:
                value = float(th["value"])
            except (KeyError, TypeError, ValueError):
                raise SchemaError(_join(path, "threshold.value"), "must be a number")
            threshold = (op, value)
        specs.append(
            MonitoringMetricSpec(
                metric_name=metric,
                unit=str(item.get("unit", "")),
                collection_interval_s=float(interval),
                threshold=threshold,
            )
        )
    return tuple(specs)


def _parse_manager_refs(raw, kind: ManagerKind, path: str) -> tuple[ManagerRef, ...]:
    refs = []
    for i, item in enumerate(raw or []):
        p = f"{path}[{i}]"
        if not isinstance(item, dict):
            raise SchemaError(p, "must be a mapping")
        executive = item.get("executive")
        try:
            exec_kind = ExecutiveKind(str(executive).upper())
        except ValueError:
            raise SchemaError(_join(p, "executive"), "must be PLACEMENT or SCALING")
        program = item.get("program")
        if not isinstance(program, str) or not program:
            raise SchemaError(_join(p, "program"), "must be a non-empty artifact path")
        refs.append(ManagerRef(kind=kind, executive=exec_kind, program_artifact=program))
    return tuple(refs)


def _parse_endpoint(raw, path: str) -> Endpoint:
    if not isinstance(raw, str) or not raw:
        raise SchemaError(path, "endpoint must be a non-empty string")
    if ":" in raw:
        vnf, _, cp = raw.partition(":")
        if not vnf or not cp or ":" in cp:
            raise SchemaError(path, f"malformed endpoint {raw!r}, expected vnf:cp")
        return Endpoint(vnf=vnf, cp=cp)
    return Endpoint(vnf=None, cp=raw)


def _require_str(data: dict, key: str, path: str = "") -> str:
    value = data.get(key)
    if not isinstance(value, str) or not value:
        raise SchemaError(_join(path, key), "required non-empty string")
    return value


def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def _extras(data: dict, known: set[str]) -> tuple[tuple[str, object], ...]:
    return tuple((k, data[k]) for k in data if k not in known)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def serialize_descriptor(descriptor: Descriptor) -> str:
    """Renders a descriptor back to YAML; parse(serialize(d)) == d."""
    if isinstance(descriptor, FunctionDescriptor):
        data = {
            "descriptor_kind": "function",
            "vendor": descriptor.vendor,
            "name": descriptor.name,
            "version": descriptor.version,
            "deployment_units": [
                {"image_ref": du.image_ref, "resources": du.resources.to_dict()}
                for du in descriptor.deployment_units
            ],
            "connection_points": list(descriptor.connection_points),
        }
        if descriptor.monitoring:
            data["monitoring"] = _dump_monitoring(descriptor.monitoring)
        if descriptor.fsm_refs:
            data["fsm_refs"] = _dump_manager_refs(descriptor.fsm_refs)
    else:
        data = {
            "descriptor_kind": "service",
            "vendor": descriptor.vendor,
            "name": descriptor.name,
            "version": descriptor.version,
            "functions": [ref.to_dict() for ref in descriptor.function_refs],
        }
        if descriptor.connection_points:
            data["connection_points"] = list(descriptor.connection_points)
        if descriptor.virtual_links:
            data["virtual_links"] = [[str(a), str(b)] for a, b in descriptor.virtual_links]
        if descriptor.forwarding_graph:
            data["forwarding_graph"] = [str(ep) for ep in descriptor.forwarding_graph]
        if descriptor.monitoring:
            data["monitoring"] = _dump_monitoring(descriptor.monitoring)
        if descriptor.ssm_refs:
            data["ssm_refs"] = _dump_manager_refs(descriptor.ssm_refs)
        if descriptor.placement_requirements is not None:
            data["placement_requirements"] = list(descriptor.placement_requirements)
    for key, value in descriptor.extras:
        data[key] = value
    return yaml.safe_dump(data, sort_keys=False)


def _dump_monitoring(specs: Iterable[MonitoringMetricSpec]) -> list[dict]:
    out = []
    for spec in specs:
        item: dict = {
            "metric": spec.metric_name,
            "unit": spec.unit,
            "interval_s": spec.collection_interval_s,
        }
        if spec.threshold is not None:
            item["threshold"] = {"operator": spec.threshold[0], "value": spec.threshold[1]}
        out.append(item)
    return out


def _dump_manager_refs(refs: Iterable[ManagerRef]) -> list[dict]:
    return [{"executive": r.executive.value, "program": r.program_artifact} for r in refs]


# ---------------------------------------------------------------------------
# cross validation and chain resolution
# ---------------------------------------------------------------------------

class Severity(str, Enum):
    ERROR = "ERROR"
    WARNING = "WARNING"


@dataclass(frozen=True)
class Finding:
    severity: Severity
    code: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    findings: tuple[Finding, ...]

    @property
    def errors(self) -> tuple[Finding, ...]:
        return tuple(f for f in self.findings if f.severity is Severity.ERROR)

    @property
    def ok(self) -> bool:
        return not self.errors


def validate_service(
    nsd: ServiceDescriptor, vnfds: Iterable[FunctionDescriptor]
) -> ValidationReport:
    """Cross-checks a service descriptor against a set of function descriptors.

    Problems are report findings, never exceptions.  Adding descriptors to
    `vnfds` can only remove findings, never add them.
    """
    catalogue = {v.identity: v for v in vnfds}
    findings: list[Finding] = []

    if not nsd.function_refs:
        findings.append(
            Finding(Severity.ERROR, "empty-service", "service references no functions")
        )

    by_name: dict[str, list[Identity]] = {}
    resolved: dict[str, FunctionDescriptor] = {}
    for ref in nsd.function_refs:
        by_name.setdefault(ref.name, []).append(ref)
        vnfd = catalogue.get(ref)
        if vnfd is None:
            findings.append(
                Finding(
                    Severity.ERROR,
                    "unresolved-function-reference",
                    f"no function descriptor with identity {ref}",
                )
            )
        else:
            resolved[ref.name] = vnfd
    for name, refs in by_name.items():
        if len(refs) > 1:
            findings.append(
                Finding(
                    Severity.ERROR,
                    "ambiguous-function-name",
                    f"function name {name!r} referenced {len(refs)} times; "
                    "endpoints cannot be resolved unambiguously",
                )
            )

    referenced_names = set(by_name)

    def check_endpoint(ep: Endpoint, where: str) -> None:
        if ep.is_service_level:
            if ep.cp not in nsd.connection_points:
                findings.append(
                    Finding(
                        Severity.ERROR,
                        "unknown-connection-point",
                        f"{where}: service-level connection point {ep.cp!r} is not declared",
                    )
                )
            return
        if ep.vnf not in referenced_names:
            findings.append(
                Finding(
                    Severity.ERROR,
                    "unknown-function",
                    f"{where}: endpoint {ep} names a function the service does not reference",
                )
            )
            return
        vnfd = resolved.get(ep.vnf)
        if vnfd is not None and ep.cp not in vnfd.connection_points:
            findings.append(
                Finding(
                    Severity.ERROR,
                    "unknown-connection-point",
                    f"{where}: {ep.vnf!r} declares no connection point {ep.cp!r}",
                )
            )

    for i, (a, b) in enumerate(nsd.virtual_links):
        check_endpoint(a, f"virtual_links[{i}]")
        check_endpoint(b, f"virtual_links[{i}]")
    for i, ep in enumerate(nsd.forwarding_graph):
        check_endpoint(ep, f"forwarding_graph[{i}]")

    for i, ref in enumerate(nsd.ssm_refs):
        if not ref.program_artifact:
            findings.append(
                Finding(Severity.ERROR, "empty-ssm-artifact", f"ssm_refs[{i}] has no artifact path")
            )

    # Unused service-level connection points are suspicious but harmless.
    used_cps = {ep.cp for ep in nsd.forwarding_graph if ep.is_service_level}
    used_cps.update(
        ep.cp for link in nsd.virtual_links for ep in link if ep.is_service_level
    )
    for cp in nsd.connection_points:
        if cp not in used_cps:
            findings.append(
                Finding(
                    Severity.WARNING,
                    "unused-connection-point",
                    f"service-level connection point {cp!r} appears in no link or graph",
                )
            )

    return ValidationReport(tuple(findings))


@dataclass(frozen=True)
class ChainHop:
    """One forwarding-graph hop bound to its owning function (or the service
    boundary for ingress/egress hops)."""

    vnf: Optional[Identity]
    cp: str

    @property
    def is_service_boundary(self) -> bool:
        return self.vnf is None


def resolve_chain(
    nsd: ServiceDescriptor, vnfds: Iterable[FunctionDescriptor]
) -> tuple[ChainHop, ...]:
    """Binds every forwarding-graph endpoint to its owning function.

    Requires a service that validates without errors; order and length of the
    graph are preserved.
    """
    report = validate_service(nsd, vnfds)
    if not report.ok:
        raise UnresolvedEndpoint(
            "; ".join(f.message for f in report.errors) or "validation failed"
        )
    by_name = {ref.name: ref for ref in nsd.function_refs}
    hops = []
    for ep in nsd.forwarding_graph:
        if ep.is_service_level:
            hops.append(ChainHop(vnf=None, cp=ep.cp))
        else:
            hops.append(ChainHop(vnf=by_name[ep.vnf], cp=ep.cp))
    return tuple(hops)
