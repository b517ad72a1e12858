"""Developer workspace: the directory holding all service artifacts.

Layout created by ``son init``::

    workspace.yml      tool configuration (platform endpoint, token)
    descriptors/       service and function descriptors
    ssm/               strategy programs (.ssm)
    images/            artifact payloads referenced by deployment units
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from son import dsl
from son.descriptors import (
    FunctionDescriptor,
    ManagerRef,
    ServiceDescriptor,
    parse_descriptor,
    validate_service,
)
from son.errors import PlatformError

CONFIG_NAME = "workspace.yml"


class WorkspaceError(PlatformError):
    pass


class NotEmpty(WorkspaceError):
    pass


_SKELETON_VNFD = """\
descriptor_kind: function
vendor: example
name: frontend
version: 0.1.0
deployment_units:
  - image_ref: images/frontend.img
    resources:
      cpu_cores: 1
      memory_mb: 512
      storage_gb: 1
connection_points: [input, output]
monitoring:
  - metric: cpu_load
    unit: ratio
    interval_s: 5.0
    threshold:
      operator: ">"
      value: 0.9
"""

_SKELETON_NSD = """\
descriptor_kind: service
vendor: example
name: demo-service
version: 0.1.0
functions:
  - {vendor: example, name: frontend, version: 0.1.0}
connection_points: [ingress, egress]
virtual_links:
  - [ingress, frontend:input]
  - [frontend:output, egress]
forwarding_graph: [ingress, frontend:input, frontend:output, egress]
ssm_refs:
  - {executive: PLACEMENT, program: ssm/placement.ssm}
"""

_SKELETON_SSM = "score = -latency_ms\n"

_SKELETON_CONFIG = """\
endpoint: http://127.0.0.1:8080
token: change-me
"""

_SKELETON_PROFILE = """\
metric: cpu_load
base: 0.5
amplitude: 0.5
period_ticks: 40
noise_seed: 7
noise_amplitude: 0.0
"""


@dataclass
class Workspace:
    root: Path
    endpoint: str = ""
    token: str = ""

    @property
    def descriptor_dir(self) -> Path:
        return self.root / "descriptors"

    @property
    def ssm_dir(self) -> Path:
        return self.root / "ssm"


def init_workspace(path: Path | str) -> Workspace:
    """Creates a workspace skeleton with a deployable example service."""
    root = Path(path)
    if root.exists() and any(root.iterdir()):
        raise NotEmpty(f"{root} is not empty")
    (root / "descriptors").mkdir(parents=True)
    (root / "ssm").mkdir()
    (root / "images").mkdir()
    (root / CONFIG_NAME).write_text(_SKELETON_CONFIG, encoding="utf-8")
    (root / "descriptors" / "frontend-vnfd.yml").write_text(_SKELETON_VNFD, encoding="utf-8")
    (root / "descriptors" / "demo-service.yml").write_text(_SKELETON_NSD, encoding="utf-8")
    (root / "ssm" / "placement.ssm").write_text(_SKELETON_SSM, encoding="utf-8")
    (root / "images" / "frontend.img").write_bytes(b"example image payload\n")
    (root / "profile.yml").write_text(_SKELETON_PROFILE, encoding="utf-8")
    return load_workspace(root)


def load_workspace(path: Path | str) -> Workspace:
    root = Path(path)
    config_path = root / CONFIG_NAME
    if not config_path.is_file():
        raise WorkspaceError(f"{root} is not a workspace (missing {CONFIG_NAME})")
    config = yaml.safe_load(config_path.read_text(encoding="utf-8")) or {}
    return Workspace(
        root=root,
        endpoint=str(config.get("endpoint", "")),
        token=str(config.get("token", "")),
    )


@dataclass
class WorkspaceIssue:
    path: str
    severity: str  # ERROR | WARNING
    message: str


@dataclass
class WorkspaceValidation:
    issues: list[WorkspaceIssue] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not any(i.severity == "ERROR" for i in self.issues)


def validate_workspace(workspace: Workspace) -> WorkspaceValidation:
    """Parses and cross-validates every descriptor and strategy program."""
    result = WorkspaceValidation()
    services: list[tuple[str, ServiceDescriptor]] = []
    functions: list[FunctionDescriptor] = []
    referenced_programs: dict[str, ManagerRef] = {}

    for path in sorted(workspace.descriptor_dir.glob("*.yml")) + sorted(
        workspace.descriptor_dir.glob("*.yaml")
    ):
        rel = path.relative_to(workspace.root).as_posix()
        try:
            descriptor = parse_descriptor(path.read_text(encoding="utf-8"))
        except PlatformError as exc:
            result.issues.append(WorkspaceIssue(rel, "ERROR", str(exc)))
            continue
        if isinstance(descriptor, ServiceDescriptor):
            services.append((rel, descriptor))
            for ref in descriptor.ssm_refs:
                referenced_programs[ref.program_artifact] = ref
        else:
            functions.append(descriptor)
            for ref in descriptor.fsm_refs:
                referenced_programs[ref.program_artifact] = ref

    if not services:
        result.issues.append(
            WorkspaceIssue("descriptors/", "ERROR", "workspace contains no service descriptor")
        )
    for rel, nsd in services:
        report = validate_service(nsd, functions)
        for finding in report.findings:
            result.issues.append(WorkspaceIssue(rel, finding.severity.value, finding.message))

    for rel_program, ref in sorted(referenced_programs.items()):
        program_path = workspace.root / rel_program
        if not program_path.is_file():
            result.issues.append(
                WorkspaceIssue(rel_program, "ERROR", "referenced program file is missing")
            )
            continue
        kind = (
            dsl.ProgramKind.PLACEMENT
            if ref.executive.value == "PLACEMENT"
            else dsl.ProgramKind.SCALING
        )
        try:
            dsl.parse_ssm(program_path.read_text(encoding="utf-8"), kind)
        except dsl.ParseError as exc:
            result.issues.append(WorkspaceIssue(rel_program, "ERROR", str(exc)))

    for path in sorted(workspace.ssm_dir.glob("*.ssm")):
        rel = path.relative_to(workspace.root).as_posix()
        if rel in referenced_programs:
            continue
        source = path.read_text(encoding="utf-8")
        try:
            dsl.parse_ssm(source, dsl.ProgramKind.PLACEMENT)
        except dsl.ParseError:
            try:
                dsl.parse_ssm(source, dsl.ProgramKind.SCALING)
            except dsl.ParseError as exc:
                result.issues.append(WorkspaceIssue(rel, "ERROR", str(exc)))

    return result
