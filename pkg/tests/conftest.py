from __future__ import annotations

import textwrap
from pathlib import Path

import pytest

from son.gatekeeper import Principal, Role
from son.infrastructure import PoP
from son.platform import PlatformConfig, ServicePlatform
from son.resources import Resources

FAST_CONFIG = PlatformConfig(
    step_timeout_s=5.0,
    heartbeat_interval_s=2.0,
    max_replicas=5,
    delegation_timeout_s=15.0,
)


def make_pop(pop_id: str, cpu: int = 8, mem: int = 8192, storage: int = 100, **latency) -> PoP:
    latency.setdefault("user", 10.0)
    return PoP(
        pop_id=pop_id,
        capacity=Resources(cpu_cores=cpu, memory_mb=mem, storage_gb=storage),
        latency_ms={k.replace("_", "-"): float(v) for k, v in latency.items()},
    )


@pytest.fixture
def platform_factory():
    platforms: list[ServicePlatform] = []

    def build(pops=None, principals=None, config=FAST_CONFIG, **kwargs) -> ServicePlatform:
        platform = ServicePlatform(
            pops=pops if pops is not None else [make_pop("pop-a"), make_pop("pop-b", user=5.0)],
            principals=principals,
            config=config,
            **kwargs,
        )
        platforms.append(platform)
        return platform

    yield build
    for platform in platforms:
        platform.close()


def vnfd_text(
    name: str = "firewall",
    vendor: str = "acme",
    version: str = "1.0.0",
    cpu: int = 1,
    mem: int = 512,
    storage: int = 0,
    cps: tuple[str, ...] = ("in", "out"),
    monitoring: str = "",
    fsm_refs: str = "",
) -> str:
    cp_list = ", ".join(cps)
    return textwrap.dedent(
        f"""\
        descriptor_kind: function
        vendor: {vendor}
        name: {name}
        version: {version}
        deployment_units:
          - image_ref: images/{name}.img
            resources: {{cpu_cores: {cpu}, memory_mb: {mem}, storage_gb: {storage}}}
        connection_points: [{cp_list}]
        """
    ) + monitoring + fsm_refs


def nsd_text(
    name: str = "chain",
    vendor: str = "acme",
    version: str = "1.0.0",
    functions: tuple[str, ...] = ("firewall",),
    function_vendor: str = "acme",
    function_version: str = "1.0.0",
    cps: tuple[str, ...] = (),
    links: tuple[tuple[str, str], ...] = (),
    graph: tuple[str, ...] = (),
    ssm_refs: str = "",
    extra: str = "",
) -> str:
    lines = [
        "descriptor_kind: service",
        f"vendor: {vendor}",
        f"name: {name}",
        f"version: {version}",
        "functions:",
    ]
    for fn in functions:
        lines.append(
            f"  - {{vendor: {function_vendor}, name: {fn}, version: {function_version}}}"
        )
    if cps:
        lines.append(f"connection_points: [{', '.join(cps)}]")
    if links:
        lines.append("virtual_links:")
        for a, b in links:
            lines.append(f"  - [{a}, {b}]")
    if graph:
        lines.append("forwarding_graph: [" + ", ".join(graph) + "]")
    return "\n".join(lines) + "\n" + ssm_refs + extra


def write_workspace(root: Path, files: dict[str, str | bytes]) -> Path:
    """Materializes workspace files; adds a config file when absent."""
    root.mkdir(parents=True, exist_ok=True)
    if "workspace.yml" not in files:
        files = {"workspace.yml": "endpoint: ''\ntoken: ''\n", **files}
    for rel, content in files.items():
        path = root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(content, bytes):
            path.write_bytes(content)
        else:
            path.write_text(content, encoding="utf-8")
    return root


def simple_workspace_files(
    cpu: int = 1, mem: int = 512, ssm: str | None = None, image: bytes = b"image-bytes\n"
) -> dict[str, str | bytes]:
    """A minimal one-function service workspace, optionally with a placement
    strategy program."""
    ssm_refs = ""
    files: dict[str, str | bytes] = {}
    if ssm is not None:
        ssm_refs = "ssm_refs:\n  - {executive: PLACEMENT, program: ssm/placement.ssm}\n"
        files["ssm/placement.ssm"] = ssm
    files["descriptors/firewall.yml"] = vnfd_text(cpu=cpu, mem=mem)
    files["descriptors/chain.yml"] = nsd_text(
        cps=("ingress", "egress"),
        links=(("ingress", "firewall:in"), ("firewall:out", "egress")),
        graph=("ingress", "firewall:in", "firewall:out", "egress"),
        ssm_refs=ssm_refs,
    )
    files["images/firewall.img"] = image
    return files


def install_service(
    platform: ServicePlatform, nsd_texts: list[str], vnfd_texts: list[str], package_id: str = ""
) -> str:
    """Registers descriptors straight into the catalogue (no package needed);
    returns the service identity key of the first service."""
    from son.descriptors import parse_descriptor
    from son.gatekeeper import CataloguePackage
    from son.packaging import PackageMode

    services = {}
    functions = {}
    for text in nsd_texts:
        nsd = parse_descriptor(text)
        services[str(nsd.identity)] = nsd
    for text in vnfd_texts:
        vnfd = parse_descriptor(text)
        functions[vnfd.name] = vnfd
    package = CataloguePackage(
        package_id=package_id or f"direct-{len(platform.catalogue._packages)}",
        archive=b"",
        mode=PackageMode.FAT,
        owner="developer",
        services=services,
        functions=functions,
        programs={},
    )
    platform.catalogue.add(package)
    return next(iter(services))
