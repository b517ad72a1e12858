"""The `son` command-line toolchain.

Scriptable by design: no prompts, exit code 0 on success, 1 on any command
failure (validation findings, API errors, lifecycle errors), 2 on usage
errors.  `--format json` switches every command to machine-readable output.
"""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import click
import yaml

from son import __version__
from son.errors import PlatformError
from son.gatekeeper import Principal, Role
from son.http import ApiServer, HttpEndpoint
from son.infrastructure import load_topology
from son.packaging import PackageMode, build_package, package_id
from son.platform import PlatformConfig, ServicePlatform
from son.plugins import load_policy
from son.sdk.client import PlatformClient
from son.sdk.profiling import load_profile, run_profile
from son.sdk.workspace import (
    Workspace,
    init_workspace,
    load_workspace,
    validate_workspace,
)


class _Context:
    def __init__(self) -> None:
        self.endpoint: str | None = None
        self.token: str | None = None
        self.format: str = "table"


pass_context = click.make_pass_decorator(_Context, ensure=True)


def _emit(ctx: _Context, doc, table_lines=None) -> None:
    if ctx.format == "json":
        click.echo(json.dumps(doc, indent=2, sort_keys=True))
    else:
        for line in table_lines if table_lines is not None else _default_table(doc):
            click.echo(line)


def _default_table(doc) -> list[str]:
    if isinstance(doc, dict):
        width = max((len(str(k)) for k in doc), default=0)
        return [f"{str(k):<{width}}  {_cell(v)}" for k, v in doc.items()]
    if isinstance(doc, list):
        return [_cell(item) for item in doc]
    return [str(doc)]


def _cell(value) -> str:
    if isinstance(value, (dict, list)):
        return json.dumps(value, sort_keys=True)
    return str(value)


def _client(ctx: _Context, workspace_dir: str | None = None) -> PlatformClient:
    endpoint = ctx.endpoint
    token = ctx.token
    if (not endpoint or not token) and workspace_dir is not None:
        try:
            workspace = load_workspace(workspace_dir)
            endpoint = endpoint or workspace.endpoint
            token = token or workspace.token
        except PlatformError:
            pass
    if not endpoint:
        raise click.ClickException("no platform endpoint configured (--endpoint or workspace.yml)")
    return PlatformClient(HttpEndpoint(endpoint), token or "")


def _fail(message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


@click.group()
@click.version_option(__version__)
@click.option("--endpoint", help="Platform API base URL (overrides workspace config).")
@click.option("--token", help="Bearer token (overrides workspace config).")
@click.option(
    "--format",
    "output_format",
    type=click.Choice(["table", "json"]),
    default="table",
    show_default=True,
)
@pass_context
def main(ctx: _Context, endpoint, token, output_format) -> None:
    """Service programming and orchestration toolchain."""
    ctx.endpoint = endpoint
    ctx.token = token
    ctx.format = output_format


@main.command()
@click.argument("path", type=click.Path(path_type=Path))
@pass_context
def init(ctx: _Context, path: Path) -> None:
    """Create a workspace skeleton with an example service."""
    try:
        workspace = init_workspace(path)
    except PlatformError as exc:
        _fail(str(exc))
    _emit(ctx, {"workspace": str(workspace.root), "created": True})


@main.command()
@click.option("--workspace", "-w", "workspace_dir", default=".", show_default=True)
@pass_context
def validate(ctx: _Context, workspace_dir: str) -> None:
    """Parse and cross-check every descriptor and strategy program."""
    try:
        workspace = load_workspace(workspace_dir)
    except PlatformError as exc:
        _fail(str(exc))
    result = validate_workspace(workspace)
    doc = {
        "ok": result.ok,
        "issues": [
            {"path": i.path, "severity": i.severity, "message": i.message} for i in result.issues
        ],
    }
    _emit(
        ctx,
        doc,
        [f"{i.severity:<7} {i.path}: {i.message}" for i in result.issues]
        + [f"validation {'passed' if result.ok else 'failed'}"],
    )
    sys.exit(0 if result.ok else 1)


@main.command("package")
@click.option("--workspace", "-w", "workspace_dir", default=".", show_default=True)
@click.option("--mode", type=click.Choice(["slim", "fat"]), default="fat", show_default=True)
@click.option("--out", type=click.Path(path_type=Path), default=None)
@pass_context
def package_cmd(ctx: _Context, workspace_dir: str, mode: str, out: Path | None) -> None:
    """Pack the workspace into a .sonpkg archive."""
    try:
        workspace = load_workspace(workspace_dir)
        archive = build_package(workspace.root, PackageMode(mode))
    except PlatformError as exc:
        _fail(str(exc))
    pid = package_id(archive)
    if out is None:
        out = Path(workspace_dir) / f"{Path(workspace_dir).resolve().name}-{mode}.sonpkg"
    out.write_bytes(archive)
    _emit(ctx, {"package": str(out), "package_id": pid, "bytes": len(archive)})


@main.command()
@click.argument("package_file", type=click.Path(exists=True, path_type=Path))
@click.option("--workspace", "-w", "workspace_dir", default=".", show_default=True)
@pass_context
def push(ctx: _Context, package_file: Path, workspace_dir: str) -> None:
    """Upload a package to the platform catalogue."""
    client = _client(ctx, workspace_dir)
    try:
        result = client.upload_package(package_file.read_bytes())
    except PlatformError as exc:
        _fail(str(exc))
    _emit(ctx, result)


@main.command()
@click.argument("package_id_arg", metavar="PACKAGE_ID")
@click.option("--workspace", "-w", "workspace_dir", default=".", show_default=True)
@click.option("--service", help="Service identity when the package holds several.")
@click.option("--slice-id", help="Deploy into this slice.")
@click.option("--pop", "pops", multiple=True, help="Restrict placement to these PoPs.")
@click.option("--no-wait", is_flag=True, help="Return immediately after the request.")
@click.option("--timeout", default=60.0, show_default=True)
@pass_context
def deploy(ctx, package_id_arg, workspace_dir, service, slice_id, pops, no_wait, timeout) -> None:
    """Instantiate a previously pushed package."""
    client = _client(ctx, workspace_dir)
    options: dict = {}
    if slice_id:
        options["slice_id"] = slice_id
    if pops:
        options["pop_restriction"] = list(pops)
    try:
        instance_id = client.instantiate(package_id_arg, service=service, options=options)
        if no_wait:
            _emit(ctx, {"instance_id": instance_id, "state": "REQUESTED"})
            return
        status = client.wait_stable(instance_id, timeout=timeout)
    except PlatformError as exc:
        _fail(str(exc))
    _emit(ctx, status)
    sys.exit(0 if status["state"] == "RUNNING" else 1)


@main.command()
@click.argument("instance_id")
@click.option("--workspace", "-w", "workspace_dir", default=".", show_default=True)
@pass_context
def status(ctx: _Context, instance_id: str, workspace_dir: str) -> None:
    """Show the lifecycle record projection of an instance."""
    client = _client(ctx, workspace_dir)
    try:
        _emit(ctx, client.status(instance_id))
    except PlatformError as exc:
        _fail(str(exc))


@main.command()
@click.argument("instance_id")
@click.option("--workspace", "-w", "workspace_dir", default=".", show_default=True)
@pass_context
def terminate(ctx: _Context, instance_id: str, workspace_dir: str) -> None:
    """Terminate an instance (idempotent)."""
    client = _client(ctx, workspace_dir)
    try:
        _emit(ctx, client.terminate(instance_id))
    except PlatformError as exc:
        _fail(str(exc))


@main.command()
@click.argument("instance_id")
@click.argument("metric")
@click.option("--from", "time_from", type=float, default=None)
@click.option("--to", "time_to", type=float, default=None)
@click.option("--follow", is_flag=True, help="Stream new samples until interrupted.")
@click.option("--workspace", "-w", "workspace_dir", default=".", show_default=True)
@pass_context
def monitor(ctx, instance_id, metric, time_from, time_to, follow, workspace_dir) -> None:
    """Query stored monitoring samples (or stream them with --follow)."""
    client = _client(ctx, workspace_dir)
    try:
        if not follow:
            series = client.metrics(instance_id, metric, time_from, time_to)
            _emit(
                ctx,
                {"metric": metric, "series": series},
                [f"{t:>12.3f}  {v:.4f}" for t, v in series],
            )
            return
        last = time_from or 0.0
        while True:
            series = client.metrics(instance_id, metric, last, None)
            for t, v in series:
                if t > last:
                    click.echo(f"{t:>12.3f}  {v:.4f}")
                    last = t
            time.sleep(1.0)
    except KeyboardInterrupt:
        return
    except PlatformError as exc:
        _fail(str(exc))


@main.command()
@click.option("--workspace", "-w", "workspace_dir", default=".", show_default=True)
@click.option("--profile", "profile_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--duration", required=True, type=int, help="Number of profiling ticks.")
@pass_context
def profile(ctx: _Context, workspace_dir: str, profile_path: Path, duration: int) -> None:
    """Deploy locally, drive a synthetic workload, and report statistics."""
    try:
        workspace = load_workspace(workspace_dir)
        report = run_profile(workspace, load_profile(profile_path), duration)
    except PlatformError as exc:
        _fail(str(exc))
    doc = report.to_dict()
    lines = [f"duration: {report.duration_ticks} ticks, final state {report.final_state}"]
    for name, stats in sorted(report.metric_stats.items()):
        lines.append(
            f"{name}: n={stats.samples} min={stats.minimum:.3f} max={stats.maximum:.3f} "
            f"mean={stats.mean:.3f} p95={stats.p95:.3f}"
        )
    lines.append(f"rule firings: {len(report.firings)}")
    for firing in report.firings:
        lines.append(
            f"  tick {firing['tick']:>4}  {firing['vnf']}: "
            f"{firing['from']} -> {firing['to']} (tier {firing['tier']}, rule {firing['rule_index']})"
        )
    _emit(ctx, doc, lines)


@main.group()
def slice() -> None:
    """Operator sub-tool for slice administration."""


@slice.command("create")
@click.option("--cpu", type=int, required=True)
@click.option("--memory", type=int, required=True)
@click.option("--storage", type=int, default=0, show_default=True)
@click.option("--mode", type=click.Choice(["flat", "nested"]), default="flat", show_default=True)
@click.option("--tenant", required=True)
@click.option("--workspace", "-w", "workspace_dir", default=".", show_default=True)
@pass_context
def slice_create(ctx, cpu, memory, storage, mode, tenant, workspace_dir) -> None:
    client = _client(ctx, workspace_dir)
    try:
        result = client.create_slice(
            {"cpu_cores": cpu, "memory_mb": memory, "storage_gb": storage},
            mode.upper(),
            tenant,
        )
    except PlatformError as exc:
        _fail(str(exc))
    _emit(ctx, result)


@slice.command("delete")
@click.argument("slice_id")
@click.option("--workspace", "-w", "workspace_dir", default=".", show_default=True)
@pass_context
def slice_delete(ctx, slice_id, workspace_dir) -> None:
    client = _client(ctx, workspace_dir)
    try:
        _emit(ctx, client.delete_slice(slice_id))
    except PlatformError as exc:
        _fail(str(exc))


@slice.command("list")
@click.option("--workspace", "-w", "workspace_dir", default=".", show_default=True)
@pass_context
def slice_list(ctx, workspace_dir) -> None:
    client = _client(ctx, workspace_dir)
    try:
        slices = client.list_slices()
    except PlatformError as exc:
        _fail(str(exc))
    _emit(
        ctx,
        {"slices": slices},
        [
            f"{s['slice_id']}  {s['mode']:<6}  tenant={s['tenant']}  "
            f"quota={_cell(s['quota'])}  used={_cell(s['used'])}"
            for s in slices
        ]
        or ["no slices"],
    )


@main.group()
def platform() -> None:
    """Run and inspect platform instances."""


@platform.command("serve")
@click.option("--topology", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8080, show_default=True)
@click.option("--principals", "principals_path", type=click.Path(exists=True, path_type=Path))
@click.option("--policy", "policy_path", type=click.Path(exists=True, path_type=Path))
@click.option("--data-dir", type=click.Path(path_type=Path))
@click.option("--tick-interval", default=1.0, show_default=True, help="Seconds between clock ticks (0 disables).")
def platform_serve(topology, host, port, principals_path, policy_path, data_dir, tick_interval):
    """Serve a platform instance over HTTP."""
    pops = load_topology(topology.read_text(encoding="utf-8"))
    principals = []
    if principals_path is not None:
        for item in yaml.safe_load(principals_path.read_text(encoding="utf-8")) or []:
            principals.append(
                Principal(str(item["id"]), Role(str(item["role"]).upper()), str(item["token"]))
            )
    policy = None
    if policy_path is not None:
        policy = load_policy(policy_path.read_text(encoding="utf-8"))

    kwargs = {"pops": pops, "principals": principals, "config": PlatformConfig()}
    if policy is not None:
        kwargs["policy"] = policy
    if data_dir is not None:
        kwargs["data_dir"] = data_dir
    instance = ServicePlatform(**kwargs)
    server = ApiServer(instance.gatekeeper, host=host, port=port)
    click.echo(f"platform {instance.platform_id} listening on {server.url}")
    if not principals:
        click.echo(f"operator token: {instance.operator_token}")
        click.echo(f"developer token: {instance.developer_token}")

    import threading

    def maintenance() -> None:
        while True:
            time.sleep(max(tick_interval, instance.config.heartbeat_interval_s))
            instance.heartbeat_all()
            instance.plugin_manager.evict_stale()
            if tick_interval > 0:
                instance.tick(dt=tick_interval)

    threading.Thread(target=maintenance, daemon=True).start()
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        instance.close()


if __name__ == "__main__":
    main()
