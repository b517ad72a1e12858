"""Slim/fat service packages: build, verify, extract.

A ``.sonpkg`` is a deterministic USTAR archive whose first entry is the
manifest at ``manifest.yml``; remaining entries follow in lexicographic path
order with all timestamps fixed to epoch 0.  Slim packages externalize image
payloads: the manifest records a digest and an external reference instead of
embedded bytes.  Packing is a pure function of (workspace content, mode), so
content-identical workspaces produce byte-identical packages.
"""

from __future__ import annotations

import hashlib
import io
import tarfile
from dataclasses import dataclass
from enum import Enum
from pathlib import Path, PurePosixPath
from typing import Optional

import yaml

from son.descriptors import (
    FunctionDescriptor,
    ServiceDescriptor,
    ValidationReport,
    parse_descriptor,
    validate_service,
)
from son.errors import PlatformError

MANIFEST_PATH = "manifest.yml"
PACKAGE_SUFFIX = ".sonpkg"
FORMAT_VERSION = 1


class PackageError(PlatformError):
    pass


class InvalidWorkspace(PackageError):
    pass


class ValidationFailed(PackageError):
    def __init__(self, report: ValidationReport):
        super().__init__(
            "workspace descriptors failed validation: "
            + "; ".join(f.message for f in report.errors)
        )
        self.report = report


class CorruptArchive(PackageError):
    pass


class DigestMismatch(PackageError):
    def __init__(self, path: str):
        super().__init__(f"digest mismatch for entry {path!r}")
        self.path = path


class PathEscape(PackageError):
    def __init__(self, path: str):
        super().__init__(f"entry path escapes the destination: {path!r}")
        self.path = path


class PackageMode(str, Enum):
    SLIM = "slim"
    FAT = "fat"


class EntryKind(str, Enum):
    DESCRIPTOR = "descriptor"
    SSM_PROGRAM = "ssm_program"
    IMAGE = "image"
    OTHER = "other"


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    kind: EntryKind
    digest: str
    external_ref: Optional[str] = None


@dataclass(frozen=True)
class PackageManifest:
    format_version: int
    mode: PackageMode
    entries: tuple[ManifestEntry, ...]

    def entry(self, path: str) -> Optional[ManifestEntry]:
        for e in self.entries:
            if e.path == path:
                return e
        return None


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def package_id(archive: bytes) -> str:
    """Content address of a package: the SHA-256 of the archive bytes."""
    return sha256_hex(archive)


# ---------------------------------------------------------------------------
# build
# ---------------------------------------------------------------------------

#: Files excluded from packages: workspace configuration and hidden files.
_EXCLUDED = {"workspace.yml"}


def classify_entry(path: str) -> EntryKind:
    p = PurePosixPath(path)
    if p.parts and p.parts[0] == "images":
        return EntryKind.IMAGE
    if p.suffix in (".yml", ".yaml") and p.parts and p.parts[0] == "descriptors":
        return EntryKind.DESCRIPTOR
    if p.suffix == ".ssm":
        return EntryKind.SSM_PROGRAM
    return EntryKind.OTHER


def build_package(
    workspace: Path | str, mode: PackageMode | str = PackageMode.FAT
) -> bytes:
    """Packs a workspace directory into deterministic archive bytes.

    The workspace must contain at least one service descriptor that validates
    against the bundled function descriptors.
    """
    mode = PackageMode(mode)
    root = Path(workspace)
    if not root.is_dir():
        raise InvalidWorkspace(f"{root} is not a directory")

    files: dict[str, bytes] = {}
    for path in sorted(root.rglob("*")):
        if not path.is_file():
            continue
        rel = path.relative_to(root).as_posix()
        if rel in _EXCLUDED or any(part.startswith(".") for part in Path(rel).parts):
            continue
        files[rel] = path.read_bytes()
    if not files:
        raise InvalidWorkspace("workspace contains no package content")

    _validate_workspace_descriptors(files)

    entries = []
    for rel in sorted(files):
        kind = classify_entry(rel)
        external_ref = None
        if mode is PackageMode.SLIM and kind is EntryKind.IMAGE:
            external_ref = f"artifact://{rel}"
        entries.append(
            ManifestEntry(path=rel, kind=kind, digest=sha256_hex(files[rel]), external_ref=external_ref)
        )
    manifest = PackageManifest(FORMAT_VERSION, mode, tuple(entries))
    return _encode_archive(manifest, files)


def _validate_workspace_descriptors(files: dict[str, bytes]) -> None:
    services: list[ServiceDescriptor] = []
    functions: list[FunctionDescriptor] = []
    for rel, data in files.items():
        if classify_entry(rel) is not EntryKind.DESCRIPTOR:
            continue
        try:
            descriptor = parse_descriptor(data.decode("utf-8"))
        except PlatformError as exc:
            raise InvalidWorkspace(f"{rel}: {exc}") from exc
        if isinstance(descriptor, ServiceDescriptor):
            services.append(descriptor)
        else:
            functions.append(descriptor)
    if not services:
        raise InvalidWorkspace("workspace contains no service descriptor")
    for nsd in services:
        report = validate_service(nsd, functions)
        if not report.ok:
            raise ValidationFailed(report)


def _manifest_to_yaml(manifest: PackageManifest) -> bytes:
    entries = []
    for e in manifest.entries:
        item = {"path": e.path, "kind": e.kind.value, "digest": e.digest}
        if e.external_ref is not None:
            item["external_ref"] = e.external_ref
        entries.append(item)
    doc = {
        "format_version": manifest.format_version,
        "mode": manifest.mode.value,
        "entries": entries,
    }
    return yaml.safe_dump(doc, sort_keys=True).encode("utf-8")


def _manifest_from_yaml(data: bytes) -> PackageManifest:
    try:
        doc = yaml.safe_load(data.decode("utf-8"))
        entries = tuple(
            ManifestEntry(
                path=str(item["path"]),
                kind=EntryKind(item["kind"]),
                digest=str(item["digest"]),
                external_ref=item.get("external_ref"),
            )
            for item in doc["entries"]
        )
        return PackageManifest(int(doc["format_version"]), PackageMode(doc["mode"]), entries)
    except (KeyError, TypeError, ValueError, AttributeError, yaml.YAMLError) as exc:
        raise CorruptArchive(f"unreadable manifest: {exc}") from exc


def _encode_archive(manifest: PackageManifest, files: dict[str, bytes]) -> bytes:
    buffer = io.BytesIO()
    with tarfile.open(fileobj=buffer, mode="w", format=tarfile.USTAR_FORMAT) as tar:
        _add_entry(tar, MANIFEST_PATH, _manifest_to_yaml(manifest))
        for entry in manifest.entries:
            if manifest.mode is PackageMode.SLIM and entry.kind is EntryKind.IMAGE:
                continue
            _add_entry(tar, entry.path, files[entry.path])
    return buffer.getvalue()


def _add_entry(tar: tarfile.TarFile, path: str, data: bytes) -> None:
    info = tarfile.TarInfo(name=path)
    info.size = len(data)
    info.mtime = 0
    info.uid = 0
    info.gid = 0
    info.uname = ""
    info.gname = ""
    info.mode = 0o644
    tar.addfile(info, io.BytesIO(data))


# ---------------------------------------------------------------------------
# verify / extract
# ---------------------------------------------------------------------------

def verify_package(archive: bytes) -> PackageManifest:
    """Checks archive integrity and returns the manifest.

    Every embedded entry must hash to its manifest digest and the archive
    must be byte-identical to its canonical re-encoding, so any corruption
    is detected even in regions tar itself ignores.
    """
    manifest, files = _decode_archive(archive)
    for entry in manifest.entries:
        if entry.path in files:
            if sha256_hex(files[entry.path]) != entry.digest:
                raise DigestMismatch(entry.path)
        else:
            if manifest.mode is not PackageMode.SLIM or entry.kind is not EntryKind.IMAGE:
                raise CorruptArchive(f"entry {entry.path!r} missing from archive")
            if not entry.external_ref:
                raise CorruptArchive(f"slim image {entry.path!r} has no external_ref")
    if _encode_archive(manifest, files) != archive:
        raise CorruptArchive("archive is not in canonical form")
    return manifest


def _decode_archive(archive: bytes) -> tuple[PackageManifest, dict[str, bytes]]:
    try:
        tar = tarfile.open(fileobj=io.BytesIO(archive), mode="r:")
    except tarfile.TarError as exc:
        raise CorruptArchive(str(exc)) from exc
    with tar:
        names: list[str] = []
        contents: dict[str, bytes] = {}
        try:
            for member in tar:
                if not member.isfile():
                    raise CorruptArchive(f"non-file entry {member.name!r}")
                fh = tar.extractfile(member)
                if fh is None:
                    raise CorruptArchive(f"unreadable entry {member.name!r}")
                names.append(member.name)
                contents[member.name] = fh.read()
        except tarfile.TarError as exc:
            raise CorruptArchive(str(exc)) from exc
    if not names or names[0] != MANIFEST_PATH:
        raise CorruptArchive(f"first entry must be {MANIFEST_PATH}")
    manifest = _manifest_from_yaml(contents.pop(MANIFEST_PATH))

    declared = [e.path for e in manifest.entries]
    if len(set(declared)) != len(declared):
        raise CorruptArchive("duplicate entry paths in manifest")
    for path in declared:
        _check_safe_path(path)
    for name in contents:
        if manifest.entry(name) is None:
            raise CorruptArchive(f"archive entry {name!r} not in manifest")
    return manifest, contents


def _check_safe_path(path: str) -> None:
    p = PurePosixPath(path)
    if p.is_absolute() or ".." in p.parts or not p.parts:
        raise PathEscape(path)


def extract_package(archive: bytes, destination: Path | str) -> PackageManifest:
    """Verifies the archive, then writes its embedded entries to disk."""
    manifest = verify_package(archive)
    _, files = _decode_archive(archive)
    dest = Path(destination).resolve()
    dest.mkdir(parents=True, exist_ok=True)
    for path, data in files.items():
        target = (dest / path).resolve()
        if not target.is_relative_to(dest):
            raise PathEscape(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(data)
    return manifest
