"""JSON-lines instance files with a sidecar manifest.

File layout: one header line ``{"format": ..., "version": ..., "env": ...}``
followed by one canonical JSON object per instance (sorted keys, shortest
round-trip floats). The manifest ``<file>.manifest.json`` records the
generator parameters and a sha256 of the instance file.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .envs import instance_from_dict

FORMAT = "parallel_ar.instances"
FORMAT_VERSION = 1
GENERATOR_VERSION = "1"


class InstanceFormatError(ValueError):
    pass


@dataclass
class DatasetManifest:
    env: str
    count: int
    sha256: str
    seed: int | None = None
    params: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION
    generator_version: str = GENERATOR_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_instances(instances, path, seed: int | None = None, params: dict | None = None) -> DatasetManifest:
    if not instances:
        raise ValueError("nothing to write")
    kinds = {inst.kind for inst in instances}
    if len(kinds) != 1:
        raise ValueError(f"mixed instance types {sorted(kinds)}")
    env = kinds.pop()
    lines = [canonical_json({"format": FORMAT, "version": FORMAT_VERSION, "env": env})]
    lines += [canonical_json(inst.to_dict()) for inst in instances]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(("\n".join(lines) + "\n").encode())
    manifest = DatasetManifest(env=env, count=len(instances), sha256=sha256_file(path), seed=seed,
                               params=params or {})
    manifest_path(path).write_text(manifest.to_json())
    return manifest


def read_manifest(path) -> DatasetManifest | None:
    mp = manifest_path(path)
    if not mp.exists():
        return None
    d = json.loads(mp.read_text())
    if d.get("format_version") != FORMAT_VERSION:
        raise InstanceFormatError(f"{mp}: manifest format version {d.get('format_version')} "
                                  f"not supported (reader is version {FORMAT_VERSION})")
    return DatasetManifest(**d)


def read_instances(path, verify_manifest: bool = True) -> list:
    path = Path(path)
    raw = path.read_bytes()
    offset, items, header = 0, [], None
    for line in raw.split(b"\n"):
        start = offset
        offset += len(line) + 1
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise InstanceFormatError(f"{path}: malformed JSON at byte offset {start + exc.pos}: {exc.msg}") from None
        if header is None:
            if obj.get("format") != FORMAT:
                raise InstanceFormatError(f"{path}: missing instance-file header at byte offset {start}")
            if obj.get("version") != FORMAT_VERSION:
                raise InstanceFormatError(f"{path}: format version {obj.get('version')} not supported "
                                          f"(reader is version {FORMAT_VERSION})")
            header = obj
            continue
        if obj.get("type") != header["env"]:
            raise InstanceFormatError(f"{path}: instance of type {obj.get('type')!r} at byte offset {start} "
                                      f"in a {header['env']} file")
        try:
            items.append(instance_from_dict(obj))
        except (KeyError, ValueError, TypeError) as exc:
            raise InstanceFormatError(f"{path}: invalid instance at byte offset {start}: {exc}") from None
    if header is None:
        raise InstanceFormatError(f"{path}: empty instance file")
    if verify_manifest:
        manifest = read_manifest(path)
        if manifest is not None:
            digest = hashlib.sha256(raw).hexdigest()
            if digest != manifest.sha256:
                raise InstanceFormatError(f"{path}: content hash {digest[:12]} does not match "
                                          f"manifest {manifest.sha256[:12]}")
            if manifest.count != len(items):
                raise InstanceFormatError(f"{path}: {len(items)} instances but manifest says {manifest.count}")
    return items


def file_env(path) -> str:
    """Environment named in an instance file's header."""
    with open(path, "rb") as fh:
        first = fh.readline()
    try:
        head = json.loads(first)
    except json.JSONDecodeError as exc:
        raise InstanceFormatError(f"{path}: malformed header at byte offset {exc.pos}") from None
    if head.get("format") != FORMAT:
        raise InstanceFormatError(f"{path}: missing instance-file header at byte offset 0")
    return head["env"]
