import datetime
import hashlib
import json
import os
import re
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, TypeVar, Union

from pydantic import BaseModel

from kyoto_shift_bench.config import config_hash
from kyoto_shift_bench.errors import ArtifactMismatch

T = TypeVar("T")
R = TypeVar("R")

ARTIFACT_FORMAT_VERSION = 1


def create_filename(stem: str, suffix: str) -> str:
    """Creates a sanitized filename from a free-form stem."""
    sanitized = re.sub(r"[^\w\s-]", "", stem).strip()
    sanitized = re.sub(r"[-\s]+", "_", sanitized)
    return f"{sanitized[:50] or 'artifact'}.{suffix.lstrip('.')}"


def atomic_write(path: Union[str, Path], data: Union[str, bytes]) -> Path:
    """Writes to a temp file next to ``path`` and renames it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    encoding = None if isinstance(data, bytes) else "utf-8"
    with tempfile.NamedTemporaryFile(
        mode=mode, encoding=encoding, dir=path.parent,
        prefix=f".{path.name}.", suffix=".tmp", delete=False,
    ) as tmp:
        tmp.write(data)
        tmp_name = tmp.name
    try:
        os.replace(tmp_name, path)
    except OSError:
        Path(tmp_name).unlink(missing_ok=True)
        raise
    return path


def parallel_map(fn: Callable[[T], R], items: Iterable[T], threads: int = 1) -> list[R]:
    """Order-preserving map, threaded when ``threads`` > 1."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as executor:
        return list(executor.map(fn, items))


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sha256_file(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def dumps_canonical(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def envelope(kind: str, config: BaseModel, seed: int, payload: Any) -> dict:
    """Wraps an artifact payload with the config that produced it."""
    return {
        "kind": kind,
        "format_version": ARTIFACT_FORMAT_VERSION,
        "config_hash": config_hash(config),
        "seed": seed,
        "created_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "config": config.model_dump(mode="json"),
        "payload": payload,
    }


def write_json_artifact(
    path: Union[str, Path], kind: str, config: BaseModel, seed: int, payload: Any
) -> Path:
    return atomic_write(path, dumps_canonical(envelope(kind, config, seed, payload)))


def read_json_artifact(path: Union[str, Path], kind: Optional[str] = None) -> dict:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict) or "payload" not in data:
        raise ArtifactMismatch(f"{path} is not a kyoto-shift-bench artifact.")
    if kind is not None and data.get("kind") != kind:
        raise ArtifactMismatch(f"{path} holds a {data.get('kind')!r} artifact, expected {kind!r}.")
    return data


def strip_volatile(artifact: dict) -> dict:
    """Drops wall-clock fields so two runs can be compared byte for byte."""
    return {k: v for k, v in artifact.items() if k != "created_at"}


def sidecar_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_sidecar(
    data_path: Union[str, Path],
    kind: str,
    config: BaseModel,
    seed: int,
    extra: Optional[dict] = None,
) -> Path:
    """Records config, seed and content hash of a plain data file in ``<file>.json``."""
    data_path = Path(data_path)
    payload = {"file": data_path.name, "sha256": sha256_file(data_path), **(extra or {})}
    return write_json_artifact(sidecar_path(data_path), kind, config, seed, payload)


def check_sidecar_data(path: Union[str, Path], artifact: dict) -> None:
    """Re-hashes the data file a sidecar describes; other artifacts pass through."""
    payload = artifact.get("payload")
    if not isinstance(payload, dict) or not {"file", "sha256"} <= payload.keys():
        return
    data_path = Path(path).parent / payload["file"]
    if not data_path.exists():
        raise ArtifactMismatch(f"{data_path} described by {path} is missing.")
    if sha256_file(data_path) != payload["sha256"]:
        raise ArtifactMismatch(f"{data_path} does not match the sha256 recorded in {path}.")
