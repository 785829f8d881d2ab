"""Content-addressed on-disk cache for backend responses.

One JSON file per entry under a two-level hex fan-out. Entries carry a
checksum over the payload; anything that fails to parse or verify is
treated as absent. Writes go to a temp file in the target directory and
are published with an atomic rename, so readers never see torn entries.
"""

from __future__ import annotations

import errno
import hashlib
import json
import logging
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator, Mapping

logger = logging.getLogger(__name__)

_ENTRY_SUFFIX = ".json"


class StorageFull(OSError):
    pass


@dataclass(frozen=True)
class CacheKey:
    """256-bit content digest of a logical request."""

    digest: str

    def __post_init__(self) -> None:
        if len(self.digest) != 64 or any(c not in "0123456789abcdef" for c in self.digest):
            raise ValueError(f"digest must be 64 hex chars, got {self.digest!r}")


def make_cache_key(
    backend_id: str,
    model_id: str,
    params: Mapping[str, Any],
    prompt_text: str,
    image_bytes: bytes,
) -> CacheKey:
    """Derive the cache key for one logical request.

    The header is canonical JSON (sorted keys), so identical logical
    requests digest identically across processes and platforms.
    """
    header = json.dumps(
        {
            "backend_id": backend_id,
            "model_id": model_id,
            "params": dict(params),
            "prompt": prompt_text,
        },
        sort_keys=True,
        ensure_ascii=False,
    ).encode("utf-8")
    return CacheKey(hashlib.sha256(header + b"\x00" + image_bytes).hexdigest())


def _payload_checksum(payload: Mapping[str, Any]) -> str:
    body = json.dumps(payload, sort_keys=True, ensure_ascii=False).encode("utf-8")
    return hashlib.sha256(body).hexdigest()


@dataclass(frozen=True)
class CacheStats:
    entries: int
    total_bytes: int


class ResponseCache:
    """Durable key-value store of JSON payloads, safe across processes."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, key: CacheKey) -> Path:
        d = key.digest
        return self.root / d[:2] / d[2:4] / f"{d}{_ENTRY_SUFFIX}"

    def get(self, key: CacheKey) -> dict | None:
        """Return the stored payload, or None when absent or corrupt."""
        path = self._path(key)
        try:
            raw = path.read_bytes()
        except FileNotFoundError:
            return None
        except OSError as exc:
            logger.warning("cache read failed for %s: %s", path, exc)
            return None
        entry = self._verify(raw, key.digest, path)
        return entry["payload"] if entry is not None else None

    def put(self, key: CacheKey, payload: Mapping[str, Any]) -> None:
        """Durably store the payload; concurrent writers converge."""
        path = self._path(key)
        entry = {
            "key": key.digest,
            "payload": dict(payload),
            "checksum": _payload_checksum(payload),
        }
        data = json.dumps(entry, sort_keys=True, ensure_ascii=False).encode("utf-8")
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".put-")
            try:
                with os.fdopen(fd, "wb") as fh:
                    fh.write(data)
                    fh.flush()
                    os.fsync(fh.fileno())
                os.replace(tmp, path)
            except BaseException:
                try:
                    os.unlink(tmp)
                except OSError:
                    pass
                raise
        except OSError as exc:
            if exc.errno == errno.ENOSPC:
                raise StorageFull(str(exc)) from exc
            raise

    @staticmethod
    def _verify(raw: bytes, digest: str, path: Path) -> dict | None:
        try:
            entry = json.loads(raw)
            payload = entry["payload"]
            if entry["key"] != digest:
                raise ValueError("key mismatch")
            if entry["checksum"] != _payload_checksum(payload):
                raise ValueError("checksum mismatch")
        except (ValueError, KeyError, TypeError) as exc:
            logger.warning("corrupt cache entry %s: %s", path, exc)
            return None
        return entry

    def _entry_paths(self) -> Iterator[Path]:
        yield from sorted(self.root.glob(f"*/*/*{_ENTRY_SUFFIX}"))

    def stats(self) -> CacheStats:
        entries = 0
        total = 0
        for path in self._entry_paths():
            entries += 1
            total += path.stat().st_size
        return CacheStats(entries, total)

    def gc(self, remove_all: bool = False) -> tuple[int, int]:
        """Remove corrupt entries (or all of them); returns (removed, kept)."""
        removed = 0
        kept = 0
        for path in self._entry_paths():
            digest = path.name[: -len(_ENTRY_SUFFIX)]
            ok = False
            if not remove_all:
                try:
                    ok = self._verify(path.read_bytes(), digest, path) is not None
                except OSError:
                    ok = False
            if ok:
                kept += 1
            else:
                path.unlink(missing_ok=True)
                removed += 1
        return removed, kept
