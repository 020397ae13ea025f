"""Content-addressed artifact cache and the structured run log.

Every intermediate artifact is stored under ``<cache_dir>/<stage>/<key>``
where the key hashes exactly the inputs that determine the artifact, so
editing a prompt or swapping a volume invalidates only downstream stages.
The run log is JSON lines: one record per provider call (prompt hash,
latency, cache hit) and per stage transition, enough to replay a run
against the cache byte-identically.
"""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path


def content_key(*parts) -> str:
    """sha256 over a canonical encoding of the given parts."""
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, bytes):
            h.update(b"B" + len(part).to_bytes(8, "little") + part)
        else:
            canon = json.dumps(part, sort_keys=True, default=str).encode()
            h.update(b"J" + len(canon).to_bytes(8, "little") + canon)
    return h.hexdigest()


class ArtifactCache:
    """Flat per-stage key/value store on disk; ``root=None`` disables it."""

    def __init__(self, root=None):
        self.root = Path(root) if root else None

    @property
    def enabled(self) -> bool:
        return self.root is not None

    def path(self, stage: str, key: str, suffix: str = "") -> Path | None:
        if self.root is None:
            return None
        return self.root / stage / f"{key}{suffix}"

    def get_bytes(self, stage: str, key: str, suffix: str = "") -> bytes | None:
        path = self.path(stage, key, suffix)
        if path is None or not path.exists():
            return None
        return path.read_bytes()

    def put_bytes(self, stage: str, key: str, payload: bytes,
                  suffix: str = "") -> Path | None:
        path = self.path(stage, key, suffix)
        if path is None:
            return None
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
        return path

    def get_json(self, stage: str, key: str):
        raw = self.get_bytes(stage, key, ".json")
        return None if raw is None else json.loads(raw)

    def put_json(self, stage: str, key: str, payload) -> Path | None:
        return self.put_bytes(
            stage, key,
            json.dumps(payload, indent=2, sort_keys=True).encode() + b"\n",
            ".json",
        )


class RunLog:
    """Append-only JSONL log of provider calls and stage transitions."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def emit(self, kind: str, **payload) -> None:
        record = {"kind": kind, **payload}
        self.records.append(record)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def stage(self, name: str, status: str, **payload) -> None:
        self.emit("stage", stage=name, status=status, **payload)

    def provider_call(self, provider: str, key: str, latency_s: float,
                      cache_hit: bool, **payload) -> None:
        self.emit("provider_call", provider=provider, key=key,
                  latency_s=round(latency_s, 6), cache_hit=cache_hit, **payload)


class CachingLlmProvider:
    """Wraps an LlmProvider with the response cache and run-log records."""

    def __init__(self, inner, cache: ArtifactCache, run_log: RunLog,
                 name: str = "llm"):
        self.inner = inner
        self.cache = cache
        self.run_log = run_log
        self.name = name

    def complete(self, prompt: str) -> str:
        key = hashlib.sha256(prompt.encode("utf-8")).hexdigest()
        started = time.monotonic()
        cached = self.cache.get_bytes("llm", key, ".txt")
        if cached is not None:
            self.run_log.provider_call(
                self.name, key, time.monotonic() - started, cache_hit=True
            )
            return cached.decode("utf-8")
        response = self.inner.complete(prompt)
        self.cache.put_bytes("llm", key, response.encode("utf-8"), ".txt")
        self.run_log.provider_call(
            self.name, key, time.monotonic() - started, cache_hit=False
        )
        return response
