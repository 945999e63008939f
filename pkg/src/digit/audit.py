"""Append-only JSON Lines audit log for scenario runs, actuations, drift
reports, and promotion decisions."""
from __future__ import annotations

import json
import threading

EVENTS = ("scenario", "act", "drift", "promote")


class AuditLog:
    """Thread-safe; writes through to `path` when given, always keeps an
    in-memory copy for queries."""

    def __init__(self, path=None):
        self.path = path
        self.entries: list[dict] = []
        self._lock = threading.Lock()
        self._fh = open(path, "a", encoding="utf-8") if path else None

    def append(self, t: float, event: str, detail: dict) -> dict:
        if event not in EVENTS:
            raise ValueError(f"unknown audit event {event!r}")
        entry = {"t": t, "event": event, "detail": detail}
        with self._lock:
            self.entries.append(entry)
            if self._fh is not None:
                self._fh.write(json.dumps(entry, separators=(",", ":")) + "\n")
                self._fh.flush()
        return entry

    def by_event(self, event: str) -> list[dict]:
        with self._lock:
            return [e for e in self.entries if e["event"] == event]

    def close(self):
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None


def read_audit_log(path) -> list[dict]:
    """Parse an audit JSONL file; a malformed line raises ValueError naming
    its 1-based line number."""
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                if not isinstance(doc, dict) or "event" not in doc or "t" not in doc:
                    raise ValueError("missing required keys")
            except ValueError as exc:
                raise ValueError(f"malformed audit line {lineno}: {exc}") from exc
            entries.append(doc)
    return entries
