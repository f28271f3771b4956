"""
JSON-lines store of model requests and responses.

The recording backend appends one record per call; the replay backend serves
responses back by request fingerprint. Records carry a format version so older
files are rejected instead of misread.
"""

from __future__ import annotations

import json
import threading
from pathlib import Path
from typing import Any, Dict, List, Optional

from .errors import ParseError
from .hand_model import PathLike

TRANSCRIPT_VERSION = "1.0"


class TranscriptStore:
    def __init__(self, path: PathLike) -> None:
        self.path = Path(path)
        self._lock = threading.Lock()
        self._index: Optional[Dict[str, List[Dict[str, Any]]]] = None

    def append(self, record: Dict[str, Any]) -> None:
        entry = dict(record)
        entry["_v"] = TRANSCRIPT_VERSION
        line = json.dumps(entry, sort_keys=True)
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(line + "\n")
            if self._index is not None:
                self._index.setdefault(entry.get("fingerprint", ""), []).append(entry)

    def records(self) -> List[Dict[str, Any]]:
        if not self.path.exists():
            return []
        out = []
        with open(self.path, "r", encoding="utf-8") as f:
            for lineno, raw in enumerate(f, start=1):
                if not raw.strip():
                    continue
                try:
                    entry = json.loads(raw)
                except json.JSONDecodeError as exc:
                    raise ParseError(f"{self.path}:{lineno}: invalid JSON ({exc})") from exc
                if entry.get("_v") != TRANSCRIPT_VERSION:
                    raise ParseError(f"{self.path}:{lineno}: unsupported transcript version {entry.get('_v')!r}")
                out.append(entry)
        return out

    def lookup(self, fingerprint: str) -> List[Dict[str, Any]]:
        with self._lock:
            if self._index is None:
                index: Dict[str, List[Dict[str, Any]]] = {}
                for entry in self.records():
                    index.setdefault(entry.get("fingerprint", ""), []).append(entry)
                self._index = index
            return list(self._index.get(fingerprint, []))

    def __len__(self) -> int:
        return len(self.records())
