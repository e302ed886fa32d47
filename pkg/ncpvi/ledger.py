"""SQLite run ledger for command and solver events."""

from __future__ import annotations

import json
import sqlite3
from pathlib import Path
from typing import Any


class RunLedger:
    """Owns the SQLite connection and the run_events table."""

    def __init__(self, db_path: Path) -> None:
        self._db_path = db_path
        self._conn: sqlite3.Connection | None = None

    @property
    def db_path(self) -> Path:
        return self._db_path

    def connect(self) -> sqlite3.Connection:
        if self._conn is None:
            self._db_path.parent.mkdir(parents=True, exist_ok=True)
            self._conn = sqlite3.connect(self._db_path, check_same_thread=False)
            self._conn.row_factory = sqlite3.Row
            self._conn.executescript(
                """
                CREATE TABLE IF NOT EXISTS run_events (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    event_type TEXT NOT NULL,
                    command TEXT NOT NULL,
                    payload TEXT NOT NULL,
                    created_at TEXT NOT NULL DEFAULT CURRENT_TIMESTAMP
                );

                CREATE INDEX IF NOT EXISTS idx_run_events_command_id
                ON run_events(command, id DESC);
                """
            )
            self._conn.commit()
        return self._conn

    def record(self, event_type: str, command: str, payload: dict[str, Any]) -> int:
        cursor = self.connect().execute(
            """
            INSERT INTO run_events (event_type, command, payload)
            VALUES (?, ?, ?)
            """,
            (event_type, command, json.dumps(payload, ensure_ascii=True, default=str)),
        )
        self.connect().commit()
        return int(cursor.lastrowid)

    def latest(self, limit: int = 50, *, command: str | None = None) -> list[dict[str, Any]]:
        where = "WHERE command = ?" if command else ""
        params: tuple[Any, ...] = (command, limit) if command else (limit,)
        rows = self.connect().execute(
            f"""
            SELECT id, event_type, command, payload, created_at
            FROM run_events
            {where}
            ORDER BY id DESC
            LIMIT ?
            """,
            params,
        ).fetchall()

        events: list[dict[str, Any]] = []
        for row in rows:
            event = dict(row)
            event["payload"] = json.loads(event["payload"])
            events.append(event)
        return events

    def close(self) -> None:
        if self._conn is not None:
            self._conn.close()
            self._conn = None
