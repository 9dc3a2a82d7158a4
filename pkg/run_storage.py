"""
Run registry using SQLite for local storage, plus the JSON run record each
command leaves next to its outputs.
"""

import json
import logging
import sqlite3
import uuid
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd

from config import Config
from utils import InvariantViolation, file_sha256

logger = logging.getLogger(__name__)

RECORD_FILE = "run_record.json"


@dataclass
class RunRecord:
    """Self-describing record of one command invocation."""
    command: str
    seed: int
    config: Dict
    summary: Dict = field(default_factory=dict)
    artifacts: Dict[str, str] = field(default_factory=dict)  # path -> sha256
    run_id: str = field(default_factory=lambda: uuid.uuid4().hex[:12])
    version: str = Config.VERSION
    format_version: str = Config.FORMAT_VERSION
    started: str = field(default_factory=lambda: datetime.now().isoformat(timespec='seconds'))
    wall_clock: float = 0.0

    def add_artifact(self, path) -> str:
        """Hash a written file into the manifest."""
        digest = file_sha256(path)
        self.artifacts[str(path)] = digest
        return digest

    def verify(self) -> List[str]:
        """Paths whose current content no longer matches the manifest."""
        bad = []
        for path, digest in self.artifacts.items():
            if not Path(path).exists() or file_sha256(path) != digest:
                bad.append(path)
        return bad

    def to_dict(self) -> Dict:
        return asdict(self)

    def write_json(self, directory) -> str:
        path = Path(directory) / RECORD_FILE
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True, default=str)
        return str(path)

    @classmethod
    def read_json(cls, path) -> "RunRecord":
        with open(path, 'r') as f:
            return cls(**json.load(f))


class RunStorage:
    """Handles run records in a SQLite database."""

    def __init__(self, db_path=None):
        self.db_path = str(db_path or Config.DB_PATH)
        Path(self.db_path).parent.mkdir(parents=True, exist_ok=True)
        self.init_database()

    def init_database(self):
        """Initialize database with required tables."""
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()

        cursor.execute('''
            CREATE TABLE IF NOT EXISTS runs (
                run_id TEXT PRIMARY KEY,
                command TEXT NOT NULL,
                seed INTEGER,
                version TEXT,
                format_version TEXT,
                started TIMESTAMP,
                wall_clock REAL,
                config TEXT,
                summary TEXT
            )
        ''')

        cursor.execute('''
            CREATE TABLE IF NOT EXISTS artifacts (
                run_id TEXT NOT NULL,
                path TEXT NOT NULL,
                sha256 TEXT NOT NULL,
                PRIMARY KEY (run_id, path)
            )
        ''')

        cursor.execute('''
            CREATE INDEX IF NOT EXISTS idx_command_started
            ON runs(command, started)
        ''')

        conn.commit()
        conn.close()

    def record_run(self, record: RunRecord) -> str:
        """Store a run and its manifest; returns the run id."""
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()
        cursor.execute('''
            INSERT OR REPLACE INTO runs
            (run_id, command, seed, version, format_version, started, wall_clock, config, summary)
            VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)
        ''', (record.run_id, record.command, record.seed, record.version, record.format_version,
              record.started, record.wall_clock,
              json.dumps(record.config, sort_keys=True, default=str),
              json.dumps(record.summary, sort_keys=True, default=str)))
        cursor.execute('DELETE FROM artifacts WHERE run_id = ?', (record.run_id,))
        cursor.executemany(
            'INSERT INTO artifacts (run_id, path, sha256) VALUES (?, ?, ?)',
            [(record.run_id, path, digest) for path, digest in record.artifacts.items()]
        )
        conn.commit()
        conn.close()
        logger.info(f"recorded run {record.run_id} ({record.command}, {len(record.artifacts)} files)")
        return record.run_id

    def get_run(self, run_id: str) -> Optional[RunRecord]:
        """Retrieve a run record, or None."""
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()
        cursor.execute('''
            SELECT run_id, command, seed, version, format_version, started, wall_clock, config, summary
            FROM runs WHERE run_id = ?
        ''', (run_id,))
        row = cursor.fetchone()
        if row is None:
            conn.close()
            return None
        cursor.execute('SELECT path, sha256 FROM artifacts WHERE run_id = ?', (run_id,))
        artifacts = dict(cursor.fetchall())
        conn.close()

        return RunRecord(
            run_id=row[0], command=row[1], seed=row[2], version=row[3], format_version=row[4],
            started=row[5], wall_clock=row[6], config=json.loads(row[7]),
            summary=json.loads(row[8]), artifacts=artifacts,
        )

    def list_runs(self, command: Optional[str] = None) -> pd.DataFrame:
        """Runs, newest first, optionally for one command."""
        conn = sqlite3.connect(self.db_path)
        query = 'SELECT run_id, command, seed, version, started, wall_clock FROM runs'
        params = []
        if command:
            query += ' WHERE command = ?'
            params.append(command)
        query += ' ORDER BY started DESC'
        df = pd.read_sql_query(query, conn, params=params)
        conn.close()
        return df

    def verify_manifest(self, run_id: str) -> bool:
        """Check every stored hash against the file on disk."""
        record = self.get_run(run_id)
        if record is None:
            raise ValueError(f"unknown run {run_id}")
        bad = record.verify()
        if bad:
            raise InvariantViolation(f"run {run_id}: manifest mismatch for {', '.join(bad)}")
        return True

    def clear_runs(self, command: Optional[str] = None):
        """Clear runs for a command or all runs."""
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()

        if command:
            cursor.execute('DELETE FROM artifacts WHERE run_id IN (SELECT run_id FROM runs WHERE command = ?)',
                           (command,))
            cursor.execute('DELETE FROM runs WHERE command = ?', (command,))
        else:
            cursor.execute('DELETE FROM artifacts')
            cursor.execute('DELETE FROM runs')

        conn.commit()
        conn.close()
