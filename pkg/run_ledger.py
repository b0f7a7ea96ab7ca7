"""
Run Ledger
SQLite record of every pipeline command, its metrics, and a CLI dashboard over them
"""

import json
import sqlite3
from datetime import datetime
from typing import Dict, List, Optional

import pytz


class RunLedger:
    def __init__(self, db_path: str = 'mhg_runs.db', timezone: str = 'UTC'):
        self.db_path = db_path
        self.timezone = pytz.timezone(timezone)
        self._init_database()

    def _now(self) -> str:
        return datetime.now(self.timezone).isoformat()

    def _init_database(self):
        """Create the runs and run_metrics tables"""
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()

        cursor.execute('''
            CREATE TABLE IF NOT EXISTS runs (
                run_id INTEGER PRIMARY KEY AUTOINCREMENT,
                command TEXT,
                started_at TEXT,
                finished_at TEXT,
                status TEXT DEFAULT 'running',
                seed INTEGER,
                arguments TEXT,
                summary TEXT
            )
        ''')

        cursor.execute('''
            CREATE TABLE IF NOT EXISTS run_metrics (
                run_id INTEGER,
                name TEXT,
                value REAL,
                FOREIGN KEY (run_id) REFERENCES runs (run_id)
            )
        ''')

        conn.commit()
        conn.close()

    def start_run(self, command: str, seed: Optional[int], arguments: Dict) -> int:
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()
        cursor.execute('''
            INSERT INTO runs (command, started_at, seed, arguments)
            VALUES (?, ?, ?, ?)
        ''', (command, self._now(), seed, json.dumps(arguments, sort_keys=True, default=str)))
        run_id = cursor.lastrowid
        conn.commit()
        conn.close()
        return run_id

    def record_metric(self, run_id: int, name: str, value: float):
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()
        cursor.execute('INSERT INTO run_metrics (run_id, name, value) VALUES (?, ?, ?)',
                       (run_id, name, float(value)))
        conn.commit()
        conn.close()

    def finish_run(self, run_id: int, status: str, summary: str = ''):
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()
        cursor.execute('''
            UPDATE runs
            SET finished_at = ?,
                status = ?,
                summary = ?
            WHERE run_id = ?
        ''', (self._now(), status, summary, run_id))
        conn.commit()
        conn.close()

    def get_run(self, run_id: int) -> Optional[Dict]:
        conn = sqlite3.connect(self.db_path)
        conn.row_factory = sqlite3.Row
        cursor = conn.cursor()
        cursor.execute('SELECT * FROM runs WHERE run_id = ?', (run_id,))
        row = cursor.fetchone()
        conn.close()
        return dict(row) if row else None

    def get_metrics(self, run_id: int) -> Dict[str, float]:
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()
        cursor.execute('SELECT name, value FROM run_metrics WHERE run_id = ? ORDER BY rowid', (run_id,))
        metrics = {name: value for name, value in cursor.fetchall()}
        conn.close()
        return metrics

    def get_recent_runs(self, limit: int = 10) -> List[Dict]:
        conn = sqlite3.connect(self.db_path)
        conn.row_factory = sqlite3.Row
        cursor = conn.cursor()
        cursor.execute('SELECT * FROM runs ORDER BY run_id DESC LIMIT ?', (limit,))
        runs = [dict(row) for row in cursor.fetchall()]
        conn.close()
        return runs

    def get_stats(self) -> Dict:
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()

        cursor.execute('SELECT COUNT(*) FROM runs')
        total = cursor.fetchone()[0]

        cursor.execute("SELECT COUNT(*) FROM runs WHERE status = 'ok'")
        ok = cursor.fetchone()[0]

        cursor.execute("SELECT COUNT(*) FROM runs WHERE status = 'failed'")
        failed = cursor.fetchone()[0]

        cursor.execute('SELECT command, COUNT(*) FROM runs GROUP BY command ORDER BY command')
        by_command = {command: count for command, count in cursor.fetchall()}

        conn.close()

        return {
            'total_runs': total,
            'ok': ok,
            'failed': failed,
            'running': total - ok - failed,
            'success_rate': (ok / total * 100) if total > 0 else 0,
            'by_command': by_command,
        }

    def display_stats(self):
        stats = self.get_stats()
        print(f"\n📊 Statistics:")
        print(f"   Total runs: {stats['total_runs']}")
        print(f"   Succeeded: {stats['ok']}")
        print(f"   Failed: {stats['failed']}")
        print(f"   Success rate: {stats['success_rate']:.1f}%")
        for command, count in stats['by_command'].items():
            print(f"   {command}: {count}")
        print()

    def display_dashboard(self, limit: int = 10):
        """Print ledger statistics and the most recent runs"""
        stats = self.get_stats()
        runs = self.get_recent_runs(limit)

        print("\n" + "="*70)
        print("🧪 MHG-GNN RUN DASHBOARD")
        print("="*70)

        print("\n📊 STATISTICS")
        print("-"*70)
        print(f"Total Runs:        {stats['total_runs']}")
        print(f"Succeeded:         {stats['ok']}")
        print(f"Failed:            {stats['failed']}")
        print(f"Success Rate:      {stats['success_rate']:.1f}%")

        if not runs:
            print("\n" + "="*70)
            print("📭 No runs recorded yet")
            print("="*70 + "\n")
            return

        print("\n🕒 RECENT RUNS")
        print("-"*70)

        status_emoji = {'ok': '✅', 'failed': '❌', 'running': '⏳'}
        for run in runs:
            emoji = status_emoji.get(run['status'], '⏳')
            started = datetime.fromisoformat(run['started_at'])
            print(f"\n{emoji} Run {run['run_id']} | {run['command']} | seed {run['seed']}")
            print(f"   Started:  {started.strftime('%Y-%m-%d %H:%M:%S %Z')}")
            if run['summary']:
                print(f"   Summary:  {run['summary']}")
            for name, value in self.get_metrics(run['run_id']).items():
                print(f"   {name}: {value:g}")

        print("\n" + "="*70 + "\n")
