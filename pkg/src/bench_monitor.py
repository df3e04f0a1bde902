"""
Bench Monitor Module

This module keeps a history of bench reports in SQLite so that consecutive runs
can be compared. Each measured cell is one row; a new report is compared with
the most recent comparable cell (same scale, network, variant, mode, batch and
precision) to flag throughput drift beyond the repeatability bound.

Data Flow:
    BenchReport → record_report() → SQLite DB → previous_report()/drift() → CLI warning
                                              → get_summary()/export_to_csv() → dashboard

Invoked by: vcnn, scripts/bench_dashboard.py
Invokes: None
"""

import csv
import json
import logging
import sqlite3
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

logger = logging.getLogger(__name__)

# Relative throughput change that counts as drift between two runs of a cell
DRIFT_THRESHOLD = 0.25


def _utc_now() -> datetime:
    return datetime.now(timezone.utc)


class BenchMonitor:
    """
    SQLite history of bench reports.

    Supports context manager protocol for proper resource cleanup:
        with BenchMonitor('bench.db') as monitor:
            monitor.record_report(report)

    Attributes:
        db_path (Path): Path to SQLite database file
        conn: Database connection (sqlite3)
    """

    def __init__(self, db_path: str = "./logs/bench_history.db"):
        """
        Initialize the monitor with a SQLite database.

        Args:
            db_path (str): Path to SQLite database file (default: ./logs/bench_history.db)
        """
        self.db_path = Path(db_path)
        self.conn = None
        self.db_path.parent.mkdir(parents=True, exist_ok=True)
        self._init_sqlite()
        logger.debug("Bench history database initialized with WAL mode: %s", self.db_path)

    def _init_sqlite(self):
        """Create the reports table and indexes (WAL mode, autocommit)."""
        try:
            self.conn = sqlite3.connect(str(self.db_path), check_same_thread=False, timeout=30.0,
                                        isolation_level=None)
            self.conn.row_factory = sqlite3.Row
            self.conn.execute('PRAGMA journal_mode=WAL')
            self.conn.execute('PRAGMA synchronous=NORMAL')
            self.conn.execute('PRAGMA busy_timeout=30000')

            self.conn.execute("""
                CREATE TABLE IF NOT EXISTS reports (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    timestamp TEXT NOT NULL,
                    run_id TEXT,
                    scale TEXT NOT NULL,
                    network TEXT,
                    variant TEXT NOT NULL,
                    mode TEXT NOT NULL,
                    batch INTEGER NOT NULL,
                    precision TEXT,
                    images_per_sec REAL,
                    wall_seconds REAL,
                    reason TEXT,
                    fractions TEXT,
                    environment TEXT
                )
            """)
            self.conn.execute("CREATE INDEX IF NOT EXISTS idx_timestamp ON reports(timestamp)")
            self.conn.execute("CREATE INDEX IF NOT EXISTS idx_cell ON reports(scale, variant, mode, batch)")
        except sqlite3.Error as error:
            logger.error("Failed to initialize SQLite database: %s", error, exc_info=True)
            raise

    def _execute(self, query: str, params: tuple = None):
        """Execute a query, logging and re-raising SQLite errors."""
        try:
            return self.conn.execute(query, params or ())
        except sqlite3.Error as error:
            logger.error("SQLite query failed: %s - Query: %s", error, query, exc_info=True)
            raise

    def __enter__(self):
        """Context manager entry."""
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        """Context manager exit - ensure connection is closed."""
        self.close()
        return False

    def close(self):
        """Close the database connection."""
        if self.conn is not None:
            self.conn.close()
            self.conn = None

    def record_report(self, report, run_id: Optional[str] = None) -> int:
        """
        Store one bench report.

        Args:
            report: BenchReport
            run_id: CLI run id, for grouping

        Returns:
            int: Row id
        """
        precision = report.environment.get('precision') if report.environment else None
        cursor = self._execute("""
            INSERT INTO reports (
                timestamp, run_id, scale, network, variant, mode, batch, precision,
                images_per_sec, wall_seconds, reason, fractions, environment
            ) VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
        """, (
            report.finished_at or _utc_now().isoformat(), run_id, report.scale, report.network or '',
            report.variant, report.mode, report.batch, precision, report.images_per_sec, report.wall_seconds,
            report.reason, json.dumps(report.fractions), json.dumps(report.environment),
        ))
        logger.debug("Recorded bench report #%s", cursor.lastrowid,
                     extra={'variant': report.variant, 'batch': report.batch})
        return cursor.lastrowid

    def previous_report(self, report, before_id: Optional[int] = None) -> Optional[Dict[str, Any]]:
        """
        Most recent available row for the same cell.

        Args:
            report: BenchReport to match
            before_id: Only consider rows older than this id (the row just recorded)
        """
        precision = report.environment.get('precision') if report.environment else None
        row = self._execute("""
            SELECT * FROM reports
            WHERE scale = ? AND network = ? AND variant = ? AND mode = ? AND batch = ?
              AND IFNULL(precision, '') = IFNULL(?, '')
              AND images_per_sec IS NOT NULL AND id < ?
            ORDER BY id DESC LIMIT 1
        """, (report.scale, report.network or '', report.variant, report.mode, report.batch, precision,
              before_id if before_id is not None else 2 ** 62)).fetchone()
        return dict(row) if row else None

    def drift(self, report, before_id: Optional[int] = None) -> Optional[float]:
        """Relative throughput change against the previous comparable cell, or None."""
        if not report.available:
            return None
        previous = self.previous_report(report, before_id)
        if previous is None or not previous['images_per_sec']:
            return None
        return (report.images_per_sec - previous['images_per_sec']) / previous['images_per_sec']

    def record_and_compare(self, report, run_id: Optional[str] = None) -> Optional[float]:
        """Record a report and return its drift; logs a warning above DRIFT_THRESHOLD."""
        row_id = self.record_report(report, run_id)
        change = self.drift(report, before_id=row_id)
        if change is not None and abs(change) > DRIFT_THRESHOLD:
            logger.warning("Throughput drifted %+.1f%% against the previous run", change * 100,
                           extra={'scale': report.scale, 'variant': report.variant, 'mode': report.mode,
                                  'batch': report.batch})
        return change

    def get_summary(self, hours: int = 24) -> Dict[str, Any]:
        """
        Summary statistics for the specified time period.

        Example Result:
            {
                "total_reports": 42,
                "unavailable": 3,
                "by_variant": {"imp6": {"cells": 10, "best_images_per_sec": 1830.2}, ...},
                "by_reason": {"timeout": 3}
            }
        """
        cutoff = (_utc_now() - timedelta(hours=hours)).isoformat()
        total = self._execute("SELECT COUNT(*) AS count FROM reports WHERE timestamp > ?",
                              (cutoff,)).fetchone()['count']

        by_variant = {}
        for row in self._execute("""
            SELECT variant, COUNT(*) AS cells, MAX(images_per_sec) AS best
            FROM reports WHERE timestamp > ?
            GROUP BY variant ORDER BY variant
        """, (cutoff,)).fetchall():
            by_variant[row['variant']] = {'cells': row['cells'], 'best_images_per_sec': row['best']}

        by_reason = {}
        for row in self._execute("""
            SELECT reason, COUNT(*) AS count FROM reports
            WHERE timestamp > ? AND reason IS NOT NULL GROUP BY reason
        """, (cutoff,)).fetchall():
            by_reason[row['reason']] = row['count']

        return {
            "time_period_hours": hours,
            "total_reports": total,
            "unavailable": sum(by_reason.values()),
            "by_variant": by_variant,
            "by_reason": by_reason,
            "generated_at": _utc_now().isoformat(),
        }

    def get_recent(self, limit: int = 50) -> List[Dict[str, Any]]:
        """Most recent rows, newest first."""
        rows = self._execute("SELECT * FROM reports ORDER BY id DESC LIMIT ?", (limit,)).fetchall()
        return [dict(row) for row in rows]

    def export_to_csv(self, filepath: str, hours: Optional[int] = None) -> int:
        """
        Export rows to a CSV file.

        Args:
            filepath (str): Output CSV file path
            hours (Optional[int]): Only export rows from the last N hours (None = all)

        Returns:
            int: Number of rows written
        """
        if hours:
            cutoff = (_utc_now() - timedelta(hours=hours)).isoformat()
            rows = self._execute("SELECT * FROM reports WHERE timestamp > ? ORDER BY id DESC",
                                 (cutoff,)).fetchall()
        else:
            rows = self._execute("SELECT * FROM reports ORDER BY id DESC").fetchall()

        if not rows:
            logger.warning("No data to export")
            return 0

        with open(filepath, 'w', newline='', encoding='utf-8') as csvfile:
            writer = csv.DictWriter(csvfile, fieldnames=rows[0].keys())
            writer.writeheader()
            for row in rows:
                writer.writerow(dict(row))

        logger.info("Exported %s reports to %s", len(rows), filepath)
        return len(rows)

    def cleanup_old_records(self, days: int = 30) -> int:
        """Delete rows older than `days`; returns the number deleted."""
        cutoff = (_utc_now() - timedelta(days=days)).isoformat()
        cursor = self._execute("DELETE FROM reports WHERE timestamp < ?", (cutoff,))
        logger.info("Cleaned up %s bench records older than %s days", cursor.rowcount, days)
        return cursor.rowcount
