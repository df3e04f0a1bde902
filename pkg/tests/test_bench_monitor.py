"""
Unit tests for bench_monitor.py and scripts/bench_dashboard.py

Covers:
- Database initialization and SQLite configuration
- Recording reports and drift against the previous comparable cell
- Summary statistics, CSV export and cleanup
- Dashboard entry point
"""

import unittest
import tempfile
import os
import shutil
import csv
from datetime import datetime, timedelta, timezone
from pathlib import Path
import sys

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.bench_monitor import BenchMonitor
from src.bench_runner import BenchReport
from scripts import bench_dashboard


def make_report(images_per_sec=100.0, variant='imp6', batch=10, reason=None, finished_at='', precision='f32'):
    return BenchReport(scale='scale1-analog', variant=variant, mode='train', batch=batch, reps=3, warmup=1,
                       images_per_sec=images_per_sec, component_seconds={'conv_f': 1.0, 'full_f': 1.0},
                       wall_seconds=batch / images_per_sec if images_per_sec else None, reason=reason,
                       finished_at=finished_at, environment={'precision': precision})


class TestBenchMonitor(unittest.TestCase):
    """Test cases for BenchMonitor class."""

    def setUp(self):
        """Set up test fixtures."""
        self.temp_dir = tempfile.mkdtemp()
        self.db_path = os.path.join(self.temp_dir, "nested", "bench.db")
        self.monitor = BenchMonitor(db_path=self.db_path)

    def tearDown(self):
        """Clean up test fixtures."""
        self.monitor.close()
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_initialization_creates_database(self):
        """Test that initialization creates the parent directory and the database file."""
        self.assertTrue(os.path.exists(self.db_path))

    def test_sqlite_wal_mode_enabled(self):
        """Test that WAL mode is enabled."""
        mode = self.monitor.conn.execute("PRAGMA journal_mode").fetchone()[0]
        self.assertEqual(mode.upper(), "WAL")

    def test_record_report(self):
        """Test that a recorded report is stored with its fractions."""
        row_id = self.monitor.record_report(make_report(), run_id='abc123')
        row = self.monitor.get_recent(1)[0]
        self.assertEqual(row['id'], row_id)
        self.assertEqual(row['run_id'], 'abc123')
        self.assertEqual(row['precision'], 'f32')
        self.assertIn('"conv_f": 0.5', row['fractions'])

    def test_first_report_has_no_drift(self):
        """Test that a cell without history has no drift."""
        self.assertIsNone(self.monitor.record_and_compare(make_report()))

    def test_drift_against_previous_cell(self):
        """Test relative throughput change against the last comparable cell."""
        self.monitor.record_and_compare(make_report(100.0))
        self.monitor.record_and_compare(make_report(500.0, batch=100))
        with self.assertLogs('src.bench_monitor', level='WARNING'):
            change = self.monitor.record_and_compare(make_report(60.0))
        self.assertAlmostEqual(change, -0.4)

    def test_small_drift_not_logged(self):
        """Test that a change within the repeatability bound returns quietly."""
        self.monitor.record_and_compare(make_report(100.0))
        self.assertAlmostEqual(self.monitor.record_and_compare(make_report(110.0)), 0.1)

    def test_unavailable_cells_ignored(self):
        """Test that n/a cells are neither compared nor used as a baseline."""
        self.monitor.record_and_compare(make_report(None, reason='timeout'))
        self.assertIsNone(self.monitor.record_and_compare(make_report(None, reason='timeout')))
        self.assertIsNone(self.monitor.record_and_compare(make_report(100.0)))

    def test_precision_separates_cells(self):
        """Test that f32 and f64 cells are not compared with each other."""
        self.monitor.record_report(make_report(100.0, precision='f64'))
        self.assertIsNone(self.monitor.record_and_compare(make_report(300.0, precision='f32')))

    def test_summary(self):
        """Test per-variant and per-reason summary statistics."""
        self.monitor.record_report(make_report(100.0))
        self.monitor.record_report(make_report(150.0))
        self.monitor.record_report(make_report(None, variant='imp1', reason='timeout'))
        summary = self.monitor.get_summary(hours=1)
        self.assertEqual(summary['total_reports'], 3)
        self.assertEqual(summary['unavailable'], 1)
        self.assertEqual(summary['by_variant']['imp6'], {'cells': 2, 'best_images_per_sec': 150.0})
        self.assertEqual(summary['by_reason'], {'timeout': 1})

    def test_export_to_csv(self):
        """Test CSV export of all rows."""
        self.monitor.record_report(make_report())
        self.monitor.record_report(make_report(variant='imp5'))
        path = os.path.join(self.temp_dir, "export.csv")
        self.assertEqual(self.monitor.export_to_csv(path), 2)
        with open(path, newline='', encoding='utf-8') as handle:
            rows = list(csv.DictReader(handle))
        self.assertEqual({row['variant'] for row in rows}, {'imp6', 'imp5'})

    def test_export_empty(self):
        """Test that exporting an empty history writes nothing."""
        path = os.path.join(self.temp_dir, "empty.csv")
        self.assertEqual(self.monitor.export_to_csv(path), 0)
        self.assertFalse(os.path.exists(path))

    def test_cleanup_old_records(self):
        """Test that rows older than the cutoff are deleted."""
        old = (datetime.now(timezone.utc) - timedelta(days=40)).isoformat()
        self.monitor.record_report(make_report(finished_at=old))
        self.monitor.record_report(make_report())
        self.assertEqual(self.monitor.cleanup_old_records(days=30), 1)
        self.assertEqual(len(self.monitor.get_recent()), 1)

    def test_context_manager(self):
        """Test that the context manager closes the connection."""
        with BenchMonitor(os.path.join(self.temp_dir, "ctx.db")) as monitor:
            monitor.record_report(make_report())
        self.assertIsNone(monitor.conn)


class TestBenchDashboard(unittest.TestCase):
    """Test cases for the bench dashboard script."""

    def setUp(self):
        """Set up test fixtures."""
        self.temp_dir = tempfile.mkdtemp()
        self.db_path = os.path.join(self.temp_dir, "bench.db")
        with BenchMonitor(self.db_path) as monitor:
            monitor.record_report(make_report(120.0))
            monitor.record_report(make_report(None, variant='imp1', reason='timeout'))

    def tearDown(self):
        """Clean up test fixtures."""
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_missing_database(self):
        """Test that a missing database exits with status 1."""
        self.assertEqual(bench_dashboard.main(['--db', os.path.join(self.temp_dir, 'missing.db')]), 1)

    def test_summary_and_recent(self):
        """Test that summary and recent views render."""
        self.assertEqual(bench_dashboard.main(['--db', self.db_path]), 0)
        self.assertEqual(bench_dashboard.main(['--db', self.db_path, '--recent', '5']), 0)

    def test_export(self):
        """Test CSV export through the dashboard."""
        path = os.path.join(self.temp_dir, 'out.csv')
        self.assertEqual(bench_dashboard.main(['--db', self.db_path, '--export', path]), 0)
        self.assertTrue(os.path.exists(path))


if __name__ == '__main__':
    unittest.main()
