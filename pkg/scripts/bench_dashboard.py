"""
Bench History Dashboard

A command-line dashboard over the bench history database written by
`vcnn.py bench ... --history <db>`: per-variant summary, recent cells, CSV
export and cleanup of old rows.

Usage:
    python scripts/bench_dashboard.py --db ./logs/bench_history.db             # Show summary
    python scripts/bench_dashboard.py --db ./logs/bench_history.db --recent 20 # Show recent 20 cells
    python scripts/bench_dashboard.py --export history.csv                     # Export to CSV
    python scripts/bench_dashboard.py --cleanup 30                             # Drop rows older than 30 days
"""

import sys
import argparse
import json
from pathlib import Path
from typing import List, Optional

# Project root on the path so that `src` imports resolve from scripts/
sys.path.insert(0, str(Path(__file__).parent.parent))

from tabulate import tabulate  # noqa: E402

from src.bench_monitor import BenchMonitor  # noqa: E402


def print_summary(monitor: BenchMonitor, hours: int = 24):
    """Print summary statistics."""
    summary = monitor.get_summary(hours=hours)

    print("\n" + "=" * 70)
    print(f"  BENCH HISTORY - Last {hours} Hours")
    print("=" * 70)
    print(f"\nGenerated: {summary['generated_at']}")
    print(f"\n   Cells recorded:   {summary['total_reports']}")
    print(f"   Not available:    {summary['unavailable']}")

    if summary['by_variant']:
        print("\nBEST THROUGHPUT BY VARIANT")
        rows = [[variant, stats['cells'], f"{stats['best_images_per_sec']:.1f}" if stats['best_images_per_sec'] else 'n/a']
                for variant, stats in summary['by_variant'].items()]
        print(tabulate(rows, headers=['Variant', 'Cells', 'Best images/s'], tablefmt='grid'))

    if summary['by_reason']:
        print("\nNOT AVAILABLE BY REASON")
        print(tabulate(sorted(summary['by_reason'].items()), headers=['Reason', 'Cells'], tablefmt='grid'))

    print("\n" + "=" * 70 + "\n")


def print_recent(monitor: BenchMonitor, limit: int = 50):
    """Print the most recent cells."""
    rows = monitor.get_recent(limit=limit)

    print("\n" + "=" * 70)
    print(f"  RECENT BENCH CELLS (Last {limit})")
    print("=" * 70 + "\n")

    if not rows:
        print("No cells recorded.\n")
        return

    table = []
    for row in rows:
        fractions = json.loads(row['fractions'] or '{}')
        conv = fractions.get('conv_f', 0.0) + fractions.get('conv_b', 0.0)
        table.append([
            row['id'],
            row['timestamp'][:19],
            row['network'] or row['scale'],
            row['variant'],
            row['mode'],
            row['batch'],
            f"{row['images_per_sec']:.1f}" if row['images_per_sec'] is not None else f"n/a ({row['reason']})",
            f"{conv:.0%}" if row['images_per_sec'] is not None else '-',
        ])

    headers = ['ID', 'Timestamp', 'Network', 'Variant', 'Mode', 'Batch', 'Images/s', 'Conv share']
    print(tabulate(table, headers=headers, tablefmt='grid'))
    print(f"\nTotal: {len(rows)} cells\n")


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        description='Bench History Dashboard',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python bench_dashboard.py                          # Show 24-hour summary
  python bench_dashboard.py --hours 168              # Show one week
  python bench_dashboard.py --recent 100             # Show recent 100 cells
  python bench_dashboard.py --export data.csv        # Export all rows
        """
    )
    parser.add_argument('--db', default='./logs/bench_history.db',
                        help='Path to bench history database (default: ./logs/bench_history.db)')
    parser.add_argument('--hours', type=int, default=24, help='Hours to include in the summary (default: 24)')
    parser.add_argument('--recent', type=int, metavar='N', help='Show N most recent cells')
    parser.add_argument('--export', metavar='FILE', help='Export rows to a CSV file')
    parser.add_argument('--cleanup', type=int, metavar='DAYS', help='Delete rows older than DAYS')
    args = parser.parse_args(argv)

    if not Path(args.db).exists():
        print(f"\nError: Bench history database not found at {args.db}")
        print("   Run a bench with --history to create it.\n")
        return 1

    with BenchMonitor(args.db) as monitor:
        if args.export:
            count = monitor.export_to_csv(args.export, hours=args.hours if args.hours != 24 else None)
            print(f"\nExported {count} rows to: {args.export}\n")
        elif args.cleanup is not None:
            deleted = monitor.cleanup_old_records(days=args.cleanup)
            print(f"\nDeleted {deleted} rows older than {args.cleanup} days\n")
        elif args.recent:
            print_recent(monitor, limit=args.recent)
        else:
            print_summary(monitor, hours=args.hours)
    return 0


if __name__ == "__main__":
    sys.exit(main())
