#!/usr/bin/env python3
"""
Initialize the minflow run ledger.

Run this once to create the SQLite database and tables:
    python init_db.py
    python init_db.py --db runs/ledger.db

Commands record into the ledger when given --db (or MINFLOW_DB is set).
"""

import argparse
import os

from dotenv import load_dotenv

from db import DEFAULT_DB, get_engine, init_db


def main():
    load_dotenv()
    parser = argparse.ArgumentParser(description="Create the minflow run ledger")
    parser.add_argument("--db", type=str, default=os.getenv("MINFLOW_DB", DEFAULT_DB), help="Database path")
    args = parser.parse_args()

    print("Initializing minflow run ledger...")
    init_db(get_engine(args.db))

    print(f"✓ Database created: {args.db}")
    print("✓ Tables created: runs, artifacts, metrics")
    print("\nRecord runs with:")
    print(f"  python minflow.py --db {args.db} decompose ...")


if __name__ == "__main__":
    main()
