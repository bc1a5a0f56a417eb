#!/usr/bin/env python3
"""
Command-line entry point for the two-level depth ensemble.

    python run_tedepth.py synth --config configs/desk.cfg
    python run_tedepth.py train-base --config configs/desk.cfg --jobs 3
    python run_tedepth.py train-mixer --config configs/desk.cfg --kind rbf
    python run_tedepth.py eval --config configs/desk.cfg
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

from ml.cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
