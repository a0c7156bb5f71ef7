#!/usr/bin/env python3
"""Run the parallel-track experiment with the bundled scenario."""

import sys
from pathlib import Path

from rodgraph.cli import main

ROOT = Path(__file__).resolve().parent.parent

if __name__ == "__main__":
    sys.exit(
        main(
            ["parallel-track", "--config", str(ROOT / "scenarios" / "parallel_track.toml"), "--check"]
            + sys.argv[1:]
        )
    )
