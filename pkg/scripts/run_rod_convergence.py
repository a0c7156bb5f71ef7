#!/usr/bin/env python3
"""Run the rod-convergence experiment with the bundled scenario."""

import sys
from pathlib import Path

from rodgraph.cli import main

ROOT = Path(__file__).resolve().parent.parent

if __name__ == "__main__":
    sys.exit(
        main(
            ["rod-convergence", "--config", str(ROOT / "scenarios" / "rod_convergence.toml"), "--check"]
            + sys.argv[1:]
        )
    )
