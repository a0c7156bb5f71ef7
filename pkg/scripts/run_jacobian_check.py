#!/usr/bin/env python3
"""Run the jacobian-check experiment with the bundled scenario."""

import sys
from pathlib import Path

from rodgraph.cli import main

ROOT = Path(__file__).resolve().parent.parent

if __name__ == "__main__":
    sys.exit(
        main(
            ["jacobian-check", "--config", str(ROOT / "scenarios" / "jacobian_check.toml"), "--check"]
            + sys.argv[1:]
        )
    )
