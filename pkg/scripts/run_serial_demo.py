#!/usr/bin/env python3
"""Run the serial-demo experiment with the bundled scenario."""

import sys
from pathlib import Path

from rodgraph.cli import main

ROOT = Path(__file__).resolve().parent.parent

if __name__ == "__main__":
    sys.exit(
        main(
            ["serial-demo", "--config", str(ROOT / "scenarios" / "serial_demo.toml"), "--check"]
            + sys.argv[1:]
        )
    )
