#!/usr/bin/env python3
"""Run the tendon-track experiment with the bundled scenario."""

import sys
from pathlib import Path

from rodgraph.cli import main

ROOT = Path(__file__).resolve().parent.parent

if __name__ == "__main__":
    sys.exit(
        main(
            ["tendon-track", "--config", str(ROOT / "scenarios" / "tendon_track.toml"), "--check"]
            + sys.argv[1:]
        )
    )
