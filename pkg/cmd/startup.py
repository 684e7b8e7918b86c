#!/usr/bin/env python3
"""Launch the waveloc command line from a source checkout."""
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from waveloc.core.cli import dispatch  # noqa: E402


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
