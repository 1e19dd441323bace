"""Main entry point for the ncchart command line."""

import sys

from ncchart.cli import main

if __name__ == "__main__":
    sys.exit(main())
