"""Thin wrapper around `stgt experiment`; extra arguments are passed through."""
import sys

from stgt.cli import main

if __name__ == "__main__":
    sys.exit(main(["experiment", *sys.argv[1:]]))
