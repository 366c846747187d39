"""Thin wrapper around `stgt bench`; extra arguments are passed through."""
import sys

from stgt.cli import main

if __name__ == "__main__":
    sys.exit(main(["bench", *sys.argv[1:]]))
