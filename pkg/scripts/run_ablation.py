"""Thin wrapper around `stgt ablation`; extra arguments are passed through."""
import sys

from stgt.cli import main

if __name__ == "__main__":
    sys.exit(main(["ablation", *sys.argv[1:]]))
