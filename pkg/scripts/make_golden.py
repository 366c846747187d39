"""Regenerate the archived default-run reports under tests/golden.

Run only after the default run has been checked by hand; the determinism
acceptance test compares against these bytes.
"""
import os
import sys

from stgt.config import RunConfig
from stgt.experiments import training_reports
from stgt.io import write_report
from stgt.pipeline import train

GOLDEN = os.path.join(os.path.dirname(__file__), "..", "tests", "golden")


def main() -> int:
    cfg = RunConfig()
    for name, rows in training_reports(cfg, train(cfg)).items():
        paths = write_report(GOLDEN, name, rows, cfg.to_dict())
        print("wrote", paths["csv"])
        for ext in ("txt", "json"):
            os.remove(paths[ext])
    return 0


if __name__ == "__main__":
    sys.exit(main())
