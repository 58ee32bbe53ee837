"""Run the acceptance suite and show its per-criterion PASS/FAIL lines.

Usage: python scripts/run_acceptance.py [--quick]   (--quick skips the two Monte Carlo criteria)
"""
import pathlib
import sys

import pytest

if __name__ == "__main__":
    root = pathlib.Path(__file__).resolve().parents[1]
    args = [str(root / "tests" / "test_acceptance.py"), "-q", "-s"]
    if "--quick" in sys.argv[1:]:
        args += ["-m", "not slow"]
    sys.exit(pytest.main(args))
