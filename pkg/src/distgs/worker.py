"""Worker process entry point: ``python -m distgs.worker manifest.json``."""
from __future__ import annotations

import sys

from .runtime import run_worker


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 1:
        print("usage: python -m distgs.worker MANIFEST", file=sys.stderr)
        return 2
    run_worker(argv[0])
    return 0


if __name__ == "__main__":
    sys.exit(main())
