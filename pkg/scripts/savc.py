"""Run the savc CLI from a source checkout without installing the package."""

from __future__ import annotations

from pathlib import Path
import sys

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from savc.cli import main  # noqa: E402

if __name__ == "__main__":
    raise SystemExit(main())
