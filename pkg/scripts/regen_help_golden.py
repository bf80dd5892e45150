"""Rewrite tests/golden/help_*.txt from the current CLI. Review the diff before committing."""

import contextlib
import io
from pathlib import Path

from gsedit.cli import HANDLERS, main

GOLDEN = Path(__file__).resolve().parent.parent / "tests" / "golden"


def help_text(args):
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        main(args + ["--help"])
    return buf.getvalue()


if __name__ == "__main__":
    GOLDEN.mkdir(parents=True, exist_ok=True)
    (GOLDEN / "help_main.txt").write_text(help_text([]))
    for name in HANDLERS:
        (GOLDEN / f"help_{name}.txt").write_text(help_text([name]))
    print(f"wrote {len(HANDLERS) + 1} files to {GOLDEN}")
