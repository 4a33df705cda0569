"""Worker side of the block protocol.

The orchestrator writes one JSON object per line to the worker's stdin::

    {"type": "block", "block_index": 3, "read_roi": {...}, "write_roi": {...}}
    {"type": "shutdown"}

and the worker answers every block on stdout with::

    {"type": "done", "block_index": 3, "status": "ok"}
    {"type": "done", "block_index": 3, "status": "error", "message": "..."}

Custom scripts call :func:`serve` with their per-block function. Running
``python -m artifact.worker PAYLOAD`` serves a pickled callable, which is
how process execution ships in-process workers.
"""

from __future__ import annotations

import contextlib
import json
import pickle
import sys
import traceback
from typing import Callable, TextIO

from .geometry import Block


def serve(process_block: Callable[[Block], None], stdin: TextIO | None = None, stdout: TextIO | None = None) -> int:
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout

    def reply(msg: dict) -> None:
        stdout.write(json.dumps(msg) + "\n")
        stdout.flush()

    for line in stdin:
        line = line.strip()
        if not line:
            continue
        msg = json.loads(line)
        kind = msg.get("type")
        if kind == "shutdown":
            return 0
        if kind != "block":
            continue
        block = Block.from_json(msg)
        try:
            # user code must not write into the protocol stream
            with contextlib.redirect_stdout(sys.stderr):
                process_block(block)
        except Exception as exc:  # noqa: BLE001
            traceback.print_exc(file=sys.stderr)
            reply(
                {
                    "type": "done",
                    "block_index": block.block_index,
                    "status": "error",
                    "message": f"{type(exc).__name__}: {exc}",
                }
            )
        else:
            reply({"type": "done", "block_index": block.block_index, "status": "ok"})
    return 0


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 1:
        print("usage: python -m artifact.worker PAYLOAD", file=sys.stderr)
        return 2
    with open(argv[0], "rb") as fh:
        func = pickle.load(fh)
    return serve(func)


if __name__ == "__main__":
    sys.exit(main())
