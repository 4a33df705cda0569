"""Example external block worker.

Usage::

    python threshold_worker.py IN_ROOT IN_DATASET OUT_ROOT OUT_DATASET THRESHOLD

Speaks the newline-delimited JSON block protocol on stdin/stdout and writes
``input > THRESHOLD`` (as u8) into the output over each block's write ROI.
A worker in another language only has to implement the same three
messages; see ``artifact.worker`` for the format.
"""

from __future__ import annotations

import sys

import numpy as np

from artifact.store import open_dataset
from artifact.worker import serve


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 5:
        print(__doc__, file=sys.stderr)
        return 2
    source = open_dataset(argv[0], argv[1])
    target = open_dataset(argv[2], argv[3])
    t = float(argv[4])

    def process(block):
        data = source.read(block.write_roi)
        target.write(block.write_roi, (data > t).astype(np.uint8), clip=True)

    return serve(process)


if __name__ == "__main__":
    sys.exit(main())
