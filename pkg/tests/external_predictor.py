"""External predictor used by the CLI tests.

Usage: external_predictor.py IN_ROOT IN_DATASET OUT_ROOT OUT_DATASET LOG

Copies the input into channel 0 of the output over each write ROI and
appends the block index to LOG. Fails permanently on the block named by
the FAIL_BLOCK environment variable, if set.
"""

import os
import sys

from artifact.store import open_dataset
from artifact.worker import serve


def main():
    in_root, in_name, out_root, out_name, log = sys.argv[1:6]
    source = open_dataset(in_root, in_name)
    target = open_dataset(out_root, out_name)
    fail = os.environ.get("FAIL_BLOCK")

    def process(block):
        if fail is not None and block.block_index == int(fail):
            raise RuntimeError(f"block {block.block_index} is poisoned")
        data = source.read(block.write_roi)
        target.write(block.write_roi, data[None].astype("float32"), clip=True)
        fd = os.open(log, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
        os.write(fd, f"{block.block_index}\n".encode())
        os.close(fd)

    return serve(process)


if __name__ == "__main__":
    sys.exit(main())
