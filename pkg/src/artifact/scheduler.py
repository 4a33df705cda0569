"""Run a per-block function over every block of a task.

Conflict-free parallel writes are guaranteed by construction: a task may
run with more than one worker only if every write ROI is aligned to the
chunk grid of every output (see :func:`validate_task`). The store itself
does no locking.

Per-block workers are either plain callables ``worker(block)`` or an
:class:`ExternalWorkerSpec` naming a program that speaks the
newline-delimited JSON protocol implemented in :mod:`artifact.worker`.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import pickle
import queue
import subprocess
import sys
import tempfile
import threading
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

from .geometry import Block, BlockSpec, enumerate_blocks
from .store import VolumeHandle

logger = logging.getLogger(__name__)


class SchedulerError(Exception):
    pass


class TaskValidationError(SchedulerError):
    pass


class WorkerSpawnError(SchedulerError):
    """A worker process could not be started."""


class JournalError(SchedulerError):
    pass


class ExecutionKind(enum.Enum):
    SERIAL = "serial"
    THREADS = "threads"
    PROCESSES = "processes"


@dataclass(frozen=True)
class ExecutionContext:
    kind: ExecutionKind = ExecutionKind.SERIAL
    n: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", ExecutionKind(self.kind))
        if self.n < 1:
            raise ValueError("worker count must be at least 1")
        if self.kind is ExecutionKind.SERIAL and self.n != 1:
            raise ValueError("serial execution has exactly one worker")

    @classmethod
    def serial(cls) -> "ExecutionContext":
        return cls(ExecutionKind.SERIAL, 1)

    @classmethod
    def threads(cls, n: int) -> "ExecutionContext":
        return cls(ExecutionKind.THREADS, n)

    @classmethod
    def processes(cls, n: int) -> "ExecutionContext":
        return cls(ExecutionKind.PROCESSES, n)

    @property
    def concurrent(self) -> bool:
        return self.n > 1

    def to_json(self) -> dict:
        return {"kind": self.kind.value, "n": self.n}


@dataclass(frozen=True)
class ExternalWorkerSpec:
    command: tuple[str, ...]
    env: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "command", tuple(self.command))


Worker = Union[Callable[[Block], None], ExternalWorkerSpec]


@dataclass
class BlockTask:
    name: str
    block_spec: BlockSpec
    worker: Worker
    inputs: Sequence[VolumeHandle] = ()
    outputs: Sequence[VolumeHandle] = ()
    max_retries: int = 2


@dataclass
class RunReport:
    task: str
    total_blocks: int
    succeeded: int = 0
    failed: dict[int, str] = field(default_factory=dict)
    skipped: int = 0
    wall_time: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.failed

    def to_json(self) -> dict:
        return {
            "task": self.task,
            "total_blocks": self.total_blocks,
            "succeeded": self.succeeded,
            "failed": {str(k): v for k, v in sorted(self.failed.items())},
            "skipped": self.skipped,
            "wall_time": self.wall_time,
        }


@dataclass(frozen=True)
class Violation:
    block_index: int
    output: str
    axis: int
    message: str


def validate_task(task: BlockTask) -> list[Violation]:
    """Every way in which a write ROI is not aligned to an output chunk grid.

    A trailing write ROI may end anywhere at or beyond the array boundary.
    Leading (channel) axes of an output are not part of block geometry.
    """
    violations = []
    try:
        blocks = enumerate_blocks(task.block_spec)
    except ValueError as exc:
        return [Violation(-1, "", -1, str(exc))]
    d = task.block_spec.total_roi.dims
    for out in task.outputs:
        chunks = out.metadata.chunk_shape[out.ndim - d :]
        extent = out.metadata.shape[out.ndim - d :]
        for block in blocks:
            w = block.write_roi
            for axis in range(d):
                begin, end = w.begin[axis], w.end[axis]
                if begin % chunks[axis] or (end % chunks[axis] and end < extent[axis]):
                    violations.append(
                        Violation(
                            block.block_index,
                            str(out.path),
                            axis,
                            f"block {block.block_index}: write ROI [{begin}, {end}) on axis {axis} "
                            f"is not aligned to chunk size {chunks[axis]} of {out.path}",
                        )
                    )
    return violations


class _Journal:
    """Append-only record of completed block indices, one per line."""

    def __init__(self, path):
        self.path = Path(path) if path is not None else None
        self.done: set[int] = set()
        self._fh = None
        if self.path is None:
            return
        try:
            if self.path.exists():
                for line in self.path.read_text().splitlines():
                    line = line.strip()
                    if line.isdigit():
                        self.done.add(int(line))
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "a")
        except OSError as exc:
            raise JournalError(f"journal {self.path} is not writable: {exc}") from exc

    def record(self, block_index: int) -> None:
        self.done.add(block_index)
        if self._fh is not None:
            self._fh.write(f"{block_index}\n")
            self._fh.flush()
            os.fsync(self._fh.fileno())

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def _attempt(worker: Callable[[Block], None], block: Block, attempts: int) -> str | None:
    error = None
    for attempt in range(attempts):
        try:
            worker(block)
            return None
        except Exception as exc:  # noqa: BLE001 - any block failure is recorded, not raised
            error = f"{type(exc).__name__}: {exc}"
            logger.debug("block %d attempt %d failed: %s", block.block_index, attempt + 1, error)
    return error


def _run_in_threads(worker, blocks, n, attempts, on_done):
    with ThreadPoolExecutor(max_workers=n) as pool:
        pending = {}
        it = iter(blocks)
        for block in it:
            pending[pool.submit(_attempt, worker, block, attempts)] = block
            if len(pending) >= 2 * n:
                break
        while pending:
            done, _ = wait(pending, return_when=FIRST_COMPLETED)
            for fut in done:
                block = pending.pop(fut)
                on_done(block, fut.result())
            for block in it:
                pending[pool.submit(_attempt, worker, block, attempts)] = block
                if len(pending) >= 2 * n:
                    break


class _WorkerProcess:
    def __init__(self, command, env):
        self.command = list(command)
        self.env = env
        self.proc = None
        self.spawn()

    def spawn(self):
        try:
            self.proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                env=self.env,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise WorkerSpawnError(f"cannot start worker {self.command!r}: {exc}") from exc

    def alive(self) -> bool:
        return self.proc is not None and self.proc.poll() is None

    def run(self, block: Block) -> str | None:
        """Send one block and wait for its ``done`` message; returns an error text or None."""
        msg = {"type": "block", **block.to_json()}
        try:
            self.proc.stdin.write(json.dumps(msg) + "\n")
            self.proc.stdin.flush()
            while True:
                line = self.proc.stdout.readline()
                if not line:
                    code = self.proc.wait()
                    raise EOFError(f"worker exited with code {code}")
                try:
                    reply = json.loads(line)
                except json.JSONDecodeError:
                    logger.debug("ignoring non-protocol worker output: %r", line)
                    continue
                if reply.get("type") == "done" and reply.get("block_index") == block.block_index:
                    break
        except (OSError, EOFError, ValueError) as exc:
            self.proc.kill()
            self.proc.wait()
            return f"worker died: {exc}"
        if reply.get("status") == "ok":
            return None
        return reply.get("message", "worker reported an error")

    def shutdown(self):
        if self.proc is None:
            return
        if self.alive():
            try:
                self.proc.stdin.write(json.dumps({"type": "shutdown"}) + "\n")
                self.proc.stdin.flush()
                self.proc.stdin.close()
            except OSError:
                pass
            try:
                self.proc.wait(timeout=30)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()
        for stream in (self.proc.stdin, self.proc.stdout):
            try:
                stream.close()
            except OSError:
                pass


def _run_in_processes(command, env, blocks, n, attempts, on_done):
    todo: queue.Queue = queue.Queue()
    for block in blocks:
        todo.put(block)
    results: queue.Queue = queue.Queue()
    n = max(1, min(n, len(blocks)))
    workers = []
    try:
        for _ in range(n):
            workers.append(_WorkerProcess(command, env))
    except WorkerSpawnError:
        for w in workers:
            w.shutdown()
        raise

    def drive(proc: _WorkerProcess):
        while True:
            try:
                block = todo.get_nowait()
            except queue.Empty:
                return
            error = None
            for _ in range(attempts):
                if not proc.alive():
                    try:
                        proc.spawn()
                    except WorkerSpawnError as exc:
                        results.put(exc)
                        return
                error = proc.run(block)
                if error is None:
                    break
            results.put((block, error))

    threads = [threading.Thread(target=drive, args=(w,), daemon=True) for w in workers]
    for t in threads:
        t.start()
    try:
        for _ in range(len(blocks)):
            item = results.get()
            if isinstance(item, WorkerSpawnError):
                raise item
            on_done(*item)
    finally:
        # drain the queue so drivers stop after their current block
        while True:
            try:
                todo.get_nowait()
            except queue.Empty:
                break
        for t in threads:
            t.join()
        for w in workers:
            w.shutdown()


def _worker_env(extra: dict | None = None) -> dict:
    env = dict(os.environ)
    src = str(Path(__file__).resolve().parent.parent)
    env["PYTHONPATH"] = os.pathsep.join(p for p in (src, env.get("PYTHONPATH")) if p)
    env.update(extra or {})
    return env


def run_blockwise(
    task: BlockTask,
    ctx: ExecutionContext | None = None,
    journal_path=None,
) -> RunReport:
    """Run ``task.worker`` on every block not already recorded in the journal.

    Each block is attempted up to ``1 + task.max_retries`` times. Failed
    blocks are recorded in the report and never abort the run.
    """
    ctx = ctx or ExecutionContext.serial()
    violations = validate_task(task)
    if violations and (ctx.concurrent or violations[0].block_index < 0):
        raise TaskValidationError(
            f"task {task.name!r} cannot run with {ctx.n} workers: " + violations[0].message
        )
    start = time.perf_counter()
    blocks = enumerate_blocks(task.block_spec)
    journal = _Journal(journal_path)
    report = RunReport(task.name, len(blocks))
    pending = [b for b in blocks if b.block_index not in journal.done]
    report.skipped = len(blocks) - len(pending)
    attempts = 1 + task.max_retries

    def on_done(block: Block, error: str | None):
        if error is None:
            report.succeeded += 1
            journal.record(block.block_index)
        else:
            report.failed[block.block_index] = error
            logger.warning("task %s: block %d failed: %s", task.name, block.block_index, error)

    try:
        if isinstance(task.worker, ExternalWorkerSpec):
            _run_in_processes(
                task.worker.command, _worker_env(task.worker.env), pending, ctx.n, attempts, on_done
            )
        elif ctx.kind is ExecutionKind.PROCESSES:
            with tempfile.TemporaryDirectory(prefix="artifact-worker-") as tmp:
                payload = Path(tmp) / "worker.pkl"
                payload.write_bytes(pickle.dumps(task.worker))
                command = [sys.executable, "-m", "artifact.worker", str(payload)]
                _run_in_processes(command, _worker_env(), pending, ctx.n, attempts, on_done)
        elif ctx.n == 1:
            for block in pending:
                on_done(block, _attempt(task.worker, block, attempts))
        else:
            _run_in_threads(task.worker, pending, ctx.n, attempts, on_done)
    finally:
        journal.close()
    report.wall_time = time.perf_counter() - start
    return report


def run_pipeline(
    stages: Sequence[BlockTask],
    ctx: ExecutionContext | None = None,
    journal_dir=None,
) -> list[RunReport]:
    """Run ``stages`` one after another; stop after the first stage with failures."""
    reports = []
    for stage in stages:
        journal = Path(journal_dir) / f"{stage.name}.journal" if journal_dir is not None else None
        report = run_blockwise(stage, ctx, journal)
        reports.append(report)
        if not report.ok:
            logger.error("stage %s had %d failed blocks; halting pipeline", stage.name, len(report.failed))
            break
    return reports


@dataclass
class ArrayFunction:
    """Adapt ``func(array) -> array`` into a per-block worker.

    ``func`` receives the input over the block's read ROI (all channels) and
    returns either an array over the read ROI or over the write ROI; the
    result is cropped to the write ROI and written, clipped to the output
    bounds. ``func`` must be picklable for process execution.
    """

    func: Callable[[np.ndarray], np.ndarray]
    input: VolumeHandle
    output: VolumeHandle

    def __call__(self, block: Block) -> None:
        data = self.input.read(block.read_roi)
        result = np.asarray(self.func(data))
        d = block.write_roi.dims
        spatial = tuple(result.shape[result.ndim - d :])
        if spatial == tuple(block.read_roi.shape):
            crop = block.write_roi.to_slices(block.read_roi.offset)
            result = result[(Ellipsis,) + crop]
        elif spatial != tuple(block.write_roi.shape):
            raise ValueError(
                f"function returned spatial shape {spatial}; expected read shape "
                f"{tuple(block.read_roi.shape)} or write shape {tuple(block.write_roi.shape)}"
            )
        self.output.write(block.write_roi, result.astype(self.output.metadata.np_dtype, copy=False), clip=True)
