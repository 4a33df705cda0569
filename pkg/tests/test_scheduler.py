import io
import json
import sys
import threading
from pathlib import Path

import numpy as np
import pytest

from artifact import store
from artifact.geometry import Block, BlockSpec, Roi, enumerate_blocks
from artifact.scheduler import (
    ArrayFunction,
    BlockTask,
    ExecutionContext,
    ExternalWorkerSpec,
    JournalError,
    TaskValidationError,
    WorkerSpawnError,
    run_blockwise,
    run_pipeline,
    validate_task,
)
from artifact.store import ArrayMetadata, create_dataset
from artifact.worker import serve
from block_workers import Copy, Crash, CrashAfter, FailOn, FailOnce, read_log, smooth

SCRIPTS = Path(__file__).resolve().parent.parent / "scripts"

CONTEXTS = [ExecutionContext.serial(), ExecutionContext.threads(4), ExecutionContext.processes(2)]


def _output(tmp_path, shape, chunks, dtype="f32", name="out"):
    return create_dataset(tmp_path / "out.zarr", name, ArrayMetadata(shape, chunks, dtype), overwrite=True)


def test_execution_context():
    assert not ExecutionContext.serial().concurrent
    assert not ExecutionContext.threads(1).concurrent
    assert ExecutionContext.processes(2).concurrent
    with pytest.raises(ValueError):
        ExecutionContext.threads(0)


def test_validate_aligned(tmp_path):
    out = _output(tmp_path, (16, 16, 16), (8, 8, 8))
    task = BlockTask("t", BlockSpec(out.roi, (8, 8, 8), (0, 0, 0)), print, outputs=[out])
    assert validate_task(task) == []


def test_validate_unaligned(tmp_path):
    out = _output(tmp_path, (24,), (4,))
    task = BlockTask("t", BlockSpec(out.roi, (6,), (0,)), print, outputs=[out])
    violations = validate_task(task)
    assert violations and {v.axis for v in violations} == {0}
    assert violations[0].block_index == 0
    assert str(out.path) in violations[0].output
    assert "axis 0" in violations[0].message


def test_validate_shrink_trailing_block(tmp_path):
    out = _output(tmp_path, (10, 10), (4, 4))
    task = BlockTask("t", BlockSpec(out.roi, (4, 4), (1, 1)), print, outputs=[out])
    assert validate_task(task) == []


def test_validate_ignores_channel_axes(tmp_path):
    out = _output(tmp_path, (3, 8, 8), (3, 4, 4))
    task = BlockTask("t", BlockSpec(Roi((0, 0), (8, 8)), (4, 4), (0, 0)), print, outputs=[out])
    assert validate_task(task) == []


def test_unaligned_task_refuses_concurrency(tmp_path, make_volume):
    src = make_volume(np.arange(12, dtype=np.float32))
    out = _output(tmp_path, (12,), (4,))
    task = BlockTask("t", BlockSpec(out.roi, (6,), (0,)), Copy(src, out), outputs=[out])
    with pytest.raises(TaskValidationError):
        run_blockwise(task, ExecutionContext.threads(2))
    report = run_blockwise(task, ExecutionContext.serial())
    assert report.ok
    np.testing.assert_array_equal(out.read(out.roi), np.arange(12))


def test_identity_worker(tmp_path, make_volume, rng):
    data = rng.random((10, 13)).astype(np.float32)
    src = make_volume(data, chunks=(4, 4))
    out = _output(tmp_path, (10, 13), (4, 4))
    task = BlockTask("copy", BlockSpec(out.roi, (4, 4), (2, 2)), Copy(src, out), [src], [out])
    report = run_blockwise(task)
    assert report.succeeded == report.total_blocks == 12
    np.testing.assert_array_equal(out.read(out.roi), data)


def _whole_smooth(data):
    padded = np.pad(data, 1)
    return smooth(padded)[(slice(1, -1),) * data.ndim]


@pytest.mark.parametrize("seed", [0, 1])
def test_determinism_across_contexts(tmp_path, make_volume, seed):
    rng = np.random.default_rng(seed)
    shape = tuple(int(s) for s in rng.integers(20, 49, 3))
    data = rng.random(shape).astype(np.float32)
    src = make_volume(data, chunks=(16, 16, 16))
    results = []
    for i, ctx in enumerate(CONTEXTS):
        out = _output(tmp_path, shape, (8, 8, 8), name=f"o{i}")
        task = BlockTask("smooth", BlockSpec(out.roi, (8, 8, 8), (1, 1, 1)), ArrayFunction(smooth, src, out), [src], [out])
        report = run_blockwise(task, ctx)
        assert report.ok and report.succeeded == report.total_blocks
        results.append(out.read(out.roi))
    for r in results[1:]:
        np.testing.assert_array_equal(r, results[0])
    np.testing.assert_allclose(results[0], _whole_smooth(data), rtol=0, atol=1e-5)


@pytest.mark.parametrize("ctx", CONTEXTS, ids=lambda c: c.kind.value)
def test_failure_isolation(tmp_path, make_volume, ctx):
    src = make_volume(np.ones((16, 16), np.float32))
    out = _output(tmp_path, (16, 16), (4, 4))
    task = BlockTask("t", BlockSpec(out.roi, (4, 4), (0, 0)), FailOn(Copy(src, out), (3,)), [src], [out])
    report = run_blockwise(task, ctx)
    assert list(report.failed) == [3]
    assert "refusing block 3" in report.failed[3]
    assert report.succeeded == 15
    assert report.succeeded + len(report.failed) + report.skipped == report.total_blocks
    result = out.read(out.roi)
    assert (result[0:4, 12:16] == 0).all()
    assert result.sum() == 15 * 16


@pytest.mark.parametrize("retries,ok", [(0, False), (1, True)])
def test_retry_bound(tmp_path, make_volume, retries, ok):
    src = make_volume(np.ones((8,), np.float32))
    out = _output(tmp_path, (8,), (2,))
    log = str(tmp_path / "attempts.log")
    task = BlockTask("t", BlockSpec(out.roi, (2,), (0,)), FailOnce(Copy(src, out), log), [src], [out], max_retries=retries)
    report = run_blockwise(task, ExecutionContext.threads(2))
    assert report.ok is ok
    assert len(read_log(log)) == 4 * (1 + retries)


def test_retry_exhaustion_counts_attempts(tmp_path, make_volume):
    src = make_volume(np.ones((4,), np.float32))
    out = _output(tmp_path, (4,), (2,))
    log = str(tmp_path / "calls.log")
    task = BlockTask("t", BlockSpec(out.roi, (2,), (0,)), FailOn(Copy(src, out, log), (0,)), max_retries=2)
    # FailOn raises before Copy logs, so only block 1 appears once
    report = run_blockwise(task)
    assert list(report.failed) == [0]
    assert read_log(log) == ["1"]


def test_journal_resume(tmp_path, make_volume):
    data = np.arange(64, dtype=np.float32).reshape(8, 8)
    src = make_volume(data)
    out = _output(tmp_path, (8, 8), (2, 2))
    spec = BlockSpec(out.roi, (2, 2), (0, 0))
    journal = tmp_path / "j" / "copy.journal"
    k = 5
    crash = CrashAfter(Copy(src, out), k, str(tmp_path / "done.log"))
    with pytest.raises(Crash):
        run_blockwise(BlockTask("copy", spec, crash, [src], [out]), journal_path=journal)
    assert journal.read_text().split() == [str(i) for i in range(k)]

    log = str(tmp_path / "resume.log")
    report = run_blockwise(BlockTask("copy", spec, Copy(src, out, log), [src], [out]), ExecutionContext.threads(3), journal)
    assert report.skipped == k
    assert report.succeeded == 16 - k
    assert sorted(int(i) for i in read_log(log)) == list(range(k, 16))
    np.testing.assert_array_equal(out.read(out.roi), data)

    again = run_blockwise(BlockTask("copy", spec, Copy(src, out, log), [src], [out]), journal_path=journal)
    assert again.skipped == 16 and again.succeeded == 0
    assert len(read_log(log)) == 16 - k


def test_failed_blocks_are_not_journaled(tmp_path, make_volume):
    src = make_volume(np.ones((8,), np.float32))
    out = _output(tmp_path, (8,), (2,))
    journal = tmp_path / "t.journal"
    spec = BlockSpec(out.roi, (2,), (0,))
    run_blockwise(BlockTask("t", spec, FailOn(Copy(src, out), (2,)), max_retries=0), journal_path=journal)
    assert sorted(journal.read_text().split()) == ["0", "1", "3"]
    log = str(tmp_path / "calls.log")
    report = run_blockwise(BlockTask("t", spec, Copy(src, out, log)), journal_path=journal)
    assert report.ok and read_log(log) == ["2"]


def test_unwritable_journal(tmp_path, make_volume):
    blocker = tmp_path / "file"
    blocker.write_text("")
    log = str(tmp_path / "calls.log")
    src = make_volume(np.ones((4,), np.float32))
    out = _output(tmp_path, (4,), (2,))
    task = BlockTask("t", BlockSpec(out.roi, (2,), (0,)), Copy(src, out, log))
    with pytest.raises(JournalError):
        run_blockwise(task, journal_path=blocker / "sub" / "j")
    assert read_log(log) == []


def test_spawn_failure(tmp_path):
    task = BlockTask("t", BlockSpec(Roi((0,), (4,)), (2,), (0,)), ExternalWorkerSpec(("/nonexistent/worker-binary",)))
    with pytest.raises(WorkerSpawnError):
        run_blockwise(task, ExecutionContext.processes(2))


def test_external_worker_script(tmp_path, make_volume, rng):
    data = rng.random((12, 10)).astype(np.float32)
    src = make_volume(data, chunks=(4, 5))
    out = create_dataset(tmp_path / "o.zarr", "mask", ArrayMetadata((12, 10), (4, 5), "u8"))
    command = (
        sys.executable, str(SCRIPTS / "threshold_worker.py"),
        str(src.root), src.name, str(out.root), out.name, "0.5",
    )  # fmt: skip
    task = BlockTask("ext", BlockSpec(out.roi, (4, 5), (0, 0)), ExternalWorkerSpec(command), [src], [out])
    report = run_blockwise(task, ExecutionContext.processes(3))
    assert report.ok and report.succeeded == 6
    np.testing.assert_array_equal(out.read(out.roi), (data > 0.5).astype(np.uint8))


def test_external_worker_that_dies(tmp_path):
    command = (sys.executable, "-c", "import sys; sys.stdin.readline(); sys.exit(3)")
    task = BlockTask("dies", BlockSpec(Roi((0,), (4,)), (2,), (0,)), ExternalWorkerSpec(command), max_retries=1)
    report = run_blockwise(task, ExecutionContext.processes(1))
    assert sorted(report.failed) == [0, 1]
    assert all("worker died" in msg for msg in report.failed.values())


def test_serve_protocol():
    calls = []

    def process(block):
        print("chatter that must not reach the protocol stream")
        if block.block_index == 1:
            raise ValueError("bad block")
        calls.append(block)

    blocks = enumerate_blocks(BlockSpec(Roi((0,), (4,)), (2,), (1,)))
    lines = [json.dumps({"type": "block", **b.to_json()}) for b in blocks]
    stdin = io.StringIO("\n".join(lines + ['{"type": "shutdown"}', json.dumps({"type": "block", **blocks[0].to_json()})]) + "\n")
    stdout = io.StringIO()
    assert serve(process, stdin, stdout) == 0
    replies = [json.loads(line) for line in stdout.getvalue().splitlines()]
    assert replies == [
        {"type": "done", "block_index": 0, "status": "ok"},
        {"type": "done", "block_index": 1, "status": "error", "message": "ValueError: bad block"},
    ]
    assert calls == [blocks[0]]
    assert calls[0].read_roi == Roi((-1,), (4,))


def test_block_json_roundtrip():
    block = Block(7, Roi((-1, 2), (4, 4)), Roi((0, 3), (2, 2)))
    assert Block.from_json(json.loads(json.dumps(block.to_json()))) == block
    assert block.to_json()["block_index"] == 7


def test_no_write_overlap_between_blocks(tmp_path, make_volume, rng, monkeypatch):
    data = rng.random((20, 20, 20)).astype(np.float32)
    src = make_volume(data, chunks=(5, 5, 5))
    out = _output(tmp_path, (20, 20, 20), (5, 5, 5))
    current = threading.local()
    written: dict[int, list] = {}
    lock = threading.Lock()
    original = store._write_chunk_file

    def record(path, payload):
        with lock:
            written.setdefault(current.block, []).append(path.name)
        original(path, payload)

    monkeypatch.setattr(store, "_write_chunk_file", record)
    inner = ArrayFunction(smooth, src, out)

    def worker(block):
        current.block = block.block_index
        inner(block)

    task = BlockTask("t", BlockSpec(out.roi, (10, 5, 10), (1, 1, 1)), worker, [src], [out])
    assert run_blockwise(task, ExecutionContext.threads(4)).ok
    assert len(written) == 16
    seen = set()
    for chunks in written.values():
        assert len(chunks) == len(set(chunks))
        assert not seen & set(chunks)
        seen |= set(chunks)
    assert len(seen) == 64


def test_pipeline_empty():
    assert run_pipeline([]) == []


def test_pipeline_halts_on_failure(tmp_path, make_volume):
    src = make_volume(np.ones((8,), np.float32))
    mid = _output(tmp_path, (8,), (2,), name="mid")
    end = _output(tmp_path, (8,), (2,), name="end")
    log = str(tmp_path / "stage2.log")
    spec = BlockSpec(mid.roi, (2,), (0,))
    stages = [
        BlockTask("one", spec, FailOn(Copy(src, mid), (1,)), [src], [mid], max_retries=0),
        BlockTask("two", spec, Copy(mid, end, log), [mid], [end]),
    ]
    reports = run_pipeline(stages, ExecutionContext.threads(2), tmp_path / "journals")
    assert len(reports) == 1 and not reports[0].ok
    assert read_log(log) == []
    assert (tmp_path / "journals" / "one.journal").exists()


def test_pipeline_chain_matches_whole_volume(tmp_path, make_volume, rng):
    data = rng.random((32, 32, 32)).astype(np.float32)
    src = make_volume(data, chunks=(8, 8, 8))
    a = _output(tmp_path, (32, 32, 32), (8, 8, 8), name="a")
    b = _output(tmp_path, (32, 32, 32), (8, 8, 8), name="b")
    stages = [
        BlockTask("smooth", BlockSpec(a.roi, (8, 8, 8), (1, 1, 1)), ArrayFunction(smooth, src, a), [src], [a]),
        BlockTask("scale", BlockSpec(b.roi, (16, 8, 8), (0, 0, 0)), Copy(a, b, scale=0.5), [a], [b]),
    ]
    reports = run_pipeline(stages, ExecutionContext.processes(2))
    assert [r.ok for r in reports] == [True, True]
    np.testing.assert_allclose(b.read(b.roi), _whole_smooth(data) * 0.5, atol=1e-5, rtol=0)


def test_report_json(tmp_path, make_volume):
    src = make_volume(np.ones((4,), np.float32))
    out = _output(tmp_path, (4,), (2,))
    report = run_blockwise(BlockTask("t", BlockSpec(out.roi, (2,), (0,)), FailOn(Copy(src, out), (0,)), max_retries=0))
    doc = json.loads(json.dumps(report.to_json()))
    assert doc["total_blocks"] == 2 and doc["succeeded"] == 1 and doc["skipped"] == 0
    assert list(doc["failed"]) == ["0"]
