"""Command line entry point.

Usage::

    artifact info|target|predict|segment|evaluate|sweep --config CONFIG [--workers N] [--journal PATH]

All parameters live in the JSON config; paths in it are relative to the
config file. Exit status is 0 on success, 1 when some blocks failed and 2
for configuration or I/O errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from .config import ConfigError, check_keys, require
from .evaluate import (
    INSTANCE_METRICS,
    SEMANTIC_METRICS,
    Checkpoint,
    DataSplitError,
    PostKind,
    SweepError,
    instance_metrics,
    overlap_metrics,
    parse_datasplit,
    sweep,
)
from .geometry import BlockSpec, Coordinate, FitPolicy
from .postprocess import (
    Connectivity,
    IdSpaceExhausted,
    segment_affinities,
    segment_instances,
    threshold_blockwise,
)
from .predict import PredictorSpec, PredictRun, run_predict
from .scheduler import BlockTask, ExecutionContext, ExecutionKind, RunReport, SchedulerError, run_blockwise
from .store import ArrayMetadata, StoreError, UnsupportedFeatureError, VolumeAttributes, create_dataset, open_dataset
from .targets import TargetSpec, TargetWorker

logger = logging.getLogger("artifact")

EXIT_OK, EXIT_PARTIAL, EXIT_ERROR = 0, 1, 2

TOP_LEVEL_KEYS = (
    "input", "output", "gt", "task", "predict", "post", "blocks", "workers",
    "seed", "scratch_dir", "evaluate", "sweep", "record",
)  # fmt: skip


def tool_version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0+unknown"


@dataclass
class RunConfig:
    doc: dict
    base_dir: Path
    path: Path | None = None

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        check_keys(doc, TOP_LEVEL_KEYS, "config")
        return cls(doc, path.resolve().parent, path)

    def section(self, name: str, required: bool = True) -> dict | None:
        value = self.doc.get(name)
        if value is None and required:
            raise ConfigError(f"config: missing section {name!r}")
        return value

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def volume_ref(self, name: str) -> tuple[Path, str]:
        ref = self.section(name)
        check_keys(ref, ("path", "dataset"), name)
        return self.resolve(require(ref, "path", name)), str(require(ref, "dataset", name))

    @property
    def scratch_dir(self) -> Path:
        return self.resolve(self.doc.get("scratch_dir", "scratch"))

    def blocks(self, ndim: int, override_write_shape=None) -> tuple[Coordinate, Coordinate | None, FitPolicy]:
        doc = self.section("blocks", required=override_write_shape is None) or {}
        check_keys(doc, ("write_shape", "context", "fit"), "blocks")
        write_shape = override_write_shape if override_write_shape is not None else require(doc, "write_shape", "blocks")
        if len(write_shape) != ndim:
            raise ConfigError(f"blocks: write_shape has {len(write_shape)} entries for a {ndim}-D volume")
        context = doc.get("context")
        if context is not None and len(context) != ndim:
            raise ConfigError(f"blocks: context has {len(context)} entries for a {ndim}-D volume")
        try:
            fit = FitPolicy(doc.get("fit", "shrink"))
        except ValueError:
            raise ConfigError(f"blocks: unknown fit policy {doc.get('fit')!r}") from None
        return Coordinate(write_shape), Coordinate(context) if context is not None else None, fit

    def execution(self, workers_override: int | None) -> ExecutionContext:
        doc = self.section("workers", required=False) or {}
        check_keys(doc, ("kind", "n"), "workers")
        try:
            kind = ExecutionKind(doc.get("kind", "serial"))
        except ValueError:
            raise ConfigError(f"workers: unknown kind {doc.get('kind')!r}") from None
        n = int(doc.get("n", 1))
        if workers_override is not None:
            n = workers_override
            if kind is ExecutionKind.SERIAL:
                kind = ExecutionKind.THREADS
        if n == 1 and kind is not ExecutionKind.PROCESSES:
            return ExecutionContext.serial()
        if kind is ExecutionKind.SERIAL:
            raise ConfigError("workers: serial execution has exactly one worker")
        return ExecutionContext(kind, n)


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


class Run:
    """Collects reports and artifacts of one command for its run record."""

    def __init__(self, command: str, cfg: RunConfig, args):
        self.command = command
        self.cfg = cfg
        self.args = args
        self.reports: list[RunReport] = []
        self.artifacts: dict[str, str] = {}
        self.extra: dict = {}
        self.start = time.time()
        self.timings: dict[str, float] = {}

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.reports)

    def record_path(self) -> Path:
        if "record" in self.cfg.doc:
            return self.cfg.resolve(self.cfg.doc["record"])
        return self.cfg.scratch_dir / f"run_{self.command}.json"

    def write_record(self, status: int) -> Path:
        doc = {
            "tool_version": tool_version(),
            "command": self.command,
            "config": self.cfg.doc,
            "config_path": str(self.cfg.path) if self.cfg.path else None,
            "overrides": {"workers": self.args.workers, "journal": self.args.journal},
            "reports": [r.to_json() for r in self.reports],
            "artifacts": self.artifacts,
            "timings": {**self.timings, "total": time.time() - self.start},
            "exit_status": status,
            **self.extra,
        }
        path = self.record_path()
        _write_atomic(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path


def _journal(args, name: str) -> Path | None:
    if args.journal is None:
        return None
    j = Path(args.journal)
    return j / f"{name}.journal"


def _journal_dir(args) -> Path | None:
    return Path(args.journal) if args.journal is not None else None


# -- commands ----------------------------------------------------------------


def cmd_info(cfg: RunConfig | None, args, out=None) -> int:
    out = out or sys.stdout
    if args.paths:
        if len(args.paths) != 2:
            raise ConfigError("info takes PATH DATASET or --config")
        root, name = Path(args.paths[0]), args.paths[1]
    else:
        root, name = cfg.volume_ref("input")
    vol = open_dataset(root, name)
    meta, attrs = vol.metadata, vol.attributes
    total = int(np.prod(meta.grid_shape))
    comp = "none" if meta.compressor is None else f"gzip(level={meta.compressor})"
    lines = [
        f"path: {vol.path}",
        f"shape: {list(meta.shape)}",
        f"chunks: {list(meta.chunk_shape)}",
        f"dtype: {meta.dtype}",
        f"fill_value: {meta.fill_value}",
        f"compressor: {comp}",
        f"voxel_size: {[float(v) for v in attrs.voxel_size]}",
        f"offset: {[float(v) for v in attrs.offset]}",
        f"chunks_present: {vol.present_chunks()}/{total}",
    ]
    out.write("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_target(run: Run) -> int:
    cfg = run.cfg
    spec = TargetSpec.from_json(cfg.section("task"))
    labels = open_dataset(*cfg.volume_ref("input"))
    d = len(labels.attributes.voxel_size)
    write_shape, context, fit = cfg.blocks(d)
    if context is None:
        context = Coordinate(spec.min_context(labels.attributes.voxel_size))
    out_root, out_name = cfg.volume_ref("output")
    channels = spec.num_channels(d)
    spatial = labels.spatial_roi.shape
    meta = ArrayMetadata(
        (channels,) + tuple(spatial),
        (channels,) + tuple(min(w, max(s, 1)) for w, s in zip(write_shape, spatial)),
        "f32",
        0.0,
        labels.metadata.compressor,
    )
    output = create_dataset(
        out_root, out_name, meta, VolumeAttributes(labels.attributes.voxel_size, labels.attributes.offset),
        overwrite=True,
    )  # fmt: skip
    task = BlockTask(
        "target",
        BlockSpec(labels.spatial_roi, write_shape, context, fit),
        TargetWorker(labels, output, spec),
        inputs=[labels],
        outputs=[output],
    )
    run.reports.append(run_blockwise(task, cfg.execution(run.args.workers), _journal(run.args, "target")))
    run.artifacts["output"] = str(output.path)
    return EXIT_OK if run.ok else EXIT_PARTIAL


def cmd_predict(run: Run) -> int:
    cfg = run.cfg
    doc = dict(cfg.section("predict"))
    if cfg.doc.get("seed") is not None and doc.get("kind") == "oracle":
        doc.setdefault("seed", cfg.doc["seed"])
    pred = PredictorSpec.from_json(doc, cfg.base_dir)
    vol = open_dataset(*cfg.volume_ref("input"))
    d = len(vol.attributes.voxel_size)
    write_shape, context, fit = cfg.blocks(d, doc.get("write_shape"))
    if context is not None and pred.context is None:
        pred = dataclasses.replace(pred, context=context)
    out_root, out_name = cfg.volume_ref("output")
    predict_run = PredictRun(
        vol, str(out_root), out_name, tuple(write_shape), pred, cfg.execution(run.args.workers),
        _journal(run.args, "predict"), fit,
    )  # fmt: skip
    run.reports.append(run_predict(predict_run))
    run.artifacts["output"] = str(Path(out_root) / out_name)
    return EXIT_OK if run.ok else EXIT_PARTIAL


POST_KEYS = ("kind", "threshold", "connectivity", "min_size", "channel", "neighborhood", "compact")


def cmd_segment(run: Run) -> int:
    cfg = run.cfg
    post = cfg.section("post")
    check_keys(post, POST_KEYS, "post")
    kind = require(post, "kind", "post")
    vol = open_dataset(*cfg.volume_ref("input"))
    d = len(vol.attributes.voxel_size)
    write_shape, _, fit = cfg.blocks(d)
    out_root, out_name = cfg.volume_ref("output")
    ctx = cfg.execution(run.args.workers)
    t = float(require(post, "threshold", "post"))
    channel = post.get("channel")
    if kind == "threshold":
        output, report = threshold_blockwise(
            vol, out_root, out_name, t, write_shape, channel, ctx, _journal(run.args, "threshold")
        )
        run.reports.append(report)
    elif kind in ("threshold_cc", "affinity_cc"):
        min_size = int(post.get("min_size", 0))
        compact = bool(post.get("compact", True))
        scratch = cfg.scratch_dir / f"segment_{out_name.replace('/', '_')}"
        if kind == "threshold_cc":
            try:
                connectivity = Connectivity(post.get("connectivity", "face"))
            except ValueError:
                raise ConfigError(f"post: unknown connectivity {post.get('connectivity')!r}") from None
            result = segment_instances(
                vol, out_root, out_name, write_shape, scratch, connectivity, compact, min_size,
                threshold=t, channel=channel, ctx=ctx, journal_dir=_journal_dir(run.args), fit=fit,
            )  # fmt: skip
        else:
            nbhd = require(post, "neighborhood", "post")
            result = segment_affinities(
                vol, nbhd, t, out_root, out_name, write_shape, scratch, compact, min_size, ctx,
                _journal_dir(run.args),
            )  # fmt: skip
        run.reports.extend(result.reports)
        run.extra["num_objects"] = result.num_objects
        output = result.output
    else:
        raise ConfigError(f"post: unknown kind {kind!r}")
    if output is not None:
        run.artifacts["output"] = str(output.path)
    return EXIT_OK if run.ok else EXIT_PARTIAL


def _eval_options(cfg: RunConfig) -> dict:
    doc = cfg.section("evaluate", required=False) or {}
    check_keys(doc, ("mode", "class_id", "ignore_background", "output"), "evaluate")
    mode = doc.get("mode", "instance")
    if mode not in ("semantic", "instance"):
        raise ConfigError(f"evaluate: unknown mode {mode!r}")
    return doc | {"mode": mode}


def cmd_evaluate(run: Run) -> int:
    cfg = run.cfg
    opts = _eval_options(cfg)
    seg_vol = open_dataset(*cfg.volume_ref("input"))
    gt_vol = open_dataset(*cfg.volume_ref("gt"))
    seg, gt = seg_vol.read(seg_vol.roi), gt_vol.read(gt_vol.roi)
    if opts["mode"] == "semantic":
        class_id = opts.get("class_id")
        mask = gt == class_id if class_id is not None else gt != 0
        scores = overlap_metrics(mask, seg != 0)
    else:
        scores = instance_metrics(gt, seg, bool(opts.get("ignore_background", True)))
    doc = {"mode": opts["mode"], "scores": scores}
    out = cfg.resolve(opts.get("output", cfg.scratch_dir / "scores.json"))
    _write_atomic(out, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    run.artifacts["scores"] = str(out)
    run.extra["scores"] = scores
    sys.stdout.write(json.dumps(scores, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_sweep(run: Run) -> int:
    cfg = run.cfg
    doc = cfg.section("sweep")
    check_keys(
        doc,
        ("datasplit", "checkpoints", "post_kind", "grid", "selection_metric", "channel", "class_id", "connectivity", "output"),
        "sweep",
    )
    split_path = cfg.resolve(require(doc, "datasplit", "sweep"))
    try:
        split = parse_datasplit(split_path.read_text(), split_path.parent)
    except FileNotFoundError:
        raise ConfigError(f"sweep: datasplit not found: {split_path}") from None
    rows = split.validate_rows()
    if not rows:
        raise ConfigError("sweep: the datasplit has no validate rows")
    checkpoints = []
    for i, ck in enumerate(require(doc, "checkpoints", "sweep")):
        check_keys(ck, ("iteration", "name", "predictions"), f"sweep.checkpoints[{i}]")
        preds = []
        for ref in require(ck, "predictions", f"sweep.checkpoints[{i}]"):
            check_keys(ref, ("path", "dataset"), f"sweep.checkpoints[{i}].predictions")
            preds.append((str(cfg.resolve(ref["path"])), ref["dataset"]))
        it = int(require(ck, "iteration", f"sweep.checkpoints[{i}]"))
        checkpoints.append(Checkpoint(it, tuple(preds), str(ck.get("name", f"iteration_{it}"))))
    try:
        post_kind = PostKind(require(doc, "post_kind", "sweep"))
    except ValueError:
        raise ConfigError(f"sweep: unknown post_kind {doc.get('post_kind')!r}") from None
    default_metric = "dice" if post_kind is PostKind.THRESHOLD else "voi_total"
    metric = doc.get("selection_metric", default_metric)
    if metric not in (SEMANTIC_METRICS if post_kind is PostKind.THRESHOLD else INSTANCE_METRICS):
        raise ConfigError(f"sweep: metric {metric!r} does not apply to {post_kind.value}")
    try:
        result = sweep(
            checkpoints,
            [(r.gt_path, r.gt_dataset) for r in rows],
            post_kind,
            require(doc, "grid", "sweep"),
            metric,
            channel=doc.get("channel", 0),
            class_id=doc.get("class_id"),
            connectivity=doc.get("connectivity", "face"),
        )
    except ValueError as exc:
        raise ConfigError(f"sweep: {exc}") from None
    out = cfg.resolve(doc.get("output", cfg.scratch_dir / "sweep.json"))
    _write_atomic(out, result.dumps())
    run.artifacts["score_table"] = str(out)
    run.extra["best"] = result.best.to_json()
    sys.stdout.write(json.dumps(result.best.to_json(), sort_keys=True) + "\n")
    return EXIT_OK


HELP = {
    "info": "describe a dataset",
    "target": "compute training targets from labels",
    "predict": "apply a predictor blockwise",
    "segment": "threshold or segment predictions blockwise",
    "evaluate": "score a segmentation against ground truth",
    "sweep": "grid-search post-processing over checkpoints",
}

COMMANDS = {
    "target": cmd_target,
    "predict": cmd_predict,
    "segment": cmd_segment,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="artifact", description="Blockwise prediction, post-processing and evaluation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("info",) + tuple(COMMANDS):
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", required=name != "info")
        p.add_argument("--workers", type=int, default=None, help="override the configured worker count")
        p.add_argument("--journal", default=None, help="directory for resumable block journals")
        if name == "info":
            p.add_argument("paths", nargs="*", help="PATH DATASET (instead of --config)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if args.workers is not None and args.workers < 1:
        print("error: --workers must be at least 1", file=sys.stderr)
        return EXIT_ERROR
    stage = args.command
    try:
        cfg = RunConfig.load(args.config) if args.config else None
        if args.command == "info":
            return cmd_info(cfg, args)
        run = Run(args.command, cfg, args)
        status = COMMANDS[args.command](run)
        path = run.write_record(status)
        logger.info("run record written to %s", path)
        if status == EXIT_PARTIAL:
            for report in run.reports:
                for index, message in sorted(report.failed.items()):
                    print(f"{report.task}: block {index} failed: {message}", file=sys.stderr)
        return status
    except UnsupportedFeatureError as exc:
        print(f"error: {stage}: {exc}", file=sys.stderr)
    except (ConfigError, StoreError, SchedulerError, DataSplitError, SweepError, IdSpaceExhausted) as exc:
        print(f"error: {stage}: {exc}", file=sys.stderr)
    except (OSError, ValueError) as exc:
        print(f"error: {stage}: {exc}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
