"""Segmentation metrics, datasplits and post-processing parameter sweeps."""

from __future__ import annotations

import csv
import enum
import io
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .postprocess import Connectivity, label_block, size_filter_array, threshold
from .store import open_dataset

logger = logging.getLogger(__name__)


class Orientation(enum.Enum):
    HIGHER_BETTER = "higher"
    LOWER_BETTER = "lower"


METRICS = {
    "dice": Orientation.HIGHER_BETTER,
    "f1": Orientation.HIGHER_BETTER,
    "jaccard": Orientation.HIGHER_BETTER,
    "precision": Orientation.HIGHER_BETTER,
    "recall": Orientation.HIGHER_BETTER,
    "voi_split": Orientation.LOWER_BETTER,
    "voi_merge": Orientation.LOWER_BETTER,
    "voi_total": Orientation.LOWER_BETTER,
}
SEMANTIC_METRICS = ("dice", "f1", "jaccard", "precision", "recall")
INSTANCE_METRICS = ("voi_split", "voi_merge", "voi_total")


@dataclass
class ContingencyTable:
    """Sparse voxel counts per (ground-truth label, predicted label) pair."""

    pairs: np.ndarray  # (k, 2) uint64
    counts: np.ndarray  # (k,) int64

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    def as_dict(self) -> dict[tuple[int, int], int]:
        return {(int(a), int(b)): int(c) for (a, b), c in zip(self.pairs, self.counts)}

    def marginal_a(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for (a, _), c in zip(self.pairs.tolist(), self.counts.tolist()):
            out[a] = out.get(a, 0) + c
        return out

    def marginal_b(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for (_, b), c in zip(self.pairs.tolist(), self.counts.tolist()):
            out[b] = out.get(b, 0) + c
        return out


def contingency(a, b, ignore_background: bool = False) -> ContingencyTable:
    """Overlap counts of label volumes ``a`` (ground truth) and ``b``.

    With ``ignore_background`` voxels where both volumes are 0 are skipped;
    voxels where only one side is 0 still count.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    a = a.ravel().astype(np.uint64)
    b = b.ravel().astype(np.uint64)
    if ignore_background:
        keep = (a != 0) | (b != 0)
        a, b = a[keep], b[keep]
    if a.size == 0:
        return ContingencyTable(np.zeros((0, 2), np.uint64), np.zeros(0, np.int64))
    pairs, counts = np.unique(np.stack([a, b], axis=1), axis=0, return_counts=True)
    return ContingencyTable(pairs, counts.astype(np.int64))


def voi(table: ContingencyTable) -> tuple[float, float, float]:
    """Variation of information in bits: ``(split, merge, total)``.

    ``split = H(pred | gt)`` and ``merge = H(gt | pred)``.
    """
    n = table.n
    if n == 0:
        raise ValueError("variation of information of an empty table is undefined")
    ma, mb = table.marginal_a(), table.marginal_b()
    split = 0.0
    merge = 0.0
    for (a, b), c in zip(table.pairs.tolist(), table.counts.tolist()):
        p = c / n
        split -= p * math.log2(c / ma[a])
        merge -= p * math.log2(c / mb[b])
    return split, merge, split + merge


def overlap_metrics(gt, pred) -> dict[str, float]:
    gt = np.asarray(gt).astype(bool)
    pred = np.asarray(pred).astype(bool)
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch: {gt.shape} vs {pred.shape}")
    tp = int(np.count_nonzero(gt & pred))
    fp = int(np.count_nonzero(~gt & pred))
    fn = int(np.count_nonzero(gt & ~pred))
    if tp + fp + fn == 0:
        return {k: 1.0 for k in SEMANTIC_METRICS}
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {
        "dice": 2 * tp / (2 * tp + fp + fn),
        "f1": f1,
        "jaccard": tp / (tp + fp + fn),
        "precision": precision,
        "recall": recall,
    }


def instance_metrics(gt, pred, ignore_background: bool = True) -> dict[str, float]:
    table = contingency(gt, pred, ignore_background)
    if table.n == 0:
        return {"voi_split": 0.0, "voi_merge": 0.0, "voi_total": 0.0}
    split, merge, total = voi(table)
    return {"voi_split": split, "voi_merge": merge, "voi_total": total}


# -- datasplit ---------------------------------------------------------------


class Usage(enum.Enum):
    TRAIN = "train"
    VALIDATE = "validate"


DATASPLIT_COLUMNS = ("usage", "raw_path", "raw_dataset", "gt_path", "gt_dataset")


@dataclass(frozen=True)
class DataSplitRow:
    usage: Usage
    raw_path: str
    raw_dataset: str
    gt_path: str
    gt_dataset: str
    extra: dict = field(default_factory=dict, compare=False)


@dataclass
class DataSplit:
    rows: list[DataSplitRow]

    def validate_rows(self) -> list[DataSplitRow]:
        return [r for r in self.rows if r.usage is Usage.VALIDATE]

    def train_rows(self) -> list[DataSplitRow]:
        return [r for r in self.rows if r.usage is Usage.TRAIN]


class DataSplitError(ValueError):
    pass


def parse_datasplit(text: str, base_dir=None) -> DataSplit:
    """Parse a CSV datasplit with columns usage, raw_path, raw_dataset, gt_path, gt_dataset.

    Extra columns are kept on each row but otherwise ignored. Relative paths
    are resolved against ``base_dir`` when given.
    """
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        raise DataSplitError("datasplit has no header row")
    header = [h.strip() for h in reader.fieldnames]
    missing = [c for c in DATASPLIT_COLUMNS if c not in header]
    if missing:
        raise DataSplitError(f"datasplit is missing required columns {missing}")
    reader.fieldnames = header
    rows = []
    for line_no, rec in enumerate(reader, start=2):
        usage = (rec.get("usage") or "").strip()
        try:
            usage = Usage(usage)
        except ValueError:
            raise DataSplitError(f"row {line_no}: unknown usage {usage!r} (expected train or validate)") from None
        paths = {}
        for col in ("raw_path", "gt_path"):
            p = Path(rec[col])
            if base_dir is not None and not p.is_absolute():
                p = Path(base_dir) / p
            paths[col] = str(p)
        extra = {k: v for k, v in rec.items() if k not in DATASPLIT_COLUMNS}
        rows.append(
            DataSplitRow(usage, paths["raw_path"], rec["raw_dataset"], paths["gt_path"], rec["gt_dataset"], extra)
        )
    return DataSplit(rows)


# -- sweeps ------------------------------------------------------------------


class PostKind(enum.Enum):
    THRESHOLD = "threshold"  # semantic mask
    THRESHOLD_CC = "threshold_cc"  # instances


@dataclass(frozen=True)
class Checkpoint:
    iteration: int
    predictions: tuple  # one (root, dataset) per validation volume
    name: str = ""


@dataclass
class BestResult:
    iteration: int
    checkpoint: str
    params: dict
    scores: dict
    selection_metric: str

    def to_json(self) -> dict:
        return {
            "iteration": self.iteration,
            "checkpoint": self.checkpoint,
            "params": self.params,
            "scores": self.scores,
            "selection_metric": self.selection_metric,
        }


@dataclass
class SweepResult:
    best: BestResult
    cells: list[dict]
    selection_metric: str

    def to_json(self) -> dict:
        return {"cells": self.cells, "best": self.best.to_json(), "selection_metric": self.selection_metric}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"


class SweepError(RuntimeError):
    pass


def postprocess_array(
    pred: np.ndarray,
    kind: PostKind,
    params: dict,
    channel: int | None = 0,
    connectivity: Connectivity = Connectivity.FACE,
) -> np.ndarray:
    """Whole-array post-processing used to score one sweep cell."""
    mask = threshold(pred, channel, float(params["threshold"]))
    if kind is PostKind.THRESHOLD:
        return mask
    labels = label_block(mask, 0, params.get("connectivity", connectivity)).labels
    return size_filter_array(labels, int(params.get("min_size", 0)))


def score(kind: PostKind, gt: np.ndarray, seg: np.ndarray, class_id: int | None = None) -> dict[str, float]:
    if kind is PostKind.THRESHOLD:
        mask = gt == class_id if class_id is not None else gt != 0
        return overlap_metrics(mask, seg)
    return instance_metrics(gt, seg, ignore_background=True)


def _grid_cells(grid: dict[str, Sequence]) -> list[dict]:
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ValueError("parameter grid must be nonempty")
    names = sorted(grid)
    cells = [dict(zip(names, values)) for values in itertools.product(*(grid[n] for n in names))]
    return cells


def _param_key(params: dict) -> tuple:
    return tuple(params[k] for k in sorted(params))


def sweep(
    checkpoints: Sequence[Checkpoint],
    gts: Sequence[tuple[str, str]],
    post_kind: PostKind | str,
    grid: dict[str, Sequence],
    selection_metric: str,
    channel: int | None = 0,
    class_id: int | None = None,
    connectivity: Connectivity | str = Connectivity.FACE,
    loader: Callable[[str, str], np.ndarray] | None = None,
) -> SweepResult:
    """Score every (checkpoint, parameter) cell and pick the best.

    Scores of a cell are averaged over the validation volumes. Ties go to
    the earlier iteration, then the lexicographically smaller parameter
    tuple (parameters ordered by name). A cell whose prediction cannot be
    read is recorded as an error and never selected.
    """
    post_kind = PostKind(post_kind)
    connectivity = Connectivity(connectivity)
    allowed = SEMANTIC_METRICS if post_kind is PostKind.THRESHOLD else INSTANCE_METRICS
    if selection_metric not in allowed:
        raise ValueError(f"metric {selection_metric!r} does not apply to {post_kind.value}; use one of {allowed}")
    orientation = METRICS[selection_metric]
    cells = _grid_cells(grid)
    if not checkpoints:
        raise ValueError("no checkpoints to sweep")
    loader = loader or (lambda root, name: (v := open_dataset(root, name)).read(v.roi))
    gt_arrays = [loader(root, name) for root, name in gts]
    table = []
    best = None
    best_key = None
    for ckpt in sorted(checkpoints, key=lambda c: c.iteration):
        if len(ckpt.predictions) != len(gt_arrays):
            raise ValueError(f"iteration {ckpt.iteration}: {len(ckpt.predictions)} predictions for {len(gt_arrays)} volumes")
        try:
            preds = [loader(root, name) for root, name in ckpt.predictions]
            error = None
        except Exception as exc:  # noqa: BLE001 - recorded per cell
            preds, error = None, f"{type(exc).__name__}: {exc}"
        for params in cells:
            row = {"iteration": ckpt.iteration, "checkpoint": ckpt.name, "params": params}
            if error is not None:
                table.append({**row, "scores": {}, "status": "error", "message": error})
                continue
            per_volume = []
            for pred, gt in zip(preds, gt_arrays):
                ch = (channel or 0) if pred.ndim > gt.ndim else None
                seg = postprocess_array(pred, post_kind, params, ch, connectivity)
                per_volume.append(score(post_kind, gt, seg, class_id))
            scores = {k: float(np.mean([s[k] for s in per_volume])) for k in sorted(per_volume[0])}
            table.append({**row, "scores": scores, "status": "ok"})
            value = scores[selection_metric]
            rank = -value if orientation is Orientation.HIGHER_BETTER else value
            key = (rank, ckpt.iteration, _param_key(params))
            if best_key is None or key < best_key:
                best_key = key
                best = BestResult(ckpt.iteration, ckpt.name, params, scores, selection_metric)
    if best is None:
        raise SweepError("every sweep cell failed")
    return SweepResult(best, table, selection_metric)
