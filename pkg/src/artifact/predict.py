"""Blockwise application of a predictor with halo context.

A predictor is a per-block function with a declared context. The harness
reads the block's read ROI (context included), runs the predictor, crops
the result to the write ROI and writes it. Neural networks are stood in
for by :class:`OraclePredictor` (target encodings of a ground-truth
volume) or by an external worker process.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .config import ConfigError, check_keys, require
from .geometry import Block, BlockSpec, Coordinate, FitPolicy, roi_intersect
from .scheduler import (
    BlockTask,
    ExecutionContext,
    ExternalWorkerSpec,
    RunReport,
    run_blockwise,
)
from .store import ArrayMetadata, VolumeAttributes, VolumeHandle, create_dataset, open_dataset
from .targets import TargetSpec, make_target

logger = logging.getLogger(__name__)


class PredictorKind(enum.Enum):
    IDENTITY = "identity"
    GAUSSIAN = "gaussian"
    ORACLE = "oracle"
    EXTERNAL = "external"


def gaussian_radius(sigma: float, voxel_size) -> tuple[int, ...]:
    return tuple(int(math.ceil(3.0 * sigma / vs - 1e-9)) for vs in voxel_size)


def gaussian_smooth(data: np.ndarray, sigma: float, voxel_size) -> np.ndarray:
    """Gaussian blur of the trailing spatial axes, zero outside the array.

    ``sigma`` is in world units; the kernel is truncated at 3 sigma.
    """
    data = np.asarray(data, dtype=np.float64)
    d = len(voxel_size)
    lead = data.ndim - d
    sig = [0.0] * lead + [sigma / vs for vs in voxel_size]
    radius = [0] * lead + list(gaussian_radius(sigma, voxel_size))
    out = data
    for axis in range(lead, data.ndim):
        if radius[axis] == 0 or sig[axis] <= 0:
            continue
        x = np.arange(-radius[axis], radius[axis] + 1)
        weights = np.exp(-0.5 * (x / sig[axis]) ** 2)
        weights /= weights.sum()
        out = ndimage.correlate1d(out, weights, axis=axis, mode="constant", cval=0.0)
    return out


@dataclass(frozen=True)
class PredictorSpec:
    kind: PredictorKind
    context: Coordinate | None = None
    sigma: float = 0.0
    target: TargetSpec | None = None
    gt: tuple[str, str] | None = None  # (root, dataset)
    noise_std: float = 0.0
    seed: int = 0
    external: ExternalWorkerSpec | None = None
    channels: int | None = None

    def required_context(self, voxel_size) -> tuple[int, ...]:
        d = len(voxel_size)
        if self.kind is PredictorKind.GAUSSIAN:
            return gaussian_radius(self.sigma, voxel_size)
        if self.kind is PredictorKind.ORACLE and self.target is not None:
            return self.target.min_context(voxel_size)
        return (0,) * d

    def resolve_context(self, voxel_size) -> Coordinate:
        required = Coordinate(self.required_context(voxel_size))
        if self.context is None:
            return required
        context = Coordinate(self.context)
        if any(c < r for c, r in zip(context, required)):
            logger.warning(
                "declared context %s is smaller than the %s needed by %s; block borders will differ",
                tuple(context), tuple(required), self.kind.value,
            )  # fmt: skip
        return context

    @classmethod
    def from_json(cls, doc: dict, base_dir=None, where: str = "predict") -> "PredictorSpec":
        if not isinstance(doc, dict):
            raise ConfigError(f"{where}: expected an object")
        try:
            kind = PredictorKind(require(doc, "kind", where))
        except ValueError:
            raise ConfigError(f"{where}: unknown predictor kind {doc.get('kind')!r}") from None
        common = ("kind", "context", "write_shape")
        context = doc.get("context")
        if kind is PredictorKind.IDENTITY:
            check_keys(doc, common, where)
            return cls(kind, context)
        if kind is PredictorKind.GAUSSIAN:
            check_keys(doc, common + ("sigma",), where)
            sigma = float(require(doc, "sigma", where))
            if sigma < 0:
                raise ConfigError(f"{where}: 'sigma' must be non-negative")
            return cls(kind, context, sigma=sigma)
        if kind is PredictorKind.ORACLE:
            check_keys(doc, common + ("task", "gt", "noise_std", "seed"), where)
            target = TargetSpec.from_json(require(doc, "task", where), f"{where}.task")
            gt = require(doc, "gt", where)
            check_keys(gt, ("path", "dataset"), f"{where}.gt")
            root = _resolve(require(gt, "path", f"{where}.gt"), base_dir)
            noise = float(doc.get("noise_std", 0.0))
            if noise < 0:
                raise ConfigError(f"{where}: 'noise_std' must be non-negative")
            return cls(
                kind, context, target=target, gt=(root, require(gt, "dataset", f"{where}.gt")),
                noise_std=noise, seed=int(doc.get("seed", 0)),
            )  # fmt: skip
        check_keys(doc, common + ("command", "env", "channels"), where)
        # a model's receptive field is unknown here, so its context must be declared
        context = require(doc, "context", where)
        command = require(doc, "command", where)
        if isinstance(command, str):
            command = command.split()
        return cls(
            kind, context,
            external=ExternalWorkerSpec(tuple(command), dict(doc.get("env", {}))),
            channels=int(require(doc, "channels", where)),
        )  # fmt: skip

    def to_json(self) -> dict:
        doc: dict = {"kind": self.kind.value}
        if self.context is not None:
            doc["context"] = list(self.context)
        if self.kind is PredictorKind.GAUSSIAN:
            doc["sigma"] = self.sigma
        if self.kind is PredictorKind.ORACLE:
            doc.update(
                task=self.target.to_json(),
                gt={"path": str(self.gt[0]), "dataset": self.gt[1]},
                noise_std=self.noise_std,
                seed=self.seed,
            )
        if self.kind is PredictorKind.EXTERNAL:
            doc.update(command=list(self.external.command), env=self.external.env, channels=self.channels)
        return doc


def _resolve(path, base_dir) -> str:
    p = Path(path)
    if base_dir is not None and not p.is_absolute():
        p = Path(base_dir) / p
    return str(p)


def predict_block(spec: PredictorSpec, data: np.ndarray, block: Block, voxel_size) -> np.ndarray:
    """Apply a built-in predictor to ``data`` (over the read ROI) and crop to the write ROI.

    The result always has a leading channel axis.
    """
    d = len(voxel_size)
    if tuple(data.shape[data.ndim - d :]) != tuple(block.read_roi.shape):
        raise ValueError(
            f"input spatial shape {data.shape[data.ndim - d:]} != read ROI shape {tuple(block.read_roi.shape)}"
        )
    if spec.kind is PredictorKind.IDENTITY:
        out = np.asarray(data, dtype=np.float32)
    elif spec.kind is PredictorKind.GAUSSIAN:
        out = gaussian_smooth(data, spec.sigma, voxel_size).astype(np.float32)
    else:
        raise ValueError(f"predict_block does not run {spec.kind.value} predictors")
    if out.ndim == d:
        out = out[np.newaxis]
    crop = block.write_roi.to_slices(block.read_roi.offset)
    return out[(slice(None),) + crop]


@dataclass
class PredictWorker:
    spec: PredictorSpec
    input: VolumeHandle
    output: VolumeHandle

    def __call__(self, block: Block) -> None:
        voxel_size = self.input.attributes.voxel_size
        out = predict_block(self.spec, self.input.read(block.read_roi), block, voxel_size)
        self._check_and_write(block, out)

    def _check_and_write(self, block: Block, out: np.ndarray) -> None:
        expected = (self.output.metadata.shape[0],) + tuple(block.write_roi.shape)
        if tuple(out.shape) != expected:
            raise ValueError(f"predictor returned shape {out.shape}, expected {expected}")
        self.output.write(block.write_roi, out.astype(np.float32), clip=True)


@dataclass
class OraclePredictor(PredictWorker):
    """Target encoding of the ground truth, plus optional seeded noise.

    The ground truth is read over the read ROI clipped to the volume, so
    encoders never see voxels beyond the volume edge. Noise is Gaussian,
    seeded by ``(seed, block_index)`` and clamped to the encoding's range.
    """

    gt: VolumeHandle | None = None

    def __call__(self, block: Block) -> None:
        gt = self.gt
        voxel_size = gt.attributes.voxel_size
        read = roi_intersect(block.read_roi, gt.spatial_roi)
        labels = gt.read(read)
        target = make_target(self.spec.target, labels, voxel_size)
        write = roi_intersect(block.write_roi, gt.spatial_roi)
        out = target[(slice(None),) + write.to_slices(read.offset)]
        if self.spec.noise_std > 0:
            rng = np.random.default_rng([self.spec.seed, block.block_index])
            out = out + rng.normal(0.0, self.spec.noise_std, size=out.shape)
            lo, hi = self.spec.target.value_range(len(voxel_size))
            shape = (-1,) + (1,) * len(voxel_size)
            out = np.clip(out, lo.reshape(shape), hi.reshape(shape))
        self.output.write(write, out.astype(np.float32))


@dataclass
class PredictRun:
    input: VolumeHandle
    output_root: str
    output_name: str
    write_shape: tuple[int, ...]
    predictor: PredictorSpec
    ctx: ExecutionContext = field(default_factory=ExecutionContext.serial)
    journal_path: str | None = None
    fit: FitPolicy = FitPolicy.SHRINK


def _num_channels(run: PredictRun, d: int) -> int:
    spec = run.predictor
    if spec.kind is PredictorKind.ORACLE:
        return spec.target.num_channels(d)
    if spec.kind is PredictorKind.EXTERNAL:
        return spec.channels
    return int(np.prod(run.input.shape[: run.input.ndim - d])) if run.input.ndim > d else 1


def create_prediction_output(run: PredictRun) -> VolumeHandle:
    attrs = run.input.attributes
    d = len(attrs.voxel_size)
    channels = _num_channels(run, d)
    spatial = run.input.spatial_roi.shape
    meta = ArrayMetadata(
        (channels,) + tuple(spatial),
        (channels,) + tuple(min(w, max(s, 1)) for w, s in zip(run.write_shape, spatial)),
        "f32",
        0.0,
        run.input.metadata.compressor,
    )
    out_attrs = VolumeAttributes(attrs.voxel_size, attrs.offset, ("c",) + attrs.axes if attrs.axes else None)
    existing = Path(run.output_root) / run.output_name / ".zarray"
    if run.journal_path is not None and existing.exists():
        out = open_dataset(run.output_root, run.output_name)
        if out.metadata == meta:
            return out
    return create_dataset(run.output_root, run.output_name, meta, out_attrs, overwrite=True)


def run_predict(run: PredictRun) -> RunReport:
    voxel_size = run.input.attributes.voxel_size
    output = create_prediction_output(run)
    context = run.predictor.resolve_context(voxel_size)
    spec = BlockSpec(run.input.spatial_roi, Coordinate(run.write_shape), context, run.fit)
    pred = run.predictor
    if pred.kind is PredictorKind.ORACLE:
        gt = open_dataset(*pred.gt)
        if tuple(gt.spatial_roi.shape) != tuple(run.input.spatial_roi.shape):
            raise ValueError("ground truth and input volumes differ in shape")
        worker = OraclePredictor(pred, run.input, output, gt=gt)
    elif pred.kind is PredictorKind.EXTERNAL:
        fmt = {
            "input_root": str(run.input.root),
            "input_dataset": run.input.name,
            "output_root": str(output.root),
            "output_dataset": output.name,
        }
        command = tuple(arg.format(**fmt) for arg in pred.external.command)
        worker = ExternalWorkerSpec(command, pred.external.env)
    else:
        worker = PredictWorker(pred, run.input, output)
    task = BlockTask("predict", spec, worker, inputs=[run.input], outputs=[output])
    return run_blockwise(task, run.ctx, run.journal_path)
