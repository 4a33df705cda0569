"""Prediction-target encodings computed from label volumes.

All encoders take a label array (0 = background) and return a float32
array with a leading channel axis.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from ._edt import squared_edt
from .config import ConfigError, check_keys, require
from .geometry import Block, roi_intersect


def _as_labels(labels) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.dtype.kind not in "ui":
        raise TypeError(f"labels must be an integer array, got {labels.dtype}")
    return labels


def _spacing(voxel_size, ndim):
    if voxel_size is None:
        return (1.0,) * ndim
    voxel_size = tuple(float(v) for v in voxel_size)
    if len(voxel_size) != ndim:
        raise ValueError(f"voxel_size has {len(voxel_size)} entries for a {ndim}-D volume")
    if any(v <= 0 for v in voxel_size):
        raise ValueError("voxel_size must be positive")
    return voxel_size


def one_hot(labels, class_ids: Sequence[int]) -> np.ndarray:
    labels = _as_labels(labels)
    class_ids = list(class_ids)
    if not class_ids or len(set(class_ids)) != len(class_ids):
        raise ValueError("class_ids must be distinct and nonempty")
    return np.stack([(labels == c) for c in class_ids]).astype(np.float32)


def signed_distance(labels, class_id: int, voxel_size=None, scale: float = 1.0, dtype=np.float32) -> np.ndarray:
    """``tanh(d / scale)`` with ``d`` the signed distance to the class boundary.

    ``d`` is the Euclidean distance from a voxel center to the nearest voxel
    center of the opposite class, positive inside the class. Volumes made of
    a single class saturate at +1 (inside) or -1 (outside). The distance is
    computed in float64 and cast to ``dtype`` at the end.
    """
    labels = _as_labels(labels)
    if scale <= 0:
        raise ValueError("scale must be positive")
    spacing = _spacing(voxel_size, labels.ndim)
    mask = labels == class_id
    inside = np.sqrt(squared_edt(~mask, spacing))
    outside = np.sqrt(squared_edt(mask, spacing))
    d = np.where(mask, inside, -outside)
    return np.tanh(d / scale)[np.newaxis].astype(dtype)


def hot_distance(labels, class_ids: Sequence[int], voxel_size=None, scale: float = 1.0) -> np.ndarray:
    dist = [signed_distance(labels, c, voxel_size, scale) for c in class_ids]
    return np.concatenate([one_hot(labels, class_ids)] + dist)


def _check_neighborhood(neighborhood, ndim) -> list[tuple[int, ...]]:
    offsets = [tuple(int(o) for o in off) for off in neighborhood]
    for off in offsets:
        if len(off) != ndim:
            raise ValueError(f"offset {off} does not match a {ndim}-D volume")
        if not any(off):
            raise ValueError("neighborhood offsets must be nonzero")
    if len(set(offsets)) != len(offsets):
        raise ValueError("neighborhood offsets must be distinct")
    return offsets


def _shifted_pairs(shape, offset):
    """Slices ``(src, dst)`` such that ``a[dst]`` is the neighbor ``v + offset`` of ``a[src]``."""
    src, dst = [], []
    for n, o in zip(shape, offset):
        if abs(o) >= n:
            return None
        src.append(slice(max(0, -o), n - max(0, o)))
        dst.append(slice(max(0, o), n - max(0, -o)))
    return tuple(src), tuple(dst)


def affinities(labels, neighborhood) -> np.ndarray:
    """Channel ``k`` is 1 where ``v`` and ``v + offset_k`` carry the same nonzero label."""
    labels = _as_labels(labels)
    offsets = _check_neighborhood(neighborhood, labels.ndim)
    out = np.zeros((len(offsets),) + labels.shape, dtype=np.float32)
    for k, off in enumerate(offsets):
        pairs = _shifted_pairs(labels.shape, off)
        if pairs is None:
            continue
        src, dst = pairs
        a, b = labels[src], labels[dst]
        out[(k,) + src] = (a != 0) & (a == b)
    return out


def lsd_channels(ndim: int) -> int:
    return ndim + ndim + ndim * (ndim - 1) // 2 + 1


def _lsd_kernels(sigma, spacing):
    """Per-axis window offsets (world units) and Gaussian weights, truncated at 3 sigma."""
    kernels = []
    for vs in spacing:
        r = int(math.floor(3.0 * sigma / vs + 1e-9))
        x = np.arange(-r, r + 1) * vs
        kernels.append((x, np.exp(-(x**2) / (2.0 * sigma**2))))
    return kernels


def lsd_radius(sigma: float, voxel_size) -> tuple[int, ...]:
    return tuple(int(math.floor(3.0 * sigma / vs + 1e-9)) for vs in voxel_size)


def local_shape_descriptors(labels, sigma: float, voxel_size=None) -> np.ndarray:
    """Gaussian-windowed statistics of each voxel's same-label neighborhood.

    Channels, in order: mean offset (d, scaled by 3 sigma into [-1, 1]),
    diagonal second central moments (d, scaled by (3 sigma)^2), off-diagonal
    moments for axis pairs (0,1), (0,2), (1,2) (scaled likewise and shifted to
    [0, 1] via (x + 1) / 2), and the windowed same-label mass divided by the
    total window mass. Background voxels are zero in every channel.
    """
    labels = _as_labels(labels)
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    ndim = labels.ndim
    spacing = _spacing(voxel_size, ndim)
    kernels = _lsd_kernels(sigma, spacing)
    radius = [len(x) // 2 for x, _ in kernels]
    window = math.prod(float(g.sum()) for _, g in kernels)
    norm = 3.0 * sigma
    pairs = list(itertools.combinations(range(ndim), 2))
    out = np.zeros((lsd_channels(ndim),) + labels.shape, dtype=np.float32)

    ids, inverse = np.unique(labels, return_inverse=True)
    inverse = inverse.reshape(labels.shape)
    first = 1 if ids[0] == 0 else 0
    boxes = ndimage.find_objects(inverse.astype(np.int64) + (1 - first)) if ids.size else []
    for idx in range(first, len(ids)):
        box = boxes[idx - first] if first else boxes[idx]
        if box is None:
            continue
        grown = tuple(
            slice(max(0, s.start - r), min(n, s.stop + r)) for s, r, n in zip(box, radius, labels.shape)
        )
        mask = (inverse[grown] == idx).astype(np.float64)

        def corr(powers):
            res = mask
            for axis, ((x, g), p) in enumerate(zip(kernels, powers)):
                weights = g * x**p if p else g
                res = ndimage.correlate1d(res, weights, axis=axis, mode="constant", cval=0.0)
            return res

        count = corr([0] * ndim)
        sel = mask > 0
        c = count[sel]
        means = []
        for a in range(ndim):
            powers = [0] * ndim
            powers[a] = 1
            means.append(corr(powers)[sel] / c)
        channels = [m / norm for m in means]
        for a in range(ndim):
            powers = [0] * ndim
            powers[a] = 2
            var = corr(powers)[sel] / c - means[a] ** 2
            channels.append(np.clip(var / norm**2, 0.0, 1.0))
        for a, b in pairs:
            powers = [0] * ndim
            powers[a] = powers[b] = 1
            cov = corr(powers)[sel] / c - means[a] * means[b]
            channels.append(np.clip((cov / norm**2 + 1.0) / 2.0, 0.0, 1.0))
        channels.append(c / window)
        region = out[(slice(None),) + grown]
        for k, values in enumerate(channels):
            region[k][sel] = values
    return out


class TargetKind(enum.Enum):
    ONE_HOT = "one_hot"
    SIGNED_DISTANCE = "signed_distance"
    HOT_DISTANCE = "hot_distance"
    AFFINITIES = "affinities"
    LSD = "lsd"


_PARAMS = {
    TargetKind.ONE_HOT: ("class_ids",),
    TargetKind.SIGNED_DISTANCE: ("class_id", "scale"),
    TargetKind.HOT_DISTANCE: ("class_ids", "scale"),
    TargetKind.AFFINITIES: ("neighborhood",),
    TargetKind.LSD: ("sigma",),
}


@dataclass(frozen=True)
class TargetSpec:
    kind: TargetKind
    params: dict = field(default_factory=dict)

    @classmethod
    def from_json(cls, doc: dict, where: str = "task") -> "TargetSpec":
        if not isinstance(doc, dict):
            raise ConfigError(f"{where}: expected an object")
        try:
            kind = TargetKind(require(doc, "kind", where))
        except ValueError:
            raise ConfigError(f"{where}: unknown target kind {doc.get('kind')!r}") from None
        check_keys(doc, ("kind",) + _PARAMS[kind], where)
        params = {name: require(doc, name, where) for name in _PARAMS[kind]}
        if "scale" in params and not float(params["scale"]) > 0:
            raise ConfigError(f"{where}: 'scale' must be positive")
        if "sigma" in params and not float(params["sigma"]) > 0:
            raise ConfigError(f"{where}: 'sigma' must be positive")
        return cls(kind, params)

    def to_json(self) -> dict:
        return {"kind": self.kind.value, **self.params}

    def num_channels(self, ndim: int) -> int:
        if self.kind is TargetKind.ONE_HOT:
            return len(self.params["class_ids"])
        if self.kind is TargetKind.SIGNED_DISTANCE:
            return 1
        if self.kind is TargetKind.HOT_DISTANCE:
            return 2 * len(self.params["class_ids"])
        if self.kind is TargetKind.AFFINITIES:
            return len(self.params["neighborhood"])
        return lsd_channels(ndim)

    def value_range(self, ndim: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel lower and upper bounds of the encoding."""
        n = self.num_channels(ndim)
        lo, hi = np.zeros(n, np.float32), np.ones(n, np.float32)
        if self.kind is TargetKind.SIGNED_DISTANCE:
            lo[:] = -1
        elif self.kind is TargetKind.HOT_DISTANCE:
            lo[n // 2 :] = -1
        elif self.kind is TargetKind.LSD:
            lo[:ndim] = -1
        return lo, hi

    def min_context(self, voxel_size) -> tuple[int, ...]:
        """Halo needed for exact blockwise results (signed distance: none is exact)."""
        ndim = len(voxel_size)
        if self.kind is TargetKind.AFFINITIES:
            offsets = self.params["neighborhood"]
            return tuple(max(abs(int(o[a])) for o in offsets) for a in range(ndim))
        if self.kind is TargetKind.LSD:
            return lsd_radius(float(self.params["sigma"]), voxel_size)
        return (0,) * ndim


def make_target(spec: TargetSpec | dict, labels, voxel_size=None) -> np.ndarray:
    if isinstance(spec, dict):
        spec = TargetSpec.from_json(spec)
    p = spec.params
    if spec.kind is TargetKind.ONE_HOT:
        return one_hot(labels, p["class_ids"])
    if spec.kind is TargetKind.SIGNED_DISTANCE:
        return signed_distance(labels, int(p["class_id"]), voxel_size, float(p["scale"]))
    if spec.kind is TargetKind.HOT_DISTANCE:
        return hot_distance(labels, p["class_ids"], voxel_size, float(p["scale"]))
    if spec.kind is TargetKind.AFFINITIES:
        return affinities(labels, p["neighborhood"])
    return local_shape_descriptors(labels, float(p["sigma"]), voxel_size)


@dataclass
class TargetWorker:
    """Blockwise encoder: reads labels over the read ROI clipped to the volume."""

    labels: object
    output: object
    spec: TargetSpec

    def __call__(self, block: Block) -> None:
        gt = self.labels
        read = roi_intersect(block.read_roi, gt.spatial_roi)
        write = roi_intersect(block.write_roi, gt.spatial_roi)
        target = make_target(self.spec, gt.read(read), gt.attributes.voxel_size)
        self.output.write(write, target[(slice(None),) + write.to_slices(read.offset)])
