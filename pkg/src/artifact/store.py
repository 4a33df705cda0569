"""Chunked N-D arrays on the local file system, Zarr-V2 compatible subset.

Only C order, no filters, and either no compressor or gzip are supported.
Every chunk is its own file named by its grid index joined with ``.``;
edge chunks are stored at full chunk size, padded with the fill value.
Attributes (voxel size and world offset, in nm) live in ``.zattrs`` under
``resolution`` and ``offset``.
"""

from __future__ import annotations

import gzip
import itertools
import json
import math
import os
import shutil
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import Coordinate, Roi, roi_intersect

DTYPES = {
    "u8": np.dtype("uint8"),
    "u16": np.dtype("<u2"),
    "u32": np.dtype("<u4"),
    "u64": np.dtype("<u8"),
    "i8": np.dtype("int8"),
    "i16": np.dtype("<i2"),
    "i32": np.dtype("<i4"),
    "i64": np.dtype("<i8"),
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
}
_BY_STR = {dt.str: name for name, dt in DTYPES.items()}


class StoreError(Exception):
    pass


class DatasetExistsError(StoreError):
    pass


class DatasetNotFoundError(StoreError):
    pass


class UnsupportedFeatureError(StoreError):
    """The dataset uses a Zarr feature outside the supported subset."""

    def __init__(self, field_name: str, value):
        super().__init__(f"unsupported feature: {field_name}={value!r}")
        self.field = field_name
        self.value = value


class CorruptChunkError(StoreError):
    pass


def dtype_name(dtype) -> str:
    dtype = np.dtype(dtype)
    try:
        return _BY_STR[dtype.newbyteorder("<").str if dtype.itemsize > 1 else dtype.str]
    except KeyError:
        raise UnsupportedFeatureError("dtype", str(dtype)) from None


@dataclass(frozen=True)
class ArrayMetadata:
    shape: Coordinate
    chunk_shape: Coordinate
    dtype: str
    fill_value: int | float = 0
    compressor: int | None = None  # gzip level, or None for raw chunks

    def __post_init__(self):
        object.__setattr__(self, "shape", Coordinate(self.shape))
        object.__setattr__(self, "chunk_shape", Coordinate(self.chunk_shape))
        if self.dtype not in DTYPES:
            raise UnsupportedFeatureError("dtype", self.dtype)
        if len(self.shape) != len(self.chunk_shape):
            raise ValueError("shape and chunk_shape must have equal length")
        if any(c <= 0 for c in self.chunk_shape):
            raise ValueError("chunk_shape must be positive")
        if any(s < 0 for s in self.shape):
            raise ValueError("shape must be non-negative")
        if self.compressor is not None and not 1 <= self.compressor <= 9:
            raise ValueError("gzip level must be in 1..9")
        object.__setattr__(self, "fill_value", self.np_dtype.type(self.fill_value).item())

    @property
    def np_dtype(self) -> np.dtype:
        return DTYPES[self.dtype]

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def grid_shape(self) -> Coordinate:
        return Coordinate(-((-s) // c) for s, c in zip(self.shape, self.chunk_shape))

    def to_zarray(self) -> dict:
        fill = self.fill_value
        if isinstance(fill, float) and not math.isfinite(fill):
            fill = "NaN" if math.isnan(fill) else ("Infinity" if fill > 0 else "-Infinity")
        return {
            "zarr_format": 2,
            "shape": list(self.shape),
            "chunks": list(self.chunk_shape),
            "dtype": self.np_dtype.str,
            "compressor": None if self.compressor is None else {"id": "gzip", "level": self.compressor},
            "fill_value": fill,
            "order": "C",
            "filters": None,
        }

    @classmethod
    def from_zarray(cls, doc: dict) -> "ArrayMetadata":
        if doc.get("zarr_format") != 2:
            raise UnsupportedFeatureError("zarr_format", doc.get("zarr_format"))
        if doc.get("order", "C") != "C":
            raise UnsupportedFeatureError("order", doc.get("order"))
        if doc.get("filters"):
            raise UnsupportedFeatureError("filters", doc.get("filters"))
        if doc.get("dimension_separator", ".") != ".":
            raise UnsupportedFeatureError("dimension_separator", doc.get("dimension_separator"))
        dtype = doc.get("dtype")
        if dtype not in _BY_STR:
            raise UnsupportedFeatureError("dtype", dtype)
        comp = doc.get("compressor")
        if comp is None:
            level = None
        elif isinstance(comp, dict) and comp.get("id") == "gzip":
            level = int(comp.get("level", 1))
        else:
            raise UnsupportedFeatureError("compressor", comp.get("id") if isinstance(comp, dict) else comp)
        fill = doc.get("fill_value", 0)
        if fill is None:
            fill = 0
        elif isinstance(fill, str):
            fill = {"NaN": math.nan, "Infinity": math.inf, "-Infinity": -math.inf}[fill]
        return cls(doc["shape"], doc["chunks"], _BY_STR[dtype], fill, level)


@dataclass(frozen=True)
class VolumeAttributes:
    voxel_size: tuple[float, ...]
    offset: tuple[float, ...]
    axes: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "voxel_size", tuple(self.voxel_size))
        object.__setattr__(self, "offset", tuple(self.offset))
        if self.axes is not None:
            object.__setattr__(self, "axes", tuple(self.axes))
        if any(v <= 0 for v in self.voxel_size):
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")
        if len(self.offset) != len(self.voxel_size):
            raise ValueError("voxel_size and offset must have equal length")

    @classmethod
    def default(cls, ndim: int) -> "VolumeAttributes":
        return cls((1,) * ndim, (0,) * ndim)

    def to_zattrs(self) -> dict:
        doc = {"resolution": list(self.voxel_size), "offset": list(self.offset)}
        if self.axes is not None:
            doc["axes"] = list(self.axes)
        return doc

    @classmethod
    def from_zattrs(cls, doc: dict, ndim: int) -> "VolumeAttributes":
        voxel_size = doc.get("resolution", [1] * ndim)
        offset = doc.get("offset", [0] * len(voxel_size))
        return cls(voxel_size, offset, doc.get("axes"))


@dataclass(frozen=True)
class VolumeHandle:
    root: Path
    name: str
    metadata: ArrayMetadata
    attributes: VolumeAttributes = field(compare=False)

    @property
    def path(self) -> Path:
        return Path(self.root) / self.name

    @property
    def shape(self) -> Coordinate:
        return self.metadata.shape

    @property
    def ndim(self) -> int:
        return self.metadata.ndim

    @property
    def roi(self) -> Roi:
        return Roi([0] * self.ndim, self.metadata.shape)

    @property
    def spatial_roi(self) -> Roi:
        """ROI over the trailing axes that carry voxel sizes."""
        d = len(self.attributes.voxel_size)
        return Roi([0] * d, self.metadata.shape[self.ndim - d :])

    def chunk_path(self, grid_index: Sequence[int]) -> Path:
        return self.path / ".".join(str(i) for i in grid_index)

    def present_chunks(self) -> int:
        n = 0
        for entry in os.scandir(self.path):
            if not entry.name.startswith(".") and entry.is_file():
                n += 1
        return n

    def read(self, roi: Roi) -> np.ndarray:
        return read_roi(self, roi)

    def write(self, roi: Roi, data: np.ndarray, clip: bool = False) -> None:
        write_roi(self, roi, data, clip=clip)

    def __getstate__(self):
        return {"root": str(self.root), "name": self.name}

    def __setstate__(self, state):
        handle = open_dataset(state["root"], state["name"])
        for key in ("root", "name", "metadata", "attributes"):
            object.__setattr__(self, key, getattr(handle, key))


def _write_json(path: Path, doc: dict) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=4, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _ensure_groups(root: Path, name: str) -> None:
    root.mkdir(parents=True, exist_ok=True)
    group = root
    for part in [""] + list(Path(name).parts[:-1]):
        group = group / part if part else group
        group.mkdir(parents=True, exist_ok=True)
        zgroup = group / ".zgroup"
        if not zgroup.exists():
            _write_json(zgroup, {"zarr_format": 2})


def create_dataset(
    root,
    name: str,
    metadata: ArrayMetadata,
    attributes: VolumeAttributes | None = None,
    overwrite: bool = False,
) -> VolumeHandle:
    root = Path(root)
    path = root / name
    if attributes is None:
        attributes = VolumeAttributes.default(metadata.ndim)
    if len(attributes.voxel_size) not in (metadata.ndim, metadata.ndim - 1):
        raise ValueError("voxel_size length must match the spatial dimensionality")
    if (path / ".zarray").exists():
        if not overwrite:
            raise DatasetExistsError(f"dataset already exists: {path}")
        shutil.rmtree(path)
    try:
        _ensure_groups(root, name)
        path.mkdir(parents=True, exist_ok=True)
        _write_json(path / ".zarray", metadata.to_zarray())
        _write_json(path / ".zattrs", attributes.to_zattrs())
    except OSError as exc:
        raise StoreError(f"cannot create dataset at {path}: {exc}") from exc
    return VolumeHandle(root, name, metadata, attributes)


def open_dataset(root, name: str) -> VolumeHandle:
    root = Path(root)
    path = root / name
    try:
        doc = json.loads((path / ".zarray").read_text())
    except FileNotFoundError:
        raise DatasetNotFoundError(f"no dataset at {path}") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise StoreError(f"cannot read metadata of {path}: {exc}") from exc
    metadata = ArrayMetadata.from_zarray(doc)
    attrs_path = path / ".zattrs"
    attrs_doc = json.loads(attrs_path.read_text()) if attrs_path.exists() else {}
    return VolumeHandle(root, name, metadata, VolumeAttributes.from_zattrs(attrs_doc, metadata.ndim))


def _full_roi(vol: VolumeHandle, roi: Roi) -> Roi:
    """Prepend full extents for leading (channel) axes not covered by ``roi``."""
    missing = vol.ndim - roi.dims
    if missing == 0:
        return roi
    if missing < 0:
        raise ValueError(f"ROI has {roi.dims} dims, dataset has {vol.ndim}")
    lead = vol.metadata.shape[:missing]
    return Roi([0] * missing + list(roi.offset), list(lead) + list(roi.shape))


def _chunk_range(meta: ArrayMetadata, roi: Roi):
    lo = [b // c for b, c in zip(roi.begin, meta.chunk_shape)]
    hi = [-((-e) // c) for e, c in zip(roi.end, meta.chunk_shape)]
    return itertools.product(*(range(a, b) for a, b in zip(lo, hi)))


def _chunk_roi(meta: ArrayMetadata, grid_index) -> Roi:
    return Roi(Coordinate(grid_index) * meta.chunk_shape, meta.chunk_shape)


def _decode_chunk(vol: VolumeHandle, grid_index) -> np.ndarray | None:
    path = vol.chunk_path(grid_index)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        return None
    meta = vol.metadata
    if meta.compressor is not None:
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError, zlib.error) as exc:
            raise CorruptChunkError(f"chunk {path.name} of {vol.path}: {exc}") from exc
    expected = math.prod(meta.chunk_shape) * meta.np_dtype.itemsize
    if len(raw) != expected:
        raise CorruptChunkError(
            f"chunk {path.name} of {vol.path}: {len(raw)} bytes, expected {expected}"
        )
    return np.frombuffer(raw, dtype=meta.np_dtype).reshape(meta.chunk_shape)


def _write_chunk_file(path: Path, payload: bytes) -> None:
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def _encode_chunk(vol: VolumeHandle, grid_index, chunk: np.ndarray) -> None:
    meta = vol.metadata
    payload = np.ascontiguousarray(chunk, dtype=meta.np_dtype).tobytes()
    if meta.compressor is not None:
        payload = gzip.compress(payload, compresslevel=meta.compressor, mtime=0)
    _write_chunk_file(vol.chunk_path(grid_index), payload)


def read_roi(vol: VolumeHandle, roi: Roi) -> np.ndarray:
    """Dense copy of ``roi``; out-of-bounds voxels and absent chunks read as fill."""
    roi = _full_roi(vol, roi)
    meta = vol.metadata
    out = np.full(tuple(roi.shape), meta.fill_value, dtype=meta.np_dtype)
    inside = roi_intersect(roi, vol.roi)
    if inside.empty():
        return out
    for grid_index in _chunk_range(meta, inside):
        chunk = _decode_chunk(vol, grid_index)
        if chunk is None:
            continue
        croi = _chunk_roi(meta, grid_index)
        overlap = roi_intersect(croi, inside)
        out[overlap.to_slices(roi.offset)] = chunk[overlap.to_slices(croi.offset)]
    return out


def write_roi(vol: VolumeHandle, roi: Roi, data: np.ndarray, clip: bool = False) -> None:
    """Write ``data`` into ``roi``.

    With ``clip`` the ROI (and data) are cropped to the array bounds first;
    otherwise an ROI outside the bounds is an error. Partially covered chunks
    are read, modified and rewritten.
    """
    roi = _full_roi(vol, roi)
    meta = vol.metadata
    data = np.asarray(data)
    if tuple(data.shape) != tuple(roi.shape):
        raise ValueError(f"data shape {data.shape} does not match ROI shape {tuple(roi.shape)}")
    allowed = "biu" if meta.np_dtype.kind in "iu" else "biuf"
    if data.dtype.kind not in allowed:
        raise TypeError(f"cannot write {data.dtype} data into a {meta.dtype} dataset")
    if clip:
        inside = roi_intersect(roi, vol.roi)
        data = data[inside.to_slices(roi.offset)]
        roi = inside
    elif not vol.roi.contains(roi):
        raise ValueError(f"{roi} is outside the dataset bounds {vol.roi}")
    if roi.empty():
        return
    for grid_index in _chunk_range(meta, roi):
        croi = _chunk_roi(meta, grid_index)
        overlap = roi_intersect(croi, roi)
        in_bounds = roi_intersect(croi, vol.roi)
        if overlap == in_bounds:
            chunk = np.full(tuple(meta.chunk_shape), meta.fill_value, dtype=meta.np_dtype)
        else:
            existing = _decode_chunk(vol, grid_index)
            if existing is None:
                chunk = np.full(tuple(meta.chunk_shape), meta.fill_value, dtype=meta.np_dtype)
            else:
                chunk = existing.copy()
        chunk[overlap.to_slices(croi.offset)] = data[overlap.to_slices(roi.offset)]
        _encode_chunk(vol, grid_index, chunk)


def ensure_dataset(root, name, metadata: ArrayMetadata, attributes: VolumeAttributes | None = None) -> VolumeHandle:
    """Open ``name`` if it exists with identical metadata, else create it."""
    try:
        vol = open_dataset(root, name)
    except DatasetNotFoundError:
        return create_dataset(root, name, metadata, attributes)
    if vol.metadata != metadata:
        return create_dataset(root, name, metadata, attributes, overwrite=True)
    return vol
