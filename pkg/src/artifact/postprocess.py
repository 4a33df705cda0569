"""Blockwise post-processing: thresholding and instance segmentation.

Instance segmentation runs as three stages over the block grid:

1. every block labels its own connected components with ids
   ``block_index << 32 | local_id`` and saves its boundary planes
   (face slabs) to a per-block record file;
2. the orchestrator reads all records, unions ids that touch across
   block boundaries and stores the resulting lookup table;
3. every block replaces its ids through the lookup table.

The face-slab record layout is described in ``docs/face_slabs.md``.
"""

from __future__ import annotations

import enum
import itertools
import logging
import shutil
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .geometry import Block, BlockSpec, Coordinate, FitPolicy, Roi, roi_intersect
from .scheduler import BlockTask, ExecutionContext, RunReport, run_blockwise
from .store import ArrayMetadata, VolumeAttributes, VolumeHandle, create_dataset, open_dataset

logger = logging.getLogger(__name__)

LOCAL_BITS = 32
MAX_LOCAL_ID = (1 << LOCAL_BITS) - 1
MAX_BLOCK_INDEX = (1 << (64 - LOCAL_BITS)) - 1


class IdSpaceExhausted(RuntimeError):
    pass


class Connectivity(enum.Enum):
    FACE = "face"
    FULL = "full"


def encode_id(block_index: int, local_id: int) -> int:
    if not 0 <= block_index <= MAX_BLOCK_INDEX:
        raise IdSpaceExhausted(f"block index {block_index} does not fit in {64 - LOCAL_BITS} bits")
    if not 1 <= local_id <= MAX_LOCAL_ID:
        raise ValueError(f"local id {local_id} outside [1, {MAX_LOCAL_ID}]")
    return (block_index << LOCAL_BITS) | local_id


def decode_id(instance_id: int) -> tuple[int, int]:
    instance_id = int(instance_id)
    return instance_id >> LOCAL_BITS, instance_id & MAX_LOCAL_ID


class EquivalenceTable:
    """Disjoint sets over 64-bit instance ids (union by size, path compression).

    After :meth:`finalize` every set is represented by its smallest member.
    Optional anchors (an object's first voxel in global raster order) are
    merged by minimum and order objects for compaction.
    """

    def __init__(self):
        self._parent: dict[int, int] = {}
        self._size: dict[int, int] = {}
        self.anchors: dict[int, int] = {}
        self.counts: dict[int, int] = {}
        self.finalized = False

    def __len__(self):
        return len(self._parent)

    def __contains__(self, x):
        return int(x) in self._parent

    def add(self, x: int, anchor: int | None = None, count: int = 0) -> None:
        x = int(x)
        if x == 0:
            raise ValueError("id 0 is background")
        if x not in self._parent:
            self._parent[x] = x
            self._size[x] = 1
            self.finalized = False
        if anchor is not None:
            self.anchors[x] = min(self.anchors.get(x, anchor), int(anchor))
        if count:
            self.counts[x] = self.counts.get(x, 0) + int(count)

    def find(self, x: int) -> int:
        x = int(x)
        parent = self._parent
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(self, a: int, b: int) -> int:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        if self._size[ra] < self._size[rb]:
            ra, rb = rb, ra
        self._parent[rb] = ra
        self._size[ra] += self._size.pop(rb)
        self.finalized = False
        return ra

    def finalize(self) -> None:
        """Re-root every set at its minimum member."""
        roots = {x: self.find(x) for x in self._parent}
        smallest: dict[int, int] = {}
        for x, r in roots.items():
            if r not in smallest or x < smallest[r]:
                smallest[r] = x
        sizes: dict[int, int] = {}
        for x, r in roots.items():
            m = smallest[r]
            self._parent[x] = m
            sizes[m] = sizes.get(m, 0) + 1
        self._size = sizes
        self.finalized = True

    def representative(self, x: int) -> int:
        if not self.finalized:
            self.finalize()
        return self._parent[int(x)]

    def pairs(self) -> list[tuple[int, int]]:
        """Sorted ``(id, representative)`` pairs."""
        if not self.finalized:
            self.finalize()
        return sorted(self._parent.items())

    def sets(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for x, r in self.pairs():
            out.setdefault(r, []).append(x)
        return out

    @classmethod
    def from_pairs(cls, pairs) -> "EquivalenceTable":
        table = cls()
        for x, r in pairs:
            table.add(x)
            table.add(r)
            table.union(x, r)
        table.finalize()
        return table

    @classmethod
    def identity(cls, ids) -> "EquivalenceTable":
        table = cls()
        for x in ids:
            if int(x):
                table.add(int(x))
        table.finalize()
        return table

    def lookup(self, compact: bool = False, min_size: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Sorted id array and the value each id maps to.

        With ``compact`` the surviving sets are numbered 1..K by anchor
        (when every set has one) or else by representative id. Sets with
        fewer than ``min_size`` counted voxels map to 0.
        """
        pairs = self.pairs()
        keys = np.array([x for x, _ in pairs], dtype=np.uint64)
        reps = np.array([r for _, r in pairs], dtype=np.uint64)
        set_anchor: dict[int, int] = {}
        set_count: dict[int, int] = {}
        for x, r in pairs:
            if x in self.anchors:
                set_anchor[r] = min(set_anchor.get(r, self.anchors[x]), self.anchors[x])
            set_count[r] = set_count.get(r, 0) + self.counts.get(x, 0)
        roots = sorted(set(int(r) for r in reps))
        removed = {r for r in roots if min_size > 0 and set_count.get(r, 0) < min_size}
        survivors = [r for r in roots if r not in removed]
        if compact:
            if survivors and all(r in set_anchor for r in survivors):
                survivors.sort(key=lambda r: (set_anchor[r], r))
            mapping = {r: i + 1 for i, r in enumerate(survivors)}
        else:
            mapping = {r: r for r in survivors}
        for r in removed:
            mapping[r] = 0
        values = np.array([mapping[int(r)] for r in reps], dtype=np.uint64)
        return keys, values

    def save(self, path) -> None:
        pairs = self.pairs()
        anchors = sorted(self.anchors.items())
        counts = sorted(self.counts.items())
        np.savez(
            path,
            pairs=np.array(pairs, dtype=np.uint64).reshape(-1, 2),
            anchors=np.array(anchors, dtype=np.uint64).reshape(-1, 2),
            counts=np.array(counts, dtype=np.uint64).reshape(-1, 2),
        )

    @classmethod
    def load(cls, path) -> "EquivalenceTable":
        with np.load(path) as data:
            table = cls.from_pairs(map(tuple, data["pairs"].tolist()))
            table.anchors = {int(k): int(v) for k, v in data["anchors"].tolist()}
            table.counts = {int(k): int(v) for k, v in data["counts"].tolist()}
        return table


# -- semantic ----------------------------------------------------------------


def threshold(pred: np.ndarray, channel: int | None, t: float) -> np.ndarray:
    """Binary mask ``pred[channel] > t``; ``channel=None`` for arrays without a channel axis."""
    pred = np.asarray(pred)
    if channel is not None:
        if not 0 <= channel < pred.shape[0]:
            raise IndexError(f"channel {channel} out of range for {pred.shape[0]} channels")
        pred = pred[channel]
    return (pred > t).astype(np.uint8)


def _spatial_dims(vol: VolumeHandle) -> int:
    return len(vol.attributes.voxel_size)


def _select(vol: VolumeHandle, data: np.ndarray, channel: int | None) -> np.ndarray:
    d = _spatial_dims(vol)
    if data.ndim == d:
        return data
    if channel is None:
        channel = 0
    return data[channel]


@dataclass
class ThresholdWorker:
    input: VolumeHandle
    output: VolumeHandle
    threshold: float
    channel: int | None = None

    def __call__(self, block: Block) -> None:
        data = _select(self.input, self.input.read(block.write_roi), self.channel)
        self.output.write(block.write_roi, threshold(data, None, self.threshold), clip=True)


def _output_like(vol: VolumeHandle, root, name, dtype, chunks, resume=False) -> VolumeHandle:
    """A spatial dataset shaped like ``vol``; with ``resume`` an identical existing one is kept."""
    d = _spatial_dims(vol)
    spatial = vol.metadata.shape[vol.ndim - d :]
    chunks = [min(c, max(s, 1)) for c, s in zip(chunks, spatial)]
    meta = ArrayMetadata(spatial, chunks, dtype, 0, vol.metadata.compressor)
    attrs = VolumeAttributes(vol.attributes.voxel_size, vol.attributes.offset, vol.attributes.axes)
    if resume and (Path(root) / name / ".zarray").exists():
        existing = open_dataset(root, name)
        if existing.metadata == meta:
            return existing
    return create_dataset(root, name, meta, attrs, overwrite=True)


def _block_spec(vol: VolumeHandle, write_shape, context=None, fit=FitPolicy.SHRINK) -> BlockSpec:
    d = _spatial_dims(vol)
    total = vol.spatial_roi
    context = context if context is not None else (0,) * d
    return BlockSpec(total, Coordinate(write_shape), Coordinate(context), fit)


def threshold_blockwise(
    vol: VolumeHandle,
    out_root,
    out_name: str,
    t: float,
    write_shape,
    channel: int | None = None,
    ctx: ExecutionContext | None = None,
    journal_path=None,
) -> tuple[VolumeHandle, RunReport]:
    output = _output_like(vol, out_root, out_name, "u8", write_shape, resume=journal_path is not None)
    task = BlockTask(
        "threshold",
        _block_spec(vol, write_shape),
        ThresholdWorker(vol, output, t, channel),
        inputs=[vol],
        outputs=[output],
    )
    return output, run_blockwise(task, ctx, journal_path)


# -- per-block labeling ------------------------------------------------------


def _half_offsets(ndim: int, connectivity: Connectivity) -> list[tuple[int, ...]]:
    if connectivity is Connectivity.FACE:
        return [tuple(int(a == b) for b in range(ndim)) for a in range(ndim)]
    offsets = []
    for off in itertools.product((-1, 0, 1), repeat=ndim):
        nz = [o for o in off if o]
        if nz and nz[0] > 0:
            offsets.append(off)
    return offsets


def _pair_slices(shape, offset):
    src, dst = [], []
    for n, o in zip(shape, offset):
        src.append(slice(max(0, -o), n - max(0, o)))
        dst.append(slice(max(0, o), n - max(0, -o)))
    return tuple(src), tuple(dst)


def _components(fg: np.ndarray, edge_sets) -> tuple[np.ndarray, int]:
    """Label components of ``fg`` in first-touch raster order.

    ``edge_sets`` is a list of ``(offset, active)`` where ``active`` (or
    None for "all") marks which ``v -> v + offset`` edges exist, indexed at
    the source voxel over the source slice.
    """
    labels = np.zeros(fg.shape, dtype=np.int64)
    nodes = np.flatnonzero(fg)
    n = nodes.size
    if n == 0:
        return labels, 0
    index = np.full(fg.shape, -1, dtype=np.int64)
    index.flat[nodes] = np.arange(n)
    rows, cols = [], []
    for offset, active in edge_sets:
        src, dst = _pair_slices(fg.shape, offset)
        ok = fg[src] & fg[dst]
        if active is not None:
            ok &= active
        rows.append(index[src][ok])
        cols.append(index[dst][ok])
    rows = np.concatenate(rows) if rows else np.zeros(0, np.int64)
    cols = np.concatenate(cols) if cols else np.zeros(0, np.int64)
    graph = sparse.coo_matrix((np.ones(rows.size, dtype=np.int8), (rows, cols)), shape=(n, n))
    k, comp = csgraph.connected_components(graph, directed=False)
    _, first = np.unique(comp, return_index=True)
    order = np.empty(k, dtype=np.int64)
    order[np.argsort(first, kind="stable")] = np.arange(1, k + 1)
    labels.flat[nodes] = order[comp]
    return labels, k


@dataclass
class BlockLabels:
    """Result of labeling one block: encoded ids and per-object bookkeeping."""

    labels: np.ndarray  # uint64, encoded ids
    ids: np.ndarray  # encoded id per local object, ascending
    first_voxel: np.ndarray  # flat raster index of each object's first voxel within the block
    counts: np.ndarray  # voxels per object


def label_block(
    mask: np.ndarray,
    block_index: int,
    connectivity: Connectivity | str = Connectivity.FACE,
    max_local_id: int = MAX_LOCAL_ID,
    edges=None,
) -> BlockLabels:
    """Connected components of one block, encoded into the global id space.

    Local ids follow first-touch raster order. ``edges`` replaces the
    connectivity-derived edge set (used for affinity decoding). Raises
    :class:`IdSpaceExhausted` if the block holds more than ``max_local_id``
    components.
    """
    connectivity = Connectivity(connectivity)
    fg = np.asarray(mask).astype(bool)
    if edges is None:
        edges = [(off, None) for off in _half_offsets(fg.ndim, connectivity)]
    local, k = _components(fg, edges)
    if k > max_local_id:
        raise IdSpaceExhausted(
            f"block {block_index} has {k} components; at most {max_local_id} fit in the local id space"
        )
    if k and not 0 <= block_index <= MAX_BLOCK_INDEX:
        raise IdSpaceExhausted(f"block index {block_index} does not fit in {64 - LOCAL_BITS} bits")
    base = np.uint64(block_index) << np.uint64(LOCAL_BITS)
    encoded = np.where(local > 0, local.astype(np.uint64) | base, np.uint64(0)).astype(np.uint64)
    flat = local.ravel()
    fg_idx = np.flatnonzero(flat)
    uniq, first, counts = np.unique(flat[fg_idx], return_index=True, return_counts=True)
    ids = uniq.astype(np.uint64) | base
    return BlockLabels(encoded, ids, fg_idx[first], counts)


# -- face slab records -------------------------------------------------------

_MAGIC = b"FSLB"
_VERSION = 1


@dataclass
class FaceSlab:
    axis: int
    side: int  # 0: first plane along axis, 1: last plane
    ids: np.ndarray  # uint64, block write shape with axis squeezed out
    edges: np.ndarray | None = None  # bool, edges from this plane to the next block (side 1 only)


@dataclass
class BlockRecord:
    block_index: int
    write_roi: Roi
    slabs: list[FaceSlab]
    ids: np.ndarray
    anchors: np.ndarray  # global flat raster index of each object's first voxel
    counts: np.ndarray

    def save(self, path) -> None:
        d = self.write_roi.dims
        parts = [
            _MAGIC,
            struct.pack("<BBQ", _VERSION, d, self.block_index),
            struct.pack(f"<{d}q", *self.write_roi.offset),
            struct.pack(f"<{d}q", *self.write_roi.shape),
            struct.pack("<B", len(self.slabs)),
        ]
        for slab in self.slabs:
            shape = list(slab.ids.shape)
            parts.append(struct.pack("<BBB", slab.axis, slab.side, slab.edges is not None))
            parts.append(struct.pack(f"<{d - 1}Q", *shape))
            parts.append(np.ascontiguousarray(slab.ids, dtype="<u8").tobytes())
            if slab.edges is not None:
                parts.append(np.ascontiguousarray(slab.edges, dtype=np.uint8).tobytes())
        parts.append(struct.pack("<Q", len(self.ids)))
        table = np.stack([self.ids, self.anchors, self.counts]).astype("<u8")
        parts.append(np.ascontiguousarray(table.T).tobytes())
        tmp = Path(path).with_suffix(".tmp")
        tmp.write_bytes(b"".join(parts))
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "BlockRecord":
        buf = memoryview(Path(path).read_bytes())
        if bytes(buf[:4]) != _MAGIC:
            raise ValueError(f"{path} is not a face slab record")
        pos = 4
        version, d, block_index = struct.unpack_from("<BBQ", buf, pos)
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported record version {version}")
        pos += struct.calcsize("<BBQ")
        offset = struct.unpack_from(f"<{d}q", buf, pos)
        pos += 8 * d
        shape = struct.unpack_from(f"<{d}q", buf, pos)
        pos += 8 * d
        (n_slabs,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        slabs = []
        for _ in range(n_slabs):
            axis, side, has_edges = struct.unpack_from("<BBB", buf, pos)
            pos += 3
            face = struct.unpack_from(f"<{d - 1}Q", buf, pos)
            pos += 8 * (d - 1)
            n = int(np.prod(face))
            ids = np.frombuffer(buf, dtype="<u8", count=n, offset=pos).reshape(face).astype(np.uint64)
            pos += 8 * n
            edges = None
            if has_edges:
                edges = np.frombuffer(buf, dtype=np.uint8, count=n, offset=pos).reshape(face).astype(bool)
                pos += n
            slabs.append(FaceSlab(axis, side, ids, edges))
        (n_ids,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        table = np.frombuffer(buf, dtype="<u8", count=3 * n_ids, offset=pos).reshape(n_ids, 3).astype(np.uint64)
        return cls(block_index, Roi(offset, shape), slabs, table[:, 0], table[:, 1], table[:, 2])


def _make_record(block_index, write_roi: Roi, total_shape, result: BlockLabels, high_edges=None) -> BlockRecord:
    labels = result.labels
    slabs = []
    for axis in range(labels.ndim):
        for side in (0, 1):
            index = 0 if side == 0 else labels.shape[axis] - 1
            ids = np.take(labels, index, axis=axis)
            edges = high_edges[axis] if (side == 1 and high_edges is not None) else None
            slabs.append(FaceSlab(axis, side, ids, edges))
    local = np.array(np.unravel_index(result.first_voxel, labels.shape)) if result.ids.size else None
    if local is None:
        anchors = np.zeros(0, dtype=np.uint64)
    else:
        glob = local + np.array(write_roi.offset)[:, None]
        anchors = np.ravel_multi_index(tuple(glob), tuple(total_shape)).astype(np.uint64)
    return BlockRecord(block_index, write_roi, slabs, result.ids, anchors, result.counts.astype(np.uint64))


def merge_faces(records: Sequence[BlockRecord], total_roi: Roi, connectivity=Connectivity.FACE) -> EquivalenceTable:
    """Union ids that touch across block boundaries.

    For every internal boundary plane of the block grid the last planes of
    the blocks below and the first planes of the blocks above are assembled
    into two global planes. Face connectivity compares aligned positions;
    full connectivity also compares lateral offsets in {-1, 0, 1}, which
    covers edge and corner contacts between diagonal blocks. Slabs that
    carry an edge mask (affinity decoding) only join where the edge is set.
    """
    connectivity = Connectivity(connectivity)
    table = EquivalenceTable()
    for rec in records:
        for x, a, c in zip(rec.ids.tolist(), rec.anchors.tolist(), rec.counts.tolist()):
            table.add(x, a, c)
    if not records:
        table.finalize()
        return table
    d = total_roi.dims
    origin = total_roi.offset
    for axis in range(d):
        lateral = [a for a in range(d) if a != axis]
        plane_shape = tuple(total_roi.shape[a] for a in lateral)
        # boundary coordinate -> (planes below, planes above, edges)
        bounds: dict[int, list] = {}
        for rec in records:
            lo = rec.write_roi.begin[axis] - origin[axis]
            hi = rec.write_roi.end[axis] - origin[axis]
            where = tuple(
                slice(rec.write_roi.begin[a] - origin[a], rec.write_roi.end[a] - origin[a]) for a in lateral
            )
            for slab in rec.slabs:
                if slab.axis != axis:
                    continue
                coord = lo if slab.side == 0 else hi
                if coord <= 0 or coord >= total_roi.shape[axis]:
                    continue
                entry = bounds.setdefault(coord, [None, None, None])
                slot = 1 if slab.side == 0 else 0
                if entry[slot] is None:
                    entry[slot] = np.zeros(plane_shape, dtype=np.uint64)
                entry[slot][where] = slab.ids
                if slab.edges is not None:
                    if entry[2] is None:
                        entry[2] = np.zeros(plane_shape, dtype=bool)
                    entry[2][where] = slab.edges
        for coord in sorted(bounds):
            below, above, edges = bounds[coord]
            if below is None or above is None:
                continue
            if connectivity is Connectivity.FACE or edges is not None:
                shifts = [(0,) * (d - 1)]
            else:
                shifts = list(itertools.product((-1, 0, 1), repeat=d - 1))
            pairs = []
            for shift in shifts:
                src, dst = _pair_slices(plane_shape, shift)
                a, b = below[src], above[dst]
                ok = (a != 0) & (b != 0)
                if edges is not None:
                    ok &= edges[src]
                if ok.any():
                    pairs.append(np.stack([a[ok], b[ok]], axis=1))
            if not pairs:
                continue
            for x, y in np.unique(np.concatenate(pairs), axis=0).tolist():
                table.union(x, y)
    table.finalize()
    return table


# -- relabeling --------------------------------------------------------------


def apply_lookup(labels: np.ndarray, keys: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Map every nonzero id through ``keys -> values``; a missing id is an error."""
    labels = np.asarray(labels, dtype=np.uint64)
    out = np.zeros(labels.shape, dtype=np.uint64)
    nz = labels != 0
    if not nz.any():
        return out
    ids = labels[nz]
    pos = np.searchsorted(keys, ids)
    pos_c = np.minimum(pos, max(len(keys) - 1, 0))
    if len(keys) == 0 or np.any(keys[pos_c] != ids):
        missing = ids[(pos >= len(keys)) | (keys[pos_c] != ids)][0] if len(keys) else ids[0]
        raise KeyError(f"instance id {int(missing)} is not in the equivalence table")
    out[nz] = values[pos_c]
    return out


@lru_cache(maxsize=4)
def _load_lookup(path: str):
    with np.load(path) as data:
        return data["keys"], data["values"]


@dataclass
class RelabelWorker:
    input: VolumeHandle
    output: VolumeHandle
    lookup_path: str

    def __call__(self, block: Block) -> None:
        keys, values = _load_lookup(self.lookup_path)
        labels = self.input.read(block.write_roi)
        self.output.write(block.write_roi, apply_lookup(labels, keys, values), clip=True)


def relabel_blockwise(
    labels: VolumeHandle,
    table: EquivalenceTable,
    out_root,
    out_name: str,
    write_shape,
    compact: bool = False,
    min_size: int = 0,
    scratch_dir=None,
    ctx: ExecutionContext | None = None,
    journal_path=None,
) -> tuple[VolumeHandle, RunReport]:
    if not table.finalized:
        raise ValueError("equivalence table must be finalized before relabeling")
    scratch = Path(scratch_dir) if scratch_dir is not None else Path(out_root) / f".{out_name}.scratch"
    scratch.mkdir(parents=True, exist_ok=True)
    keys, values = table.lookup(compact=compact, min_size=min_size)
    lookup_path = scratch / "lookup.npz"
    np.savez(lookup_path, keys=keys, values=values)
    _load_lookup.cache_clear()
    output = _output_like(labels, out_root, out_name, "u64", write_shape, resume=journal_path is not None)
    task = BlockTask(
        "relabel",
        _block_spec(labels, write_shape),
        RelabelWorker(labels, output, str(lookup_path)),
        inputs=[labels],
        outputs=[output],
    )
    return output, run_blockwise(task, ctx, journal_path)


# -- instance segmentation pipeline ------------------------------------------


@dataclass
class MaskLabelWorker:
    """Pass 1 for thresholded masks: label the block and save its record."""

    input: VolumeHandle
    output: VolumeHandle
    record_dir: str
    total_roi: Roi
    connectivity: Connectivity = Connectivity.FACE
    threshold: float | None = None
    channel: int | None = None
    max_local_id: int = MAX_LOCAL_ID

    def mask(self, roi: Roi) -> np.ndarray:
        data = _select(self.input, self.input.read(roi), self.channel)
        if self.threshold is None:
            return data != 0
        return data > self.threshold

    def __call__(self, block: Block) -> None:
        write = roi_intersect(block.write_roi, self.total_roi)
        result = label_block(self.mask(write), block.block_index, self.connectivity, self.max_local_id)
        self.output.write(write, result.labels)
        record = _make_record(block.block_index, write, self.total_roi.shape, result)
        record.save(Path(self.record_dir) / f"{block.block_index}.slab")


def _unit_axis(offset) -> tuple[int, int]:
    nz = [(a, o) for a, o in enumerate(offset) if o]
    if len(nz) != 1 or abs(nz[0][1]) != 1:
        raise ValueError(f"only unit axis offsets can be decoded, got {tuple(offset)}")
    return nz[0]


def affinity_edges(affs: np.ndarray, neighborhood, t: float) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Per axis, boolean arrays ``E[x]`` for the edge ``x -> x + e_axis``.

    Returns the edges above ``t`` and the edges above 0; both have the shape
    of the spatial volume (the last plane along each axis is always False).
    """
    offsets = [tuple(int(o) for o in off) for off in neighborhood]
    if len(offsets) != affs.shape[0]:
        raise ValueError(f"{len(offsets)} offsets for {affs.shape[0]} affinity channels")
    shape = affs.shape[1:]
    d = len(shape)
    active = [np.zeros(shape, bool) for _ in range(d)]
    present = [np.zeros(shape, bool) for _ in range(d)]
    for k, off in enumerate(offsets):
        axis, sign = _unit_axis(off)
        src = [slice(None)] * d
        dst = [slice(None)] * d
        src[axis] = slice(0, shape[axis] - 1)
        # channel value for the edge (x, x + e) sits at x (+e) or at x + e (-e)
        dst[axis] = slice(0, shape[axis] - 1) if sign > 0 else slice(1, shape[axis])
        values = affs[k][tuple(dst)]
        active[axis][tuple(src)] |= values > t
        present[axis][tuple(src)] |= values > 0
    return active, present


def decode_affinities(affs: np.ndarray, neighborhood, t: float) -> np.ndarray:
    """Whole-array affinity decoding: components over edges with affinity > t.

    Voxels without any incident positive affinity are background.
    """
    active, present = affinity_edges(np.asarray(affs), neighborhood, t)
    d = len(active)
    fg = np.zeros(active[0].shape, bool)
    for axis in range(d):
        fg |= present[axis]
        src = [slice(None)] * d
        dst = [slice(None)] * d
        src[axis] = slice(0, -1)
        dst[axis] = slice(1, None)
        fg[tuple(dst)] |= present[axis][tuple(src)]
    edges = []
    for axis in range(d):
        off = tuple(int(a == axis) for a in range(d))
        src, _ = _pair_slices(fg.shape, off)
        edges.append((off, active[axis][src]))
    labels, _ = _components(fg, edges)
    return labels.astype(np.uint64)


@dataclass
class AffinityLabelWorker:
    """Pass 1 for affinity decoding; reads one voxel of context."""

    input: VolumeHandle
    output: VolumeHandle
    record_dir: str
    total_roi: Roi
    neighborhood: list
    threshold: float
    max_local_id: int = MAX_LOCAL_ID

    def __call__(self, block: Block) -> None:
        write = roi_intersect(block.write_roi, self.total_roi)
        d = write.dims
        read = write.grow((1,) * d)
        affs = self.input.read(read)
        active, present = affinity_edges(affs, self.neighborhood, self.threshold)
        inner = write.to_slices(read.offset)
        fg = np.zeros(tuple(write.shape), bool)
        for axis in range(d):
            fg |= present[axis][inner]
            before = list(inner)
            before[axis] = slice(inner[axis].start - 1, inner[axis].stop - 1)
            fg |= present[axis][tuple(before)]
        edges = []
        high = []
        for axis in range(d):
            off = tuple(int(a == axis) for a in range(d))
            src, _ = _pair_slices(tuple(write.shape), off)
            block_edges = active[axis][inner]
            edges.append((off, block_edges[src]))
            high.append(np.take(block_edges, block_edges.shape[axis] - 1, axis=axis))
        result = label_block(fg, block.block_index, Connectivity.FACE, self.max_local_id, edges=edges)
        self.output.write(write, result.labels)
        record = _make_record(block.block_index, write, self.total_roi.shape, result, high_edges=high)
        record.save(Path(self.record_dir) / f"{block.block_index}.slab")


@dataclass
class InstanceResult:
    output: VolumeHandle | None
    reports: list[RunReport]
    num_objects: int = 0

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.reports) and self.output is not None


def _run_instance_pipeline(
    worker_factory,
    source: VolumeHandle,
    out_root,
    out_name,
    write_shape,
    connectivity,
    compact,
    min_size,
    scratch_dir,
    ctx,
    journal_dir,
    fit,
) -> InstanceResult:
    scratch = Path(scratch_dir)
    record_dir = scratch / "records"
    spec = _block_spec(source, write_shape, fit=fit)
    journals = Path(journal_dir) if journal_dir is not None else None

    def journal(name):
        return journals / f"{name}.journal" if journals is not None else None

    # resuming keeps pass-1 labels, records and the merged table; a fresh run starts clean
    resume = journals is not None and (scratch / "pass1" / ".zarray").exists()
    if not resume:
        shutil.rmtree(record_dir, ignore_errors=True)
        (scratch / "table.npz").unlink(missing_ok=True)
    pass1 = _output_like(source, scratch, "pass1", "u64", write_shape, resume=resume)
    record_dir.mkdir(parents=True, exist_ok=True)
    worker = worker_factory(pass1, str(record_dir), spec.total_roi)
    task = BlockTask("label", spec, worker, inputs=[source], outputs=[pass1])
    report = run_blockwise(task, ctx, journal("label"))
    reports = [report]
    if not report.ok:
        return InstanceResult(None, reports)

    table_path = scratch / "table.npz"
    if resume and report.succeeded == 0 and table_path.exists():
        # pass 1 was already complete and its records may be gone
        table = EquivalenceTable.load(table_path)
    else:
        records = [BlockRecord.load(p) for p in sorted(record_dir.glob("*.slab"))]
        table = merge_faces(records, spec.total_roi, connectivity)
        table.save(table_path)
    keys, values = table.lookup(compact=compact, min_size=min_size)

    output, report = relabel_blockwise(
        pass1, table, out_root, out_name, write_shape, compact, min_size, scratch, ctx, journal("relabel")
    )
    reports.append(report)
    if not report.ok:
        return InstanceResult(None, reports)
    shutil.rmtree(record_dir, ignore_errors=True)
    return InstanceResult(output, reports, int(np.unique(values[values > 0]).size))


def segment_instances(
    source: VolumeHandle,
    out_root,
    out_name: str,
    write_shape,
    scratch_dir,
    connectivity: Connectivity | str = Connectivity.FACE,
    compact: bool = True,
    min_size: int = 0,
    threshold: float | None = None,
    channel: int | None = None,
    ctx: ExecutionContext | None = None,
    journal_dir=None,
    fit: FitPolicy = FitPolicy.SHRINK,
) -> InstanceResult:
    """Connected components of a (thresholded) volume, computed blockwise.

    Without ``threshold`` every nonzero voxel is foreground. With
    ``compact`` objects are numbered 1..K by their first voxel in raster
    order, which makes the result independent of the block shape.
    """
    connectivity = Connectivity(connectivity)

    def factory(pass1, record_dir, total_roi):
        return MaskLabelWorker(source, pass1, record_dir, total_roi, connectivity, threshold, channel)

    return _run_instance_pipeline(
        factory, source, out_root, out_name, write_shape, connectivity, compact, min_size,
        scratch_dir, ctx, journal_dir, fit,
    )  # fmt: skip


def segment_affinities(
    affs: VolumeHandle,
    neighborhood,
    t: float,
    out_root,
    out_name: str,
    write_shape,
    scratch_dir,
    compact: bool = True,
    min_size: int = 0,
    ctx: ExecutionContext | None = None,
    journal_dir=None,
) -> InstanceResult:
    neighborhood = [tuple(int(o) for o in off) for off in neighborhood]
    for off in neighborhood:
        _unit_axis(off)

    def factory(pass1, record_dir, total_roi):
        return AffinityLabelWorker(affs, pass1, record_dir, total_roi, neighborhood, t)

    return _run_instance_pipeline(
        factory, affs, out_root, out_name, write_shape, Connectivity.FACE, compact, min_size,
        scratch_dir, ctx, journal_dir, FitPolicy.SHRINK,
    )  # fmt: skip


# -- size filter -------------------------------------------------------------


@dataclass
class CountWorker:
    input: VolumeHandle
    count_dir: str

    def __call__(self, block: Block) -> None:
        labels = self.input.read(roi_intersect(block.write_roi, self.input.spatial_roi))
        ids, counts = np.unique(labels[labels != 0], return_counts=True)
        np.savez(Path(self.count_dir) / f"{block.block_index}.npz", ids=ids.astype(np.uint64), counts=counts)


def size_filter_array(labels: np.ndarray, min_size: int) -> np.ndarray:
    labels = np.asarray(labels)
    if min_size <= 1:
        return labels.copy()
    ids, counts = np.unique(labels, return_counts=True)
    small = ids[(counts < min_size) & (ids != 0)]
    out = labels.copy()
    out[np.isin(labels, small)] = 0
    return out


def size_filter(
    labels: VolumeHandle,
    min_size: int,
    out_root,
    out_name: str,
    write_shape,
    scratch_dir,
    ctx: ExecutionContext | None = None,
) -> tuple[VolumeHandle | None, list[RunReport]]:
    """Remove objects smaller than ``min_size`` voxels, counting across blocks."""
    if min_size < 0:
        raise ValueError("min_size must be non-negative")
    scratch = Path(scratch_dir)
    count_dir = scratch / "counts"
    count_dir.mkdir(parents=True, exist_ok=True)
    spec = _block_spec(labels, write_shape)
    report = run_blockwise(BlockTask("count", spec, CountWorker(labels, str(count_dir)), inputs=[labels]), ctx)
    if not report.ok:
        return None, [report]
    totals: dict[int, int] = {}
    for path in sorted(count_dir.glob("*.npz")):
        with np.load(path) as data:
            for i, c in zip(data["ids"].tolist(), data["counts"].tolist()):
                totals[i] = totals.get(i, 0) + c
    table = EquivalenceTable.identity(totals)
    table.counts = totals
    output, report2 = relabel_blockwise(
        labels, table, out_root, out_name, write_shape, False, min_size, scratch, ctx
    )
    shutil.rmtree(count_dir, ignore_errors=True)
    return output, [report, report2]
