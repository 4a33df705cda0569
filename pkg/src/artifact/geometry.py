"""Integer coordinates, regions of interest and block-grid enumeration."""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass
from typing import Iterable, Sequence


class Coordinate(tuple):
    """Fixed-length tuple of ints with elementwise arithmetic.

    Unlike a plain tuple, ``+`` adds elementwise. Operands of different
    length raise ``ValueError``; scalars are not broadcast.
    """

    def __new__(cls, *values):
        if len(values) == 1 and isinstance(values[0], Iterable):
            values = tuple(values[0])
        return super().__new__(cls, (int(v) for v in values))

    @property
    def dims(self) -> int:
        return len(self)

    def _check(self, other) -> "Coordinate":
        if not isinstance(other, Coordinate):
            if isinstance(other, (int, float)):
                raise TypeError("scalar broadcasting is not supported")
            other = Coordinate(other)
        if len(other) != len(self):
            raise ValueError(f"dimensionality mismatch: {len(self)} vs {len(other)}")
        return other

    def __add__(self, other):
        other = self._check(other)
        return Coordinate(a + b for a, b in zip(self, other))

    def __radd__(self, other):
        return Coordinate(other) + self

    def __sub__(self, other):
        other = self._check(other)
        return Coordinate(a - b for a, b in zip(self, other))

    def __rsub__(self, other):
        return Coordinate(other) - self

    def __mul__(self, other):
        other = self._check(other)
        return Coordinate(a * b for a, b in zip(self, other))

    def __floordiv__(self, other):
        other = self._check(other)
        return Coordinate(a // b for a, b in zip(self, other))

    def __mod__(self, other):
        other = self._check(other)
        return Coordinate(a % b for a, b in zip(self, other))

    def __neg__(self):
        return Coordinate(-a for a in self)

    def __repr__(self):
        return f"Coordinate{tuple(self)}"


@dataclass(frozen=True)
class Roi:
    """Axis-aligned box ``[offset, offset + shape)`` in voxel coordinates."""

    offset: Coordinate
    shape: Coordinate

    def __init__(self, offset: Sequence[int], shape: Sequence[int]):
        offset, shape = Coordinate(offset), Coordinate(shape)
        if len(offset) != len(shape):
            raise ValueError("offset and shape must have equal length")
        if any(s < 0 for s in shape):
            raise ValueError(f"negative ROI shape {tuple(shape)}")
        object.__setattr__(self, "offset", offset)
        object.__setattr__(self, "shape", shape)

    @property
    def dims(self) -> int:
        return len(self.offset)

    @property
    def begin(self) -> Coordinate:
        return self.offset

    @property
    def end(self) -> Coordinate:
        return self.offset + self.shape

    @property
    def size(self) -> int:
        n = 1
        for s in self.shape:
            n *= s
        return n

    def empty(self) -> bool:
        return any(s == 0 for s in self.shape)

    def contains(self, other: "Roi") -> bool:
        if other.empty():
            return True
        return all(a <= b for a, b in zip(self.begin, other.begin)) and all(
            a >= b for a, b in zip(self.end, other.end)
        )

    def grow(self, by: Sequence[int]) -> "Roi":
        return roi_grow(self, Coordinate(by))

    def intersect(self, other: "Roi") -> "Roi":
        return roi_intersect(self, other)

    def shift(self, by: Sequence[int]) -> "Roi":
        return Roi(self.offset + Coordinate(by), self.shape)

    def to_slices(self, relative_to: Sequence[int] | None = None) -> tuple[slice, ...]:
        origin = Coordinate(relative_to) if relative_to is not None else Coordinate([0] * self.dims)
        begin = self.offset - origin
        return tuple(slice(b, b + s) for b, s in zip(begin, self.shape))

    def to_json(self) -> dict:
        return {"offset": list(self.offset), "shape": list(self.shape)}

    @classmethod
    def from_json(cls, doc: dict) -> "Roi":
        return cls(doc["offset"], doc["shape"])

    def __repr__(self):
        return f"Roi(offset={tuple(self.offset)}, shape={tuple(self.shape)})"


def roi_grow(roi: Roi, by: Coordinate) -> Roi:
    """Grow ``roi`` by ``by`` on every side; negative values shrink, clamping at zero."""
    by = Coordinate(by)
    if len(by) != roi.dims:
        raise ValueError(f"dimensionality mismatch: {roi.dims} vs {len(by)}")
    return Roi(roi.offset - by, [max(0, s + 2 * b) for s, b in zip(roi.shape, by)])


def roi_intersect(a: Roi, b: Roi) -> Roi:
    if a.dims != b.dims:
        raise ValueError(f"dimensionality mismatch: {a.dims} vs {b.dims}")
    begin = [max(x, y) for x, y in zip(a.begin, b.begin)]
    end = [min(x, y) for x, y in zip(a.end, b.end)]
    return Roi(begin, [max(0, e - s) for s, e in zip(begin, end)])


class SnapMode(enum.Enum):
    EXPAND = "expand"
    CONTRACT = "contract"


def snap_roi(roi: Roi, grid: Sequence[int], mode: SnapMode | str = SnapMode.EXPAND) -> Roi:
    grid = Coordinate(grid)
    if len(grid) != roi.dims:
        raise ValueError(f"dimensionality mismatch: {roi.dims} vs {len(grid)}")
    if any(g <= 0 for g in grid):
        raise ValueError("grid must be positive")
    mode = SnapMode(mode)
    if mode is SnapMode.EXPAND:
        begin = [(b // g) * g for b, g in zip(roi.begin, grid)]
        end = [-((-e) // g) * g for e, g in zip(roi.end, grid)]
    else:
        begin = [-((-b) // g) * g for b, g in zip(roi.begin, grid)]
        end = [(e // g) * g for e, g in zip(roi.end, grid)]
    if any(e <= b for b, e in zip(begin, end)):
        return Roi(begin, [0] * roi.dims)
    return Roi(begin, [e - b for b, e in zip(begin, end)])


class FitPolicy(enum.Enum):
    OVERHANG = "overhang"
    SHRINK = "shrink"
    STRICT = "strict"


@dataclass(frozen=True)
class Block:
    block_index: int
    read_roi: Roi
    write_roi: Roi

    def to_json(self) -> dict:
        return {
            "block_index": self.block_index,
            "read_roi": self.read_roi.to_json(),
            "write_roi": self.write_roi.to_json(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Block":
        return cls(int(doc["block_index"]), Roi.from_json(doc["read_roi"]), Roi.from_json(doc["write_roi"]))


@dataclass(frozen=True)
class BlockSpec:
    total_roi: Roi
    write_shape: Coordinate
    context: Coordinate
    fit: FitPolicy = FitPolicy.SHRINK

    def __post_init__(self):
        object.__setattr__(self, "write_shape", Coordinate(self.write_shape))
        object.__setattr__(self, "context", Coordinate(self.context))
        object.__setattr__(self, "fit", FitPolicy(self.fit))
        d = self.total_roi.dims
        if len(self.write_shape) != d or len(self.context) != d:
            raise ValueError("total_roi, write_shape and context must share dimensionality")
        if any(c < 0 for c in self.context):
            raise ValueError("context must be non-negative")

    @property
    def grid_shape(self) -> Coordinate:
        return Coordinate(-((-s) // w) for s, w in zip(self.total_roi.shape, self.write_shape))

    def __len__(self) -> int:
        n = 1
        for g in self.grid_shape:
            n *= g
        return n


def enumerate_blocks(spec: BlockSpec) -> list[Block]:
    """All blocks of ``spec`` in row-major grid order.

    Block ``i`` has ``block_index == i``. Under ``OVERHANG`` the trailing
    write ROIs keep the full write shape and may extend past ``total_roi``;
    writers clip them.
    """
    if any(w <= 0 for w in spec.write_shape):
        raise ValueError("write_shape must be positive on every axis")
    total = spec.total_roi
    if spec.fit is FitPolicy.STRICT:
        bad = [a for a, (s, w) in enumerate(zip(total.shape, spec.write_shape)) if s % w]
        if bad:
            raise ValueError(
                f"strict fit: total shape {tuple(total.shape)} is not a multiple of "
                f"write shape {tuple(spec.write_shape)} on axes {bad}"
            )
    if total.empty():
        return []
    blocks = []
    for index, grid_pos in enumerate(itertools.product(*(range(g) for g in spec.grid_shape))):
        offset = total.offset + Coordinate(grid_pos) * spec.write_shape
        write_roi = Roi(offset, spec.write_shape)
        if spec.fit is FitPolicy.SHRINK:
            write_roi = roi_intersect(write_roi, total)
        blocks.append(Block(index, roi_grow(write_roi, spec.context), write_roi))
    return blocks
