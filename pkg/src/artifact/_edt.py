"""Exact squared Euclidean distance transform (separable lower-envelope method)."""

from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True)
def _envelope_lines(lines, spacing, out):
    n_lines, n = lines.shape
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1, dtype=np.float64)
    for line in range(n_lines):
        f = lines[line]
        k = -1
        for q in range(n):
            fq = f[q]
            if fq == np.inf:
                continue
            xq = q * spacing
            s = 0.0
            while k >= 0:
                p = v[k]
                xp = p * spacing
                s = ((fq + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp))
                if s <= z[k]:
                    k -= 1
                else:
                    break
            if k < 0:
                k = 0
                v[0] = q
                z[0] = -np.inf
            else:
                k += 1
                v[k] = q
                z[k] = s
            z[k + 1] = np.inf
        if k < 0:
            for q in range(n):
                out[line, q] = np.inf
            continue
        j = 0
        for q in range(n):
            x = q * spacing
            while z[j + 1] < x:
                j += 1
            d = x - v[j] * spacing
            out[line, q] = d * d + f[v[j]]


def squared_edt(seeds: np.ndarray, spacing=None) -> np.ndarray:
    """Squared distance from every voxel to the nearest ``True`` voxel of ``seeds``.

    Distances are center-to-center in world units, scaling axis ``a`` by
    ``spacing[a]``. Without seeds the result is ``inf`` everywhere.
    """
    seeds = np.asarray(seeds, dtype=bool)
    if spacing is None:
        spacing = (1.0,) * seeds.ndim
    if len(spacing) != seeds.ndim:
        raise ValueError("spacing must have one entry per axis")
    f = np.where(seeds, 0.0, np.inf)
    if f.size == 0:
        return f
    for axis in range(seeds.ndim):
        moved = np.moveaxis(f, axis, -1)
        lines = np.ascontiguousarray(moved).reshape(-1, moved.shape[-1])
        out = np.empty_like(lines)
        _envelope_lines(lines, float(spacing[axis]), out)
        f = np.moveaxis(out.reshape(moved.shape), -1, axis)
    return np.ascontiguousarray(f)
