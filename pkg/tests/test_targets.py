import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from artifact._edt import squared_edt
from artifact.config import ConfigError
from artifact.geometry import BlockSpec
from artifact.scheduler import BlockTask, ExecutionContext, run_blockwise
from artifact.store import ArrayMetadata, VolumeAttributes, create_dataset
from artifact.targets import (
    TargetSpec,
    TargetWorker,
    affinities,
    hot_distance,
    local_shape_descriptors,
    lsd_channels,
    make_target,
    one_hot,
    signed_distance,
)
from oracles import brute_affinities, brute_signed_distance


def test_signed_distance_1d_example():
    out = signed_distance(np.array([0, 1, 1, 1, 0]), 1, [1], 1.0)
    np.testing.assert_allclose(out[0], np.tanh([-1, 1, 2, 1, -1]), atol=1e-7)


def test_signed_distance_voxel_size_scales():
    labels = np.array([0, 0, 1, 1, 1, 1, 0])
    d1 = np.arctanh(np.clip(signed_distance(labels, 1, [1], 10.0)[0].astype(np.float64), -0.999999, 0.999999)) * 10
    d2 = np.arctanh(np.clip(signed_distance(labels, 1, [2], 10.0)[0].astype(np.float64), -0.999999, 0.999999)) * 10
    np.testing.assert_allclose(d2, 2 * d1, atol=1e-4)
    np.testing.assert_allclose(d1, brute_signed_distance(labels == 1, [1]), atol=1e-4)


def test_signed_distance_single_class():
    assert (signed_distance(np.ones((3, 4), np.uint8), 1, None, 2.0) == 1.0).all()
    assert (signed_distance(np.zeros((3, 4), np.uint8), 1, None, 2.0) == -1.0).all()


@pytest.mark.parametrize("seed", range(6))
def test_signed_distance_brute_force(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(int(s) for s in rng.integers(3, 17, size=int(rng.integers(2, 4))))
    if len(shape) == 3:
        shape = tuple(min(s, 12) for s in shape)
    labels = (rng.random(shape) < rng.uniform(0.05, 0.6)).astype(np.uint8) * 3
    spacing = tuple(float(v) for v in rng.choice([1.0, 2.0, 4.0, 0.5], size=len(shape)))
    scale = float(rng.uniform(1, 20))
    oracle = np.tanh(brute_signed_distance(labels == 3, spacing) / scale)
    got = signed_distance(labels, 3, spacing, scale)[0]
    np.testing.assert_allclose(got, oracle, atol=1e-6, rtol=0)
    # the float64 distance itself is exact up to rounding
    d = np.sqrt(squared_edt(labels != 3, spacing))
    np.testing.assert_allclose(np.where(labels == 3, d, 0), np.maximum(brute_signed_distance(labels == 3, spacing), 0), atol=1e-9)


def test_edt_matches_scipy_anisotropic(rng):
    seeds = rng.random((20, 17, 9)) < 0.05
    spacing = (4.0, 1.0, 2.5)
    ours = squared_edt(seeds, spacing)
    ref = ndimage.distance_transform_edt(~seeds, sampling=spacing) ** 2
    np.testing.assert_allclose(ours, ref, rtol=1e-12, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_signed_distance_sign_and_range(seed):
    rng = np.random.default_rng(seed)
    labels = (rng.random((9, 8)) < 0.4).astype(np.uint16)
    out = signed_distance(labels, 1, (1.0, 3.0), 1.5)[0]
    assert out.dtype == np.float32
    assert ((out > 0) == (labels == 1)).all()
    assert (np.abs(out) <= 1).all()


def test_one_hot_examples():
    np.testing.assert_array_equal(one_hot(np.array([0, 1, 2]), [1, 2]), [[0, 1, 0], [0, 0, 1]])
    assert (one_hot(np.array([0, 1, 2]), [5]) == 0).all()
    with pytest.raises(ValueError):
        one_hot(np.array([1]), [1, 1])
    with pytest.raises(ValueError):
        one_hot(np.array([1]), [])


def test_one_hot_disjoint(rng):
    labels = rng.integers(0, 5, (6, 7, 8))
    out = one_hot(labels, [1, 2, 4])
    assert set(np.unique(out)) <= {0.0, 1.0}
    assert (out.sum(0) <= 1).all()
    np.testing.assert_array_equal(out.sum(0), np.isin(labels, [1, 2, 4]))


def test_hot_distance_concatenation(rng):
    labels = rng.integers(0, 3, (8, 8, 8)).astype(np.uint8)
    out = hot_distance(labels, [1, 2], None, 2.0)
    assert out.shape == (4, 8, 8, 8)
    np.testing.assert_array_equal(out[:2], one_hot(labels, [1, 2]))
    np.testing.assert_array_equal(out[2], signed_distance(labels, 1, None, 2.0)[0])
    np.testing.assert_array_equal(out[3], signed_distance(labels, 2, None, 2.0)[0])
    assert set(np.unique(out[:2])) <= {0.0, 1.0}
    assert out[2:].min() > -1 and out[2:].max() <= 1


def test_hot_distance_uniform_background():
    out = hot_distance(np.zeros((4, 4), np.uint8), [1], None, 1.0)
    assert (out[0] == 0).all() and (out[1] == -1).all()


def test_affinities_examples():
    np.testing.assert_array_equal(affinities(np.array([1, 1, 2]), [(1,)]), [[1, 0, 0]])
    assert (affinities(np.zeros((4, 4, 4), np.uint8), [(1, 0, 0), (0, 0, -2)]) == 0).all()
    const = affinities(np.full((3, 4, 5), 7, np.uint32), [(1, 0, 0)])[0]
    assert (const[:-1] == 1).all() and (const[-1] == 0).all()


def test_affinities_brute_force(rng):
    labels = rng.integers(0, 4, (6, 5, 7)).astype(np.uint16)
    offsets = [(1, 0, 0), (0, -1, 0), (0, 0, 3), (-2, 1, 1)]
    np.testing.assert_array_equal(affinities(labels, offsets), brute_affinities(labels, offsets))


def test_affinities_permutation_invariant(rng):
    labels = rng.integers(0, 6, (9, 9)).astype(np.uint8)
    perm = np.array([0, 5, 3, 1, 2, 4], np.uint8)
    offsets = [(1, 0), (0, 1), (-3, 2)]
    np.testing.assert_array_equal(affinities(labels, offsets), affinities(perm[labels], offsets))


def test_affinities_bad_neighborhood():
    with pytest.raises(ValueError):
        affinities(np.zeros((3, 3), np.uint8), [(0, 0)])
    with pytest.raises(ValueError):
        affinities(np.zeros((3, 3), np.uint8), [(1, 0), (1, 0)])
    with pytest.raises(ValueError):
        affinities(np.zeros((3, 3), np.uint8), [(1,)])


@pytest.mark.parametrize(
    "ndim,sigma,voxel_size",
    [(2, 1.0, (1.0, 1.0)), (3, 2.0, (1.0, 1.0, 1.0)), (3, 8.0, (8.0, 4.0, 4.0)), (2, 1.5, (1.0, 2.0))],
)
def test_lsd_single_voxel_closed_form(ndim, sigma, voxel_size):
    shape = (21,) * ndim
    labels = np.zeros(shape, np.uint8)
    center = (10,) * ndim
    labels[center] = 1
    out = local_shape_descriptors(labels, sigma, voxel_size)
    assert out.shape == (lsd_channels(ndim),) + shape
    v = out[(slice(None),) + center]
    n_off = ndim * (ndim - 1) // 2
    np.testing.assert_allclose(v[: 2 * ndim], 0.0, atol=1e-7)
    # off-diagonal channels are shifted by (x + 1) / 2, so a zero moment reads 0.5
    np.testing.assert_allclose(v[2 * ndim : 2 * ndim + n_off], 0.5, atol=1e-7)
    window = 1.0
    for vs in voxel_size:
        r = math.floor(3 * sigma / vs + 1e-9)
        x = np.arange(-r, r + 1) * vs
        window *= np.exp(-(x**2) / (2 * sigma**2)).sum()
    np.testing.assert_allclose(v[-1], 1.0 / window, rtol=1e-6)
    mask = np.ones(shape, bool)
    mask[center] = False
    assert (out[:, mask] == 0).all()


def test_lsd_translation_equivariance(rng):
    obj = ndimage.binary_dilation(rng.random((7, 8, 6)) < 0.4).astype(np.uint8) * 4
    a = np.zeros((30, 30, 30), np.uint8)
    b = np.zeros((30, 30, 30), np.uint8)
    a[3:10, 4:12, 5:11] = obj
    b[15:22, 11:19, 20:26] = obj
    sigma = 2.0
    da = local_shape_descriptors(a, sigma, (1, 1, 1))
    db = local_shape_descriptors(b, sigma, (1, 1, 1))
    np.testing.assert_allclose(da[:, 3:10, 4:12, 5:11], db[:, 15:22, 11:19, 20:26], atol=1e-6)


def test_lsd_ranges_and_background(rng):
    labels = ndimage.label(rng.random((16, 16, 16)) < 0.5)[0].astype(np.uint32)
    out = local_shape_descriptors(labels, 2.0, (1, 1, 2))
    assert out.shape[0] == 10
    assert (out[:, labels == 0] == 0).all()
    assert out[:3].min() >= -1 and out[:3].max() <= 1
    assert out[-1].min() >= 0 and out[-1].max() <= 1
    assert out[3:].min() >= 0


def test_lsd_brute_force(rng):
    """Direct per-voxel window sums on a small 2-D label image."""
    labels = rng.integers(0, 3, (9, 10)).astype(np.uint8)
    sigma, vs = 1.0, (1.0, 1.0)
    out = local_shape_descriptors(labels, sigma, vs)
    r = 3
    g = lambda x: np.exp(-(x**2) / (2 * sigma**2))  # noqa: E731
    total = sum(g(i) for i in range(-r, r + 1)) ** 2
    for v in [(4, 5), (0, 0), (8, 9), (2, 7)]:
        if labels[v] == 0:
            continue
        w_sum, m1, m2 = 0.0, np.zeros(2), np.zeros((2, 2))
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                y, x = v[0] + dy, v[1] + dx
                if 0 <= y < 9 and 0 <= x < 10 and labels[y, x] == labels[v]:
                    w = g(dy) * g(dx)
                    off = np.array([dy, dx], float)
                    w_sum += w
                    m1 += w * off
                    m2 += w * np.outer(off, off)
        mean = m1 / w_sum
        cov = m2 / w_sum - np.outer(mean, mean)
        expected = [mean[0] / 3, mean[1] / 3, cov[0, 0] / 9, cov[1, 1] / 9, (cov[0, 1] / 9 + 1) / 2, w_sum / total]
        np.testing.assert_allclose(out[(slice(None),) + v], expected, atol=1e-6)


def test_make_target_dispatch(rng):
    labels = rng.integers(0, 3, (6, 6)).astype(np.uint8)
    np.testing.assert_array_equal(make_target({"kind": "one_hot", "class_ids": [1, 2]}, labels), one_hot(labels, [1, 2]))
    spec = {"kind": "signed_distance", "class_id": 1, "scale": 3.0}
    np.testing.assert_array_equal(make_target(spec, labels, (1, 2)), make_target(spec, labels, (1, 2)))
    np.testing.assert_array_equal(make_target(spec, labels, (1, 2)), signed_distance(labels, 1, (1, 2), 3.0))


def test_make_target_errors():
    with pytest.raises(ConfigError, match="scale"):
        TargetSpec.from_json({"kind": "signed_distance", "class_id": 1})
    with pytest.raises(ConfigError, match="unknown target kind"):
        TargetSpec.from_json({"kind": "watershed"})
    with pytest.raises(ConfigError, match="sigma"):
        make_target({"kind": "lsd", "sigma": -1}, np.zeros((2, 2), np.uint8))


def test_target_spec_contract():
    spec = TargetSpec.from_json({"kind": "hot_distance", "class_ids": [1, 2, 3], "scale": 1.0})
    assert spec.num_channels(3) == 6
    lo, hi = spec.value_range(3)
    assert list(lo) == [0, 0, 0, -1, -1, -1] and (hi == 1).all()
    affs = TargetSpec.from_json({"kind": "affinities", "neighborhood": [[1, 0, 0], [0, -3, 0]]})
    assert affs.min_context((1, 1, 1)) == (1, 3, 0)
    assert TargetSpec.from_json(spec.to_json()) == spec


@pytest.mark.parametrize("write_shape,context", [((8, 8, 8), 3), ((5, 7, 6), 2), ((16, 4, 9), 4)])
def test_blockwise_signed_distance_truncation(tmp_path, rng, write_shape, context):
    labels = (ndimage.gaussian_filter(rng.random((20, 22, 18)), 2) > 0.5).astype(np.uint8)
    vs = (2.0, 1.0, 1.0)
    root = tmp_path / "t.zarr"
    gt = create_dataset(root, "gt", ArrayMetadata(labels.shape, labels.shape, "u8"), VolumeAttributes(vs, (0, 0, 0)))
    gt.write(gt.roi, labels)
    chunks = (1,) + write_shape
    out = create_dataset(root, "sdt", ArrayMetadata((1,) + labels.shape, chunks, "f32"), VolumeAttributes(vs, (0, 0, 0)))
    spec = TargetSpec.from_json({"kind": "signed_distance", "class_id": 1, "scale": 5.0})
    task = BlockTask("t", BlockSpec(gt.roi, write_shape, (context,) * 3), TargetWorker(gt, out, spec), [gt], [out])
    assert run_blockwise(task, ExecutionContext.threads(4)).ok
    blockwise = out.read(gt.roi)[0]
    whole = signed_distance(labels, 1, vs, 5.0)[0]
    mask = labels == 1
    d = np.where(mask, ndimage.distance_transform_edt(mask, sampling=vs), ndimage.distance_transform_edt(~mask, sampling=vs))
    near = d <= context * min(vs) - 1e-3
    assert near.any()
    np.testing.assert_array_equal(blockwise[near], whole[near])
