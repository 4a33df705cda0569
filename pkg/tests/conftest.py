import json
import os

import numpy as np
import pytest
from scipy import ndimage

from artifact.store import ArrayMetadata, VolumeAttributes, create_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_volume(tmp_path):
    """Write an array to a fresh dataset under ``tmp_path/data.zarr``."""
    counter = iter(range(10**6))

    def make(data, chunks=None, dtype=None, voxel_size=None, name=None, compressor=None, fill=0):
        data = np.asarray(data)
        dtype = dtype or {
            np.dtype("uint8"): "u8", np.dtype("uint16"): "u16", np.dtype("uint32"): "u32",
            np.dtype("uint64"): "u64", np.dtype("int32"): "i32", np.dtype("int64"): "i64",
            np.dtype("float32"): "f32", np.dtype("float64"): "f64", np.dtype("bool"): "u8",
        }[data.dtype]  # fmt: skip
        chunks = chunks or data.shape
        name = name or f"vol{next(counter)}"
        attrs = None
        if voxel_size is not None:
            attrs = VolumeAttributes(voxel_size, (0,) * len(voxel_size))
        vol = create_dataset(
            tmp_path / "data.zarr", name, ArrayMetadata(data.shape, chunks, dtype, fill, compressor), attrs
        )
        vol.write(vol.roi, data)
        return vol

    return make


FACE = None


def full_structure(ndim):
    return np.ones((3,) * ndim, dtype=bool)


def whole_volume_labels(mask, connectivity="face"):
    structure = None if connectivity == "face" else full_structure(mask.ndim)
    labels, n = ndimage.label(mask, structure=structure)
    return labels, n


def same_partition(a, b) -> bool:
    """True if label arrays induce the same partition, background included as its own class."""
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if ((a == 0) != (b == 0)).any():
        return False
    pairs = np.unique(np.stack([a, b], 1), axis=0)
    return len(np.unique(pairs[:, 0])) == len(pairs) == len(np.unique(pairs[:, 1]))


def random_blobs(rng, shape, density=0.3, smooth=1.0):
    """Random binary volume with blob-like structure."""
    noise = ndimage.gaussian_filter(rng.random(shape), smooth)
    return noise > np.quantile(noise, 1 - density)


# Worker subprocesses must be able to import the picklable helpers in this directory.
_TESTS = os.path.dirname(os.path.abspath(__file__))
os.environ["PYTHONPATH"] = os.pathsep.join(p for p in (_TESTS, os.environ.get("PYTHONPATH")) if p)



def write_config(tmp_path, doc, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc, indent=2))
    return str(path)


def multi_object_fixture(tmp_path, shape=(32, 32, 32), seed=7):
    """Separated objects: instance ids are the face-connected components of the mask."""
    rng = np.random.default_rng(seed)
    mask = random_blobs(rng, shape, 0.3, smooth=2.0)
    instances, n = ndimage.label(mask)
    assert n >= 3
    vs, off = (1.0,) * len(shape), (0.0,) * len(shape)
    root = tmp_path / "data.zarr"
    m = create_dataset(root, "mask", ArrayMetadata(shape, (16,) * len(shape), "u8"), VolumeAttributes(vs, off))
    m.write(m.roi, mask.astype(np.uint8))
    g = create_dataset(root, "instances", ArrayMetadata(shape, (16,) * len(shape), "u32"), VolumeAttributes(vs, off))
    g.write(g.roi, instances.astype(np.uint32))
    return mask, instances


# -- acceptance verdicts -----------------------------------------------------------

_VERDICTS: list[str] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (report.when == "call" or (report.when == "setup" and report.failed)):
        return
    number, title = marker.args
    soft = marker.kwargs.get("soft", False)
    props = dict(report.user_properties)
    ok = report.passed and props.get("within_limit", True)
    status = "PASS" if ok else "FAIL"
    if soft:
        status += " (soft)"
    line = f"{status} criterion {number}: {title}"
    if "detail" in props:
        line += f" [{props['detail']}]"
    _VERDICTS.append(line)


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
