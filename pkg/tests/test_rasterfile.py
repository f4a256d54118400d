from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from kfusion.errors import RasterIOError
from kfusion.rasterfile import read_manifest, read_raster, write_manifest, write_raster

HEADER = b"MRF1 rows=2 cols=3 bands=1 dtype=float32 layout=band-major endian=little\n"


def test_header_and_payload_layout(tmp_path):
    data = np.arange(6, dtype=np.float32).reshape(1, 2, 3)
    write_raster(tmp_path / "a.mrf", data)
    raw = (tmp_path / "a.mrf").read_bytes()
    assert raw.startswith(HEADER)
    assert raw[len(HEADER):] == data.astype("<f4").tobytes()
    assert len(raw) - len(HEADER) == 2 * 3 * 1 * 4


def test_two_dimensional_input_is_one_band(tmp_path):
    write_raster(tmp_path / "a.mrf", np.ones((2, 3)))
    assert read_raster(tmp_path / "a.mrf").shape == (1, 2, 3)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 3), st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(width=32, allow_nan=True, allow_infinity=True)))
def test_round_trip_is_bit_exact(tmp_path_factory, data):
    path = tmp_path_factory.mktemp("r") / "x.mrf"
    write_raster(path, data)
    back = read_raster(path)
    assert back.dtype == np.float32 and back.shape == data.shape
    assert back.tobytes() == data.astype("<f4").tobytes()
    np.testing.assert_array_equal(np.isnan(back), np.isnan(data))


def test_bad_magic(tmp_path):
    (tmp_path / "a.mrf").write_bytes(b"MRF2" + HEADER[4:] + bytes(24))
    with pytest.raises(RasterIOError, match="magic"):
        read_raster(tmp_path / "a.mrf")


def test_truncated_payload(tmp_path):
    (tmp_path / "a.mrf").write_bytes(HEADER + bytes(20))
    with pytest.raises(RasterIOError, match="expected 24"):
        read_raster(tmp_path / "a.mrf")


def test_unsupported_dtype_and_missing_file(tmp_path):
    (tmp_path / "a.mrf").write_bytes(HEADER.replace(b"float32", b"float64") + bytes(48))
    with pytest.raises(RasterIOError, match="dtype"):
        read_raster(tmp_path / "a.mrf")
    with pytest.raises(RasterIOError):
        read_raster(tmp_path / "missing.mrf")
    with pytest.raises(RasterIOError):
        write_raster(tmp_path / "b.mrf", np.zeros(4))


def test_manifest_round_trip(tmp_path):
    rows = [(0, "landsat", Path("obs/l0.mrf"), None), (3, "modis", Path("obs/m3.mrf"), Path("obs/q3.mrf"))]
    write_manifest(tmp_path / "m.csv", rows)
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "step,modality,raster_path,quality_path"
    back = read_manifest(tmp_path / "m.csv")
    assert [(r.step, r.modality) for r in back] == [(0, "landsat"), (3, "modis")]
    assert back[0].raster_path == tmp_path / "obs/l0.mrf" and back[0].quality_path is None
    assert back[1].quality_path == tmp_path / "obs/q3.mrf"


def test_manifest_errors(tmp_path):
    (tmp_path / "m.csv").write_text("step,modality\n0,a\n")
    with pytest.raises(RasterIOError, match="missing columns"):
        read_manifest(tmp_path / "m.csv")
    (tmp_path / "m.csv").write_text("step,modality,raster_path\nx,a,f.mrf\n")
    with pytest.raises(RasterIOError, match=":2"):
        read_manifest(tmp_path / "m.csv")
