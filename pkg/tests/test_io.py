import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from sparsemag import io


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6), st.just(2)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_flo_round_trip_bit_exact(tmp_path_factory, flow):
    path = tmp_path_factory.mktemp("flo") / "a.flo"
    io.write_flo(flow, path)
    back = io.read_flo(path)
    assert back.shape == flow.shape
    assert np.array_equal(back.astype(np.float32), flow)


def test_flo_layout(tmp_path):
    flow = np.zeros((2, 2, 2))
    flow[0, 1] = (1.5, -2.0)   # (v1, v2) at row 0, col 1
    path = tmp_path / "x.flo"
    io.write_flo(flow, path)
    raw = path.read_bytes()
    assert len(raw) == 44
    assert struct.unpack("<f", raw[:4])[0] == 202021.25
    assert struct.unpack("<ii", raw[4:12]) == (2, 2)
    # second pixel of the first row stores (u, v) = (v2, v1)
    assert struct.unpack("<ff", raw[20:28]) == (-2.0, 1.5)


def test_flo_rejects_bad_files(tmp_path):
    bad = tmp_path / "bad.flo"
    bad.write_bytes(struct.pack("<fii", 1.0, 2, 2) + bytes(32))
    with pytest.raises(io.FormatError):
        io.read_flo(bad)
    short = tmp_path / "short.flo"
    short.write_bytes(struct.pack("<fii", 202021.25, 4, 4) + bytes(16))
    with pytest.raises(io.FormatError):
        io.read_flo(short)
    with pytest.raises(ValueError):
        io.write_flo(np.full((2, 2, 2), np.nan), tmp_path / "n.flo")


def test_png_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (5, 7, 3)) / 255.0
    io.write_png(img, tmp_path / "a.png")
    assert np.array_equal(io.read_png(tmp_path / "a.png"), img)
    gray = rng.integers(0, 256, (4, 4)) / 255.0
    io.write_png(gray, tmp_path / "g.png")
    assert np.array_equal(io.read_png(tmp_path / "g.png"), gray)


def test_png16(tmp_path):
    img = np.linspace(0, 1, 12).reshape(3, 4)
    io.write_png16(img, tmp_path / "h.png")
    back = io.read_png(tmp_path / "h.png")
    assert np.abs(back - img).max() <= 0.5 / 65535 + 1e-12


def test_container_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    D = rng.standard_normal((6, 2))
    G = rng.standard_normal((2, 12))
    for mode in io.MODES:
        path = tmp_path / f"{mode}.dsd"
        io.save_decomposition(path, D, G, 3, 4, mode)
        D2, G2, n1, n2, m = io.load_decomposition(path)
        assert np.array_equal(D2, D) and np.array_equal(G2, G)
        assert (n1, n2, m) == (3, 4, mode)
        assert path.read_bytes()[:8] == b"DSDOFv01"
        assert len(path.read_bytes()) == 28 + 8 * (D.size + G.size)


def test_container_errors(tmp_path):
    with pytest.raises(ValueError):
        io.save_decomposition(tmp_path / "x", np.zeros((3, 1)), np.zeros((1, 4)), 2, 2)
    path = tmp_path / "t.dsd"
    io.save_decomposition(path, np.zeros((2, 1)), np.zeros((1, 4)), 2, 2)
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(io.FormatError):
        io.load_decomposition(path)
    junk = tmp_path / "j.dsd"
    junk.write_bytes(b"NOTMAGIC" + bytes(40))
    with pytest.raises(io.FormatError):
        io.load_decomposition(junk)


def test_list_files_sorted(tmp_path):
    for name in ["b.png", "a.png", "c.txt", "A10.png"]:
        (tmp_path / name).write_bytes(b"")
    names = [p.rsplit("/", 1)[-1] for p in io.list_files(tmp_path, ".png")]
    assert names == ["A10.png", "a.png", "b.png"]
