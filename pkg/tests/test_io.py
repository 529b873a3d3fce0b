import struct

import numpy as np
import pytest

from dualguide.io import (pack_matrix, read_grid_csv, read_matrix, read_pgm, to_gray8, unpack_matrix,
                          write_grid_csv, write_matrix, write_pgm)


def test_grid_csv_roundtrip_is_exact(tmp_path):
    g = np.random.default_rng(0).random((5, 7))
    write_grid_csv(tmp_path / "g.csv", g)
    assert np.array_equal(read_grid_csv(tmp_path / "g.csv"), g)


def test_pgm_roundtrip(tmp_path):
    g = np.array([[0.0, 0.5], [1.0, 0.25]])
    write_pgm(tmp_path / "a.pgm", g)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n2 2\n255\n")
    assert read_pgm(tmp_path / "a.pgm").tolist() == [[0, 128], [255, 64]]
    assert to_gray8(np.ones((2, 2))).tolist() == [[0, 0], [0, 0]]


def test_matrix_dump_layout(tmp_path):
    a = np.arange(6.0).reshape(2, 3)
    buf = pack_matrix(a)
    assert struct.unpack_from("<II", buf) == (2, 3) and len(buf) == 8 + 48
    assert struct.unpack_from("<d", buf, 8 + 8 * 4)[0] == 4.0
    write_matrix(tmp_path / "m.bin", a)
    assert np.array_equal(read_matrix(tmp_path / "m.bin"), a)
    with pytest.raises(ValueError):
        unpack_matrix(buf[:-8])
    with pytest.raises(ValueError):
        pack_matrix(np.zeros(3))


def test_atomic_write_leaves_no_temp_files(tmp_path):
    write_grid_csv(tmp_path / "x.csv", np.eye(2))
    assert [p.name for p in tmp_path.iterdir()] == ["x.csv"]
