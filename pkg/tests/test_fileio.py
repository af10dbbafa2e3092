import json

import jsonschema
import numpy as np
import pytest

from rfscope.fileio import (
    FormatError,
    dumps,
    format_float,
    list_pgms,
    load_mask,
    read_grid_csv,
    read_pgm,
    validate_artifact,
    write_grid_csv,
    write_pgm,
)


def test_p5_all_foreground(tmp_path):
    p = tmp_path / "m.pgm"
    write_pgm(p, np.full((3, 3), 255))
    m = load_mask(p)
    assert m.shape == (3, 3) and m.sum() == 9


def test_threshold_boundary(tmp_path):
    p = tmp_path / "m.pgm"
    img = np.full((2, 3), 200, dtype=np.uint8)
    img[0, 1] = 127
    img[1, 2] = 128
    write_pgm(p, img)
    m = load_mask(p)
    assert not m[0, 1] and m[1, 2]
    assert m.shape == (2, 3)


def test_ascii_matches_binary(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(5, 7)).astype(np.uint8)
    write_pgm(tmp_path / "a.pgm", img, ascii=True)
    write_pgm(tmp_path / "b.pgm", img)
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), img)
    assert np.array_equal(read_pgm(tmp_path / "b.pgm"), img)


def test_header_comments(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made by hand\n2 1\n# depth\n255\n\x00\xff")
    assert read_pgm(p).tolist() == [[0, 255]]


@pytest.mark.parametrize(
    "payload, match",
    [
        (b"P6\n1 1\n255\n\x00\x00\x00", "unsupported format"),
        (b"P5\n3 3\n255\n\x00\x00", "truncated"),
        (b"P5\n1 1\n65535\n\x00\x00", "maxval"),
        (b"P2\n2 2\n255\n1 2 3", "truncated"),
        (b"P5\n2", "header"),
    ],
)
def test_bad_pgm(tmp_path, payload, match):
    p = tmp_path / "bad.pgm"
    p.write_bytes(payload)
    with pytest.raises(FormatError, match=match):
        read_pgm(p)


def test_list_pgms_sorted(tmp_path):
    for name in ("b.pgm", "a.pgm", "c.txt", "A.PGM"):
        (tmp_path / name).write_bytes(b"")
    assert [p.name for p in list_pgms(tmp_path)] == ["A.PGM", "a.pgm", "b.pgm"]
    with pytest.raises(FileNotFoundError):
        list_pgms(tmp_path / "missing")


def test_float_format_roundtrip():
    for x in (0.1, 1 / 3, 2.0, 1e-300, -7.5e21, 91.0):
        s = format_float(x)
        assert float(s) == x
        assert any(c in s for c in ".e")


def test_dumps_order_and_nonfinite():
    text = dumps({"b": 1, "a": [1.5, 2], "c": float("nan"), "d": None, "e": True})
    assert list(json.loads(text)) == ["b", "a", "c", "d", "e"]
    assert json.loads(text)["c"] is None
    assert dumps(0.1) == "0.10000000000000001"


def test_csv_roundtrip(tmp_path):
    g = np.random.default_rng(1).normal(size=(4, 6))
    write_grid_csv(tmp_path / "g.csv", g)
    assert np.array_equal(read_grid_csv(tmp_path / "g.csv"), g)
    (tmp_path / "r.csv").write_text("1,2\n3\n")
    with pytest.raises(FormatError):
        read_grid_csv(tmp_path / "r.csv")


def test_schema_rejects_bad_artifact():
    validate_artifact("params", {"params": 10, "per_node": [[1, "conv", 10]]})
    with pytest.raises(jsonschema.ValidationError):
        validate_artifact("params", {"params": 10})
    with pytest.raises(jsonschema.ValidationError):
        validate_artifact("params", {"params": 10, "per_node": [], "extra": 1})
