import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from chadet import checkpoint as ck
from chadet.imageio import (
    MalformedHeaderError, TruncatedPayloadError, UnsupportedVariantError, read_pfm, read_ppm,
    write_pfm, write_ppm,
)
from chadet.net import init_params, param_layout, StageConfig


# -- PFM / PPM ----------------------------------------------------------------------

@given(hnp.arrays(np.float32, st.tuples(st.integers(1, 9), st.integers(1, 9)),
                  elements=st.floats(width=32)))
def test_pfm_roundtrip_bit_exact(tmp_path_factory, depth):
    p = tmp_path_factory.mktemp("pfm") / "d.pfm"
    write_pfm(p, depth)
    assert read_pfm(p).tobytes() == depth.tobytes()


def test_pfm_layout_is_bottom_up_little_endian(tmp_path):
    d = np.array([[1.0, 2.0], [3.0, 4.0]], np.float32)
    write_pfm(tmp_path / "d.pfm", d)
    raw = (tmp_path / "d.pfm").read_bytes()
    assert raw.startswith(b"Pf\n2 2\n-1.0\n")
    assert struct.unpack("<4f", raw[-16:]) == (3.0, 4.0, 1.0, 2.0)


def test_pfm_big_endian_positive_scale_is_read(tmp_path):
    (tmp_path / "b.pfm").write_bytes(b"Pf\n2 1\n1.0\n" + struct.pack(">2f", 5.0, 6.0))
    np.testing.assert_array_equal(read_pfm(tmp_path / "b.pfm"), [[5.0, 6.0]])


def test_ppm_roundtrip_quantisation(tmp_path):
    rgb = np.random.default_rng(0).random((4, 5, 3))
    write_ppm(tmp_path / "x.ppm", rgb)
    back = read_ppm(tmp_path / "x.ppm")
    np.testing.assert_array_equal(back, np.rint(rgb * 255).astype(np.float32) / np.float32(255))
    write_ppm(tmp_path / "y.ppm", back)
    assert read_ppm(tmp_path / "y.ppm").tobytes() == back.tobytes()


def test_ppm_white_pixel(tmp_path):
    write_ppm(tmp_path / "w.ppm", np.ones((1, 1, 3)))
    assert (tmp_path / "w.ppm").read_bytes()[-3:] == b"\xff\xff\xff"
    assert np.all(read_ppm(tmp_path / "w.ppm") == 1.0)


@pytest.mark.parametrize("content,reader,error", [
    (b"PF\n1 1\n-1.0\n" + b"\0" * 12, read_pfm, UnsupportedVariantError),
    (b"Px\n1 1\n-1.0\n" + b"\0" * 4, read_pfm, MalformedHeaderError),
    (b"Pf\n1 x\n-1.0\n" + b"\0" * 4, read_pfm, MalformedHeaderError),
    (b"Pf\n2 2\n-1.0\n" + b"\0" * 4, read_pfm, TruncatedPayloadError),
    (b"P5\n1 1\n255\n\0", read_ppm, UnsupportedVariantError),
    (b"P6\n1 1\n65535\n" + b"\0" * 6, read_ppm, UnsupportedVariantError),
    (b"P6\n1\n", read_ppm, MalformedHeaderError),
    (b"P6\n2 2\n255\n" + b"\0" * 5, read_ppm, TruncatedPayloadError),
])
def test_image_errors_are_distinct(tmp_path, content, reader, error):
    (tmp_path / "bad").write_bytes(content)
    with pytest.raises(error):
        reader(tmp_path / "bad")


def test_ppm_header_comments(tmp_path):
    (tmp_path / "c.ppm").write_bytes(b"P6\n# made by hand\n1 1\n255\n\x00\x80\xff")
    np.testing.assert_allclose(read_ppm(tmp_path / "c.ppm")[0, 0], [0, 128 / 255, 1])


# -- checkpoints ----------------------------------------------------------------------

def _tensors():
    r = np.random.default_rng(0)
    return {"b.weight": r.normal(size=(2, 3)).astype(np.float32), "a.bias": r.normal(size=4).astype(np.float32),
            "scalar": np.float32(1.5).reshape(())}


def test_checkpoint_roundtrip_with_sections(tmp_path):
    t = _tensors()
    m = {k: v * 2 for k, v in t.items()}
    v = {k: np.abs(x) for k, x in t.items()}
    rng = {"bit_generator": np.random.default_rng(3).bit_generator.state, "next_epoch": 2, "step": 9}
    ck.save_checkpoint(tmp_path / "c.chkd", t, (7, m, v), rng)
    back = ck.load_checkpoint(tmp_path / "c.chkd")
    assert list(back.tensors) == sorted(t)
    for k in t:
        assert back.tensors[k].tobytes() == t[k].tobytes()
        assert back.adam_m[k].tobytes() == m[k].tobytes()
        assert back.adam_v[k].tobytes() == v[k].tobytes()
    assert back.adam_step == 7
    assert back.rng == rng


def test_checkpoint_header_layout():
    raw = ck.dumps({"w": np.ones((2, 1), np.float32)})
    assert raw[:4] == b"CHKD"
    assert struct.unpack("<II", raw[4:12]) == (1, 1)
    assert struct.unpack("<H", raw[12:14]) == (1,)
    assert raw[14:15] == b"w"
    assert raw[15] == 2 and struct.unpack("<2I", raw[16:24]) == (2, 1)
    assert struct.unpack("<2f", raw[24:]) == (1.0, 1.0)


def test_checkpoint_bad_magic_rejected_before_reading_payload(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(b"NOPE" + b"\xff" * 64)
    with pytest.raises(ck.BadMagicError):
        ck.load_checkpoint(p)


def test_checkpoint_version_truncation_overflow():
    raw = ck.dumps(_tensors())
    with pytest.raises(ck.UnsupportedVersionError):
        ck.loads(raw[:4] + struct.pack("<I", 2) + raw[8:])
    for cut in (6, 13, 20, len(raw) - 1):
        with pytest.raises(ck.TruncatedCheckpointError):
            ck.loads(raw[:cut])
    huge = b"CHKD" + struct.pack("<IIH", 1, 1, 1) + b"w" + struct.pack("<B3I", 3, 65536, 65536, 2)
    with pytest.raises(ck.DimensionOverflowError):
        ck.loads(huge)
    with pytest.raises(ck.CheckpointError, match="section"):
        ck.loads(raw + b"ZZZZ")


def test_checkpoint_errors_are_distinct_types():
    kinds = [ck.BadMagicError, ck.UnsupportedVersionError, ck.TruncatedCheckpointError, ck.DimensionOverflowError]
    assert len(set(kinds)) == 4
    assert all(issubclass(k, ck.CheckpointError) for k in kinds)
    assert not any(issubclass(a, b) for a in kinds for b in kinds if a is not b)


def test_default_checkpoint_lists_every_path_once():
    params = init_params()
    back = ck.loads(ck.dumps({k: params[k].data for k in params}))
    names = list(back.tensors)
    assert len(names) == len(set(names)) == len(param_layout(StageConfig()))
    assert set(names) == set(param_layout(StageConfig()))


def test_save_is_atomic_on_failure(tmp_path, monkeypatch):
    p = tmp_path / "c.chkd"
    ck.save_checkpoint(p, _tensors())
    before = p.read_bytes()

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(ck, "dumps", boom)
    with pytest.raises(OSError):
        ck.save_checkpoint(p, {"x": np.zeros(3, np.float32)})
    assert p.read_bytes() == before
